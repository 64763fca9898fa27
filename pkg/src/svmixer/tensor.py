"""Reverse-mode autodiff over numpy arrays.

Small tape-based Tensor wrapper: each op records its parents and a backward
closure, `Tensor.backward()` walks the graph in reverse topological order.
Only the ops this project needs are implemented; numpy (and BLAS underneath)
does the heavy lifting, the graph bookkeeping lives here.

Conventions:
  * conv/pool/upsample take channels-first [C, T] input;
  * layer_norm and softmax act on the last axis;
  * every forward op is pure and checks its output for NaN/Inf, a non-finite
    value raises NonFiniteError instead of propagating;
  * gradient accumulation order is fixed by graph construction order, so two
    identical runs produce bitwise-identical gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Scales the analytic gelu derivative. Only the gradcheck CLI touches this,
# as a negative control proving the finite-difference harness can fail.
_gelu_grad_scale = 1.0


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; named functions below do the work
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, cotangent: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf.

        A scalar seeds itself with 1; non-scalar roots need an explicit
        cotangent of the same shape.
        """
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward() on a tensor that is not part of a recorded graph")
        if cotangent is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs an explicit cotangent for shape {self.data.shape}"
                )
            cotangent = np.ones_like(self.data)
        else:
            cotangent = np.asarray(cotangent, dtype=self.data.dtype)
            if cotangent.shape != self.data.shape:
                raise ShapeError(
                    f"cotangent shape {cotangent.shape} != tensor shape {self.data.shape}"
                )

        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = cotangent.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; child order is the parent tuple order, so the walk
    # (and therefore accumulation order) is deterministic
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g.astype(t.data.dtype, copy=False).reshape(t.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)

    return _result(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _result(data, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * (0.5 / data))

    return _result(data, (x,), backward, "sqrt")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    inside = ((x.data > lo) & (x.data < hi)).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * inside)

    return _result(data, (x,), backward, "clamp")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x) with the erf form."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = (x.data * cdf).astype(x.data.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * ((cdf + x.data * pdf) * _gelu_grad_scale))

    return _result(data, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _result(data, (x,), backward, "sum")


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), Tensor(np.asarray(1.0 / n, dtype=x.data.dtype)))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {x.data.shape}")
    data = np.ascontiguousarray(x.data.T)

    def backward(g):
        _accumulate(x, g.T)

    return _result(data, (x,), backward, "transpose")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _result(data, (x,), backward, "reshape")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(sl)])
            offset += n

    return _result(data, tuple(parts), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accumulate(x, full)

    return _result(data, (x,), backward, "narrow")


def pad1d(x: Tensor, axis: int, left: int, right: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (left, right)
    data = np.pad(x.data, widths)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(left, left + x.data.shape[axis])
    sl = tuple(sl)

    def backward(g):
        _accumulate(x, g[sl])

    return _result(data, (x,), backward, "pad1d")


# ---------------------------------------------------------------------------
# matmul and conv

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d tensors, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), backward, "matmul")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, groups: int = 1) -> Tensor:
    """Valid cross-correlation over the time axis.

    x: [C_in, T_in], weight: [C_out, C_in/groups, k]. No implicit padding;
    output length is floor((T_in - k) / stride) + 1. Callers pad explicitly
    when they want anything else.
    """
    c_in, t_in = x.data.shape
    c_out, c_in_g, k = weight.data.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"weight expects {c_in_g} input channels per group, input has {c_in // groups}"
        )
    if t_in < k:
        raise ShapeError(f"sequence shorter than kernel: T_in={t_in} < k={k}")
    t_out = (t_in - k) // stride + 1

    # im2col: windows[c, t, j] = x[c, t*stride + j]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride, :]
    og = c_out // groups
    ig = c_in // groups
    data = np.empty((c_out, t_out), dtype=np.result_type(x.data, weight.data))
    for g_i in range(groups):
        cols = windows[g_i * ig:(g_i + 1) * ig].transpose(1, 0, 2).reshape(t_out, ig * k)
        w_mat = weight.data[g_i * og:(g_i + 1) * og].reshape(og, ig * k)
        data[g_i * og:(g_i + 1) * og] = w_mat @ cols.T
    if bias is not None:
        data = data + bias.data[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(weight.data)
        for g_j in range(groups):
            go = g[g_j * og:(g_j + 1) * og]                      # [og, t_out]
            cols = windows[g_j * ig:(g_j + 1) * ig].transpose(1, 0, 2).reshape(t_out, ig * k)
            gw[g_j * og:(g_j + 1) * og] = (go @ cols).reshape(og, ig, k)
            w_mat = weight.data[g_j * og:(g_j + 1) * og].reshape(og, ig * k)
            contrib = (w_mat.T @ go).reshape(ig, k, t_out)
            # scatter windows back; tap index ascending keeps accumulation
            # order fixed even when windows overlap
            for j in range(k):
                gx[g_j * ig:(g_j + 1) * ig, j:j + stride * t_out:stride] += contrib[:, j, :]
        _accumulate(x, gx)
        _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, g.sum(axis=1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward, "conv1d")


def avg_pool1d(x: Tensor) -> Tensor:
    """Average pooling, kernel 2, stride 2; a trailing odd frame is dropped."""
    c, t = x.data.shape
    t_out = t // 2
    if t_out == 0:
        raise ShapeError(f"avg_pool1d needs at least 2 frames, got {t}")
    data = 0.5 * (x.data[:, 0:2 * t_out:2] + x.data[:, 1:2 * t_out:2])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, 0:2 * t_out:2] = 0.5 * g
        gx[:, 1:2 * t_out:2] = 0.5 * g
        _accumulate(x, gx)

    return _result(data, (x,), backward, "avg_pool1d")


def linear_upsample(x: Tensor, target_t: int) -> Tensor:
    """Endpoint-aligned linear interpolation along time: [C, T'] -> [C, target_t].

    Output position i samples source position i * (T' - 1) / (target_t - 1),
    so both endpoints map exactly.
    """
    c, t_src = x.data.shape
    if target_t < 1:
        raise ShapeError(f"linear_upsample target length must be >= 1, got {target_t}")
    if t_src == 1 or target_t == 1:
        lo = np.zeros(target_t, dtype=np.intp)
        hi = lo
        w = np.zeros(target_t, dtype=x.data.dtype)
    else:
        pos = np.arange(target_t, dtype=np.float64) * (t_src - 1) / (target_t - 1)
        lo = np.floor(pos).astype(np.intp)
        lo = np.minimum(lo, t_src - 2)
        hi = lo + 1
        w = (pos - lo).astype(x.data.dtype)
    # lerp form: a constant signal reproduces exactly for every weight
    data = x.data[:, lo] + (x.data[:, hi] - x.data[:, lo]) * w

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), lo), g * (1.0 - w))
        np.add.at(gx, (slice(None), hi), g * w)
        _accumulate(x, gx)

    return _result(data, (x,), backward, "linear_upsample")


# ---------------------------------------------------------------------------
# normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then affine."""
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {x.data.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        n = x.data.shape[-1]
        gg = g * gamma.data
        gx = inv_std * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)
        axes = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=axes) if axes else g * xhat)
        _accumulate(beta, g.sum(axis=axes) if axes else g)

    return _result(data, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtracted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _result(data, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# finite-difference checking

def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar-valued f at x (real64)."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradient(build, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Finite-difference check for `build`, a function mapping a list of
    leaf Tensors to a scalar Tensor. Returns the max relative error over
    every leaf coordinate.
    """
    worst = 0.0
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward()
    for idx, leaf in enumerate(leaves):
        def f(x, idx=idx):
            probe = [Tensor(a.data.copy()) for a in leaves]
            probe[idx] = Tensor(x.copy())
            return build(probe).data
        numeric = finite_difference(f, leaf.data.copy(), h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
