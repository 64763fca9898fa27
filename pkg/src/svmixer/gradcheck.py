"""Finite-difference verification of every differentiable op and of a small
end-to-end encoder, all in real64 at toy dimensions.

Each check builds a scalar by contracting the op output with a fixed random
weighting (a plain sum could let transposed or permuted gradients cancel),
then compares the tape gradient against central differences.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor
from . import tensor as T
from .encoder import EncoderConfig, SvMixerModel, samples_for_frames
from .tensor import Tensor, check_gradient, relative_error

TOLERANCE = 1e-4


@contextmanager
def gelu_sabotage(scale: float = 1.01):
    """Deliberately mis-scale the gelu derivative; negative control only."""
    old = tensor._gelu_grad_scale
    tensor._gelu_grad_scale = scale
    try:
        yield
    finally:
        tensor._gelu_grad_scale = old


def _weighted(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(out.data.shape))
    return T.tsum(T.mul(out, w))


def _check(build_op, shapes, seed, transform=None, h: float = 1e-5) -> float:
    """Max relative error of one op over fresh leaves of the given shapes."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if transform is not None:
        arrays = [transform(a) for a in arrays]

    def build(leaves):
        # the weighting rng is re-seeded so every probe sees the same weights
        return _weighted(build_op(leaves), np.random.default_rng(seed + 1))

    return check_gradient(build, arrays, h)


def _away_from(a: np.ndarray, kink: float, margin: float = 1e-3) -> np.ndarray:
    """Push values that sit within `margin` of +-kink off the kink so finite
    differences never straddle a non-differentiable point."""
    shifted = a.copy()
    near = np.abs(np.abs(shifted) - kink) < margin
    shifted[near] += 2 * margin
    return shifted


def op_checks(h: float = 1e-5):
    """Yields (name, max relative error) for every differentiable op."""
    checks = [
        ("add", lambda l: T.add(l[0], l[1]), [(5, 7), (5, 7)], 10, None),
        ("add broadcast", lambda l: T.add(l[0], l[1]), [(5, 7), (7,)], 11, None),
        ("sub", lambda l: T.sub(l[0], l[1]), [(5, 7), (5, 7)], 12, None),
        ("mul", lambda l: T.mul(l[0], l[1]), [(5, 7), (5, 7)], 13, None),
        ("div", lambda l: T.div(l[0], l[1]), [(5, 7), (5, 7)], 14,
         lambda a: np.abs(a) + 0.5),
        ("exp", lambda l: T.exp(l[0]), [(6, 6)], 15, None),
        ("log", lambda l: T.log(l[0]), [(6, 6)], 16, lambda a: np.abs(a) + 0.5),
        ("sqrt", lambda l: T.sqrt(l[0]), [(6, 6)], 17, lambda a: np.abs(a) + 0.5),
        ("clamp", lambda l: T.clamp(l[0], -0.8, 0.8), [(6, 6)], 18,
         lambda a: _away_from(a, 0.8)),
        ("gelu", lambda l: T.gelu(l[0]), [(6, 6)], 19, None),
        ("sum", lambda l: T.tsum(l[0]), [(5, 7)], 20, None),
        ("sum axis", lambda l: T.tsum(l[0], axis=0), [(5, 7)], 21, None),
        ("mean", lambda l: T.tmean(l[0], axis=1), [(5, 7)], 22, None),
        ("transpose", lambda l: T.transpose(l[0]), [(5, 7)], 23, None),
        ("reshape", lambda l: T.reshape(l[0], (7, 5)), [(5, 7)], 24, None),
        ("concat", lambda l: T.concat([l[0], l[1]], axis=1), [(4, 3), (4, 5)], 25, None),
        ("narrow", lambda l: T.narrow(l[0], 1, 2, 3), [(5, 7)], 26, None),
        ("pad1d", lambda l: T.pad1d(l[0], 1, 2, 1), [(3, 6)], 27, None),
        ("matmul", lambda l: T.matmul(l[0], l[1]), [(4, 6), (6, 3)], 28, None),
        ("conv1d", lambda l: T.conv1d(l[0], l[1], l[2]), [(3, 11), (4, 3, 3), (4,)], 29, None),
        ("conv1d stride", lambda l: T.conv1d(l[0], l[1], l[2], stride=2),
         [(3, 12), (5, 3, 4), (5,)], 30, None),
        ("conv1d groups", lambda l: T.conv1d(l[0], l[1], l[2], groups=2),
         [(4, 10), (6, 2, 3), (6,)], 31, None),
        ("avg_pool1d", lambda l: T.avg_pool1d(l[0]), [(3, 9)], 32, None),
        ("linear_upsample", lambda l: T.linear_upsample(l[0], 11), [(3, 6)], 33, None),
        ("layer_norm", lambda l: T.layer_norm(l[0], l[1], l[2]),
         [(5, 8), (8,), (8,)], 34, None),
        ("softmax", lambda l: T.softmax(l[0]), [(4, 6)], 35, None),
    ]
    for name, op, shapes, seed, transform in checks:
        yield name, _check(op, shapes, seed, transform, h)


def toy_config() -> EncoderConfig:
    """2-block encoder small enough for exhaustive finite differences."""
    return EncoderConfig(hidden_dim=8, num_blocks=2, num_groups=2, expansion=2,
                         time_expansion=1.0, frames=12, conv_channels=4,
                         lgm_conv_groups=2, embed_dim=6)


def model_gradcheck(h: float = 1e-5, seed: int = 3) -> float:
    """Finite-difference the whole encoder: waveform in, sum of squared
    embedding out, gradient taken in every parameter coordinate."""
    cfg = toy_config()
    model = SvMixerModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    wave = (0.5 * rng.standard_normal(samples_for_frames(cfg))).astype(np.float64)

    def scalar() -> float:
        emb = model.encode(wave)
        return float(T.tsum(T.mul(emb, emb)).data)

    emb = model.encode(wave)
    loss = T.tsum(T.mul(emb, emb))
    loss.backward()

    worst = 0.0
    model.set_trainable(False)  # probes do not need the tape
    try:
        for name, p in model.parameters.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.ravel()
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = scalar()
                flat[i] = orig - h
                fm = scalar()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(analytic.ravel(), numeric))
    finally:
        model.set_trainable(True)
    return worst


def run_all(h: float = 1e-5):
    """[(name, err), ...] for every op plus the end-to-end model."""
    results = list(op_checks(h))
    results.append(("2-block model", model_gradcheck(h)))
    return results
