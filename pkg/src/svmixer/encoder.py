"""Attention-free speaker encoder.

A strided conv frontend turns raw 16 kHz waveform into a frame sequence
(49 frames per second), a stack of mixing blocks refines it, a learned
softmax-weighted sum over all layer outputs feeds mean+std pooling and a
linear map down to the speaker embedding.

Two block variants:
  * "svmixer": local/global time mixing (grouped conv + time MLP), a
    two-resolution time-mixing stage, and grouped channel mixing, each as a
    pre-norm residual and each removable through a config toggle;
  * "mlpmixer": plain token-mixing then channel-mixing MLPs, the ablation
    baseline.

Time-mixing MLPs are bound to the configured frame count, so the model only
accepts inputs whose frame count matches `frames`. Training and evaluation
use fixed 3-second crops; variable-length inference is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# guards the std-pooling sqrt when a channel is constant over time
_STD_EPS = 1e-12


@dataclass
class EncoderConfig:
    hidden_dim: int = 1024
    num_blocks: int = 12
    num_groups: int = 4
    expansion: int = 4
    time_expansion: float = 1.0
    frames: int = 149
    conv_channels: int = 512
    conv_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    conv_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    lgm_conv_kernel: int = 3
    lgm_conv_groups: int = 2
    block_variant: str = "svmixer"
    use_lgm: bool = True
    use_msm: bool = True
    use_gcm: bool = True
    embed_dim: int = 192

    def __post_init__(self):
        if self.block_variant not in ("svmixer", "mlpmixer"):
            raise ConfigError(f"unknown block_variant {self.block_variant!r}")
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ConfigError(
                f"conv_kernels ({len(self.conv_kernels)}) and conv_strides "
                f"({len(self.conv_strides)}) must have equal length"
            )
        for name in ("hidden_dim", "num_blocks", "num_groups", "expansion", "frames",
                     "conv_channels", "lgm_conv_kernel", "lgm_conv_groups", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_groups:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} not divisible by num_groups={self.num_groups}"
            )
        if self.hidden_dim % self.lgm_conv_groups:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} not divisible by "
                f"lgm_conv_groups={self.lgm_conv_groups}"
            )
        if self.time_expansion <= 0:
            raise ConfigError(f"time_expansion must be positive, got {self.time_expansion}")
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")

    def time_hidden(self, length: int) -> int:
        return max(1, int(round(self.time_expansion * length)))


def num_frames(n_samples: int, config: EncoderConfig) -> int:
    """Frame count the conv frontend produces for an input length."""
    t = n_samples
    for k, s in zip(config.conv_kernels, config.conv_strides):
        if t < k:
            return 0
        t = (t - k) // s + 1
    return t


def min_samples(config: EncoderConfig) -> int:
    """Shortest input that still yields one frame."""
    t = 1
    for k, s in zip(reversed(config.conv_kernels), reversed(config.conv_strides)):
        t = (t - 1) * s + k
    return t


def samples_for_frames(config: EncoderConfig, frames: int | None = None) -> int:
    """Smallest input length that yields exactly `frames` frames."""
    t = config.frames if frames is None else frames
    for k, s in zip(reversed(config.conv_kernels), reversed(config.conv_strides)):
        t = (t - 1) * s + k
    return t


# ---------------------------------------------------------------------------
# parameter bundles

class LinearParams:
    """Two-layer MLP parameters: in -> hidden -> out with GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, dtype):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.d_out = d_out
        self.w1 = _param(rng, (d_in, d_hidden), d_in, dtype)
        self.b1 = _zeros(d_hidden, dtype)
        self.w2 = _param(rng, (d_hidden, d_out), d_hidden, dtype)
        self.b2 = _zeros(d_out, dtype)

    def parameters(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class NormParams:
    def __init__(self, dim: int, dtype):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


def _param(rng, shape, fan_in, dtype) -> Tensor:
    data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(dim, dtype) -> Tensor:
    return Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def mlp_mix(x: Tensor, p: LinearParams) -> Tensor:
    """Row-wise two-layer MLP: GELU(x W1 + b1) W2 + b2.

    x is [n, d_in] (or [d_in], treated as one row).
    """
    single = x.data.ndim == 1
    if single:
        x = T.reshape(x, (1, x.data.shape[0]))
    if x.data.shape[1] != p.d_in:
        raise ShapeError(f"mlp expects feature dim {p.d_in}, input has {x.data.shape[1]}")
    y = T.add(T.matmul(x, p.w1), p.b1)
    y = T.add(T.matmul(T.gelu(y), p.w2), p.b2)
    return T.reshape(y, (p.d_out,)) if single else y


def time_mix(x: Tensor, p: LinearParams) -> Tensor:
    """Apply an MLP along the time axis of [T, H], identically per channel."""
    if x.data.shape[0] != p.d_in:
        raise ShapeError(
            f"time-mixing params are bound to T={p.d_in}, input has T={x.data.shape[0]}"
        )
    return T.transpose(mlp_mix(T.transpose(x), p))


# ---------------------------------------------------------------------------
# blocks

class SvMixerBlock:
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        h, t = cfg.hidden_dim, cfg.frames
        self.cfg = cfg
        if cfg.use_lgm:
            self.lgm_norm = NormParams(h, dtype)
            k, g = cfg.lgm_conv_kernel, cfg.lgm_conv_groups
            self.lgm_conv_w = _param(rng, (h, h // g, k), (h // g) * k, dtype)
            self.lgm_conv_b = _zeros(h, dtype)
            self.lgm_mix = LinearParams(t, cfg.time_hidden(t), t, rng, dtype)
        if cfg.use_msm:
            self.msm_norm = NormParams(h, dtype)
            self.msm_full = LinearParams(t, cfg.time_hidden(t), t, rng, dtype)
            t_low = t // 2
            self.msm_low = LinearParams(t_low, cfg.time_hidden(t_low), t_low, rng, dtype)
        if cfg.use_gcm:
            self.gcm_norm = NormParams(h, dtype)
            d = h // cfg.num_groups
            self.gcm_groups = [
                LinearParams(d, cfg.expansion * d, d, rng, dtype)
                for _ in range(cfg.num_groups)
            ]

    def parameters(self, prefix):
        if self.cfg.use_lgm:
            yield from self.lgm_norm.parameters(f"{prefix}.lgm.norm")
            yield f"{prefix}.lgm.conv.weight", self.lgm_conv_w
            yield f"{prefix}.lgm.conv.bias", self.lgm_conv_b
            yield from self.lgm_mix.parameters(f"{prefix}.lgm.mix")
        if self.cfg.use_msm:
            yield from self.msm_norm.parameters(f"{prefix}.msm.norm")
            yield from self.msm_full.parameters(f"{prefix}.msm.full")
            yield from self.msm_low.parameters(f"{prefix}.msm.low")
        if self.cfg.use_gcm:
            yield from self.gcm_norm.parameters(f"{prefix}.gcm.norm")
            for g, p in enumerate(self.gcm_groups):
                yield from p.parameters(f"{prefix}.gcm.group{g}")

    def forward(self, x: Tensor) -> Tensor:
        if self.cfg.use_lgm:
            x = lgm_forward(x, self)
        if self.cfg.use_msm:
            x = msm_forward(x, self)
        if self.cfg.use_gcm:
            x = gcm_forward(x, self)
        return x


class MixerBlock:
    """Plain token-mixing then channel-mixing, both pre-norm residuals."""

    def __init__(self, cfg: EncoderConfig, rng, dtype):
        h, t = cfg.hidden_dim, cfg.frames
        self.cfg = cfg
        self.token_norm = NormParams(h, dtype)
        self.token_mix = LinearParams(t, cfg.expansion * t, t, rng, dtype)
        self.channel_norm = NormParams(h, dtype)
        self.channel_mix = LinearParams(h, cfg.expansion * h, h, rng, dtype)

    def parameters(self, prefix):
        yield from self.token_norm.parameters(f"{prefix}.token.norm")
        yield from self.token_mix.parameters(f"{prefix}.token.mix")
        yield from self.channel_norm.parameters(f"{prefix}.channel.norm")
        yield from self.channel_mix.parameters(f"{prefix}.channel.mix")

    def forward(self, x: Tensor) -> Tensor:
        h = T.layer_norm(x, self.token_norm.gamma, self.token_norm.beta)
        x = T.add(x, time_mix(h, self.token_mix))
        h = T.layer_norm(x, self.channel_norm.gamma, self.channel_norm.beta)
        return T.add(x, mlp_mix(h, self.channel_mix))


def lgm_forward(x: Tensor, blk: SvMixerBlock) -> Tensor:
    """Local grouped conv over time feeding a global time-mixing MLP."""
    cfg = blk.cfg
    h = T.layer_norm(x, blk.lgm_norm.gamma, blk.lgm_norm.beta)
    hc = T.transpose(h)  # [H, T]
    k = cfg.lgm_conv_kernel
    left = (k - 1) // 2  # symmetric zero-pad preserves T (extra tap right for even k)
    hc = T.pad1d(hc, 1, left, k - 1 - left)
    hc = T.conv1d(hc, blk.lgm_conv_w, blk.lgm_conv_b, stride=1, groups=cfg.lgm_conv_groups)
    hc = T.gelu(hc)
    y = time_mix(T.transpose(hc), blk.lgm_mix)
    return T.add(x, y)


def msm_forward(x: Tensor, blk: SvMixerBlock) -> Tensor:
    """Time mixing at full and halved resolution, merged by addition."""
    t = x.data.shape[0]
    h = T.layer_norm(x, blk.msm_norm.gamma, blk.msm_norm.beta)
    full = time_mix(h, blk.msm_full)
    pooled = T.transpose(T.avg_pool1d(T.transpose(h)))  # [T//2, H], odd tail dropped
    low = time_mix(pooled, blk.msm_low)
    up = T.transpose(T.linear_upsample(T.transpose(low), t))
    return T.add(x, T.add(full, up))


def gcm_forward(x: Tensor, blk: SvMixerBlock) -> Tensor:
    """Channel mixing in contiguous groups, concatenated back."""
    cfg = blk.cfg
    h = T.layer_norm(x, blk.gcm_norm.gamma, blk.gcm_norm.beta)
    d = cfg.hidden_dim // cfg.num_groups
    parts = [
        mlp_mix(T.narrow(h, 1, g * d, d), blk.gcm_groups[g])
        for g in range(cfg.num_groups)
    ]
    return T.add(x, T.concat(parts, axis=1))


def block_forward(x: Tensor, block) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"block input must be [T, H], got shape {x.data.shape}")
    return block.forward(x)


# ---------------------------------------------------------------------------
# full model

class SvMixerModel:
    """Frontend, mixing blocks, learned layer aggregation, pooling backend."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)

        c = config.conv_channels
        self.frontend_convs = []
        c_in = 1
        for i, k in enumerate(config.conv_kernels):
            w = _param(rng, (c, c_in, k), c_in * k, self.dtype)
            b = _zeros(c, self.dtype)
            norm = NormParams(c, self.dtype)
            self.frontend_convs.append((w, b, norm))
            c_in = c
        self.proj_w = _param(rng, (c, config.hidden_dim), c, self.dtype)
        self.proj_b = _zeros(config.hidden_dim, self.dtype)

        block_cls = SvMixerBlock if config.block_variant == "svmixer" else MixerBlock
        self.blocks = [block_cls(config, rng, self.dtype) for _ in range(config.num_blocks)]

        self.layer_weights = _zeros(config.num_blocks + 1, self.dtype)
        self.backend_w = _param(rng, (2 * config.hidden_dim, config.embed_dim),
                                2 * config.hidden_dim, self.dtype)
        self.backend_b = _zeros(config.embed_dim, self.dtype)

        self.parameters: dict[str, Tensor] = dict(self.named_parameters())

    def named_parameters(self):
        for i, (w, b, norm) in enumerate(self.frontend_convs):
            yield f"frontend.conv{i}.weight", w
            yield f"frontend.conv{i}.bias", b
            yield from norm.parameters(f"frontend.norm{i}")
        yield "frontend.proj.weight", self.proj_w
        yield "frontend.proj.bias", self.proj_b
        for i, blk in enumerate(self.blocks):
            yield from blk.parameters(f"blocks.{i}")
        yield "layer_weights", self.layer_weights
        yield "backend.proj.weight", self.backend_w
        yield "backend.proj.bias", self.backend_b

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def set_trainable(self, trainable: bool):
        for p in self.parameters.values():
            p.requires_grad = trainable

    def frontend_forward(self, waveform: Tensor) -> Tensor:
        """Raw waveform [N] -> frame sequence [T, H]."""
        if waveform.data.ndim != 1:
            raise ShapeError(f"waveform must be 1-d, got shape {waveform.data.shape}")
        n = waveform.data.shape[0]
        floor = min_samples(self.config)
        if n < floor:
            raise ShapeError(
                f"waveform of {n} samples is too short, need at least {floor} for one frame"
            )
        x = T.reshape(waveform, (1, n))
        for (w, b, norm), stride in zip(self.frontend_convs, self.config.conv_strides):
            x = T.conv1d(x, w, b, stride=stride)
            x = T.gelu(x)
            x = T.transpose(T.layer_norm(T.transpose(x), norm.gamma, norm.beta))
        x = T.transpose(x)  # [T, C]
        return T.add(T.matmul(x, self.proj_w), self.proj_b)

    def layer_outputs(self, waveform: Tensor) -> list[Tensor]:
        """Frontend output followed by each block's output, all [T, H]."""
        x = self.frontend_forward(waveform)
        t = x.data.shape[0]
        if t != self.config.frames:
            raise ShapeError(
                f"input yields {t} frames but the model is bound to {self.config.frames}; "
                f"feed {samples_for_frames(self.config)} samples"
            )
        outs = [x]
        for blk in self.blocks:
            x = block_forward(x, blk)
            outs.append(x)
        return outs

    def aggregate(self, outs: list[Tensor]) -> Tensor:
        """Softmax-weighted sum of layer outputs."""
        weights = T.softmax(self.layer_weights)
        agg = None
        for i, out in enumerate(outs):
            w_i = T.reshape(T.narrow(weights, 0, i, 1), ())
            term = T.mul(w_i, out)
            agg = term if agg is None else T.add(agg, term)
        return agg

    def embed_frames(self, agg: Tensor) -> Tensor:
        """Mean+std pooling over time, then one linear map to the embedding."""
        mu = T.tmean(agg, axis=0)
        d = T.sub(agg, mu)
        var = T.tmean(T.mul(d, d), axis=0)
        sd = T.sqrt(T.add(var, Tensor(np.asarray(_STD_EPS, dtype=agg.data.dtype))))
        stats = T.reshape(T.concat([mu, sd], axis=0), (1, 2 * self.config.hidden_dim))
        emb = T.add(T.matmul(stats, self.backend_w), self.backend_b)
        return T.reshape(emb, (self.config.embed_dim,))

    def encode(self, waveform) -> Tensor:
        """Waveform -> speaker embedding [embed_dim]."""
        if not isinstance(waveform, Tensor):
            waveform = Tensor(np.asarray(waveform, dtype=self.dtype))
        outs = self.layer_outputs(waveform)
        return self.embed_frames(self.aggregate(outs))
