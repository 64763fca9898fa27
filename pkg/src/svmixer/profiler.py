"""Closed-form parameter and MAC accounting.

Counts are analytic (no model instantiation needed) and follow one
convention throughout: MACs are the multiply-accumulates of matmuls and
convolutions only; norms, activations, pooling, upsampling and elementwise
arithmetic are excluded. Parameter counts include biases and norm affines.

`verify_against_model` cross-checks the closed forms against an
instantiated model's parameter census and must agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig, samples_for_frames
from .errors import CheckFailure, ConfigError


@dataclass(frozen=True)
class ModuleCost:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    kind: str
    frames: int
    items: tuple[ModuleCost, ...]

    @property
    def params(self) -> int:
        return sum(m.params for m in self.items)

    @property
    def macs(self) -> int:
        return sum(m.macs for m in self.items)

    def subtotal(self, prefix: str) -> tuple[int, int]:
        """(params, macs) summed over items whose name starts with prefix."""
        hit = [m for m in self.items if m.name.startswith(prefix)]
        return sum(m.params for m in hit), sum(m.macs for m in hit)


def _mlp_cost(d_in: int, d_hidden: int, d_out: int, rows: int) -> tuple[int, int]:
    """Params and MACs of a two-layer MLP applied to `rows` rows."""
    params = d_in * d_hidden + d_hidden + d_hidden * d_out + d_out
    macs = rows * (d_in * d_hidden + d_hidden * d_out)
    return params, macs


def block_costs(config: EncoderConfig, frames: int | None = None) -> CostReport:
    """Per-block cost breakdown for the configured variant."""
    t = config.frames if frames is None else frames
    h = config.hidden_dim
    items: list[ModuleCost] = []

    if config.block_variant == "mlpmixer":
        items.append(ModuleCost("token.norm", 2 * h, 0))
        items.append(ModuleCost("token.mix", *_mlp_cost(t, config.expansion * t, t, h)))
        items.append(ModuleCost("channel.norm", 2 * h, 0))
        items.append(ModuleCost("channel.mix", *_mlp_cost(h, config.expansion * h, h, t)))
        return CostReport("mlpmixer", t, tuple(items))

    if config.use_lgm:
        k, g = config.lgm_conv_kernel, config.lgm_conv_groups
        items.append(ModuleCost("lgm.norm", 2 * h, 0))
        # same-padded conv: k taps counted at every one of t output frames
        items.append(ModuleCost("lgm.conv", h * (h // g) * k + h, t * h * (h // g) * k))
        items.append(ModuleCost("lgm.mix", *_mlp_cost(t, config.time_hidden(t), t, h)))
    if config.use_msm:
        t_low = t // 2
        items.append(ModuleCost("msm.norm", 2 * h, 0))
        items.append(ModuleCost("msm.full", *_mlp_cost(t, config.time_hidden(t), t, h)))
        items.append(ModuleCost(
            "msm.low", *_mlp_cost(t_low, config.time_hidden(t_low), t_low, h)))
    if config.use_gcm:
        d = h // config.num_groups
        p1, m1 = _mlp_cost(d, config.expansion * d, d, t)
        items.append(ModuleCost("gcm.norm", 2 * h, 0))
        items.append(ModuleCost(
            "gcm.groups", config.num_groups * p1, config.num_groups * m1))
    return CostReport("svmixer", t, tuple(items))


def model_costs(config: EncoderConfig, n_samples: int) -> CostReport:
    """Whole-model breakdown: frontend, blocks, aggregation, backend."""
    items: list[ModuleCost] = []
    c = config.conv_channels
    t, c_in = n_samples, 1
    for i, (k, s) in enumerate(zip(config.conv_kernels, config.conv_strides)):
        t_out = (t - k) // s + 1
        items.append(ModuleCost(f"frontend.conv{i}", c * c_in * k + c, t_out * c * c_in * k))
        items.append(ModuleCost(f"frontend.norm{i}", 2 * c, 0))
        t, c_in = t_out, c
    items.append(ModuleCost(
        "frontend.proj", c * config.hidden_dim + config.hidden_dim, t * c * config.hidden_dim))
    if t != config.frames:
        raise ConfigError(
            f"{n_samples} samples yield {t} frames, model is bound to {config.frames}"
        )

    block = block_costs(config)
    for i in range(config.num_blocks):
        for m in block.items:
            items.append(ModuleCost(f"blocks.{i}.{m.name}", m.params, m.macs))

    items.append(ModuleCost("layer_weights", config.num_blocks + 1, 0))
    items.append(ModuleCost(
        "backend.proj",
        2 * config.hidden_dim * config.embed_dim + config.embed_dim,
        2 * config.hidden_dim * config.embed_dim))
    return CostReport(config.block_variant, t, tuple(items))


def transformer_block_costs(hidden_dim: int = 1024, ffn_dim: int = 2048,
                            frames: int = 149) -> CostReport:
    """Reference transformer encoder layer at matched width.

    Attention cost is the four H*H projections plus the two T*T*H
    score/context matmuls; the FFN is H -> ffn_dim -> H.
    """
    h, f, t = hidden_dim, ffn_dim, frames
    items = (
        ModuleCost("attn.proj", 4 * (h * h + h), 4 * t * h * h),
        ModuleCost("attn.scores", 0, 2 * t * t * h),
        ModuleCost("ffn", h * f + f + f * h + h, 2 * t * h * f),
        ModuleCost("norms", 2 * 2 * h, 0),
    )
    return CostReport("transformer", t, items)


def count_params(config: EncoderConfig) -> int:
    """Per-block parameter count (the headline per-layer figure)."""
    return block_costs(config).params


def count_macs(config: EncoderConfig, frames: int | None = None) -> int:
    """Per-block MAC count at the given frame count."""
    return block_costs(config, frames=frames).macs


def count_model_params(config: EncoderConfig) -> int:
    """Parameter count of a full model (frontend + blocks + aggregation + backend).

    Uses the shortest input that matches the bound frame count; the census
    does not depend on that choice.
    """
    return model_costs(config, samples_for_frames(config)).params


@dataclass(frozen=True)
class CensusReport:
    analytic: int
    instantiated: int
    per_parameter: tuple[tuple[str, int], ...]


def verify_against_model(model) -> CensusReport:
    """Compare closed-form counts with an instantiated model, exactly."""
    per_param = tuple((name, int(p.data.size)) for name, p in model.parameters.items())
    counted = sum(n for _, n in per_param)
    analytic = count_model_params(model.config)
    if analytic != counted:
        raise CheckFailure(
            f"parameter census mismatch: closed form {analytic}, model has {counted}"
        )
    return CensusReport(analytic, counted, per_param)


def reference_rows(frames: int = 149) -> list[CostReport]:
    """Per-layer cost table rows: transformer, plain mixer, this encoder.

    `frames` overrides the cost evaluation point only, so any T >= 1 is
    valid here even though a constructed model needs frames >= 2.
    """
    mixer_cfg = EncoderConfig(block_variant="mlpmixer")
    sv_cfg = EncoderConfig()
    return [
        transformer_block_costs(frames=frames),
        block_costs(mixer_cfg, frames),
        block_costs(sv_cfg, frames),
    ]
