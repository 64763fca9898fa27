import pytest

from svmixer.encoder import EncoderConfig, SvMixerModel, samples_for_frames
from svmixer.errors import CheckFailure
from svmixer.profiler import (
    block_costs,
    count_macs,
    count_model_params,
    count_params,
    model_costs,
    reference_rows,
    transformer_block_costs,
    verify_against_model,
)


def tiny_config(**overrides):
    base = dict(hidden_dim=16, num_blocks=2, num_groups=2, expansion=2,
                frames=12, conv_channels=8, lgm_conv_groups=2, embed_dim=6)
    base.update(overrides)
    return EncoderConfig(**base)


# ---------------------------------------------------------------------------
# closed-form oracle, written out term by term

def mlp_cost_oracle(d_in, d_hidden, d_out, rows):
    params = d_in * d_hidden + d_hidden + d_hidden * d_out + d_out
    macs = rows * (d_in * d_hidden + d_hidden * d_out)
    return params, macs


def svmixer_block_oracle(cfg, t):
    h, g = cfg.hidden_dim, cfg.lgm_conv_groups
    th = cfg.time_hidden
    params = macs = 0
    if cfg.use_lgm:
        params += 2 * h
        params += h * (h // g) * cfg.lgm_conv_kernel + h
        macs += t * h * (h // g) * cfg.lgm_conv_kernel
        p, m = mlp_cost_oracle(t, th(t), t, h)
        params, macs = params + p, macs + m
    if cfg.use_msm:
        params += 2 * h
        p, m = mlp_cost_oracle(t, th(t), t, h)
        params, macs = params + p, macs + m
        p, m = mlp_cost_oracle(t // 2, th(t // 2), t // 2, h)
        params, macs = params + p, macs + m
    if cfg.use_gcm:
        params += 2 * h
        d = h // cfg.num_groups
        p, m = mlp_cost_oracle(d, cfg.expansion * d, d, t)
        params += cfg.num_groups * p
        macs += cfg.num_groups * m
    return params, macs


def test_block_costs_match_closed_form_oracle():
    configs = [
        EncoderConfig(),
        tiny_config(),
        tiny_config(num_groups=4, expansion=3, frames=31),
        tiny_config(use_lgm=False),
        tiny_config(use_msm=False),
        tiny_config(use_gcm=False),
        EncoderConfig(time_expansion=0.5),
    ]
    for cfg in configs:
        for t in (1, 2, 17, cfg.frames):
            want_p, want_m = svmixer_block_oracle(cfg, t)
            assert count_params(cfg) == svmixer_block_oracle(cfg, cfg.frames)[0]
            assert count_macs(cfg, t) == want_m
            report = block_costs(cfg, frames=t)
            assert report.params == want_p and report.macs == want_m


# ---------------------------------------------------------------------------
# frozen per-layer figures at the published scale (H=1024, T=149)

def test_per_layer_reference_table_is_stable():
    rows = {r.kind: r for r in reference_rows(149)}
    assert rows["transformer"].params == 8_399_872
    assert rows["transformer"].macs == 1_295_370_240
    assert rows["mlpmixer"].params == 8_576_177
    assert rows["mlpmixer"].macs == 1_431_773_184
    assert rows["svmixer"].params == 3_782_804
    assert rows["svmixer"].macs == 648_982_528


def test_cost_ratios_beat_both_baselines():
    rows = {r.kind: r for r in reference_rows(149)}
    sv, tr, mx = rows["svmixer"], rows["transformer"], rows["mlpmixer"]
    assert sv.params / tr.params <= 0.50
    assert sv.macs / tr.macs <= 0.55
    assert sv.params < mx.params and sv.macs < mx.macs


def test_transformer_reference_terms():
    h, f, t = 1024, 2048, 149
    items = {i.name: i for i in transformer_block_costs(h, f, t).items}
    assert items["attn.proj"].params == 4 * (h * h + h)
    assert items["attn.proj"].macs == 4 * t * h * h
    assert items["attn.scores"].params == 0
    assert items["attn.scores"].macs == 2 * t * t * h
    assert items["ffn"].params == 2 * h * f + f + h
    assert items["ffn"].macs == 2 * t * h * f
    assert items["norms"].params == 4 * h


def test_grouped_channel_mix_item_at_published_scale():
    items = {i.name: i for i in block_costs(EncoderConfig()).items}
    assert items["gcm.groups"].params == 2_102_272
    assert items["lgm.conv"].params == 1024 * 512 * 3 + 1024


# ---------------------------------------------------------------------------
# census: analytic counts equal instantiated parameter counts, exactly

def test_census_matches_instantiated_models():
    combos = [
        dict(use_lgm=a, use_msm=b, use_gcm=c)
        for a in (True, False) for b in (True, False) for c in (True, False)
    ]
    for combo in combos:
        cfg = tiny_config(**combo)
        census = verify_against_model(SvMixerModel(cfg, seed=0))
        assert census.analytic == census.instantiated == count_model_params(cfg)
    for g in (1, 2, 4, 8):
        cfg = tiny_config(num_groups=g, lgm_conv_groups=g)
        census = verify_against_model(SvMixerModel(cfg, seed=0))
        assert census.analytic == census.instantiated
    census = verify_against_model(SvMixerModel(tiny_config(block_variant="mlpmixer")))
    assert census.analytic == census.instantiated


def test_census_detects_a_missing_parameter():
    model = SvMixerModel(tiny_config(), seed=0)
    del model.parameters["backend.proj.bias"]
    with pytest.raises(CheckFailure):
        verify_against_model(model)


def test_model_total_at_published_scale():
    cfg = EncoderConfig()
    assert count_model_params(cfg) == 50_522_557
    report = model_costs(cfg, samples_for_frames(cfg))
    assert report.macs == 15_188_913_152
    names = [i.name for i in report.items]
    assert "frontend.conv0" in names and "blocks.11.gcm.groups" in names
    assert names[-2:] == ["layer_weights", "backend.proj"]


# ---------------------------------------------------------------------------
# structural properties

def test_ablating_a_stage_removes_exactly_its_subtotal():
    full = block_costs(EncoderConfig())
    by_stage = {"lgm": 0, "msm": 0, "gcm": 0}
    for item in full.items:
        by_stage[item.name.split(".")[0]] += item.params
    for stage, toggle in (("lgm", "use_lgm"), ("msm", "use_msm"), ("gcm", "use_gcm")):
        reduced = count_params(EncoderConfig(**{toggle: False}))
        assert full.params - reduced == by_stage[stage]


def test_model_params_grow_with_depth_and_width():
    depths = [count_model_params(EncoderConfig(num_blocks=l)) for l in (2, 4, 6, 8, 12)]
    assert all(a < b for a, b in zip(depths, depths[1:]))
    widths = [count_model_params(EncoderConfig(hidden_dim=h)) for h in (256, 512, 1024)]
    assert all(a < b for a, b in zip(widths, widths[1:]))


def test_block_macs_grow_with_frames_and_vanish_at_zero():
    cfg = EncoderConfig()
    macs = [count_macs(cfg, t) for t in (10, 50, 149, 300)]
    assert all(a < b for a, b in zip(macs, macs[1:]))
    assert count_macs(cfg, 0) == 0


def test_reference_rows_accept_single_frame():
    rows = {r.kind: r for r in reference_rows(1)}
    assert rows["svmixer"].macs > 0
    assert rows["svmixer"].macs < rows["transformer"].macs
