import numpy as np
import pytest
from scipy.special import erf

from svmixer import tensor as T
from svmixer.encoder import (
    EncoderConfig,
    MixerBlock,
    SvMixerBlock,
    SvMixerModel,
    block_forward,
    gcm_forward,
    min_samples,
    mlp_mix,
    num_frames,
    samples_for_frames,
)
from svmixer.errors import ConfigError, ShapeError
from svmixer.tensor import Tensor


def tiny_config(**overrides):
    base = dict(
        hidden_dim=16,
        num_blocks=2,
        num_groups=2,
        expansion=2,
        time_expansion=1.0,
        frames=12,
        conv_channels=8,
        lgm_conv_groups=2,
        embed_dim=6,
    )
    base.update(overrides)
    return EncoderConfig(**base)


# ---------------------------------------------------------------------------
# plain-numpy replica of the forward pass, written from the layer definitions

def np_gelu(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_conv(x, w, b, stride=1, groups=1):
    c_out, ig, k = w.shape
    og = c_out // groups
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    parts = []
    for g in range(groups):
        wg = w[g * og:(g + 1) * og]
        xg = windows[g * ig:(g + 1) * ig]
        parts.append(np.einsum("oik,itk->ot", wg, xg))
    return np.concatenate(parts, axis=0) + b[:, None]


def np_mlp(x, p):
    return np_gelu(x @ p.w1.data + p.b1.data) @ p.w2.data + p.b2.data


def np_time_mix(x, p):
    return np_mlp(x.T, p).T


def np_upsample(x, target_t):
    t_src = x.shape[1]
    pos = np.arange(target_t, dtype=np.float64) * (t_src - 1) / (target_t - 1)
    lo = np.minimum(np.floor(pos).astype(int), t_src - 2)
    w = pos - lo
    return x[:, lo] + (x[:, lo + 1] - x[:, lo]) * w


def np_svmixer_block(x, blk, cfg):
    if cfg.use_lgm:
        h = np_layer_norm(x, blk.lgm_norm.gamma.data, blk.lgm_norm.beta.data)
        k = cfg.lgm_conv_kernel
        left = (k - 1) // 2
        hc = np.pad(h.T, ((0, 0), (left, k - 1 - left)))
        hc = np_conv(hc, blk.lgm_conv_w.data, blk.lgm_conv_b.data,
                     groups=cfg.lgm_conv_groups)
        x = x + np_time_mix(np_gelu(hc).T, blk.lgm_mix)
    if cfg.use_msm:
        h = np_layer_norm(x, blk.msm_norm.gamma.data, blk.msm_norm.beta.data)
        full = np_time_mix(h, blk.msm_full)
        t = h.shape[0]
        pooled = 0.5 * (h.T[:, 0:2 * (t // 2):2] + h.T[:, 1:2 * (t // 2):2])
        low = np_time_mix(pooled.T, blk.msm_low)
        x = x + full + np_upsample(low.T, t).T
    if cfg.use_gcm:
        h = np_layer_norm(x, blk.gcm_norm.gamma.data, blk.gcm_norm.beta.data)
        d = cfg.hidden_dim // cfg.num_groups
        parts = [np_mlp(h[:, g * d:(g + 1) * d], blk.gcm_groups[g])
                 for g in range(cfg.num_groups)]
        x = x + np.concatenate(parts, axis=1)
    return x


def np_mixer_block(x, blk):
    h = np_layer_norm(x, blk.token_norm.gamma.data, blk.token_norm.beta.data)
    x = x + np_time_mix(h, blk.token_mix)
    h = np_layer_norm(x, blk.channel_norm.gamma.data, blk.channel_norm.beta.data)
    return x + np_mlp(h, blk.channel_mix)


def np_encode(model, waveform):
    cfg = model.config
    x = waveform[None, :]
    for (w, b, norm), stride in zip(model.frontend_convs, cfg.conv_strides):
        x = np_gelu(np_conv(x, w.data, b.data, stride=stride))
        x = np_layer_norm(x.T, norm.gamma.data, norm.beta.data).T
    x = x.T @ model.proj_w.data + model.proj_b.data
    outs = [x]
    for blk in model.blocks:
        if cfg.block_variant == "svmixer":
            x = np_svmixer_block(x, blk, cfg)
        else:
            x = np_mixer_block(x, blk)
        outs.append(x)
    lw = model.layer_weights.data
    weights = np.exp(lw - lw.max())
    weights = weights / weights.sum()
    agg = sum(w_i * out for w_i, out in zip(weights, outs))
    mu = agg.mean(axis=0)
    sd = np.sqrt(((agg - mu) ** 2).mean(axis=0) + 1e-12)
    return np.concatenate([mu, sd]) @ model.backend_w.data + model.backend_b.data


def test_full_svmixer_model_matches_numpy_replica():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=11, dtype=np.float64)
    rng = np.random.default_rng(12)
    wave = rng.standard_normal(samples_for_frames(cfg))
    # make the learned aggregation non-trivial before comparing
    model.layer_weights.data[:] = rng.standard_normal(cfg.num_blocks + 1)
    emb = model.encode(wave).data
    assert np.max(np.abs(emb - np_encode(model, wave))) <= 1e-10


def test_full_mlpmixer_model_matches_numpy_replica():
    cfg = tiny_config(block_variant="mlpmixer")
    model = SvMixerModel(cfg, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    wave = rng.standard_normal(samples_for_frames(cfg))
    emb = model.encode(wave).data
    assert np.max(np.abs(emb - np_encode(model, wave))) <= 1e-10


# ---------------------------------------------------------------------------
# structural identities

def zero_second_layers(model):
    for name, p in model.parameters.items():
        if name.startswith("blocks.") and (name.endswith(".w2") or name.endswith(".b2")):
            p.data[:] = 0.0


def test_zeroed_mix_outputs_make_every_block_an_identity():
    for variant in ("svmixer", "mlpmixer"):
        cfg = tiny_config(block_variant=variant)
        model = SvMixerModel(cfg, seed=0, dtype=np.float64)
        zero_second_layers(model)
        wave = np.random.default_rng(1).standard_normal(samples_for_frames(cfg))
        outs = model.layer_outputs(Tensor(np.asarray(wave)))
        for out in outs[1:]:
            assert np.array_equal(out.data, outs[0].data)


def test_single_group_channel_mix_equals_plain_mlp():
    cfg = tiny_config(num_groups=1)
    blk = SvMixerBlock(cfg, np.random.default_rng(2), np.float64)
    x = Tensor(np.random.default_rng(3).standard_normal((cfg.frames, cfg.hidden_dim)))
    out = gcm_forward(x, blk).data
    h = T.layer_norm(x, blk.gcm_norm.gamma, blk.gcm_norm.beta)
    ref = x.data + mlp_mix(h, blk.gcm_groups[0]).data
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_identity_tap_conv_passes_normed_input_through():
    # centre-tap identity weights make the local conv a no-op, so the branch
    # reduces to x + time_mix(gelu(norm(x)))
    cfg = tiny_config(use_msm=False, use_gcm=False)
    blk = SvMixerBlock(cfg, np.random.default_rng(4), np.float64)
    h = cfg.hidden_dim
    ig = h // cfg.lgm_conv_groups
    blk.lgm_conv_w.data[:] = 0.0
    for o in range(h):
        blk.lgm_conv_w.data[o, o % ig, cfg.lgm_conv_kernel // 2] = 1.0
    blk.lgm_conv_b.data[:] = 0.0
    x = Tensor(np.random.default_rng(5).standard_normal((cfg.frames, h)))
    out = block_forward(x, blk).data
    normed = np_layer_norm(x.data, blk.lgm_norm.gamma.data, blk.lgm_norm.beta.data)
    ref = x.data + np_time_mix(np_gelu(normed), blk.lgm_mix)
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_two_resolution_mixing_handles_odd_frame_count():
    cfg = tiny_config(frames=13, use_lgm=False, use_gcm=False)
    blk = SvMixerBlock(cfg, np.random.default_rng(6), np.float64)
    x = Tensor(np.random.default_rng(7).standard_normal((13, cfg.hidden_dim)),
               requires_grad=True)
    out = block_forward(x, blk)
    assert out.data.shape == (13, cfg.hidden_dim)
    T.tsum(out).backward()
    assert x.grad.shape == (13, cfg.hidden_dim)
    assert np.isfinite(x.grad).all()


def test_layer_weight_spike_selects_one_layer():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=8, dtype=np.float64)
    wave = np.random.default_rng(9).standard_normal(samples_for_frames(cfg))
    outs = model.layer_outputs(Tensor(np.asarray(wave)))
    for j in (0, cfg.num_blocks):
        model.layer_weights.data[:] = 0.0
        model.layer_weights.data[j] = 40.0
        agg = model.aggregate(outs).data
        assert np.max(np.abs(agg - outs[j].data)) <= 1e-6


def test_uniform_layer_weights_average_all_layers():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=10, dtype=np.float64)
    wave = np.random.default_rng(11).standard_normal(samples_for_frames(cfg))
    outs = model.layer_outputs(Tensor(np.asarray(wave)))
    agg = model.aggregate(outs).data
    ref = np.mean([o.data for o in outs], axis=0)
    assert np.max(np.abs(agg - ref)) <= 1e-12


# ---------------------------------------------------------------------------
# behaviour

def test_embedding_is_sensitive_to_time_order():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=12, dtype=np.float64)
    wave = np.random.default_rng(13).standard_normal(samples_for_frames(cfg))
    forward = model.encode(wave).data
    backward = model.encode(wave[::-1].copy()).data
    assert not np.allclose(forward, backward, rtol=0, atol=1e-6)


def test_same_seed_same_embedding_different_seed_differs():
    cfg = tiny_config()
    wave = np.random.default_rng(14).standard_normal(samples_for_frames(cfg))
    a = SvMixerModel(cfg, seed=5).encode(wave).data
    b = SvMixerModel(cfg, seed=5).encode(wave).data
    c = SvMixerModel(cfg, seed=6).encode(wave).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_wrong_sample_count_error_names_required_length():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=0)
    needed = samples_for_frames(cfg)
    with pytest.raises(ShapeError) as err:
        model.encode(np.zeros(needed + 500, dtype=np.float32))
    assert f"feed {needed} samples" in str(err.value)


def test_too_short_waveform_reports_minimum():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=0)
    with pytest.raises(ShapeError) as err:
        model.encode(np.zeros(min_samples(cfg) - 1, dtype=np.float32))
    assert "too short" in str(err.value)


def test_frame_arithmetic_of_default_frontend():
    cfg = EncoderConfig()
    assert num_frames(48000, cfg) == 149
    assert num_frames(16000, cfg) == 49
    assert num_frames(400, cfg) == 1
    assert num_frames(399, cfg) == 0
    assert min_samples(cfg) == 400
    assert samples_for_frames(cfg, 149) == 47760
    assert num_frames(samples_for_frames(cfg, 149), cfg) == 149


def test_parameter_names_are_unique_and_trainable_flags_toggle():
    cfg = tiny_config()
    model = SvMixerModel(cfg, seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert all(p.requires_grad for p in model.parameters.values())
    model.set_trainable(False)
    assert not any(p.requires_grad for p in model.parameters.values())


def test_ablation_toggles_drop_their_parameters():
    full = set(SvMixerModel(tiny_config(), seed=0).parameters)
    no_msm = set(SvMixerModel(tiny_config(use_msm=False), seed=0).parameters)
    dropped = full - no_msm
    assert dropped and all(".msm." in name for name in dropped)
    assert no_msm < full


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        tiny_config(hidden_dim=15)  # not divisible by num_groups
    with pytest.raises(ConfigError):
        tiny_config(block_variant="attention")
    with pytest.raises(ConfigError):
        tiny_config(frames=1)
    with pytest.raises(ConfigError):
        tiny_config(time_expansion=0.0)


def test_default_config_matches_published_scale():
    cfg = EncoderConfig()
    assert (cfg.hidden_dim, cfg.num_blocks, cfg.embed_dim) == (1024, 12, 192)
    assert cfg.conv_kernels == (10, 3, 3, 3, 3, 2, 2)
    assert cfg.conv_strides == (5, 2, 2, 2, 2, 2, 2)
