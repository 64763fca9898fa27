"""Desk-scale distillation training loop.

AdamW with decoupled weight decay, plateau-driven learning-rate halving,
early stopping, and seeded shuffling over a deterministic synthetic corpus.
The teacher is any object with a `teacher_entry(waveform, distill_cfg, key)`
method: a frozen synthetic encoder here, or a table of precomputed features
loaded from feature files.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .distill import DistillConfig, ProjectionHead, total_loss
from .encoder import EncoderConfig, SvMixerModel
from .errors import ConfigError, DataError
from .tensor import Tensor

# fixed sub-stream tags so every RNG consumer has an independent seed path
_CLASSIFIER_STREAM = 1
_HEAD_STREAM = 2
_EPOCH_STREAM = 3


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 128
    crop_seconds: float = 3.0
    sample_rate: int = 16000
    max_epochs: int = 100
    max_steps: int | None = None
    val_utterances: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise ConfigError("patience values must be positive")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.crop_seconds <= 0 or self.sample_rate <= 0:
            raise ConfigError("crop_seconds and sample_rate must be positive")
        if self.max_epochs <= 0:
            raise ConfigError(f"max_epochs must be positive, got {self.max_epochs}")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError(f"max_steps must be positive when set, got {self.max_steps}")
        if self.val_utterances < 0:
            raise ConfigError(f"val_utterances must be nonnegative, got {self.val_utterances}")

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * self.sample_rate))


# ---------------------------------------------------------------------------
# optimizer

def adamw_update(param, grad, m, v, t, lr, weight_decay, beta1, beta2, eps):
    """One AdamW step for a single array; returns (param, m, v).

    Weight decay is decoupled: the shrink term lr*wd*param is applied
    alongside, not inside, the adaptive update, so grad==0 still shrinks.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param = param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    """Ordered-dict AdamW; iteration order of `params` fixes update order."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self._m[name], self._v[name] = adamw_update(
                p.data, g.astype(p.data.dtype), self._m[name], self._v[name],
                self.t, self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)


class PlateauSchedule:
    """Halve the learning rate after `plateau_patience` consecutive epochs
    without a strictly better validation loss; request a stop once
    `early_stop_patience` epochs pass since the best epoch."""

    def __init__(self, lr0: float, factor: float = 0.5, plateau_patience: int = 5,
                 early_stop_patience: int = 10):
        self.lr = lr0
        self.factor = factor
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0
        self.should_stop = False

    def observe(self, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the lr for the next epoch."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.plateau_patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        if self.epoch - self.best_epoch >= self.early_stop_patience:
            self.should_stop = True
        return self.lr


# ---------------------------------------------------------------------------
# synthetic corpus

@functools.lru_cache(maxsize=256)
def synth_utterance(seed: int, speaker: int, utt: int, n_samples: int = 48000,
                    sample_rate: int = 16000) -> np.ndarray:
    """Deterministic synthetic utterance, peak-normalized so max|x| == 1.

    Speaker identity = fundamental frequency and harmonic envelope drawn from
    the (seed, speaker) stream; utterance variation = phases, slight pitch
    jitter, and additive noise from the (seed, speaker, utt) stream.
    The result is cached; callers must not write into the returned array.
    """
    spk_rng = np.random.default_rng(np.random.SeedSequence([seed, speaker]))
    f0 = 85.0 + 170.0 * spk_rng.random()
    n_harmonics = 12
    envelope = (0.2 + spk_rng.random(n_harmonics)) / (1.0 + np.arange(n_harmonics))

    utt_rng = np.random.default_rng(np.random.SeedSequence([seed, speaker, utt]))
    phases = utt_rng.uniform(0.0, 2.0 * np.pi, n_harmonics)
    jitter = 1.0 + 0.07 * (utt_rng.random() - 0.5)
    noise = 0.05 * utt_rng.standard_normal(n_samples)

    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    x = noise
    for k in range(n_harmonics):
        x = x + envelope[k] * np.sin(2.0 * np.pi * f0 * jitter * (k + 1) * t + phases[k])
    x = x / np.abs(x).max()
    out = x.astype(np.float32)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SyntheticCorpus:
    n_speakers: int = 8
    utterances_per_speaker: int = 20
    seed: int = 0
    sample_rate: int = 16000
    n_samples: int = 48000

    def __post_init__(self):
        if self.n_speakers <= 0 or self.utterances_per_speaker <= 0:
            raise ConfigError("corpus must have at least one speaker and one utterance")

    def utterance(self, speaker: int, utt: int) -> np.ndarray:
        if not (0 <= speaker < self.n_speakers and 0 <= utt < self.utterances_per_speaker):
            raise DataError(
                f"utterance ({speaker}, {utt}) outside corpus of "
                f"{self.n_speakers}x{self.utterances_per_speaker}")
        return synth_utterance(self.seed, speaker, utt, self.n_samples, self.sample_rate)

    def utterance_id(self, speaker: int, utt: int) -> str:
        return f"spk{speaker:03d}_utt{utt:03d}"

    def keys(self) -> list[tuple[int, int]]:
        return [(s, u) for s in range(self.n_speakers)
                for u in range(self.utterances_per_speaker)]


# ---------------------------------------------------------------------------
# teacher sources

class SyntheticTeacher:
    """Frozen fixed-seed encoder serving hidden-state targets.

    All parameters are created once from `seed` and never updated; forwards
    run with gradients disabled, so served arrays carry no gradient path.
    Results are cached per caller-supplied key.
    """

    def __init__(self, config: EncoderConfig | None = None, seed: int = 7):
        self.config = config if config is not None else desk_teacher_config()
        self.model = SvMixerModel(self.config, seed=seed)
        self.model.set_trainable(False)
        self.hidden_dim = self.config.hidden_dim
        self._cache: dict[str, list[np.ndarray]] = {}

    def layer_arrays(self, waveform, key: str | None = None) -> list[np.ndarray]:
        """Frontend output plus every block output as plain float arrays."""
        if key is not None and key in self._cache:
            return self._cache[key]
        wave = Tensor(np.asarray(waveform, dtype=self.model.dtype))
        arrays = [out.data.copy() for out in self.model.layer_outputs(wave)]
        if key is not None:
            self._cache[key] = arrays
        return arrays

    def teacher_entry(self, waveform, cfg: DistillConfig, key: str | None = None):
        arrays = self.layer_arrays(waveform, key)
        if cfg.mode == "final_state":
            return arrays[-1]
        for layer in cfg.matched_teacher_layers:
            if not 0 <= layer < len(arrays):
                raise ConfigError(
                    f"matched teacher layer {layer} outside available range "
                    f"0..{len(arrays) - 1}")
        return {layer: arrays[layer] for layer in cfg.matched_teacher_layers}


class FeatureTableTeacher:
    """Teacher backed by precomputed per-utterance feature arrays.

    `final` maps utterance id -> [T, H_t] array; `layers` maps layer index ->
    {utterance id -> array} for multi-head training. Waveforms are ignored;
    lookups are by key, so crops must start at sample 0.
    """

    def __init__(self, hidden_dim: int, final: dict[str, np.ndarray] | None = None,
                 layers: dict[int, dict[str, np.ndarray]] | None = None):
        self.hidden_dim = hidden_dim
        self.final = final or {}
        self.layers = layers or {}

    def _lookup(self, table: dict, key: str | None) -> np.ndarray:
        if key is None or key not in table:
            raise DataError(
                f"no precomputed features for utterance {key!r}; feature tables "
                f"require whole-utterance crops starting at sample 0")
        return table[key]

    def teacher_entry(self, waveform, cfg: DistillConfig, key: str | None = None):
        if cfg.mode == "final_state":
            return self._lookup(self.final, key)
        out = {}
        for layer in cfg.matched_teacher_layers:
            if layer not in self.layers:
                raise ConfigError(f"no feature table for teacher layer {layer}")
            out[layer] = self._lookup(self.layers[layer], key)
        return out


# ---------------------------------------------------------------------------
# desk-scale defaults

def desk_encoder_config(**overrides) -> EncoderConfig:
    """Small student that keeps the full structure but fits a laptop core."""
    base = dict(hidden_dim=32, num_blocks=2, conv_channels=32, frames=149)
    base.update(overrides)
    return EncoderConfig(**base)


def desk_teacher_config(**overrides) -> EncoderConfig:
    """Wider frozen teacher (hidden 64) for the synthetic distillation runs."""
    base = dict(hidden_dim=64, num_blocks=2, conv_channels=32, frames=149)
    base.update(overrides)
    return EncoderConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=8, max_epochs=50, max_steps=200, val_utterances=4)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: SvMixerModel
    class_weights: Tensor
    heads: dict[str, ProjectionHead]
    metrics: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0


def build_heads(model: SvMixerModel, teacher_dim: int, distill_cfg: DistillConfig,
                seed: int) -> dict[str, ProjectionHead]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _HEAD_STREAM]))
    h = model.config.hidden_dim
    if distill_cfg.mode == "final_state":
        return {"final": ProjectionHead(h, teacher_dim, rng, model.dtype)}
    return {f"layer{i}": ProjectionHead(h, teacher_dim, rng, model.dtype)
            for i in sorted(distill_cfg.matched_teacher_layers)}


def _crop_key(corpus: SyntheticCorpus, speaker: int, utt: int, start: int) -> str:
    base = corpus.utterance_id(speaker, utt)
    return base if start == 0 else f"{base}+{start}"


def _forward_batch(model, corpus, teacher, distill_cfg, entries, crop, class_weights, heads):
    agg_b, emb_b, teach_b, labels = [], [], [], []
    for speaker, utt, start in entries:
        wave = corpus.utterance(speaker, utt)
        clip = wave[start:start + crop]
        outs = model.layer_outputs(Tensor(clip.astype(model.dtype)))
        agg = model.aggregate(outs)
        agg_b.append(agg)
        emb_b.append(model.embed_frames(agg))
        teach_b.append(teacher.teacher_entry(
            clip, distill_cfg, key=_crop_key(corpus, speaker, utt, start)))
        labels.append(speaker)
    return total_loss(agg_b, emb_b, teach_b, labels, class_weights, heads, distill_cfg)


def _validate(model, corpus, teacher, distill_cfg, val_keys, crop, batch_size,
              class_weights, heads, extra_params):
    """Mean total loss over the held-out utterances, gradients disabled."""
    saved = [(p, p.requires_grad) for p in
             list(model.parameters.values()) + list(extra_params)]
    for p, _ in saved:
        p.requires_grad = False
    try:
        total, count = 0.0, 0
        for i in range(0, len(val_keys), batch_size):
            chunk = [(s, u, 0) for s, u in val_keys[i:i + batch_size]]
            _, parts = _forward_batch(model, corpus, teacher, distill_cfg, chunk,
                                      crop, class_weights, heads)
            total += parts["total"] * len(chunk)
            count += len(chunk)
        return total / count
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def train(model: SvMixerModel, corpus: SyntheticCorpus, teacher,
          cfg: TrainConfig, distill_cfg: DistillConfig) -> TrainResult:
    """Run the distillation + classification loop; returns the trained model,
    classifier weights, projection heads, and the per-epoch metrics log."""
    crop = cfg.crop_samples
    if corpus.n_samples < crop:
        raise DataError(
            f"corpus utterances of {corpus.n_samples} samples are shorter than "
            f"the {crop}-sample crop")
    if cfg.val_utterances >= corpus.utterances_per_speaker:
        raise ConfigError(
            f"val_utterances={cfg.val_utterances} leaves no training utterances "
            f"out of {corpus.utterances_per_speaker} per speaker")

    split = corpus.utterances_per_speaker - cfg.val_utterances
    train_keys = [(s, u) for s, u in corpus.keys() if u < split]
    val_keys = [(s, u) for s, u in corpus.keys() if u >= split]

    cls_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _CLASSIFIER_STREAM]))
    d = model.config.embed_dim
    class_weights = Tensor(
        cls_rng.normal(0.0, 1.0 / np.sqrt(d), size=(corpus.n_speakers, d)).astype(model.dtype),
        requires_grad=True, name="classifier.weight")
    heads = build_heads(model, teacher.hidden_dim, distill_cfg, cfg.seed)

    params: dict[str, Tensor] = dict(model.parameters)
    params["classifier.weight"] = class_weights
    for key in heads:
        params.update(heads[key].parameters(f"heads.{key}"))
    head_params = [p for name, p in params.items() if name.startswith(("heads.", "classifier."))]

    opt = AdamW(params, cfg.lr0, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule(cfg.lr0, cfg.lr_factor, cfg.plateau_patience,
                            cfg.early_stop_patience)

    result = TrainResult(model, class_weights, heads)
    out_of_steps = False
    for epoch in range(1, cfg.max_epochs + 1):
        ep_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _EPOCH_STREAM, epoch]))
        order = ep_rng.permutation(len(train_keys))
        slack = corpus.n_samples - crop
        entries = []
        for idx in order:
            s, u = train_keys[int(idx)]
            start = int(ep_rng.integers(0, slack + 1)) if slack > 0 else 0
            entries.append((s, u, start))

        n_batches = max(1, len(entries) // cfg.batch_size)
        epoch_losses = []
        for b in range(n_batches):
            batch = entries[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if not batch:
                break
            loss, parts = _forward_batch(model, corpus, teacher, distill_cfg, batch,
                                         crop, class_weights, heads)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(parts["total"])
            result.step_losses.append(parts["total"])
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                out_of_steps = True
                break

        train_loss = float(np.mean(epoch_losses))
        if val_keys:
            val_loss = _validate(model, corpus, teacher, distill_cfg, val_keys, crop,
                                 cfg.batch_size, class_weights, heads, head_params)
        else:
            val_loss = train_loss
        result.metrics.append({"epoch": epoch, "train_loss": train_loss,
                               "val_loss": val_loss, "lr": opt.lr})
        if out_of_steps:
            break
        opt.lr = sched.observe(val_loss)
        if sched.should_stop:
            break
    return result
