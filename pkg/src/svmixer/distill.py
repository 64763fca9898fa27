"""Distillation and classification losses.

The training objective is a weighted sum of a hidden-state regression loss
against frozen teacher features and an additive-angular-margin softmax over
speaker classes, with the hardest impostor classes per sample up-weighted in
the softmax denominator. Teacher features enter as plain arrays, so no
gradient can reach them by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# cos(theta) is clamped to [-1 + eps, 1 - eps] before the angle is used
AAM_COS_EPS = 1e-7


@dataclass
class DistillConfig:
    mode: str = "final_state"              # or "multi_head"
    matched_teacher_layers: tuple = ()     # teacher layer indices, multi_head only
    kd_weight: float = 1.0
    cls_weight: float = 1.0
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    penalty_top_k: int = 5
    penalty_multiplier: float = 10.0
    penalty_scope: str = "class"           # or "utterance"

    def __post_init__(self):
        if self.mode not in ("final_state", "multi_head"):
            raise ConfigError(f"unknown distillation mode {self.mode!r}")
        if self.penalty_scope not in ("class", "utterance"):
            raise ConfigError(f"unknown penalty_scope {self.penalty_scope!r}")
        if self.mode == "multi_head" and not self.matched_teacher_layers:
            raise ConfigError("multi_head mode needs matched_teacher_layers")
        if self.aam_scale <= 0:
            raise ConfigError(f"aam_scale must be positive, got {self.aam_scale}")
        if not 0.0 <= self.aam_margin < math.pi / 2:
            raise ConfigError(f"aam_margin must be in [0, pi/2), got {self.aam_margin}")
        if self.penalty_top_k < 0:
            raise ConfigError(f"penalty_top_k must be >= 0, got {self.penalty_top_k}")
        if self.penalty_multiplier < 1.0:
            raise ConfigError(
                f"penalty_multiplier must be >= 1, got {self.penalty_multiplier}"
            )


class ProjectionHead:
    """Single linear map used to match student width to teacher width."""

    def __init__(self, d_in: int, d_out: int, rng, dtype):
        self.d_in = d_in
        self.d_out = d_out
        data = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)).astype(dtype)
        self.weight = Tensor(data, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def apply(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


def mse_distill_loss(student: Tensor, teacher: np.ndarray,
                     head: ProjectionHead | None = None) -> Tensor:
    """Mean squared error between (optionally projected) student frames and
    frozen teacher frames, averaged over every element."""
    if head is not None:
        student = head.apply(student)
    teacher = np.asarray(teacher)
    if student.data.shape != teacher.shape:
        raise ShapeError(
            f"student frames {student.data.shape} do not match teacher frames {teacher.shape}"
        )
    diff = T.sub(student, Tensor(teacher.astype(student.data.dtype)))
    return T.tmean(T.mul(diff, diff))


def l2_normalize(v: Tensor) -> Tensor:
    norm = T.sqrt(T.tsum(T.mul(v, v)))
    return T.div(v, norm)


def aam_softmax_loss(embedding: Tensor, class_weights: Tensor, label: int,
                     scale: float = 30.0, margin: float = 0.2,
                     denom_weights: np.ndarray | None = None):
    """Additive-angular-margin softmax loss for one sample.

    Both the embedding and every class weight row are L2-normalized; the
    target logit uses cos(theta + margin), every logit is scaled by `scale`.
    `denom_weights` (length C, target entry ignored) multiplies the
    non-target exponentials in the denominator.

    Returns (loss, cosines) where cosines is the detached [C] array of raw
    cosine similarities.
    """
    c_classes, dim = class_weights.data.shape
    if embedding.data.shape != (dim,):
        raise ShapeError(
            f"embedding shape {embedding.data.shape} does not match class weights "
            f"{class_weights.data.shape}"
        )
    if not 0 <= label < c_classes:
        raise ConfigError(f"label {label} out of range for {c_classes} classes")

    dtype = embedding.data.dtype
    e = l2_normalize(embedding)
    w_sq = T.tsum(T.mul(class_weights, class_weights), axis=1)
    inv_w = T.div(Tensor(np.asarray(1.0, dtype=dtype)), T.sqrt(w_sq))
    cos = T.mul(T.reshape(T.matmul(class_weights, T.reshape(e, (dim, 1))), (c_classes,)), inv_w)

    cos_y = T.reshape(T.narrow(cos, 0, label, 1), ())
    cos_y = T.clamp(cos_y, -1.0 + AAM_COS_EPS, 1.0 - AAM_COS_EPS)
    sin_y = T.sqrt(T.sub(Tensor(np.asarray(1.0, dtype=dtype)), T.mul(cos_y, cos_y)))
    # cos(theta + m) expanded so no angle op is needed
    phi = T.sub(T.mul(cos_y, Tensor(np.asarray(math.cos(margin), dtype=dtype))),
                T.mul(sin_y, Tensor(np.asarray(math.sin(margin), dtype=dtype))))

    target_logit = T.mul(phi, Tensor(np.asarray(scale, dtype=dtype)))
    logits = T.mul(cos, Tensor(np.asarray(scale, dtype=dtype)))

    if denom_weights is None:
        denom_weights = np.ones(c_classes, dtype=np.float64)
    denom_weights = np.asarray(denom_weights, dtype=np.float64)
    if denom_weights.shape != (c_classes,):
        raise ShapeError(
            f"denominator weights shape {denom_weights.shape} must be ({c_classes},)"
        )

    impostor_mask = np.ones(c_classes, dtype=np.float64)
    impostor_mask[label] = 0.0
    # constant shift keeps the exponentials in range; it cancels exactly
    shift = float(max(float(logits.data.max()), float(target_logit.data)))
    shift_t = Tensor(np.asarray(shift, dtype=dtype))

    imp_terms = T.mul(T.exp(T.sub(logits, shift_t)),
                      Tensor((impostor_mask * denom_weights).astype(dtype)))
    denom = T.add(T.tsum(imp_terms), T.exp(T.sub(target_logit, shift_t)))
    loss = T.sub(T.add(T.log(denom), shift_t), target_logit)
    return loss, cos.data.astype(np.float64).copy()


def hard_impostor_penalty(cosines: np.ndarray, labels, top_k: int,
                          multiplier: float) -> np.ndarray:
    """Denominator weight matrix: per sample, the top_k highest-cosine
    non-target classes get `multiplier`, everything else 1."""
    cosines = np.asarray(cosines, dtype=np.float64)
    if cosines.ndim != 2:
        raise ShapeError(f"cosines must be [batch, classes], got shape {cosines.shape}")
    b, c = cosines.shape
    labels = list(labels)
    if len(labels) != b:
        raise ShapeError(f"{len(labels)} labels for batch of {b}")
    if top_k > c - 1:
        raise ConfigError(f"penalty_top_k={top_k} exceeds impostor count {c - 1}")
    weights = np.ones((b, c), dtype=np.float64)
    if top_k == 0 or multiplier == 1.0:
        return weights
    for i, label in enumerate(labels):
        masked = cosines[i].copy()
        masked[label] = -np.inf
        # ties broken by class index (argsort is stable on the reversed sign)
        hard = np.argsort(-masked, kind="stable")[:top_k]
        weights[i, hard] = multiplier
    return weights


def total_loss(agg_batch: list[Tensor], emb_batch: list[Tensor], teacher_batch: list,
               labels: list[int], class_weights: Tensor,
               heads: dict[str, ProjectionHead], cfg: DistillConfig):
    """Combined objective over a batch.

    agg_batch: per-sample aggregated frames [T, H];
    emb_batch: per-sample embeddings [D];
    teacher_batch: per-sample teacher features, an array in final_state mode
      or a {layer_index: array} dict in multi_head mode;
    heads: projection heads keyed "final" or "layer<i>".

    Returns (loss, parts) with parts = {"kd": float, "cls": float, "total": float}.
    """
    b = len(agg_batch)
    if not (b == len(emb_batch) == len(teacher_batch) == len(labels)):
        raise ShapeError(
            f"batch pieces disagree: {b} frames, {len(emb_batch)} embeddings, "
            f"{len(teacher_batch)} teacher entries, {len(labels)} labels"
        )
    dtype = emb_batch[0].data.dtype
    inv_b = Tensor(np.asarray(1.0 / b, dtype=dtype))

    kd_terms = []
    for agg, teacher in zip(agg_batch, teacher_batch):
        if cfg.mode == "final_state":
            kd_terms.append(mse_distill_loss(agg, teacher, heads.get("final")))
        else:
            layer_losses = [
                mse_distill_loss(agg, teacher[layer], heads.get(f"layer{layer}"))
                for layer in cfg.matched_teacher_layers
            ]
            acc = layer_losses[0]
            for extra in layer_losses[1:]:
                acc = T.add(acc, extra)
            kd_terms.append(T.mul(acc, Tensor(
                np.asarray(1.0 / len(layer_losses), dtype=dtype))))
    kd = kd_terms[0]
    for extra in kd_terms[1:]:
        kd = T.add(kd, extra)
    kd = T.mul(kd, inv_b)

    cosines = np.stack([
        _raw_cosines(emb, class_weights) for emb in emb_batch
    ])
    if cfg.penalty_scope == "class":
        denom = hard_impostor_penalty(
            cosines, labels, cfg.penalty_top_k, cfg.penalty_multiplier)
    else:
        denom = np.ones_like(cosines)

    cls_terms = []
    for i, (emb, label) in enumerate(zip(emb_batch, labels)):
        loss_i, _ = aam_softmax_loss(
            emb, class_weights, label, cfg.aam_scale, cfg.aam_margin, denom[i])
        cls_terms.append(loss_i)

    if cfg.penalty_scope == "utterance" and cfg.penalty_top_k > 0 and b > 1:
        # hardest = highest impostor cosine anywhere in the row
        confusion = cosines.copy()
        for i, label in enumerate(labels):
            confusion[i, label] = -np.inf
        hard = np.argsort(-confusion.max(axis=1), kind="stable")[:cfg.penalty_top_k]
        mult = Tensor(np.asarray(cfg.penalty_multiplier, dtype=dtype))
        cls_terms = [
            T.mul(term, mult) if i in set(hard.tolist()) else term
            for i, term in enumerate(cls_terms)
        ]

    cls = cls_terms[0]
    for extra in cls_terms[1:]:
        cls = T.add(cls, extra)
    cls = T.mul(cls, inv_b)

    total = T.add(T.mul(kd, Tensor(np.asarray(cfg.kd_weight, dtype=dtype))),
                  T.mul(cls, Tensor(np.asarray(cfg.cls_weight, dtype=dtype))))
    parts = {"kd": float(kd.data), "cls": float(cls.data), "total": float(total.data)}
    return total, parts


def _raw_cosines(embedding: Tensor, class_weights: Tensor) -> np.ndarray:
    e = embedding.data.astype(np.float64)
    w = class_weights.data.astype(np.float64)
    e = e / np.linalg.norm(e)
    w = w / np.linalg.norm(w, axis=1, keepdims=True)
    return w @ e
