import math

import numpy as np
import pytest

from svmixer import tensor as T
from svmixer.distill import (
    DistillConfig,
    ProjectionHead,
    aam_softmax_loss,
    hard_impostor_penalty,
    l2_normalize,
    mse_distill_loss,
    total_loss,
)
from svmixer.errors import ConfigError, ShapeError
from svmixer.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# independent numpy route through the same formula

def aam_oracle(e, w, label, scale, margin, denom):
    cos = (w / np.linalg.norm(w, axis=1, keepdims=True)) @ (e / np.linalg.norm(e))
    cy = np.clip(cos[label], -1 + 1e-7, 1 - 1e-7)
    phi = cy * math.cos(margin) - math.sqrt(1.0 - cy * cy) * math.sin(margin)
    logits = scale * cos
    target = scale * phi
    mask = np.asarray(denom, dtype=np.float64).copy()
    mask[label] = 0.0
    shift = max(float(logits.max()), target)
    denom_sum = float(np.sum(mask * np.exp(logits - shift)) + math.exp(target - shift))
    return math.log(denom_sum) + shift - target


FOUR_CLASS_W = np.array([[2.0, 0.0, 0.0],
                         [0.0, 1.0, 0.0],
                         [0.0, 0.0, 3.0],
                         [1.0, 1.0, 1.0]])


def test_margin_loss_frozen_value_for_aligned_embedding():
    # embedding exactly parallel to the target row: only the margin and the
    # two weak impostor terms keep the loss above zero
    e = np.array([5.0, 0.0, 0.0])
    loss, cos = aam_softmax_loss(leaf(e), leaf(FOUR_CLASS_W), 0)
    assert abs(float(loss.data) - 5.67849872012971e-06) <= 1e-18
    assert np.allclose(cos, [1.0, 0.0, 0.0, 1.0 / math.sqrt(3.0)], rtol=0, atol=1e-12)


def test_margin_loss_matches_numpy_oracle_on_random_inputs():
    rng = np.random.default_rng(0)
    for trial in range(20):
        c, d = int(rng.integers(2, 8)), int(rng.integers(2, 10))
        w = rng.standard_normal((c, d))
        e = rng.standard_normal(d)
        label = int(rng.integers(c))
        denom = rng.uniform(1.0, 10.0, size=c)
        loss, _ = aam_softmax_loss(leaf(e), leaf(w), label, 30.0, 0.2, denom)
        want = aam_oracle(e, w, label, 30.0, 0.2, denom)
        assert abs(float(loss.data) - want) <= 1e-10


def test_zero_margin_unit_scale_is_plain_cross_entropy():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 5))
    e = rng.standard_normal(5)
    loss, cos = aam_softmax_loss(leaf(e), leaf(w), 2, scale=1.0, margin=0.0)
    shifted = cos - cos.max()
    ce = -math.log(math.exp(shifted[2]) / np.sum(np.exp(shifted)))
    assert abs(float(loss.data) - ce) <= 1e-10


def test_margin_loss_is_scale_invariant_in_the_embedding():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((5, 8))
    e = rng.standard_normal(8)
    base, _ = aam_softmax_loss(leaf(e), leaf(w), 1)
    for alpha in (0.1, 10.0):
        scaled, _ = aam_softmax_loss(leaf(alpha * e), leaf(w), 1)
        assert abs(float(scaled.data) - float(base.data)) <= 1e-8


def test_margin_increases_the_loss():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((5, 8))
    e = rng.standard_normal(8)
    no_margin, _ = aam_softmax_loss(leaf(e), leaf(w), 0, margin=0.0)
    with_margin, _ = aam_softmax_loss(leaf(e), leaf(w), 0, margin=0.2)
    assert float(with_margin.data) > float(no_margin.data)


def test_margin_loss_gradients_pass_finite_differences():
    rng = np.random.default_rng(4)
    w0 = rng.standard_normal((4, 6))
    e0 = rng.standard_normal(6)
    denom = np.array([1.0, 10.0, 1.0, 10.0])

    e, w = leaf(e0), leaf(w0)
    loss, _ = aam_softmax_loss(e, w, 1, 30.0, 0.2, denom)
    loss.backward()

    def f_e(v):
        out, _ = aam_softmax_loss(Tensor(v), Tensor(w0), 1, 30.0, 0.2, denom)
        return float(out.data)

    def f_w(v):
        out, _ = aam_softmax_loss(Tensor(e0), Tensor(v.reshape(4, 6)), 1, 30.0, 0.2, denom)
        return float(out.data)

    num_e = T.finite_difference(f_e, e0)
    num_w = T.finite_difference(f_w, w0.ravel()).reshape(4, 6)
    assert T.relative_error(e.grad, num_e) <= 1e-5
    assert T.relative_error(w.grad, num_w) <= 1e-5


def test_label_out_of_range_and_shape_mismatch_are_rejected():
    w, e = leaf(np.eye(3)), leaf(np.ones(3))
    with pytest.raises(ConfigError):
        aam_softmax_loss(e, w, 3)
    with pytest.raises(ShapeError):
        aam_softmax_loss(leaf(np.ones(4)), w, 0)
    with pytest.raises(ShapeError):
        aam_softmax_loss(e, w, 0, denom_weights=np.ones(5))


# ---------------------------------------------------------------------------
# hard-impostor denominator weights

def test_penalty_marks_top_k_impostors():
    cosines = np.array([[0.9, 0.8, 0.1, 0.2]])
    weights = hard_impostor_penalty(cosines, [0], top_k=2, multiplier=10.0)
    assert np.array_equal(weights, [[1.0, 10.0, 1.0, 10.0]])


def test_penalty_never_marks_the_target_and_marks_exactly_k():
    rng = np.random.default_rng(5)
    for _ in range(30):
        b, c = int(rng.integers(1, 6)), int(rng.integers(3, 9))
        k = int(rng.integers(0, c - 1))
        cosines = rng.uniform(-1, 1, size=(b, c))
        labels = rng.integers(c, size=b).tolist()
        weights = hard_impostor_penalty(cosines, labels, k, 10.0)
        for i, label in enumerate(labels):
            assert weights[i, label] == 1.0
            assert int(np.sum(weights[i] == 10.0)) == k


def test_penalty_is_neutral_for_k_zero_or_unit_multiplier():
    cosines = np.random.default_rng(6).uniform(-1, 1, size=(3, 5))
    assert np.array_equal(hard_impostor_penalty(cosines, [0, 1, 2], 0, 10.0),
                          np.ones((3, 5)))
    assert np.array_equal(hard_impostor_penalty(cosines, [0, 1, 2], 3, 1.0),
                          np.ones((3, 5)))


def test_penalty_changes_the_loss_by_the_expected_amount():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((4, 6))
    e = rng.standard_normal(6)
    denom = np.array([1.0, 10.0, 1.0, 10.0])
    plain, _ = aam_softmax_loss(leaf(e), leaf(w), 0, 30.0, 0.2)
    weighted, _ = aam_softmax_loss(leaf(e), leaf(w), 0, 30.0, 0.2, denom)
    assert abs(float(weighted.data) - aam_oracle(e, w, 0, 30.0, 0.2, denom)) <= 1e-10
    assert float(weighted.data) > float(plain.data)


def test_penalty_rejects_k_larger_than_impostor_count():
    with pytest.raises(ConfigError):
        hard_impostor_penalty(np.zeros((1, 4)), [0], 4, 10.0)


# ---------------------------------------------------------------------------
# regression loss

def test_mse_of_identical_frames_is_zero():
    x = np.random.default_rng(8).standard_normal((7, 5))
    assert float(mse_distill_loss(leaf(x), x).data) == 0.0


def test_mse_matches_numpy_with_projection_head():
    rng = np.random.default_rng(9)
    head = ProjectionHead(5, 8, rng, np.float64)
    student = rng.standard_normal((7, 5))
    teacher = rng.standard_normal((7, 8))
    got = float(mse_distill_loss(leaf(student), teacher, head).data)
    proj = student @ head.weight.data + head.bias.data
    assert abs(got - np.mean((proj - teacher) ** 2)) <= 1e-12


def test_mse_rejects_frame_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_distill_loss(leaf(np.zeros((7, 5))), np.zeros((6, 5)))


def test_mse_gradient_passes_finite_differences():
    rng = np.random.default_rng(10)
    s0 = rng.standard_normal((4, 3))
    teacher = rng.standard_normal((4, 3))
    s = leaf(s0)
    mse_distill_loss(s, teacher).backward()
    num = T.finite_difference(
        lambda v: float(mse_distill_loss(Tensor(v.reshape(4, 3)), teacher).data),
        s0.ravel()).reshape(4, 3)
    assert T.relative_error(s.grad, num) <= 1e-6


# ---------------------------------------------------------------------------
# combined objective

def make_batch(rng, b=3, t=6, h=5, d=4, c=4, teacher_dim=7):
    agg = [leaf(rng.standard_normal((t, h))) for _ in range(b)]
    emb = [leaf(rng.standard_normal(d)) for _ in range(b)]
    teacher = [rng.standard_normal((t, teacher_dim)) for _ in range(b)]
    labels = rng.integers(c, size=b).tolist()
    class_w = leaf(rng.standard_normal((c, d)))
    heads = {"final": ProjectionHead(h, teacher_dim, rng, np.float64)}
    return agg, emb, teacher, labels, class_w, heads


def test_total_is_the_weighted_sum_of_its_parts():
    rng = np.random.default_rng(11)
    agg, emb, teacher, labels, class_w, heads = make_batch(rng)
    cfg = DistillConfig(kd_weight=0.7, cls_weight=2.5, penalty_top_k=2)
    loss, parts = total_loss(agg, emb, teacher, labels, class_w, heads, cfg)
    assert abs(parts["total"] - (0.7 * parts["kd"] + 2.5 * parts["cls"])) <= 1e-12
    assert abs(float(loss.data) - parts["total"]) <= 1e-15
    assert parts["kd"] > 0 and parts["cls"] > 0


def test_total_loss_parts_match_per_sample_recomputation():
    rng = np.random.default_rng(12)
    agg, emb, teacher, labels, class_w, heads = make_batch(rng)
    cfg = DistillConfig(penalty_top_k=2)
    _, parts = total_loss(agg, emb, teacher, labels, class_w, heads, cfg)

    kd = np.mean([
        float(mse_distill_loss(a, t, heads["final"]).data)
        for a, t in zip(agg, teacher)
    ])
    w64 = class_w.data
    cos = np.stack([
        (w64 / np.linalg.norm(w64, axis=1, keepdims=True)) @ (e.data / np.linalg.norm(e.data))
        for e in emb
    ])
    denom = hard_impostor_penalty(cos, labels, 2, 10.0)
    cls = np.mean([
        aam_oracle(e.data, w64, label, 30.0, 0.2, denom[i])
        for i, (e, label) in enumerate(zip(emb, labels))
    ])
    assert abs(parts["kd"] - kd) <= 1e-10
    assert abs(parts["cls"] - cls) <= 1e-10


def test_single_matched_layer_equals_final_state_objective():
    rng = np.random.default_rng(13)
    agg, emb, teacher, labels, class_w, _ = make_batch(rng)
    head_rng = np.random.default_rng(99)
    heads_a = {"final": ProjectionHead(5, 7, head_rng, np.float64)}
    head_rng = np.random.default_rng(99)
    heads_b = {"layer3": ProjectionHead(5, 7, head_rng, np.float64)}

    cfg_a = DistillConfig(mode="final_state", penalty_top_k=2)
    cfg_b = DistillConfig(mode="multi_head", matched_teacher_layers=(3,),
                          penalty_top_k=2)
    _, parts_a = total_loss(agg, emb, teacher, labels, class_w, heads_a, cfg_a)
    _, parts_b = total_loss(agg, emb, [{3: t} for t in teacher],
                            labels, class_w, heads_b, cfg_b)
    assert abs(parts_a["kd"] - parts_b["kd"]) <= 1e-12
    assert abs(parts_a["total"] - parts_b["total"]) <= 1e-12


def test_multi_head_kd_averages_over_matched_layers():
    rng = np.random.default_rng(14)
    agg, emb, teacher, labels, class_w, _ = make_batch(rng)
    layers = (2, 5)
    heads = {f"layer{j}": ProjectionHead(5, 7, rng, np.float64) for j in layers}
    teacher_dicts = [{j: t + j for j in layers} for t in teacher]

    cfg = DistillConfig(mode="multi_head", matched_teacher_layers=layers,
                        penalty_top_k=2)
    _, parts = total_loss(agg, emb, teacher_dicts, labels, class_w, heads, cfg)
    want = np.mean([
        np.mean([
            float(mse_distill_loss(a, td[j], heads[f"layer{j}"]).data)
            for j in layers
        ])
        for a, td in zip(agg, teacher_dicts)
    ])
    assert abs(parts["kd"] - want) <= 1e-10


def test_utterance_scope_multiplies_the_hardest_samples():
    rng = np.random.default_rng(15)
    agg, emb, teacher, labels, class_w, heads = make_batch(rng, b=4)
    cfg = DistillConfig(penalty_scope="utterance", penalty_top_k=1)
    _, parts = total_loss(agg, emb, teacher, labels, class_w, heads, cfg)

    w64 = class_w.data
    cos = np.stack([
        (w64 / np.linalg.norm(w64, axis=1, keepdims=True)) @ (e.data / np.linalg.norm(e.data))
        for e in emb
    ])
    per_sample = [
        aam_oracle(e.data, w64, label, 30.0, 0.2, np.ones(4))
        for e, label in zip(emb, labels)
    ]
    confusion = cos.copy()
    for i, label in enumerate(labels):
        confusion[i, label] = -np.inf
    hardest = int(np.argmax(confusion.max(axis=1)))
    per_sample[hardest] *= 10.0
    assert abs(parts["cls"] - np.mean(per_sample)) <= 1e-10


def test_teacher_arrays_are_never_modified():
    rng = np.random.default_rng(16)
    agg, emb, teacher, labels, class_w, heads = make_batch(rng)
    frozen = [t.copy() for t in teacher]
    loss, _ = total_loss(agg, emb, teacher, labels, class_w, heads,
                         DistillConfig(penalty_top_k=2))
    loss.backward()
    for before, after in zip(frozen, teacher):
        assert np.array_equal(before, after)
    assert class_w.grad is not None and heads["final"].weight.grad is not None


def test_batch_piece_mismatch_is_rejected():
    rng = np.random.default_rng(17)
    agg, emb, teacher, labels, class_w, heads = make_batch(rng)
    with pytest.raises(ShapeError):
        total_loss(agg[:-1], emb, teacher, labels, class_w, heads,
                   DistillConfig(penalty_top_k=2))


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(mode="contrastive")
    with pytest.raises(ConfigError):
        DistillConfig(mode="multi_head")  # needs matched layers
    with pytest.raises(ConfigError):
        DistillConfig(penalty_multiplier=0.5)
    with pytest.raises(ConfigError):
        DistillConfig(aam_margin=math.pi)
    with pytest.raises(ConfigError):
        DistillConfig(penalty_scope="batch")


def test_l2_normalize_gives_unit_vectors():
    v = leaf(np.array([3.0, 4.0]))
    out = l2_normalize(v).data
    assert np.allclose(out, [0.6, 0.8], rtol=0, atol=1e-15)
