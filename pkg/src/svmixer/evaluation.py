"""Trial scoring and detection metrics.

EER is the crossing of the false-accept and false-reject rates on the
convex hull of the achievable operating points; randomized interpolation
between two thresholds is a legal operating point, so the hull crossing is
the canonical equal-error value (and is always <= 0.5). MinDCF sweeps raw
thresholds only, no interpolation, normalized by the better of the two
trivial systems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str | None = None  # "target" | "impostor" | None


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine score undefined for a zero embedding")
    return float(np.dot(a, b) / (na * nb))


def _operating_points(target_scores, impostor_scores):
    """(far, frr, threshold) arrays over every decision threshold.

    Accept means score >= threshold. Candidate thresholds are the observed
    score values (the lowest one is the accept-all system) plus one value
    above the maximum for the reject-all system.
    """
    tar = np.asarray(target_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if tar.size == 0 or imp.size == 0:
        raise DataError("need at least one target and one impostor trial")
    if not (np.isfinite(tar).all() and np.isfinite(imp).all()):
        raise DataError("trial scores must be finite")
    thresholds = np.unique(np.concatenate([tar, imp]))
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = (imp[None, :] >= thresholds[:, None]).mean(axis=1)
    frr = (tar[None, :] < thresholds[:, None]).mean(axis=1)
    return far, frr, thresholds


def _lower_hull(points):
    """Lower-left convex hull of (far, frr, thr) points, far ascending."""
    pts = sorted(points)
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1, _), (x2, y2, _) = hull[-2], hull[-1]
            # pop the middle point unless the boundary turns left through it
            if (x2 - x1) * (p[1] - y1) - (p[0] - x1) * (y2 - y1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(target_scores, impostor_scores) -> EerResult:
    """Equal error rate: linear interpolation between the two adjacent hull
    operating points where the rates cross."""
    far, frr, thr = _operating_points(target_scores, impostor_scores)
    hull = _lower_hull(list(zip(far.tolist(), frr.tolist(), thr.tolist())))
    # along the hull far - frr rises from -1 toward +1, so exactly one
    # sign change exists
    for i in range(len(hull) - 1):
        d0 = hull[i][0] - hull[i][1]
        d1 = hull[i + 1][0] - hull[i + 1][1]
        if d0 == 0.0:
            return EerResult(hull[i][0], hull[i][2])
        if d0 < 0.0 <= d1:
            t = -d0 / (d1 - d0)
            rate = hull[i][0] + t * (hull[i + 1][0] - hull[i][0])
            threshold = hull[i][2] + t * (hull[i + 1][2] - hull[i][2])
            return EerResult(rate, threshold)
    raise DataError("no equal-error crossing found in operating points")


def min_dcf(target_scores, impostor_scores, p_target: float = 0.05,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over raw thresholds."""
    if not 0.0 < p_target < 1.0:
        raise DataError(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0.0 or c_fa <= 0.0:
        raise DataError(f"costs must be positive, got c_miss={c_miss}, c_fa={c_fa}")
    far, frr, _ = _operating_points(target_scores, impostor_scores)
    costs = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    floor = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(costs.min() / floor)


# ---------------------------------------------------------------------------
# trial lists

def read_trials(path) -> list[Trial]:
    """Parse 'enroll test [label]' lines, '#' comments and blanks ignored."""
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) == 2:
                trials.append(Trial(parts[0], parts[1]))
            elif len(parts) == 3:
                if parts[2] not in ("target", "impostor"):
                    raise DataError(
                        f"{path}:{lineno}: label must be 'target' or 'impostor', "
                        f"got {parts[2]!r}"
                    )
                trials.append(Trial(parts[0], parts[1], parts[2]))
            else:
                raise DataError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
    if not trials:
        raise DataError(f"{path}: no trials found")
    return trials


def score_lines(trials: list[Trial], scores: list[float]) -> str:
    """Stable 'enroll test score' text for a scored trial list."""
    if len(trials) != len(scores):
        raise DataError(f"{len(trials)} trials but {len(scores)} scores")
    return "".join(
        f"{t.enroll_id} {t.test_id} {s:.10f}\n" for t, s in zip(trials, scores)
    )
