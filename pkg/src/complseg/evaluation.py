"""Decoding, dice, confusion matrices, Wilcoxon tests and metric reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInput, ShapeMismatch, TooFewPairs
from .labels import BACKGROUND_NAME, ClassCatalog

EXACT_MAX_N = 25


def argmax_decode(
    probs: np.ndarray,
    tau: float = 0.5,
    has_background_channel: bool = False,
    background_id: int = 255,
) -> np.ndarray:
    """Class-id map from a ... x C probability stack.

    Without a background channel the winning class must reach ``tau``,
    otherwise the pixel is background. With one (always the last channel),
    plain argmax decides and ``tau`` is unused. Ties go to the lowest index.
    """
    probs = np.asarray(probs)
    if probs.ndim < 1 or probs.shape[-1] < 1:
        raise ShapeMismatch(f"bad probability stack shape {probs.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    winner = np.argmax(probs, axis=-1)
    if has_background_channel:
        n_fg = probs.shape[-1] - 1
        return np.where(winner == n_fg, background_id, winner).astype(np.int64)
    best = np.take_along_axis(probs, winner[..., None], axis=-1)[..., 0]
    return np.where(best >= tau, winner, background_id).astype(np.int64)


def ensemble_merge(probs: np.ndarray, tau: float = 0.5, background_id: int = 255) -> np.ndarray:
    return argmax_decode(probs, tau, has_background_channel=False, background_id=background_id)


def dice_image(pred: np.ndarray, gt: np.ndarray, class_id: int | None = None) -> float:
    """Dice of one class in one image; 1.0 when the class is absent from both.

    ``pred`` is a class-id map. ``gt`` is either a boolean mask or, when
    ``class_id`` is given and ``gt`` is not boolean, a class-id map.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred == class_id
    g = gt if gt.dtype == bool else gt == class_id
    size = int(p.sum()) + int(g.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / size


def dice_class_average(dices: Sequence[float]) -> float:
    if len(dices) == 0:
        raise EmptyInput("no per-image dice scores")
    return float(np.mean(np.asarray(dices, dtype=np.float64)))


def mean_dice(class_averages: Sequence[float]) -> float:
    if len(class_averages) == 0:
        raise EmptyInput("no per-class averages")
    return float(np.mean(np.asarray(class_averages, dtype=np.float64)))


def confusion_matrix(
    preds: np.ndarray,
    gts: np.ndarray,
    n_classes: int,
    background_id: int = 255,
    labeled: np.ndarray | None = None,
) -> np.ndarray:
    """(C+1) x (C+1) pixel counts, rows = ground truth, last row/col = background.

    Pixels where ``labeled`` is False are excluded.
    """
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ShapeMismatch(f"predictions {preds.shape} vs ground truth {gts.shape}")

    def index(a):
        is_bg = a == background_id
        if not (is_bg | ((a >= 0) & (a < n_classes))).all():
            raise ValueError("class id outside catalog")
        return np.where(is_bg, n_classes, a)

    g, p = index(gts), index(preds)
    if labeled is not None:
        keep = np.asarray(labeled, dtype=bool)
        if keep.shape != gts.shape:
            raise ShapeMismatch("labeled mask shape differs from ground truth")
        g, p = g[keep], p[keep]
    k = n_classes + 1
    return np.bincount(g.ravel() * k + p.ravel(), minlength=k * k).reshape(k, k).astype(np.int64)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


def _rank_abs(diffs: np.ndarray) -> np.ndarray:
    """Average ranks of |d| (1-based)."""
    a = np.abs(diffs)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: np.ndarray, doubled_w: int) -> float:
    """Two-sided p from the exact null of the positive-rank sum.

    Ranks are doubled so tied (half-integer) ranks stay integral; the null
    counts sign assignments by dynamic programming over achievable sums.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    pmf = counts / counts.sum()
    lower = pmf[: doubled_w + 1].sum()
    upper = pmf[doubled_w:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_signed_rank(
    scores_a: Sequence[float], scores_b: Sequence[float], min_pairs: int = 5
) -> float:
    """Two-sided paired Wilcoxon signed-rank p-value.

    Zero differences are dropped before ranking, ties get average ranks.
    Exact null distribution for n <= 25, otherwise the normal approximation
    with tie-corrected variance and continuity correction.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch("paired score lists must be 1-d and equally long")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < min_pairs:
        raise TooFewPairs(f"{n} non-zero differences, need at least {min_pairs}")
    ranks = _rank_abs(d)
    w_plus = ranks[d > 0].sum()
    if n <= EXACT_MAX_N:
        return _exact_p(np.rint(2 * ranks), int(round(2 * w_plus)))

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    dev = w_plus - mean
    if dev == 0:
        return 1.0
    z = abs(abs(dev) - 0.5) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def significance_level(p: float) -> str:
    if p < 0.01:
        return "strong"
    if p < 0.05:
        return "significant"
    return "none"


# ---------------------------------------------------------------------------
# reports


@dataclass
class TrialMetrics:
    per_image: dict[str, list[float]]  # class name -> dice per image
    class_average: dict[str, float]
    mean_dice: float
    confusion: np.ndarray
    frame_ids: list[str] = field(default_factory=list)

    @property
    def confusion_normalized(self) -> np.ndarray:
        return normalize_rows(self.confusion)

    def to_dict(self) -> dict:
        return {
            "frame_ids": list(self.frame_ids),
            "per_image_dice": {k: [float(x) for x in v] for k, v in self.per_image.items()},
            "class_average": {k: float(v) for k, v in self.class_average.items()},
            "mean_dice": float(self.mean_dice),
            "confusion": self.confusion.tolist(),
            "confusion_normalized": [[round(float(x), 12) for x in row] for row in self.confusion_normalized],
        }


@dataclass
class MetricsReport:
    classes: list[str]  # row/column order of the confusion matrices
    trials: dict[str, TrialMetrics]
    significance: list[dict] | None = None

    def to_dict(self) -> dict:
        d = {
            "classes": list(self.classes),
            "trials": {name: t.to_dict() for name, t in self.trials.items()},
        }
        if self.significance is not None:
            d["significance"] = self.significance
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def table(self) -> str:
        names = list(next(iter(self.trials.values())).class_average) if self.trials else []
        lines = ["trial\t" + "\t".join(names) + "\tmean"]
        for trial, m in self.trials.items():
            cells = [f"{m.class_average[c]:.3f}" for c in names]
            lines.append(f"{trial}\t" + "\t".join(cells) + f"\t{m.mean_dice:.3f}")
        return "\n".join(lines) + "\n"


def trial_metrics(
    preds: np.ndarray,
    gts: np.ndarray,
    catalog: ClassCatalog,
    include_background: bool = False,
    frame_ids: Sequence[str] = (),
) -> TrialMetrics:
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ShapeMismatch(f"predictions {preds.shape} vs ground truth {gts.shape}")
    if len(preds) == 0:
        raise EmptyInput("no frames to evaluate")
    targets = [(c, i) for i, c in enumerate(catalog.classes)]
    if include_background:
        targets.append((BACKGROUND_NAME, catalog.background_id))
    per_image = {
        name: [dice_image(p, g == cid, cid) for p, g in zip(preds, gts)] for name, cid in targets
    }
    averages = {name: dice_class_average(v) for name, v in per_image.items()}
    return TrialMetrics(
        per_image,
        averages,
        mean_dice(list(averages.values())),
        confusion_matrix(preds, gts, len(catalog), catalog.background_id),
        list(frame_ids),
    )


def build_report(
    trial_preds: Mapping[str, np.ndarray],
    gts: np.ndarray,
    catalog: ClassCatalog,
    comparisons: Sequence[tuple[str, str]] = (),
    include_background: bool = False,
    frame_ids: Sequence[str] = (),
) -> MetricsReport:
    """Metrics for every trial plus per-class and pooled significance tests."""
    trials = {
        name: trial_metrics(p, gts, catalog, include_background, frame_ids)
        for name, p in trial_preds.items()
    }
    significance = None
    if comparisons:
        significance = []
        for a, b in comparisons:
            ta, tb = trials[a], trials[b]
            for cls in ta.per_image:
                significance.append(_compare(a, b, cls, ta.per_image[cls], tb.per_image[cls]))
            pooled_a = [x for cls in ta.per_image for x in ta.per_image[cls]]
            pooled_b = [x for cls in tb.per_image for x in tb.per_image[cls]]
            significance.append(_compare(a, b, "mean", pooled_a, pooled_b))
    return MetricsReport(
        list(catalog.classes) + [BACKGROUND_NAME], trials, significance
    )


def _compare(a: str, b: str, target: str, xs, ys) -> dict:
    entry = {"pair": [a, b], "target": target}
    try:
        p = wilcoxon_signed_rank(xs, ys)
    except TooFewPairs as exc:
        entry.update(p_value=None, level="undetermined", note=str(exc))
        return entry
    entry.update(p_value=p, level=significance_level(p))
    return entry
