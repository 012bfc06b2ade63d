"""Masked, positive-weighted binary cross-entropy and positive-weight schemes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import PixelStats
from .errors import NoPositives, NotFullyLabeled, ShapeMismatch
from .labels import State

WEIGHT_MIN = 1e-3
WEIGHT_MAX = 1e4


@dataclass(frozen=True)
class PositiveWeights:
    channels: tuple[str, ...]
    values: np.ndarray  # float64, one per channel
    scheme: str  # "IL", "EN-member" or "FS"
    background: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.channels),):
            raise ValueError("one weight per channel required")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"weights must be finite and non-negative, got {v}")
        object.__setattr__(self, "values", v)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=dtype)

    def to_dict(self) -> dict:
        d = {"scheme": self.scheme, "weights": dict(zip(self.channels, map(float, self.values)))}
        if self.background is not None:
            d["background"] = self.background
        return d


@dataclass
class LossBreakdown:
    per_class: torch.Tensor  # C, zero where the class had no valid pixels
    valid_counts: torch.Tensor  # C, int64
    total: torch.Tensor  # scalar


def masked_weighted_bce(
    logits: torch.Tensor,
    states,
    weights: PositiveWeights | torch.Tensor | np.ndarray,
) -> LossBreakdown:
    """Per-class BCE over pixels whose state is not IGNORE.

    ``logits`` is B x H x W x C (any leading layout works as long as channels
    are last); ``states`` holds POS/NEG/IGNORE with the same shape. Each
    class loss is the batch sum divided by the batch size and by the number
    of valid pixels of that class; the total is the mean over classes that
    had at least one valid pixel.
    """
    states = torch.as_tensor(states)
    if logits.shape != states.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs states {tuple(states.shape)}")
    if isinstance(weights, PositiveWeights):
        w = weights.as_tensor(logits.dtype)
    else:
        w = torch.as_tensor(weights, dtype=logits.dtype)
    n_classes = logits.shape[-1]
    if w.shape != (n_classes,):
        raise ShapeMismatch(f"{w.numel()} weights for {n_classes} classes")

    batch = logits.shape[0]
    valid = states != State.IGNORE
    target = (states == State.POS).to(logits.dtype)
    # -[w*y*log(sigmoid z) + (1-y)*log(1-sigmoid z)], log-sigmoid keeps both branches finite
    per_pixel = -(w * target * F.logsigmoid(logits) + (1 - target) * F.logsigmoid(-logits))
    per_pixel = torch.where(valid, per_pixel, torch.zeros_like(per_pixel))

    reduce_dims = tuple(range(logits.ndim - 1))
    sums = per_pixel.sum(dim=reduce_dims)
    counts = valid.sum(dim=reduce_dims)
    active = counts > 0
    per_class = torch.where(
        active, sums / (batch * counts.clamp(min=1).to(logits.dtype)), torch.zeros_like(sums)
    )
    if active.any():
        total = per_class[active].mean()
    else:
        total = per_pixel.sum()  # exact zero, still attached to the graph
    return LossBreakdown(per_class, counts, total)


def _ratio(neg: np.ndarray, pos: np.ndarray, channels) -> np.ndarray:
    for i, p in enumerate(pos):
        if p <= 0:
            raise NoPositives(channels[i])
    return np.clip(neg / pos, WEIGHT_MIN, WEIGHT_MAX)


def pos_weight_il(stats: PixelStats) -> PositiveWeights:
    """Negative-to-positive ratio where positives of other classes count as negatives."""
    pos = stats.pos.astype(np.float64)
    neg = (stats.neg + stats.implied_neg).astype(np.float64)
    return PositiveWeights(stats.channels, _ratio(neg, pos, stats.channels), "IL")


def pos_weight_en(stats: PixelStats, class_name: str) -> PositiveWeights:
    """Weight of a single-class ensemble member from its own annotated pixels."""
    c = stats.channels.index(class_name)
    # implied negatives are deliberately left out: a member sees only its own subset
    pos = np.array([stats.pos[c]], dtype=np.float64)
    neg = np.array([stats.neg[c]], dtype=np.float64)
    return PositiveWeights((class_name,), _ratio(neg, pos, (class_name,)), "EN-member", background=1.0)


def pos_weight_fs(stats: PixelStats) -> PositiveWeights:
    """Softmax over the negated positive-pixel shares of each channel."""
    if np.any(stats.ignore > 0) or np.any(stats.implied_neg > 0):
        raise NotFullyLabeled("FS weights need fully labeled statistics")
    totals = stats.total.astype(np.float64)
    shares = stats.pos / totals
    z = -shares
    e = np.exp(z - z.max())
    return PositiveWeights(stats.channels, e / e.sum(), "FS")

