"""Training of the IL, IL-mask-only, EN-member and FS trials."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import torch

from .data import (
    DatasetManifest,
    FrameTable,
    compute_pixel_stats,
    iter_batches,
    load_frame,
    materialize,
)
from .errors import ConfigError, MissingSubset, NotFullyLabeled, TrainingDiverged
from .evaluation import argmax_decode, dice_image, ensemble_merge
from .labels import demote_implied, select_channels, with_background_channel
from .loss import PositiveWeights, masked_weighted_bce, pos_weight_en, pos_weight_fs, pos_weight_il
from .model import EnsembleBundle, SegModel, build_model, ensemble_forward, make_bundle, save_checkpoint

log = logging.getLogger(__name__)

TRIALS = ("IL", "EN", "FS", "IL-mask-only")
_TRIAL_ALIASES = {
    "il": "IL",
    "en": "EN",
    "fs": "FS",
    "il-maskonly": "IL-mask-only",
    "il-mask-only": "IL-mask-only",
    "il_mask_only": "IL-mask-only",
}


def normalize_trial(name: str) -> str:
    if name in TRIALS:
        return name
    try:
        return _TRIAL_ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown trial {name!r}; choose from {TRIALS}") from None


@dataclass
class TrainConfig:
    trial: str = "IL"
    epochs: int = 30
    lr: float = 3e-4
    gamma: float = 0.9
    step_epochs: int = 10
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    seed: int = 0
    tau: float = 0.5
    depth: int = 3
    width: int = 16
    mixed_batches: bool = True
    background_channel: bool = True  # FS only
    subsets: tuple[str, ...] | None = None
    member_class: str | None = None  # EN only, set by train_ensemble

    def __post_init__(self):
        self.trial = normalize_trial(self.trial)
        self.betas = tuple(self.betas)
        if self.subsets is not None:
            self.subsets = tuple(self.subsets)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if self.step_epochs < 1 or self.batch_size < 1:
            raise ConfigError("step_epochs and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.subsets is not None:
            d["subsets"] = list(self.subsets)
        return d


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step schedule: multiply by gamma every ``step_epochs`` epochs (epochs count from 0)."""
    return config.lr * config.gamma ** (epoch // config.step_epochs)


@dataclass
class TrainReport:
    trial: str
    config: dict
    channels: list[str]
    subsets: list[str]
    weights: dict
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    selected_epoch: int = -1
    checkpoint: str | None = None

    @property
    def best_val_dice(self) -> float:
        return self.val_dice[self.selected_epoch]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class TrainResult:
    report: TrainReport
    model: SegModel
    checkpoint: bytes


# ---------------------------------------------------------------------------
# trial setup


@dataclass
class _TrialData:
    subsets: list[str]
    channels: tuple[str, ...]
    transform: object
    weights: PositiveWeights
    scheme: str


def _default_subsets(manifest: DatasetManifest, trial: str) -> list[str]:
    if trial == "FS":
        full = manifest.full_subsets()
        if not full:
            raise NotFullyLabeled("FS needs a fully labeled subset; manifest has only partial ones")
        return [s.name for s in full]
    binary = manifest.binary_subsets()
    return [s.name for s in (binary or manifest.subsets)]


def _member_subset(manifest: DatasetManifest, class_name: str) -> str:
    for s in manifest.subsets:
        if s.annotated_classes == (class_name,):
            return s.name
    raise MissingSubset(f"no binary subset for class {class_name!r}")


def _prepare(config: TrainConfig, manifest: DatasetManifest) -> _TrialData:
    catalog = manifest.catalog
    trial = config.trial
    if trial == "EN":
        if config.member_class is None:
            raise ConfigError("EN trains one member per call; set member_class or use train_ensemble")
        c = catalog.index(config.member_class)
        subsets = list(config.subsets or [_member_subset(manifest, config.member_class)])
        transform = lambda v: select_channels(v, [c])  # noqa: E731
        stats = compute_pixel_stats(manifest, "train", subsets, transform)
        weights = pos_weight_en(stats, config.member_class)
        return _TrialData(subsets, (config.member_class,), transform, weights, "EN-member")

    subsets = list(config.subsets or _default_subsets(manifest, trial))
    if trial == "FS":
        for name in subsets:
            sub = manifest.subset(name)
            for f in sub.frames:
                if set(f.masks) != set(catalog.classes):
                    raise NotFullyLabeled(
                        f"FS needs fully labeled frames; {name}/{f.frame_id} has {sorted(f.masks)}"
                    )
        transform = with_background_channel if config.background_channel else None
        stats = compute_pixel_stats(manifest, "train", subsets, transform)
        return _TrialData(subsets, stats.channels, transform, pos_weight_fs(stats), "FS")

    transform = demote_implied if trial == "IL-mask-only" else None
    stats = compute_pixel_stats(manifest, "train", subsets, transform)
    weights = pos_weight_il(stats)
    return _TrialData(subsets, catalog.classes, transform, weights, trial)


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValSet:
    """Validation frames grouped by subset; shared images are stored once."""

    images: np.ndarray  # U x H x W x 3 uint8
    items: list[tuple[str, int, dict[int, np.ndarray]]]  # subset, image index, class id -> mask


def build_valset(manifest: DatasetManifest, subsets: Sequence[str], split: str = "val") -> ValSet:
    index: dict[str, int] = {}
    images = []
    items = []
    for name in subsets:
        for entry in manifest.subset(name).split_frames(split):
            key = str(entry.image)
            frame = load_frame(entry)
            if key not in index:
                index[key] = len(images)
                images.append(frame.image)
            masks = {manifest.catalog.index(c): m for c, m in frame.masks.items()}
            items.append((name, index[key], masks))
    if not items:
        raise ConfigError(f"no {split!r} frames in subsets {list(subsets)}")
    return ValSet(np.stack(images), items)


@torch.no_grad()
def predict_probs(net: torch.nn.Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    net.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i : i + batch_size].astype(np.float32) / 255.0)
        out.append(torch.sigmoid(net(x)).numpy())
    return np.concatenate(out)


def decode_model(model: SegModel, images: np.ndarray, tau: float) -> np.ndarray:
    """Catalog class-id maps for a single trained model."""
    probs = predict_probs(model.net, images)
    bg = model.catalog.background_id
    if model.scheme == "EN-member":
        c = model.catalog.index(model.channels[0])
        return np.where(probs[..., 0] >= tau, c, bg).astype(np.int64)
    return argmax_decode(probs, tau, model.has_background_channel, bg)


@torch.no_grad()
def decode_bundle(bundle: EnsembleBundle, images: np.ndarray, tau: float, batch_size: int = 64) -> np.ndarray:
    for m in bundle.members:
        m.net.eval()
    maps = []
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size].astype(np.float32) / 255.0
        probs = ensemble_forward(bundle, x).numpy()
        maps.append(ensemble_merge(probs, tau, bundle.catalog.background_id))
    return np.concatenate(maps)


def validation_score(maps: np.ndarray, valset: ValSet) -> float:
    """Mean over subsets of the mean dice of each subset's annotated classes."""
    per_subset: dict[str, list[float]] = {}
    for name, idx, masks in valset.items:
        scores = per_subset.setdefault(name, [])
        for cid, mask in masks.items():
            scores.append(dice_image(maps[idx], mask, cid))
    return float(np.mean([np.mean(v) for v in per_subset.values()]))


# ---------------------------------------------------------------------------
# training


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def make_optimizer(params, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay
    )


def train(config: TrainConfig, manifest: DatasetManifest) -> TrainResult:
    """Train one model and return the checkpoint of its best validation epoch."""
    config.validate()
    prep = _prepare(config, manifest)
    table: FrameTable = materialize(manifest, "train", prep.subsets, prep.transform)
    valset = build_valset(manifest, prep.subsets, "val")

    torch.manual_seed(config.seed)
    net = build_model(
        {"type": "TinyEncoderDecoder", "n_classes": len(prep.channels),
         "depth": config.depth, "width": config.width}
    )
    optimizer = make_optimizer(net.parameters(), config)
    weights = prep.weights.as_tensor()
    model = SegModel(net, manifest.catalog, tuple(prep.channels), prep.scheme,
                     {"trial": config.trial, "seed": config.seed})

    report = TrainReport(
        trial=config.trial,
        config=config.to_dict(),
        channels=list(prep.channels),
        subsets=list(prep.subsets),
        weights=prep.weights.to_dict(),
    )
    best_state = None
    best_score = -math.inf
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        _set_lr(optimizer, lr)
        net.train()
        total, frames = 0.0, 0
        for batch in iter_batches(table, config.batch_size, config.seed * 100003 + epoch,
                                  config.mixed_batches):
            logits = net(torch.from_numpy(batch.images))
            loss = masked_weighted_bce(logits, torch.from_numpy(batch.states), weights).total
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"{config.trial} loss became {loss.item()} at epoch {epoch} "
                    f"(batch {batch.keys[:3]}...)"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch.keys)
            frames += len(batch.keys)

        maps = decode_model(model, valset.images, config.tau)
        score = validation_score(maps, valset)
        report.train_loss.append(total / frames)
        report.val_dice.append(score)
        report.lr.append(lr)
        if score > best_score:
            best_score = score
            best_state = copy.deepcopy(net.state_dict())
            report.selected_epoch = epoch
        log.info("%s epoch %d loss %.4f val dice %.4f", config.trial, epoch, total / frames, score)

    net.load_state_dict(best_state)
    net.eval()
    model.meta["selected_epoch"] = report.selected_epoch
    return TrainResult(report, model, save_checkpoint(model))


@dataclass
class EnsembleResult:
    bundle: EnsembleBundle
    results: list[TrainResult]

    @property
    def reports(self) -> list[TrainReport]:
        return [r.report for r in self.results]


def train_ensemble(config: TrainConfig, manifest: DatasetManifest) -> EnsembleResult:
    """One single-class member per catalog class, each on its own binary subset."""
    results = []
    for c in manifest.catalog.classes:
        subset = _member_subset(manifest, c)
        member_cfg = replace(config, trial="EN", member_class=c, subsets=(subset,))
        results.append(train(member_cfg, manifest))
    bundle = make_bundle([r.model for r in results], manifest.catalog)
    return EnsembleResult(bundle, results)

