"""Three-state supervision derived from partial binary annotations.

Every pixel belongs to exactly one class. A positive annotation for one class
therefore implies a negative for every other class, while the background of a
binary mask says nothing about classes the frame was not annotated for.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from .errors import NotFullyLabeled, OverlappingPositives, ShapeMismatch, UnknownClass

BACKGROUND_NAME = "background"


class State(IntEnum):
    NEG = 0
    POS = 1
    IGNORE = -1


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[str, ...]
    background_id: int = 255

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValueError("catalog needs at least one class")
        if any(not isinstance(c, str) or not c for c in self.classes):
            raise ValueError("class names must be non-empty strings")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in {self.classes}")
        if 0 <= self.background_id < len(self.classes):
            raise ValueError(
                f"background_id {self.background_id} collides with a class index"
            )

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise UnknownClass(name) from None

    def digest(self) -> str:
        blob = json.dumps(
            {"classes": list(self.classes), "background_id": self.background_id}
        ).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "background_id": self.background_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassCatalog":
        return cls(tuple(d["classes"]), int(d.get("background_id", 255)))


@dataclass(frozen=True)
class AnnotationFrame:
    """An RGB image with binary masks for the classes annotated in it."""

    image: np.ndarray
    masks: Mapping[str, np.ndarray]
    frame_id: str = ""

    @property
    def annotated_classes(self) -> tuple[str, ...]:
        return tuple(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class SupervisionVolume:
    """Per-pixel, per-channel POS/NEG/IGNORE states plus per-channel annotated flags."""

    states: np.ndarray  # HxWxC int8
    annotated: np.ndarray  # C bool
    channels: tuple[str, ...] = field(default=())

    @property
    def n_channels(self) -> int:
        return self.states.shape[-1]

    def count(self, state: State) -> np.ndarray:
        return (self.states == state).sum(axis=(0, 1))

    def targets(self) -> np.ndarray:
        return (self.states == State.POS).astype(np.float32)

    def valid(self) -> np.ndarray:
        return self.states != State.IGNORE


def validate_frame(frame: AnnotationFrame, catalog: ClassCatalog) -> None:
    """Raise if the frame is inconsistent with the catalog or itself."""
    image = np.asarray(frame.image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"image must be HxWx3, got {image.shape}")
    h, w = image.shape[:2]
    names = list(frame.masks)
    for name in names:
        catalog.index(name)
        m = np.asarray(frame.masks[name])
        if m.shape != (h, w):
            raise ShapeMismatch(
                f"mask {name!r} has shape {m.shape}, image is {(h, w)}"
            )
    if len(names) < 2:
        return
    stack = np.stack([np.asarray(frame.masks[n], dtype=bool) for n in names], axis=-1)
    overlap = stack.sum(axis=-1) > 1
    if overlap.any():
        y, x = np.argwhere(overlap)[0]
        hits = [names[i] for i in np.flatnonzero(stack[y, x])]
        raise OverlappingPositives(hits[0], hits[1], (y, x))


def derive_supervision(frame: AnnotationFrame, catalog: ClassCatalog) -> SupervisionVolume:
    validate_frame(frame, catalog)
    h, w = frame.shape
    n = len(catalog)
    positives = np.zeros((h, w, n), dtype=bool)
    annotated = np.zeros(n, dtype=bool)
    for name, mask in frame.masks.items():
        c = catalog.index(name)
        positives[..., c] = np.asarray(mask, dtype=bool)
        annotated[c] = True

    any_pos = positives.any(axis=-1)
    states = np.full((h, w, n), State.IGNORE, dtype=np.int8)
    for c in range(n):
        if annotated[c]:
            states[..., c] = np.where(positives[..., c], State.POS, State.NEG)
        else:
            # channel c has no positives here, so any positive pixel belongs to another class
            states[any_pos, c] = State.NEG
    return SupervisionVolume(states, annotated, catalog.classes)


def demote_implied(volume: SupervisionVolume) -> SupervisionVolume:
    """Masking-only variant: unannotated channels carry no supervision at all."""
    states = volume.states.copy()
    states[..., ~volume.annotated] = State.IGNORE
    return SupervisionVolume(states, volume.annotated.copy(), volume.channels)


def with_background_channel(volume: SupervisionVolume) -> SupervisionVolume:
    """Append an explicit background channel (POS where no class is POS).

    Only defined for fully annotated volumes.
    """
    if not volume.annotated.all():
        raise NotFullyLabeled("background channel requires every class annotated")
    bg = np.where((volume.states == State.POS).any(axis=-1), State.NEG, State.POS)
    states = np.concatenate([volume.states, bg[..., None].astype(np.int8)], axis=-1)
    annotated = np.append(volume.annotated, True)
    return SupervisionVolume(states, annotated, tuple(volume.channels) + (BACKGROUND_NAME,))


def label_map(frame: AnnotationFrame, catalog: ClassCatalog) -> np.ndarray:
    """Class-id map of a fully annotated frame, background where no mask is set."""
    missing = set(catalog.classes) - set(frame.masks)
    if missing:
        raise NotFullyLabeled(f"frame {frame.frame_id!r} lacks masks for {sorted(missing)}")
    validate_frame(frame, catalog)
    out = np.full(frame.shape, catalog.background_id, dtype=np.int64)
    for name, mask in frame.masks.items():
        out[np.asarray(mask, dtype=bool)] = catalog.index(name)
    return out


def stack_volumes(volumes: Sequence[SupervisionVolume]) -> tuple[np.ndarray, np.ndarray]:
    states = np.stack([v.states for v in volumes])
    annotated = np.stack([v.annotated for v in volumes])
    return states, annotated


def select_channels(volume: SupervisionVolume, indices: Sequence[int]) -> SupervisionVolume:
    idx = list(indices)
    return SupervisionVolume(
        volume.states[..., idx].copy(),
        volume.annotated[idx].copy(),
        tuple(volume.channels[i] for i in idx),
    )
