"""Dataset manifests, synthetic data, binary splitting, pixel statistics and batching.

Manifest layout (JSON, paths relative to the manifest file)::

    {
      "format": "complseg-manifest",
      "version": 1,
      "name": "synth",
      "catalog": {"classes": ["a", "b"], "background_id": 255},
      "subsets": [
        {"name": "full", "annotated_classes": ["a", "b"],
         "frames": [{"id": "train_0000", "split": "train",
                     "image": "full/train/train_0000.img.png",
                     "masks": {"a": "full/train/train_0000.a.mask.png", ...}}]}
      ]
    }

Images are 8-bit RGB PNG; masks are single-channel PNG with 0 = negative and
255 = positive.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import jsonschema
import numpy as np
from PIL import Image

from .errors import ConfigError, EmptySplit, MissingFile, NotFullyLabeled, SchemaError
from .labels import (
    AnnotationFrame,
    ClassCatalog,
    State,
    SupervisionVolume,
    derive_supervision,
    label_map,
)

SPLITS = ("train", "val", "test")
MANIFEST_FORMAT = "complseg-manifest"
MANIFEST_VERSION = 1

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "name", "catalog", "subsets"],
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "version": {"const": MANIFEST_VERSION},
        "name": {"type": "string"},
        "catalog": {
            "type": "object",
            "required": ["classes"],
            "properties": {
                "classes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "string", "minLength": 1},
                },
                "background_id": {"type": "integer"},
            },
        },
        "subsets": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "annotated_classes", "frames"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "annotated_classes": {"type": "array", "items": {"type": "string"}},
                    "frames": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["id", "split", "image", "masks"],
                            "properties": {
                                "id": {"type": "string", "minLength": 1},
                                "split": {"enum": list(SPLITS)},
                                "image": {"type": "string"},
                                "masks": {
                                    "type": "object",
                                    "additionalProperties": {"type": "string"},
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    split: str
    image: Path
    masks: dict[str, Path]


@dataclass(frozen=True)
class Subset:
    name: str
    annotated_classes: tuple[str, ...]
    frames: tuple[FrameEntry, ...]

    def split_frames(self, split: str) -> list[FrameEntry]:
        return [f for f in self.frames if f.split == split]


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    catalog: ClassCatalog
    subsets: tuple[Subset, ...]
    root: Path = field(default=Path("."))

    def subset(self, name: str) -> Subset:
        for s in self.subsets:
            if s.name == name:
                return s
        raise KeyError(name)

    def subset_names(self) -> list[str]:
        return [s.name for s in self.subsets]

    def binary_subsets(self) -> list[Subset]:
        return [s for s in self.subsets if len(s.annotated_classes) == 1]

    def full_subsets(self) -> list[Subset]:
        return [s for s in self.subsets if set(s.annotated_classes) == set(self.catalog.classes)]

    def to_dict(self) -> dict:
        def rel(p: Path) -> str:
            p = Path(p)
            try:
                return p.relative_to(self.root).as_posix()
            except ValueError:
                return p.as_posix()

        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "name": self.name,
            "catalog": self.catalog.to_dict(),
            "subsets": [
                {
                    "name": s.name,
                    "annotated_classes": list(s.annotated_classes),
                    "frames": [
                        {
                            "id": f.frame_id,
                            "split": f.split,
                            "image": rel(f.image),
                            "masks": {c: rel(p) for c, p in f.masks.items()},
                        }
                        for f in s.frames
                    ],
                }
                for s in self.subsets
            ],
        }


def dump_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_dict(), indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_manifest(manifest))
    return path


def parse_manifest(doc: dict, root: Path, check_files: bool = True) -> DatasetManifest:
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{'/'.join(map(str, exc.absolute_path))}: {exc.message}") from None
    try:
        catalog = ClassCatalog.from_dict(doc["catalog"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from None

    subsets = []
    seen_names = set()
    for s in doc["subsets"]:
        if s["name"] in seen_names:
            raise SchemaError(f"duplicate subset name {s['name']!r}")
        seen_names.add(s["name"])
        annotated = tuple(s["annotated_classes"])
        unknown = set(annotated) - set(catalog.classes)
        if unknown:
            raise SchemaError(f"subset {s['name']!r} annotates unknown classes {sorted(unknown)}")
        frames = []
        splits_of: dict[str, str] = {}
        for f in s["frames"]:
            fid = f["id"]
            if fid in splits_of:
                raise SchemaError(
                    f"frame {fid!r} of subset {s['name']!r} listed twice "
                    f"(splits {splits_of[fid]!r} and {f['split']!r})"
                )
            splits_of[fid] = f["split"]
            extra = set(f["masks"]) - set(annotated)
            if extra:
                raise SchemaError(
                    f"frame {fid!r} has masks for classes {sorted(extra)} "
                    f"not annotated by subset {s['name']!r}"
                )
            image = root / f["image"]
            masks = {c: root / p for c, p in f["masks"].items()}
            if check_files:
                for p in (image, *masks.values()):
                    if not p.is_file():
                        raise MissingFile(p)
            frames.append(FrameEntry(fid, f["split"], image, masks))
        subsets.append(Subset(s["name"], annotated, tuple(frames)))
    return DatasetManifest(doc["name"], catalog, tuple(subsets), root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return parse_manifest(doc, path.parent.resolve())


# ---------------------------------------------------------------------------
# raster IO


def write_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


@functools.lru_cache(maxsize=16384)
def _read_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    arr.setflags(write=False)
    return arr


@functools.lru_cache(maxsize=65536)
def _read_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise SchemaError(f"mask {path} has values outside {{0, 255}}")
    out = arr == 255
    out.setflags(write=False)
    return out


def load_frame(entry: FrameEntry) -> AnnotationFrame:
    image = _read_image(str(entry.image))
    masks = {c: _read_mask(str(p)) for c, p in entry.masks.items()}
    return AnnotationFrame(image, masks, entry.frame_id)


def clear_cache() -> None:
    _read_image.cache_clear()
    _read_mask.cache_clear()


# ---------------------------------------------------------------------------
# binary splitting


def split_full_to_binary(
    manifest: DatasetManifest, source: str | None = None, keep_source: bool = False
) -> DatasetManifest:
    """One single-class subset per catalog class, built from a fully labeled subset.

    Frames keep their image reference and split; each binary subset only keeps
    the mask of its own class.
    """
    classes = manifest.catalog.classes
    if source is None:
        full = manifest.full_subsets()
        if not full:
            raise NotFullyLabeled("manifest has no fully labeled subset")
        src = full[0]
    else:
        src = manifest.subset(source)
    for f in src.frames:
        missing = [c for c in classes if c not in f.masks]
        if missing:
            raise NotFullyLabeled(f"frame {f.frame_id!r} of {src.name!r} lacks masks {missing}")

    if len(classes) == 1:
        binary = [src]
    else:
        binary = [
            Subset(
                f"{src.name}-{c}",
                (c,),
                tuple(FrameEntry(f.frame_id, f.split, f.image, {c: f.masks[c]}) for f in src.frames),
            )
            for c in classes
        ]
    subsets = (list(manifest.subsets) if keep_source else []) + [
        b for b in binary if not (keep_source and b is src)
    ]
    return replace(manifest, subsets=tuple(subsets))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    classes: tuple[str, ...] = ("A", "B", "C", "D")
    confusable_pairs: tuple[tuple[str, str], ...] = (("A", "B"),)
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    height: int = 64
    width: int = 64
    seed: int = 0
    name: str = "synth"
    max_blobs: int = 4
    noise: float = 14.0
    # colour offset (8-bit units) separating the members of a confusable pair
    confusable_offset: float = 8.0

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"frames must be at least 32x32, got {self.height}x{self.width}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one frame")
        if not 1 <= self.max_blobs <= 4:
            raise ConfigError("max_blobs must be within 1..4")
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise ConfigError(f"bad class list {self.classes}")
        seen = set()
        for a, b in self.confusable_pairs:
            if a not in self.classes or b not in self.classes or a == b:
                raise ConfigError(f"bad confusable pair {(a, b)}")
            if a in seen or b in seen:
                raise ConfigError(f"class appears in more than one confusable pair: {(a, b)}")
            seen.update((a, b))


@dataclass(frozen=True)
class ClassTexture:
    color: np.ndarray  # RGB mean
    angle: float
    frequency: float
    amplitude: float


def class_textures(config: SynthConfig, rng: np.random.Generator) -> dict[str, ClassTexture]:
    """Per-class appearance.

    Unpaired classes get colours from disjoint hue bins; a confusable pair
    shares one base texture and differs only by a small colour shift.
    """
    n = len(config.classes)
    partner = {}
    for a, b in config.confusable_pairs:
        partner[b] = a
    owners = [c for c in config.classes if c not in partner]
    hues = (np.arange(len(owners)) + rng.uniform(0.2, 0.8, len(owners))) / max(len(owners), 1)
    textures = {}
    for owner, hue in zip(owners, hues):
        textures[owner] = ClassTexture(
            color=_hsv_to_rgb(hue, 0.55, 0.75) * 255.0,
            angle=float(rng.uniform(0, np.pi)),
            frequency=float(rng.uniform(0.25, 0.6)),
            amplitude=float(rng.uniform(14, 24)),
        )
    for b, a in partner.items():
        base = textures[a]
        shift = np.array([1.0, -0.5, -0.5]) * config.confusable_offset
        textures[b] = replace(base, color=np.clip(base.color + shift, 0, 255))
    assert len(textures) == n
    return {c: textures[c] for c in config.classes}


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    r0 = rng.uniform(min(h, w) / 10, min(h, w) / 4.5)
    cy = rng.uniform(r0, h - r0)
    cx = rng.uniform(r0, w - r0)
    aspect = rng.uniform(0.6, 1.4)
    rot = rng.uniform(0, np.pi)
    lobes = int(rng.integers(2, 5))
    wobble = rng.uniform(0.0, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = (-dx * np.sin(rot) + dy * np.cos(rot)) * aspect
    radius = np.hypot(u, v)
    theta = np.arctan2(v, u)
    return radius <= r0 * (1 + wobble * np.sin(lobes * theta + phase))


def _texture(tex: ClassTexture, h: int, w: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(tex.frequency * (xx * np.cos(tex.angle) + yy * np.sin(tex.angle)) + phase)
    base = tex.color[None, None, :] + tex.amplitude * stripes[..., None]
    return base + rng.normal(0, noise, (h, w, 3))


def _background(h: int, w: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = rng.uniform(-1, 1, 2)
    shade = 90 + 25 * (gy * yy / h + gx * xx / w)
    tint = np.array([1.0, 0.92, 0.85]) * rng.uniform(0.9, 1.1)
    return shade[..., None] * tint[None, None, :] + rng.normal(0, noise * 1.5, (h, w, 3))


def synth_frame(
    config: SynthConfig,
    textures: dict[str, ClassTexture],
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    h, w = config.height, config.width
    image = _background(h, w, rng, config.noise)
    masks = {c: np.zeros((h, w), dtype=bool) for c in config.classes}
    occupied = np.zeros((h, w), dtype=bool)
    n_blobs = int(rng.integers(1, config.max_blobs + 1))
    placed = 0
    for _ in range(n_blobs * 20):
        if placed == n_blobs:
            break
        blob = _blob_mask(rng, h, w)
        if not blob.any() or (blob & occupied).any():
            continue
        cls = config.classes[int(rng.integers(len(config.classes)))]
        tex = _texture(textures[cls], h, w, rng, config.noise)
        image[blob] = tex[blob]
        masks[cls] |= blob
        occupied |= blob
        placed += 1
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), masks


def synth_generate(config: SynthConfig, out_dir, subset_name: str = "full") -> DatasetManifest:
    """Write a fully labeled synthetic dataset and return its manifest."""
    config.validate()
    out_dir = Path(out_dir).resolve()
    rng = np.random.default_rng(config.seed)
    textures = class_textures(config, rng)
    catalog = ClassCatalog(tuple(config.classes))
    frames = []
    for split, n in zip(SPLITS, (config.n_train, config.n_val, config.n_test)):
        for i in range(n):
            fid = f"{split}_{i:04d}"
            image, masks = synth_frame(config, textures, rng)
            base = out_dir / subset_name / split
            img_path = base / f"{fid}.img.png"
            write_image(img_path, image)
            mask_paths = {}
            for c, m in masks.items():
                p = base / f"{fid}.{c}.mask.png"
                write_mask(p, m)
                mask_paths[c] = p
            frames.append(FrameEntry(fid, split, img_path, mask_paths))
    subset = Subset(subset_name, catalog.classes, tuple(frames))
    return DatasetManifest(config.name, catalog, (subset,), out_dir)


# ---------------------------------------------------------------------------
# pixel statistics

Transform = Callable[[SupervisionVolume], SupervisionVolume]


@dataclass
class PixelStats:
    channels: tuple[str, ...]
    pos: np.ndarray
    neg: np.ndarray
    implied_neg: np.ndarray
    ignore: np.ndarray
    per_subset: dict[str, "PixelStats"] = field(default_factory=dict)

    @classmethod
    def zeros(cls, channels: Sequence[str]) -> "PixelStats":
        z = lambda: np.zeros(len(channels), dtype=np.int64)  # noqa: E731
        return cls(tuple(channels), z(), z(), z(), z())

    @property
    def total(self) -> np.ndarray:
        return self.pos + self.neg + self.implied_neg + self.ignore

    def add_volume(self, volume: SupervisionVolume) -> None:
        s = volume.states
        self.pos += (s == State.POS).sum(axis=(0, 1))
        negs = (s == State.NEG).sum(axis=(0, 1))
        self.neg += np.where(volume.annotated, negs, 0)
        self.implied_neg += np.where(volume.annotated, 0, negs)
        self.ignore += (s == State.IGNORE).sum(axis=(0, 1))

    def __add__(self, other: "PixelStats") -> "PixelStats":
        if self.channels != other.channels:
            raise ValueError("channel mismatch")
        merged = {}
        for name in sorted(set(self.per_subset) | set(other.per_subset)):
            parts = [p for p in (self.per_subset.get(name), other.per_subset.get(name)) if p]
            merged[name] = parts[0] if len(parts) == 1 else parts[0] + parts[1]
        return PixelStats(
            self.channels,
            self.pos + other.pos,
            self.neg + other.neg,
            self.implied_neg + other.implied_neg,
            self.ignore + other.ignore,
            merged,
        )

    def to_dict(self) -> dict:
        return {
            ch: {
                "pos": int(self.pos[i]),
                "neg": int(self.neg[i]),
                "implied_neg": int(self.implied_neg[i]),
                "ignore": int(self.ignore[i]),
            }
            for i, ch in enumerate(self.channels)
        }


def _select_subsets(manifest: DatasetManifest, subsets: Sequence[str] | None) -> list[Subset]:
    if subsets is None:
        return list(manifest.subsets)
    return [manifest.subset(s) for s in subsets]


def compute_pixel_stats(
    manifest: DatasetManifest,
    split: str,
    subsets: Sequence[str] | None = None,
    transform: Transform | None = None,
) -> PixelStats:
    chosen = _select_subsets(manifest, subsets)
    stats = None
    for sub in chosen:
        sub_stats = None
        for entry in sub.split_frames(split):
            vol = derive_supervision(load_frame(entry), manifest.catalog)
            if transform is not None:
                vol = transform(vol)
            if sub_stats is None:
                sub_stats = PixelStats.zeros(vol.channels)
            sub_stats.add_volume(vol)
        if sub_stats is None:
            continue
        sub_total = PixelStats(
            sub_stats.channels, sub_stats.pos, sub_stats.neg, sub_stats.implied_neg, sub_stats.ignore
        )
        sub_total.per_subset = {sub.name: sub_stats}
        stats = sub_total if stats is None else stats + sub_total
    if stats is None:
        raise EmptySplit(f"no {split!r} frames in subsets {[s.name for s in chosen]}")
    return stats


# ---------------------------------------------------------------------------
# batching


@dataclass
class FrameTable:
    """Materialised frames of one split, ready for batching."""

    images: np.ndarray  # N x H x W x 3 uint8
    states: np.ndarray  # N x H x W x C int8
    annotated: np.ndarray  # N x C bool
    tags: list[str]
    keys: list[tuple[str, str]]
    channels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class Batch:
    images: np.ndarray  # B x H x W x 3 float32 in [0, 1]
    states: np.ndarray
    annotated: np.ndarray
    tags: list[str]
    keys: list[tuple[str, str]]


def materialize(
    manifest: DatasetManifest,
    split: str,
    subsets: Sequence[str] | None = None,
    transform: Transform | None = None,
) -> FrameTable:
    images, states, annotated, tags, keys = [], [], [], [], []
    channels: tuple[str, ...] = ()
    for sub in _select_subsets(manifest, subsets):
        for entry in sub.split_frames(split):
            frame = load_frame(entry)
            vol = derive_supervision(frame, manifest.catalog)
            if transform is not None:
                vol = transform(vol)
            channels = vol.channels
            images.append(frame.image)
            states.append(vol.states)
            annotated.append(vol.annotated)
            tags.append(sub.name)
            keys.append((sub.name, entry.frame_id))
    if not keys:
        raise EmptySplit(f"no {split!r} frames")
    return FrameTable(
        np.stack(images), np.stack(states), np.stack(annotated), tags, keys, channels
    )


def epoch_order(table: FrameTable, batch_size: int, seed: int, mixed: bool = True) -> list[np.ndarray]:
    """Index batches covering every frame of the table exactly once."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(table)
    if mixed:
        perm = rng.permutation(n)
        return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    chunks = []
    tags = np.array(table.tags)
    for name in dict.fromkeys(table.tags):
        idx = np.flatnonzero(tags == name)
        idx = idx[rng.permutation(len(idx))]
        chunks.extend(idx[i : i + batch_size] for i in range(0, len(idx), batch_size))
    return [chunks[i] for i in rng.permutation(len(chunks))]


def iter_batches(table: FrameTable, batch_size: int, seed: int, mixed: bool = True) -> Iterator[Batch]:
    for idx in epoch_order(table, batch_size, seed, mixed):
        yield Batch(
            table.images[idx].astype(np.float32) / 255.0,
            table.states[idx],
            table.annotated[idx],
            [table.tags[i] for i in idx],
            [table.keys[i] for i in idx],
        )


def batch_iter(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: int,
    subsets: Sequence[str] | None = None,
    transform: Transform | None = None,
    mixed: bool = True,
) -> Iterator[Batch]:
    """One epoch of batches over a split."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    table = materialize(manifest, split, subsets, transform)
    return iter_batches(table, batch_size, shuffle_seed, mixed)


def ground_truth_maps(manifest: DatasetManifest, subset: str, split: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Frame ids, images and full label maps of a fully labeled subset split."""
    sub = manifest.subset(subset)
    ids, images, maps = [], [], []
    for entry in sub.split_frames(split):
        frame = load_frame(entry)
        ids.append(entry.frame_id)
        images.append(frame.image)
        maps.append(label_map(frame, manifest.catalog))
    if not ids:
        raise EmptySplit(f"no {split!r} frames in {subset!r}")
    return ids, np.stack(images), np.stack(maps)
