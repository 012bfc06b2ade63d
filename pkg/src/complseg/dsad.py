"""Adapter stub for the Dresden Surgical Anatomy Dataset folder layout.

Only the per-organ (binary) folders are read::

    <root>/<organ>/<surgery>/imageNN.png
    <root>/<organ>/<surgery>/maskNN.png

Each organ folder becomes one binary subset; surgeries are assigned to
splits by the caller. Not exercised against the real release here, only
against a mock of the layout above, so treat it as a starting point.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping, Sequence

from .data import DatasetManifest, FrameEntry, Subset
from .errors import ConfigError, MissingFile
from .labels import ClassCatalog

_IMAGE_RE = re.compile(r"image(\d+)\.png$")


def dsad_manifest(
    root: str | Path,
    organs: Sequence[str],
    surgery_split: Mapping[str, str],
    name: str = "dsad",
) -> DatasetManifest:
    """Manifest of binary subsets, one per organ, from surgery -> split assignments."""
    root = Path(root)
    catalog = ClassCatalog(tuple(organs))
    subsets = []
    for organ in organs:
        organ_dir = root / organ
        if not organ_dir.is_dir():
            raise MissingFile(organ_dir)
        frames = []
        for surgery_dir in sorted(p for p in organ_dir.iterdir() if p.is_dir()):
            split = surgery_split.get(surgery_dir.name)
            if split is None:
                continue
            if split not in ("train", "val", "test"):
                raise ConfigError(f"surgery {surgery_dir.name}: unknown split {split!r}")
            for img in sorted(surgery_dir.glob("image*.png")):
                m = _IMAGE_RE.search(img.name)
                if m is None:
                    continue
                mask = surgery_dir / f"mask{m.group(1)}.png"
                if not mask.is_file():
                    raise MissingFile(mask)
                fid = f"{organ}-{surgery_dir.name}-{m.group(1)}"
                frames.append(FrameEntry(fid, split, img, {organ: mask}))
        subsets.append(Subset(organ, (organ,), tuple(frames)))
    return DatasetManifest(name, catalog, tuple(subsets), root)
