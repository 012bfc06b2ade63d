"""Segmentation models with independent per-channel sigmoid outputs."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptCheckpoint, IncompleteBundle, ShapeMismatch
from .labels import ClassCatalog

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1


def _conv(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)


class TinyEncoderDecoder(nn.Module):
    """Small U-Net: ``depth`` resolution levels with skip connections.

    Takes B x H x W x 3 images in [0, 1] and returns B x H x W x C logits.
    H and W must be divisible by ``2 ** (depth - 1)``. The top level uses a
    single convolution on each side to keep full-resolution cost low.
    """

    def __init__(self, n_classes: int, depth: int = 3, width: int = 16, in_channels: int = 3):
        super().__init__()
        if depth < 1 or width < 1 or n_classes < 1:
            raise ValueError("depth, width and n_classes must be positive")
        self.n_classes = n_classes
        self.depth = depth
        self.width = width
        self.in_channels = in_channels

        chans = [width * 2**i for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_channels
        for level, c in enumerate(chans):
            layers = [_conv(prev, c), nn.ReLU()]
            if level > 0:
                layers += [_conv(c, c), nn.ReLU()]
            self.encoders.append(nn.Sequential(*layers))
            prev = c
        self.decoders = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.decoders.append(nn.Sequential(_conv(prev + c, c), nn.ReLU()))
            prev = c
        self.head = nn.Conv2d(prev, n_classes, kernel_size=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # the head sees no ReLU after it; plain fan-in scaling keeps initial logits small
        nn.init.kaiming_uniform_(self.head.weight, nonlinearity="linear")

    def arch(self) -> dict:
        return {
            "type": "TinyEncoderDecoder",
            "n_classes": self.n_classes,
            "depth": self.depth,
            "width": self.width,
            "in_channels": self.in_channels,
        }

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"expected B x H x W x {self.in_channels}, got {tuple(images.shape)}")
        h, w = images.shape[1:3]
        factor = 2 ** (self.depth - 1)
        if h % factor or w % factor:
            raise ShapeMismatch(f"spatial size {h}x{w} not divisible by {factor}")
        x = images.permute(0, 3, 1, 2).contiguous(memory_format=torch.channels_last)
        skips = []
        for level, enc in enumerate(self.encoders):
            if level > 0:
                skips.append(x)
                x = F.max_pool2d(x, 2)
            x = enc(x)
        for dec in self.decoders:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x).permute(0, 2, 3, 1)


def build_model(arch: dict) -> nn.Module:
    kind = arch.get("type")
    if kind != "TinyEncoderDecoder":
        raise ValueError(f"unknown architecture {kind!r}")
    model = TinyEncoderDecoder(
        arch["n_classes"], arch.get("depth", 3), arch.get("width", 16), arch.get("in_channels", 3)
    )
    return model.to(memory_format=torch.channels_last)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: nn.Module, images) -> torch.Tensor:
    """Logits for a batch of images normalised to [0, 1]."""
    x = torch.as_tensor(images, dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    out = model(x)
    if out.shape[:3] != x.shape[:3]:
        raise ShapeMismatch("model changed the spatial size")
    return out


@dataclass
class SegModel:
    """A trained network plus what it was trained for."""

    net: nn.Module
    catalog: ClassCatalog
    channels: tuple[str, ...]
    scheme: str  # IL, IL-mask-only, EN-member, FS
    meta: dict = field(default_factory=dict)

    @property
    def has_background_channel(self) -> bool:
        return len(self.channels) == len(self.catalog) + 1


@dataclass
class EnsembleBundle:
    """One single-class member per catalog class, in catalog order."""

    members: list[SegModel]
    catalog: ClassCatalog

    def validate(self) -> None:
        names = [m.channels for m in self.members]
        expected = [(c,) for c in self.catalog.classes]
        if names != expected:
            raise IncompleteBundle(f"members {names} do not match catalog order {expected}")


def ensemble_forward(bundle: EnsembleBundle, images) -> torch.Tensor:
    """B x H x W x C stack of member sigmoid outputs."""
    bundle.validate()
    outs = []
    for member in bundle.members:
        logits = forward(member.net, images)
        if logits.shape[-1] != 1:
            raise IncompleteBundle(f"member {member.channels} has {logits.shape[-1]} outputs")
        outs.append(torch.sigmoid(logits))
    return torch.cat(outs, dim=-1)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic (8 bytes) | version (uint32 LE) | header length (uint32 LE) | header JSON
#   | weights (torch.save of the state dict)
#
# The header records the catalog digest, scheme, channels, architecture and
# the SHA-256 and length of the weight payload.


def save_checkpoint(model: SegModel) -> bytes:
    buf = io.BytesIO()
    state = {k: v.detach().cpu().contiguous() for k, v in model.net.state_dict().items()}
    torch.save(state, buf)
    payload = buf.getvalue()
    header = {
        "catalog": model.catalog.to_dict(),
        "catalog_digest": model.catalog.digest(),
        "scheme": model.scheme,
        "channels": list(model.channels),
        "arch": model.net.arch(),
        "meta": model.meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_length": len(payload),
    }
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + payload


def load_checkpoint(data: bytes, catalog: ClassCatalog | None = None) -> SegModel:
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(data) < fixed or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpoint("not a complseg checkpoint (bad magic or truncated header)")
    version, head_len = struct.unpack("<II", data[len(CHECKPOINT_MAGIC) : fixed])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    head = data[fixed : fixed + head_len]
    if len(head) != head_len:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    payload = data[fixed + head_len :]
    if len(payload) != header.get("payload_length"):
        raise CorruptCheckpoint(
            f"weight payload is {len(payload)} bytes, header says {header.get('payload_length')}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpoint("weight payload checksum mismatch")

    stored = ClassCatalog.from_dict(header["catalog"])
    if stored.digest() != header["catalog_digest"]:
        raise CorruptCheckpoint("catalog digest does not match stored catalog")
    if catalog is not None and catalog.digest() != stored.digest():
        raise CorruptCheckpoint(
            f"checkpoint trained for classes {stored.classes}, not {catalog.classes}"
        )
    net = build_model(header["arch"])
    try:
        state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    except Exception as exc:  # torch raises a variety of types here
        raise CorruptCheckpoint(f"cannot restore weights: {exc}") from None
    net.eval()
    return SegModel(net, stored, tuple(header["channels"]), header["scheme"], header.get("meta", {}))


def make_bundle(models: Sequence[SegModel], catalog: ClassCatalog | None = None) -> EnsembleBundle:
    if not models:
        raise IncompleteBundle("no members")
    catalog = catalog or models[0].catalog
    bundle = EnsembleBundle(list(models), catalog)
    bundle.validate()
    return bundle
