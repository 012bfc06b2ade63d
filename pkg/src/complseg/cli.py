"""``complseg`` command line: generate | train | eval | infer | bench.

Every command takes ``--config FILE`` (YAML or JSON). Options are read from
the section named after the command, then overridden by flags; top-level
``seed`` applies to every command. Precedence: flags > file > defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .bench import run_bench
from .data import (
    SynthConfig,
    ground_truth_maps,
    load_manifest,
    save_manifest,
    split_full_to_binary,
    synth_generate,
)
from .errors import ComplsegError, ConfigError, MissingFile
from .evaluation import MetricsReport, build_report, normalize_rows
from .model import SegModel, build_model, load_checkpoint, make_bundle
from .train import (
    TrainConfig,
    decode_bundle,
    decode_model,
    normalize_trial,
    train,
    train_ensemble,
)

log = logging.getLogger("complseg")

TRIAL_FILE_STEM = {"IL": "il", "FS": "fs", "IL-mask-only": "il-maskonly", "EN": "en"}


# ---------------------------------------------------------------------------
# config handling


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingFile(p)
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return doc


def merged_options(args: argparse.Namespace, section: str, defaults: dict, flag_map: dict) -> dict:
    doc = read_config(getattr(args, "config", None))
    opts = dict(defaults)
    if "seed" in doc:
        opts["seed"] = doc["seed"]
    sect = doc.get(section) or {}
    if not isinstance(sect, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    opts.update(sect)
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            opts[key] = value
    return opts


def _parse_classes(value) -> tuple[str, ...]:
    if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
        n = int(value)
        if not 1 <= n <= 26:
            raise ConfigError("--classes must be between 1 and 26")
        return tuple(chr(ord("A") + i) for i in range(n))
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(value)


def _parse_pairs(values) -> tuple[tuple[str, str], ...]:
    pairs = []
    for v in values or ():
        if isinstance(v, str):
            parts = v.split(":")
            if len(parts) != 2:
                raise ConfigError(f"expected CLASS:CLASS, got {v!r}")
            pairs.append((parts[0], parts[1]))
        else:
            pairs.append(tuple(v))
    return tuple(pairs)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> Path:
    defaults = {k: v for k, v in vars(SynthConfig()).items()}
    opts = merged_options(args, "generate", {**defaults, "out": "data/synth"}, {
        "seed": "seed", "classes": "classes", "confusable": "confusable_pairs",
        "height": "height", "width": "width", "n_train": "n_train", "n_val": "n_val",
        "n_test": "n_test", "out": "out", "name": "name",
    })
    out = Path(opts.pop("out"))
    opts["classes"] = _parse_classes(opts["classes"])
    opts["confusable_pairs"] = _parse_pairs(opts["confusable_pairs"])
    try:
        cfg = SynthConfig(**opts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    manifest = split_full_to_binary(synth_generate(cfg, out), keep_source=True)
    path = save_manifest(manifest, out / "manifest.json")
    print(f"wrote {path} ({len(manifest.binary_subsets())} binary subsets)")
    return path


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> list[Path]:
    opts = merged_options(args, "train", {"out": "runs"}, {
        "seed": "seed", "trial": "trial", "epochs": "epochs", "batch_size": "batch_size",
        "lr": "lr", "width": "width", "depth": "depth", "tau": "tau", "out": "out",
    })
    manifest_path = args.manifest or opts.pop("manifest", None)
    opts.pop("manifest", None)
    if manifest_path is None:
        raise ConfigError("train needs --manifest")
    out = Path(opts.pop("out"))
    config = TrainConfig.from_dict(opts)
    manifest = load_manifest(manifest_path)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    if config.trial == "EN":
        result = train_ensemble(config, manifest)
        runs = [(f"en-{r.report.config['member_class']}", r) for r in result.results]
    else:
        runs = [(TRIAL_FILE_STEM[config.trial], train(config, manifest))]
    for stem, r in runs:
        ckpt = out / f"{stem}.ckpt"
        ckpt.write_bytes(r.checkpoint)
        r.report.checkpoint = ckpt.name
        (out / f"{stem}.report.json").write_text(r.report.to_json())
        written.append(ckpt)
        print(f"wrote {ckpt} (best epoch {r.report.selected_epoch}, val dice {r.report.best_val_dice:.4f})")
    return written


# ---------------------------------------------------------------------------
# model loading shared by eval / infer / bench


def load_model_file(path, catalog=None) -> SegModel:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(p)
    return load_checkpoint(p.read_bytes(), catalog)


def load_predictor(paths: Sequence[str], catalog=None):
    """A single model, or an ensemble bundle when every file is an EN member."""
    models = [load_model_file(p, catalog) for p in paths]
    if not models:
        raise ConfigError("no checkpoints given")
    if all(m.scheme == "EN-member" for m in models):
        cat = catalog or models[0].catalog
        order = {c: i for i, c in enumerate(cat.classes)}
        models.sort(key=lambda m: order.get(m.channels[0], len(order)))
        return make_bundle(models, cat)
    if len(models) > 1:
        raise ConfigError("several checkpoints form an ensemble only if all are EN members")
    return models[0]


def predict_maps(predictor, images: np.ndarray, tau: float) -> np.ndarray:
    if isinstance(predictor, SegModel):
        return decode_model(predictor, images, tau)
    return decode_bundle(predictor, images, tau)


def _parse_model_specs(specs: Sequence[str]) -> dict[str, list[str]]:
    """NAME=PATH[,PATH...]; repeating NAME appends paths."""
    trials: dict[str, list[str]] = {}
    for item in specs:
        if "=" not in item:
            raise ConfigError(f"expected NAME=PATH, got {item!r}")
        name, paths = item.split("=", 1)
        trials.setdefault(name, []).extend(p for p in paths.split(",") if p)
    return trials


# ---------------------------------------------------------------------------
# eval


def evaluate(manifest, trials: dict[str, list[str]], comparisons, tau: float, split: str,
             subset: str | None, include_background: bool) -> MetricsReport:
    catalog = manifest.catalog
    if subset is None:
        full = manifest.full_subsets()
        if not full:
            raise ConfigError("evaluation needs a fully labeled subset; pass --subset")
        subset = full[0].name
    ids, images, gts = ground_truth_maps(manifest, subset, split)
    preds = {}
    for name, paths in trials.items():
        preds[name] = predict_maps(load_predictor(paths, catalog), images, tau)
    for a, b in comparisons:
        if a not in preds or b not in preds:
            raise ConfigError(f"comparison {a}:{b} names an unknown trial")
    return build_report(preds, gts, catalog, comparisons, include_background, ids)


def write_confusion_png(report: MetricsReport, path: Path, cell: int = 24) -> None:
    """Row-normalized confusion matrices side by side, one grey-level grid per trial."""
    grids = []
    for t in report.trials.values():
        m = normalize_rows(t.confusion)
        g = np.kron((255 * (1 - m)).astype(np.uint8), np.ones((cell, cell), np.uint8))
        grids.append(np.pad(g, ((0, 0), (0, cell // 2)), constant_values=255))
    Image.fromarray(np.concatenate(grids, axis=1), mode="L").save(path)


def cmd_eval(args: argparse.Namespace) -> Path:
    opts = merged_options(args, "eval", {
        "tau": 0.5, "split": "test", "subset": None, "out": "eval",
        "models": [], "compare": [], "include_background": False,
    }, {"tau": "tau", "split": "split", "subset": "subset", "out": "out",
        "model": "models", "compare": "compare"})
    if args.include_background:
        opts["include_background"] = True
    manifest_path = args.manifest or opts.get("manifest")
    if manifest_path is None:
        raise ConfigError("eval needs --manifest")
    manifest = load_manifest(manifest_path)
    models = opts["models"]
    trials = _parse_model_specs(models) if isinstance(models, list) else {
        k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in models.items()
    }
    if not trials:
        raise ConfigError("eval needs at least one --model NAME=PATH")
    comparisons = _parse_pairs(opts["compare"])
    report = evaluate(manifest, trials, comparisons, float(opts["tau"]), opts["split"],
                      opts["subset"], bool(opts["include_background"]))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table())
    write_confusion_png(report, out / "confusion.png")
    print(report.table(), end="")
    return out / "report.json"


# ---------------------------------------------------------------------------
# infer

PALETTE_BASE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255),
]


def palette_indices(class_map: np.ndarray, background_id: int) -> np.ndarray:
    """Palette index 0 is background, class c maps to c + 1."""
    return np.where(class_map == background_id, 0, class_map + 1).astype(np.uint8)


def palette_colors(n_classes: int) -> np.ndarray:
    colors = list(PALETTE_BASE)
    rng = np.random.default_rng(0)
    while len(colors) < n_classes + 1:
        colors.append(tuple(int(v) for v in rng.integers(0, 256, 3)))
    return np.array(colors[: n_classes + 1], dtype=np.uint8)


def cmd_infer(args: argparse.Namespace) -> tuple[Path, Path]:
    opts = merged_options(args, "infer", {"tau": 0.5, "models": [], "image": None, "out": None, "alpha": 0.5},
                          {"tau": "tau", "model": "models", "image": "image", "out": "out"})
    if not opts["image"] or not opts["out"]:
        raise ConfigError("infer needs --image and --out")
    image_path = Path(opts["image"])
    if not image_path.is_file():
        raise MissingFile(image_path)
    predictor = load_predictor(opts["models"])
    catalog = predictor.catalog
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8)
    class_map = predict_maps(predictor, image[None], float(opts["tau"]))[0]

    colors = palette_colors(len(catalog))
    idx = palette_indices(class_map, catalog.background_id)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    map_path = out.with_name(out.name + ".classmap.png")
    pal_img = Image.fromarray(idx, mode="P")
    pal_img.putpalette(colors.ravel().tolist())
    pal_img.save(map_path)

    alpha = float(opts["alpha"])
    fg = idx > 0
    blend = image.astype(np.float64)
    blend[fg] = (1 - alpha) * blend[fg] + alpha * colors[idx[fg]]
    overlay_path = out.with_name(out.name + ".overlay.png")
    Image.fromarray(np.rint(blend).astype(np.uint8), mode="RGB").save(overlay_path)
    print(f"wrote {map_path} and {overlay_path}")
    return map_path, overlay_path


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args: argparse.Namespace):
    opts = merged_options(args, "bench", {
        "models": [], "height": 64, "width": 64, "iterations": 100, "warmup": 10,
        "ks": [1, 2, 4, 6], "classes": 6, "net_width": 16, "depth": 3, "seed": 0, "out": None,
    }, {"model": "models", "height": "height", "width": "width", "iterations": "iterations",
        "warmup": "warmup", "ks": "ks", "classes": "classes", "seed": "seed", "out": "out"})
    ks = opts["ks"]
    if isinstance(ks, str):
        ks = [int(k) for k in ks.split(",")]
    models = [load_model_file(p) for p in opts["models"]]
    singles = [m.net for m in models if m.scheme != "EN-member"]
    members = [m.net for m in models if m.scheme == "EN-member"]
    import torch

    torch.manual_seed(int(opts["seed"]))
    n_classes = len(_parse_classes(opts["classes"]))
    arch = {"type": "TinyEncoderDecoder", "depth": int(opts["depth"]), "width": int(opts["net_width"])}
    single = singles[0] if singles else build_model({**arch, "n_classes": n_classes})
    if not members:
        members = [build_model({**arch, "n_classes": 1}) for _ in range(max(ks))]
    result = run_bench(single, members, ks, int(opts["height"]), int(opts["width"]),
                       int(opts["iterations"]), int(opts["warmup"]), int(opts["seed"]))
    text = result.to_json()
    if opts["out"]:
        Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(opts["out"]).write_text(text)
    print(f"single: {result.single.mean_ms:.2f} ± {result.single.std_ms:.2f} ms")
    for e in result.ensembles:
        print(f"{e.name}: {e.mean_ms:.2f} ± {e.std_ms:.2f} ms ({e.fps:.1f} fps)")
    print(f"slope {result.slope_ms_per_model:.3f} ms/model, R^2 {result.r_squared:.4f}")
    return result


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="complseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    g = common(sub.add_parser("generate", help="write a synthetic dataset and its manifest"))
    g.add_argument("--classes", help="class count or comma-separated names")
    g.add_argument("--confusable", action="append", help="CLASS:CLASS, repeatable")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-val", dest="n_val", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--name")
    g.set_defaults(func=cmd_generate)

    t = common(sub.add_parser("train", help="train one trial"))
    t.add_argument("--manifest")
    t.add_argument("--trial", choices=["il", "en", "fs", "il-maskonly"], type=str.lower)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--tau", type=float)
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="score trained models on a test split"))
    e.add_argument("--manifest")
    e.add_argument("--model", action="append", help="NAME=CKPT[,CKPT...]; EN members form an ensemble")
    e.add_argument("--compare", action="append", help="NAME:NAME significance test, repeatable")
    e.add_argument("--tau", type=float)
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--subset")
    e.add_argument("--include-background", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = common(sub.add_parser("infer", help="write class map and overlay for one image"))
    i.add_argument("--model", action="append", help="checkpoint; repeat for ensemble members")
    i.add_argument("--image")
    i.add_argument("--tau", type=float)
    i.set_defaults(func=cmd_infer)

    b = common(sub.add_parser("bench", help="inference latency: single model vs ensembles"))
    b.add_argument("--model", action="append")
    b.add_argument("--height", type=int)
    b.add_argument("--width", type=int)
    b.add_argument("--iterations", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--ks", help="comma-separated ensemble sizes")
    b.add_argument("--classes", help="class count for randomly initialised models")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and args.trial is not None:
        args.trial = normalize_trial(args.trial)
    try:
        args.func(args)
    except ComplsegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
