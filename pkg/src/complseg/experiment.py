"""Desk-scale ordering experiment: IL vs EN vs IL-mask-only on synthetic data.

One fully labeled synthetic dataset is generated and split into binary
subsets. Every trial is trained on the binary subsets only and scored on the
fully labeled test split, once per training seed. Seeds are independent and
run in separate worker processes (one torch thread each) when cores allow;
with a single core they run in-process, with identical results.
"""
from __future__ import annotations

import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    SynthConfig,
    ground_truth_maps,
    load_manifest,
    save_manifest,
    split_full_to_binary,
    synth_generate,
)
from .evaluation import build_report, wilcoxon_signed_rank
from .train import TrainConfig, decode_bundle, decode_model, train, train_ensemble

log = logging.getLogger(__name__)

TRIALS = ("IL", "EN", "IL-mask-only")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 30
    width: int = 16
    depth: int = 3
    batch_size: int = 8
    tau: float = 0.5
    workers: int | None = None  # None: one per seed, capped by available cores


@dataclass
class SeedResult:
    seed: int
    mean_dice: dict[str, float]
    class_dice: dict[str, dict[str, float]]
    pair_confusion: dict[str, float]
    selected_epoch: dict[str, object]
    seconds: dict[str, float]


@dataclass
class ExperimentResult:
    config: dict
    pair: tuple[str, str]
    seeds: list[SeedResult]
    pooled_p_il_vs_en: float
    pooled_mean_diff: float  # mean of IL - EN over the pooled (image, class) pairs
    n_pooled_pairs: int
    runtime_s: float
    setup_s: float
    workers: int

    def seed_seconds(self) -> list[float]:
        return [sum(s.seconds.values()) for s in self.seeds]

    def projected_runtime(self, cores: int) -> float:
        """Wall time with ``cores`` single-thread workers, from measured per-seed times.

        Greedy longest-first scheduling of the seeds; ignores contention.
        """
        loads = [0.0] * max(1, cores)
        for t in sorted(self.seed_seconds(), reverse=True):
            loads[loads.index(min(loads))] += t
        return self.setup_s + max(loads)

    def wins(self, a: str, b: str) -> int:
        """Seeds where ``a`` scores strictly above ``b`` on mean dice."""
        return sum(s.mean_dice[a] > s.mean_dice[b] for s in self.seeds)

    def confusion_wins(self, a: str, b: str) -> int:
        """Seeds where ``a`` confuses the pair strictly less than ``b``."""
        return sum(s.pair_confusion[a] < s.pair_confusion[b] for s in self.seeds)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self) -> str:
        lines = ["seed\t" + "\t".join(TRIALS) + "\t" + "\t".join(f"conf[{t}]" for t in TRIALS)]
        for s in self.seeds:
            lines.append(
                f"{s.seed}\t" + "\t".join(f"{s.mean_dice[t]:.4f}" for t in TRIALS)
                + "\t" + "\t".join(f"{s.pair_confusion[t]:.4f}" for t in TRIALS)
            )
        lines.append(f"pooled Wilcoxon IL vs EN: p = {self.pooled_p_il_vs_en:.3g}, "
                     f"mean IL - EN = {self.pooled_mean_diff:+.4f} "
                     f"over {self.n_pooled_pairs} image/class pairs")
        lines.append(f"runtime {self.runtime_s:.0f} s with {self.workers} worker(s); "
                     f"projected with 4 workers {self.projected_runtime(4):.0f} s")
        return "\n".join(lines) + "\n"


def pair_confusion(confusion_normalized: np.ndarray, i: int, j: int) -> float:
    """Mean share of pixels of one pair member predicted as the other."""
    return float((confusion_normalized[i, j] + confusion_normalized[j, i]) / 2.0)


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not on Linux
        return os.cpu_count() or 1


def _run_seed(manifest_path: str, config: ExperimentConfig, seed: int):
    """Train all trials for one seed; returns (SeedResult, pooled per-image dice)."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        manifest = load_manifest(manifest_path)
        catalog = manifest.catalog
        pair = config.synth.confusable_pairs[0]
        pi, pj = catalog.index(pair[0]), catalog.index(pair[1])
        ids, images, gts = ground_truth_maps(manifest, "full", "test")
        base = TrainConfig(trial="IL", epochs=config.epochs, seed=seed, width=config.width,
                           depth=config.depth, batch_size=config.batch_size, tau=config.tau)
        preds, seconds, selected = {}, {}, {}
        for trial in TRIALS:
            t0 = time.perf_counter()
            cfg = TrainConfig.from_dict({**base.to_dict(), "trial": trial})
            if trial == "EN":
                res = train_ensemble(cfg, manifest)
                preds[trial] = decode_bundle(res.bundle, images, config.tau)
                selected[trial] = {r.config["member_class"]: r.selected_epoch for r in res.reports}
            else:
                res = train(cfg, manifest)
                preds[trial] = decode_model(res.model, images, config.tau)
                selected[trial] = res.report.selected_epoch
            seconds[trial] = time.perf_counter() - t0
            log.info("seed %d %s done in %.0fs", seed, trial, seconds[trial])
        report = build_report(preds, gts, catalog, frame_ids=ids)
        pooled = {t: [x for c in catalog.classes for x in report.trials[t].per_image[c]]
                  for t in ("IL", "EN")}
        result = SeedResult(
            seed=seed,
            mean_dice={t: report.trials[t].mean_dice for t in TRIALS},
            class_dice={t: dict(report.trials[t].class_average) for t in TRIALS},
            pair_confusion={t: pair_confusion(report.trials[t].confusion_normalized, pi, pj)
                            for t in TRIALS},
            selected_epoch=selected,
            seconds=seconds,
        )
        return result, pooled
    finally:
        torch.set_num_threads(threads)


def run_experiment(config: ExperimentConfig, workdir: str | Path) -> ExperimentResult:
    t_start = time.perf_counter()
    synth = config.synth
    if len(synth.confusable_pairs) != 1:
        raise ValueError("the experiment expects exactly one confusable pair")
    manifest = split_full_to_binary(synth_generate(synth, Path(workdir) / "data"), keep_source=True)
    manifest_path = str(save_manifest(manifest, Path(workdir) / "data" / "manifest.json"))
    setup_s = time.perf_counter() - t_start

    workers = config.workers or min(len(config.seeds), available_cores())
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            futures = [pool.submit(_run_seed, manifest_path, config, s) for s in config.seeds]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_seed(manifest_path, config, s) for s in config.seeds]

    pooled = {"IL": [], "EN": []}
    for _, per_seed in outcomes:
        for t in pooled:
            pooled[t].extend(per_seed[t])
    p = wilcoxon_signed_rank(pooled["IL"], pooled["EN"])
    return ExperimentResult(
        config={"synth": asdict(synth), "seeds": list(config.seeds), "epochs": config.epochs,
                "width": config.width, "depth": config.depth, "batch_size": config.batch_size,
                "tau": config.tau},
        pair=tuple(synth.confusable_pairs[0]),
        seeds=[r for r, _ in outcomes],
        pooled_p_il_vs_en=p,
        pooled_mean_diff=float(np.mean(np.subtract(pooled["IL"], pooled["EN"]))),
        n_pooled_pairs=len(pooled["IL"]),
        runtime_s=time.perf_counter() - t_start,
        setup_s=setup_s,
        workers=workers,
    )
