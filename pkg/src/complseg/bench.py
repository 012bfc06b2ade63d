"""Inference latency of a single multi-class model versus K-member ensembles."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError
from .evaluation import argmax_decode, ensemble_merge


@dataclass
class BenchEntry:
    name: str
    n_models: int
    mean_ms: float
    std_ms: float
    fps: float
    warmup: int
    iterations: int


@dataclass
class BenchResult:
    height: int
    width: int
    single: BenchEntry
    ensembles: list[BenchEntry]
    slope_ms_per_model: float
    r_squared: float
    hardware: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _single_step(net, x: np.ndarray, tau: float) -> np.ndarray:
    inp = torch.from_numpy(x).float().div_(255.0)
    probs = torch.sigmoid(net(inp))
    return argmax_decode(probs.numpy(), tau)


def _ensemble_step(nets, x: np.ndarray, tau: float) -> np.ndarray:
    inp = torch.from_numpy(x).float().div_(255.0)
    probs = torch.cat([torch.sigmoid(n(inp)) for n in nets], dim=-1)
    return ensemble_merge(probs.numpy(), tau)


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), float(r2)


def run_bench(
    single: torch.nn.Module,
    members: Sequence[torch.nn.Module],
    ks: Sequence[int] = (1, 2, 4, 6),
    height: int = 64,
    width: int = 64,
    iterations: int = 100,
    warmup: int = 10,
    seed: int = 0,
    tau: float = 0.5,
) -> BenchResult:
    """Time input conversion, forward pass(es), sigmoid and decode per frame.

    Configurations are interleaved frame by frame so slow drifts in machine
    load hit all of them alike; every configuration sees the same random
    frame at each iteration, and the order they run in rotates. Members are
    reused cyclically when fewer than ``max(ks)`` are given.
    """
    if iterations < 100:
        raise ConfigError("iterations must be >= 100")
    if warmup < 10:
        raise ConfigError("warmup must be >= 10")
    if not members or not ks or min(ks) < 1:
        raise ConfigError("need at least one member and positive ensemble sizes")
    ks = sorted(set(ks))
    ensembles = {k: [members[i % len(members)] for i in range(k)] for k in ks}
    for net in [single, *members]:
        net.eval()

    rng = np.random.default_rng(seed)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    steps = [("single", lambda x: _single_step(single, x, tau))]
    steps += [(k, lambda x, nets=ensembles[k]: _ensemble_step(nets, x, tau)) for k in ks]
    timings = {key: [] for key, _ in steps}
    try:
        with torch.no_grad():
            for it in range(warmup + iterations):
                x = rng.integers(0, 256, size=(1, height, width, 3), dtype=np.uint8)
                # rotate the order so no configuration always runs first on a fresh frame
                shift = it % len(steps)
                for key, step in steps[shift:] + steps[:shift]:
                    t0 = time.perf_counter()
                    step(x)
                    t1 = time.perf_counter()
                    if it >= warmup:
                        timings[key].append(t1 - t0)
    finally:
        torch.set_num_threads(threads)

    def entry(name, n_models, samples):
        ms = np.asarray(samples) * 1e3
        return BenchEntry(name, n_models, float(ms.mean()), float(ms.std(ddof=1)),
                          float(1e3 / ms.mean()), warmup, iterations)

    single_entry = entry("single", 1, timings["single"])
    ens = [entry(f"ensemble-{k}", k, timings[k]) for k in ks]
    if len(ens) > 1:
        slope, _, r2 = linear_fit([e.n_models for e in ens], [e.mean_ms for e in ens])
    else:
        slope, r2 = 0.0, 0.0
    hw = {"torch": torch.__version__, "threads": 1}
    return BenchResult(height, width, single_entry, ens, slope, r2, hw)
