"""Synthetic snapshot datasets labelled by the queueing oracle."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .netmodel import (DEFAULT_CAPACITY_LEVELS, NetworkSnapshot, generate_routing,
                       generate_topology, generate_traffic)
from .oracle import MEAN_PACKET_SIZE, UnstableLinkError, ground_truth


@dataclass(frozen=True)
class DatasetPreset:
    n_min: int
    n_max: int
    degree_mean: float
    degree_std: float


# graph sizes and degree statistics of the training and test distributions
PRESETS = {
    "train": DatasetPreset(25, 50, 9.778, 0.9491),
    "test": DatasetPreset(50, 300, 9.523, 1.268),
}


@dataclass(frozen=True)
class GeneratorConfig:
    n_min: int = 25
    n_max: int = 50
    degree_mean: float = 9.778
    degree_std: float = 0.9491
    pairs_per_node: int = 10
    utilization_range: tuple[float, float] = (0.5, 0.95)
    capacity_levels: tuple[float, ...] = DEFAULT_CAPACITY_LEVELS
    mean_packet_size: float = MEAN_PACKET_SIZE

    def __post_init__(self):
        if self.n_min < 3:
            raise ValueError(f"n_min must be >= 3, got {self.n_min}")
        if self.n_max < self.n_min:
            raise ValueError(f"n_max {self.n_max} < n_min {self.n_min}")
        if not 0 < self.degree_mean <= self.n_max - 1:
            raise ValueError(f"mean degree {self.degree_mean} infeasible for graphs of at most "
                             f"{self.n_max} nodes (max {self.n_max - 1})")
        if self.degree_std < 0:
            raise ValueError("degree_std must be >= 0")
        if self.pairs_per_node < 1:
            raise ValueError("pairs_per_node must be >= 1")
        lo, hi = self.utilization_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"utilization range {self.utilization_range} must satisfy 0 < lo <= hi < 1")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "GeneratorConfig":
        p = PRESETS[name]
        kw = dict(n_min=p.n_min, n_max=p.n_max, degree_mean=p.degree_mean, degree_std=p.degree_std)
        kw.update(overrides)
        return cls(**kw)


def generate_snapshot(config: GeneratorConfig, seed: int, n: int | None = None,
                      max_resamples: int = 10) -> NetworkSnapshot:
    """One labelled snapshot; traffic is redrawn if the oracle finds an unstable link."""
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(config.n_min, config.n_max + 1))
    lo_deg = 2.0 * (n - 1) / n
    degree = float(np.clip(rng.normal(config.degree_mean, config.degree_std), lo_deg, n - 1))
    topo = generate_topology(n, degree, config.capacity_levels, seed=int(rng.integers(2**31)))
    routing = generate_routing(topo)
    k = min(config.pairs_per_node * n, n * (n - 1))
    for _ in range(max_resamples):
        util = float(rng.uniform(*config.utilization_range))
        traffic = generate_traffic(topo, routing, k, util, seed=int(rng.integers(2**31)))
        snap = NetworkSnapshot(topo, traffic, routing)
        try:
            perf = ground_truth(snap, config.mean_packet_size)
        except UnstableLinkError:
            continue
        return NetworkSnapshot(topo, traffic, routing, perf)
    raise UnstableLinkError(("?", "?"), 1.0)


def generate_dataset(config: GeneratorConfig, count: int, seed: int, jobs: int = 1) -> list[NetworkSnapshot]:
    """``count`` snapshots from per-snapshot seeds derived from ``seed``; identical for any ``jobs``."""
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]
    if jobs <= 1 or count < 2:
        return [generate_snapshot(config, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(generate_snapshot, [config] * count, seeds, chunksize=max(1, count // (4 * jobs))))
