"""Training loop, MAPE objective, size-bucketed evaluation and readout ablation."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .model import (GraphInputs, ModelConfig, forward, init_params, predict_path_latency)
from .tensorcore import ParamStore, Tensor

log = logging.getLogger(__name__)

DEFAULT_BUCKETS = ((50, 75), (75, 100), (100, 125), (125, 150))
REPORT_COLUMNS = ("config", "seed", "bucket_lo", "bucket_hi", "mape_mean", "mape_std", "infer_ms_mean")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    samples_per_epoch: int = 400
    seeds: tuple[int, ...] = (0,)
    lambda_path: float = 1.0
    lambda_link: float = 0.5
    patience: int | None = None
    grad_clip: float | None = 100.0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be >= 1")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        return cls(epochs=250, samples_per_epoch=4000, seeds=(0, 1, 2, 3, 4), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["seeds"] = tuple(d.get("seeds", (0,)))
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


# ---------------------------------------------------------------- metrics

def mape(predicted, truth) -> float:
    """Mean absolute percentage error, in percent."""
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    zero = np.nonzero(t == 0)[0]
    if zero.size:
        raise ValueError(f"truth is zero at index {int(zero[0])}")
    if t.size == 0:
        return float("nan")
    return float(100.0 * np.mean(np.abs(p - t) / np.abs(t)))


def mape_tensor(predicted: Tensor, truth: np.ndarray) -> Tensor:
    t = np.asarray(truth, dtype=float)
    return tc.mean(tc.abs(predicted - t) * (100.0 / np.abs(t)))


def loss(graph: GraphInputs, delay: Tensor, occupancy: Tensor, lambda_path: float = 1.0,
         lambda_link: float = 0.5) -> Tensor:
    """Weighted path-latency MAPE plus occupancy MAPE over loaded links."""
    total = mape_tensor(predict_path_latency(delay, graph), graph.path_latency) * lambda_path
    mask = graph.occupancy_mask
    if lambda_link and mask is not None and mask.any():
        idx = np.nonzero(mask)[0]
        total = total + mape_tensor(tc.gather(occupancy, idx), graph.occupancy[idx]) * lambda_link
    return total


# ---------------------------------------------------------------- predictors

def predict(params: ParamStore, config: ModelConfig, graph: GraphInputs) -> np.ndarray:
    pred = forward(graph, config, params, training=False)
    return predict_path_latency(pred.delay, graph).data.copy()


def model_predictor(params: ParamStore, config: ModelConfig) -> Callable[[GraphInputs], np.ndarray]:
    return lambda g: predict(params, config, g)


def oracle_predictor(graph: GraphInputs) -> np.ndarray:
    """Feeds the true per-hop delays through the path sum."""
    return np.asarray(graph.path_matrix @ graph.true_delay).ravel()


def constant_predictor(train: Sequence[GraphInputs]) -> Callable[[GraphInputs], np.ndarray]:
    value = float(np.mean(np.concatenate([g.path_latency for g in train])))
    return lambda g: np.full(g.linegraph.n_pairs, value)


# ---------------------------------------------------------------- training

@dataclass
class SeedResult:
    seed: int
    params: ParamStore | None
    train_mape: list[float] = field(default_factory=list)
    val_mape: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_epoch: int = -1
    stopped_early: bool = False
    diverged: bool = False
    seconds: float = 0.0

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "params"} | {"seed": self.seed}


def mean_mape(predictor: Callable[[GraphInputs], np.ndarray], graphs: Sequence[GraphInputs]) -> float:
    return float(np.mean([mape(predictor(g), g.path_latency) for g in graphs]))


def train_seed(train_graphs: Sequence[GraphInputs], val_graphs: Sequence[GraphInputs],
               model_config: ModelConfig, train_config: TrainConfig, seed: int,
               on_epoch: Callable[[int, float, float], None] | None = None) -> SeedResult:
    rng = np.random.default_rng(seed)
    params = init_params(model_config, seed)
    tensors = params.tensors()
    result = SeedResult(seed, None)
    best = math.inf
    best_state = params.state()
    since_best = 0
    start = time.perf_counter()
    n = len(train_graphs)
    for epoch in range(train_config.epochs):
        reps = -(-train_config.samples_per_epoch // n)
        order = np.concatenate([rng.permutation(n) for _ in range(reps)])[:train_config.samples_per_epoch]
        losses = []
        for i in order:
            g = train_graphs[i]
            pred = forward(g, model_config, params, training=True, rng=rng)
            value = loss(g, pred.delay, pred.occupancy, train_config.lambda_path, train_config.lambda_link)
            if not np.isfinite(value.item()):
                result.diverged = True
                break
            params.zero_grad()
            tc.backward(value, tensors)
            if train_config.grad_clip is not None:
                params.clip_grad_norm(train_config.grad_clip)
            params.adam_step(train_config.lr, train_config.betas)
            losses.append(value.item())
        if result.diverged:
            log.warning("seed %d diverged in epoch %d", seed, epoch)
            result.stop_epoch = epoch
            break
        result.train_mape.append(float(np.mean(losses)))
        predictor = model_predictor(params, model_config)
        val = mean_mape(predictor, val_graphs) if val_graphs else result.train_mape[-1]
        if not np.isfinite(val):
            result.diverged = True
            result.stop_epoch = epoch
            break
        result.val_mape.append(val)
        if on_epoch:
            on_epoch(epoch, result.train_mape[-1], val)
        log.info("seed %d epoch %d train %.3f val %.3f", seed, epoch, result.train_mape[-1], val)
        if val < best:
            best, best_state, since_best = val, params.state(), 0
            result.best_epoch = epoch
        else:
            since_best += 1
        result.stop_epoch = epoch
        if train_config.patience is not None and since_best >= train_config.patience:
            result.stopped_early = True
            break
    params.load_state(best_state)
    result.params = params
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class TrainReport:
    model_config: dict
    train_config: dict
    seeds: list[dict]
    buckets: list[dict] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    ablation: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()


def train_seeds(train_graphs: Sequence[GraphInputs], val_graphs: Sequence[GraphInputs],
                model_config: ModelConfig, train_config: TrainConfig, jobs: int = 1) -> list[SeedResult]:
    """One independent run per seed; with jobs > 1 seeds run in worker processes."""
    seeds = list(train_config.seeds)
    if jobs <= 1 or len(seeds) <= 1:
        return [train_seed(train_graphs, val_graphs, model_config, train_config, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        futures = [pool.submit(train_seed, train_graphs, val_graphs, model_config, train_config, s)
                   for s in seeds]
        return [f.result() for f in futures]


def train(train_graphs: Sequence[GraphInputs], val_graphs: Sequence[GraphInputs],
          model_config: ModelConfig, train_config: TrainConfig,
          jobs: int = 1) -> tuple[list[SeedResult], TrainReport]:
    results = train_seeds(train_graphs, val_graphs, model_config, train_config, jobs)
    report = TrainReport(model_config.to_dict(), train_config.to_dict(), [r.summary() for r in results])
    return results, report


# ---------------------------------------------------------------- evaluation

@dataclass
class BucketResult:
    lo: int
    hi: int
    count: int
    mape_mean: float
    mape_std: float
    infer_ms_mean: float


def bucket_of(n: int, buckets: Sequence[tuple[int, int]]) -> int | None:
    """Index of the half-open bucket [lo, hi) holding n; the last bucket also includes hi."""
    for i, (lo, hi) in enumerate(buckets):
        if lo <= n < hi or (i == len(buckets) - 1 and n == hi):
            return i
    return None


def evaluate(predictor: Callable[[GraphInputs], np.ndarray], graphs: Sequence[GraphInputs],
             buckets: Sequence[tuple[int, int]] = DEFAULT_BUCKETS) -> dict:
    """Per-snapshot MAPE grouped by base-graph size; empty buckets are omitted.

    Timing covers only the predictor call (forward pass and path sum).
    """
    per_bucket: dict[int, list[tuple[float, float]]] = {}
    all_mape = []
    for g in graphs:
        t0 = time.perf_counter()
        pred = predictor(g)
        ms = (time.perf_counter() - t0) * 1e3
        m = mape(pred, g.path_latency)
        all_mape.append(m)
        b = bucket_of(g.n_base, buckets)
        if b is not None:
            per_bucket.setdefault(b, []).append((m, ms))
    out = []
    for b in sorted(per_bucket):
        vals = np.array(per_bucket[b])
        lo, hi = buckets[b]
        out.append(asdict(BucketResult(lo, hi, len(vals), float(vals[:, 0].mean()),
                                       float(vals[:, 0].std()), float(vals[:, 1].mean()))))
    return {"mape": float(np.mean(all_mape)) if all_mape else float("nan"), "buckets": out}


def report_rows(config_name: str, seed: int, evaluation: dict) -> list[dict]:
    return [{"config": config_name, "seed": seed, "bucket_lo": b["lo"], "bucket_hi": b["hi"],
             "mape_mean": b["mape_mean"], "mape_std": b["mape_std"], "infer_ms_mean": b["infer_ms_mean"]}
            for b in evaluation["buckets"]]


def ablate(train_graphs: Sequence[GraphInputs], val_graphs: Sequence[GraphInputs],
           test_graphs: Sequence[GraphInputs], configs: dict[str, ModelConfig],
           train_config: TrainConfig, buckets: Sequence[tuple[int, int]] = DEFAULT_BUCKETS,
           trained: dict[str, list[SeedResult]] | None = None, jobs: int = 1) -> list[dict]:
    """Train every config over the same seeds and compare test MAPE across seeds.

    ``trained`` may supply already-trained seed results per config name.
    Variance is reported as None when only one seed ran.
    """
    rows = []
    for name, cfg in configs.items():
        results = (trained or {}).get(name)
        if results is None:
            results = train_seeds(train_graphs, val_graphs, cfg, train_config, jobs)
        per_seed = []
        bucket_vals: dict[tuple[int, int], list[float]] = {}
        for r in results:
            ev = evaluate(model_predictor(r.params, cfg), test_graphs, buckets)
            per_seed.append(ev["mape"])
            for b in ev["buckets"]:
                bucket_vals.setdefault((b["lo"], b["hi"]), []).append(b["mape_mean"])
        n = len(per_seed)
        rows.append({
            "config": name,
            "readout": cfg.readout,
            "seeds": [r.seed for r in results],
            "mape_per_seed": per_seed,
            "mape_mean": float(np.mean(per_seed)),
            "mape_var": float(np.var(per_seed, ddof=1)) if n > 1 else None,
            "variance_flag": "n/a" if n < 2 else "",
            "buckets": [{"lo": lo, "hi": hi, "mape_mean": float(np.mean(v)),
                         "mape_var": float(np.var(v, ddof=1)) if len(v) > 1 else None}
                        for (lo, hi), v in sorted(bucket_vals.items())],
        })
    return rows
