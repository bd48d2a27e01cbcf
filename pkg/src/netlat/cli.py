"""``netlat`` command line: gen, transform, train, predict, evaluate, ablate, report.

Every command writes into an output directory and leaves a ``manifest.json``
there. Exit codes: 0 ok, 2 bad input, 3 config/checkpoint mismatch,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .datasets import PRESETS, GeneratorConfig, generate_dataset
from .linegraph import build_line_graph
from .manifest import RunManifest
from .model import ModelConfig, init_params, predict_path_latency, forward, prepare_graphs
from .netmodel import SnapshotError, load_dataset, save_dataset
from .oracle import UnstableLinkError, compute_link_loads
from .roles import assign_roles, build_role_adjacency, structural_features
from .tensorcore import ParamStore, ShapeError
from .trainer import (DEFAULT_BUCKETS, REPORT_COLUMNS, TrainConfig, ablate, evaluate, mape,
                      model_predictor, report_rows, train)

log = logging.getLogger("netlat")

EXIT_OK, EXIT_INPUT, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4
SEED_ENV = "NETLAT_SEED"


class InputError(Exception):
    """Bad flags or unreadable input: exit 2."""


class MismatchError(Exception):
    """Checkpoint and configuration disagree: exit 3."""


class DivergedError(Exception):
    """Training produced non-finite losses: exit 4."""


# ---------------------------------------------------------------- helpers

def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _seed(args) -> int:
    return default_seed() if args.seed is None else args.seed


def _seeds(args) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise InputError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    return [_seed(args)]


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from None


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns=REPORT_COLUMNS) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _manifest(args, command: str, seeds: list[int]) -> RunManifest:
    return RunManifest(command=command, argv=list(args.argv), seeds=seeds)


def _load_snapshots(path: str | None, what: str, manifest: RunManifest, need_truth: bool):
    p = _existing(path, what)
    snaps = load_dataset(p)
    if not snaps:
        raise InputError(f"{what} {p} holds no snapshots")
    if need_truth:
        missing = [i for i, s in enumerate(snaps) if s.performance is None]
        if missing:
            raise InputError(f"{what} {p}: snapshot on line {missing[0] + 1} has no performance labels")
    manifest.add_input(p)
    return snaps


def _model_config(args, manifest: RunManifest, base: dict | None = None) -> ModelConfig:
    d = dict(base or {})
    if getattr(args, "model_config", None):
        p = _existing(args.model_config, "model config")
        d.update(_read_json(p))
        manifest.add_input(p, config=True)
    for flag in ("readout", "n_roles", "embed_dim", "wiring"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid model config: {e}") from None


def _train_config(args, manifest: RunManifest) -> TrainConfig:
    d: dict = {}
    if args.train_config:
        p = _existing(args.train_config, "train config")
        d.update(_read_json(p))
        manifest.add_input(p, config=True)
    for flag in ("epochs", "samples_per_epoch", "lr", "patience"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    # --seeds, then the config file, then --seed / NETLAT_SEED
    if args.seeds or args.seed is not None or "seeds" not in d:
        d["seeds"] = _seeds(args)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid train config: {e}") from None


def _buckets(text: str | None):
    if not text:
        return DEFAULT_BUCKETS
    try:
        out = tuple(tuple(int(x) for x in part.split(":")) for part in text.split(","))
    except ValueError:
        out = ()
    if not out or any(len(b) != 2 or b[0] >= b[1] for b in out):
        raise InputError(f"--buckets must look like 50:75,75:100, got {text!r}")
    if any(a[1] > b[0] for a, b in zip(out, out[1:])):
        raise InputError("--buckets must be increasing and non-overlapping")
    return out


def load_checkpoint(path: Path, config: ModelConfig | None = None) -> tuple[ParamStore, ModelConfig, dict]:
    """Parameters plus the model config they belong to; any disagreement raises MismatchError."""
    obj = _read_json(path)
    stored = obj.get("model_config")
    if config is None:
        if stored is None:
            raise MismatchError(f"{path} carries no model_config; pass --model-config")
        try:
            config = ModelConfig.from_dict(stored)
        except (TypeError, ValueError) as e:
            raise MismatchError(f"{path}: stored model_config invalid: {e}") from None
    if obj.get("config_hash") != config.hash():
        raise MismatchError(f"config hash mismatch: checkpoint {obj.get('config_hash')} "
                            f"vs model config {config.hash()}")
    try:
        loaded = ParamStore.from_checkpoint(obj)
    except (KeyError, TypeError, ValueError) as e:
        raise MismatchError(f"{path}: unreadable checkpoint: {e}") from None
    params = init_params(config, 0)
    if set(dict(iter(loaded))) != set(dict(iter(params))):
        raise MismatchError(f"{path}: parameter names do not match the model config")
    try:
        params.load_state(loaded.state())
    except ShapeError as e:
        raise MismatchError(str(e)) from None
    return params, config, obj


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    seed = _seed(args)
    preset = PRESETS[args.preset or "train"]
    n_min = args.n_min if args.n_min is not None else preset.n_min
    n_max = args.n_max if args.n_max is not None else max(preset.n_max, n_min)
    degree = args.degree if args.degree is not None else min(preset.degree_mean, n_max - 1)
    kw = dict(n_min=n_min, n_max=n_max, degree_mean=degree,
              degree_std=args.degree_std if args.degree_std is not None else preset.degree_std)
    if args.pairs_per_node is not None:
        kw["pairs_per_node"] = args.pairs_per_node
    if args.count < 1:
        raise InputError("--count must be >= 1")
    try:
        config = GeneratorConfig(**kw)
    except ValueError as e:
        raise InputError(str(e)) from None
    snaps = generate_dataset(config, args.count, seed, jobs=args.jobs)
    out = _out_dir(args.out)
    path = out / "dataset.jsonl"
    save_dataset(snaps, path)
    _write_json(out / "generator.json", {**config.__dict__, "count": args.count, "seed": seed})
    m = _manifest(args, "gen", [seed])
    m.outputs = [str(path), str(out / "generator.json")]
    m.write(out)
    log.info("wrote %d snapshots to %s", len(snaps), path)
    return EXIT_OK


def transform_record(snapshot, n_roles: int, role_seed: int) -> dict:
    loads = compute_link_loads(snapshot)
    lg = build_line_graph(snapshot, loads)
    roles = assign_roles(structural_features(lg), n_roles, role_seed)
    ra = build_role_adjacency(lg, roles)
    return {**lg.to_dict(), "roles": roles.role_of.tolist(), "role_pairs": ra.pairs.tolist()}


def cmd_transform(args) -> int:
    m = _manifest(args, "transform", [args.role_seed])
    snaps = _load_snapshots(args.input, "input dataset", m, need_truth=False)
    if args.n_roles < 1:
        raise InputError("--n-roles must be >= 1")
    out = _out_dir(args.out)
    path = out / "linegraphs.jsonl"
    records = [transform_record(s, args.n_roles, args.role_seed) for s in snaps]
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")
    m.outputs = [str(path)]
    if args.dump:
        dump_dir = out / "dump"
        dump_dir.mkdir(exist_ok=True)
        for i, r in enumerate(records):
            p = dump_dir / f"{i:06d}.json"
            _write_json(p, r)
            m.outputs.append(str(p))
    m.write(out)
    return EXIT_OK


def cmd_train(args) -> int:
    m = _manifest(args, "train", [])
    mc = _model_config(args, m)
    tcfg = _train_config(args, m)
    m.seeds = list(tcfg.seeds)
    snaps = _load_snapshots(args.train, "training dataset", m, need_truth=True)
    if args.val:
        val_snaps = _load_snapshots(args.val, "validation dataset", m, need_truth=True)
    else:
        # hold out every tenth snapshot for checkpoint selection
        val_snaps = snaps[9::10]
        snaps = [s for i, s in enumerate(snaps) if i % 10 != 9] or val_snaps
    train_g = prepare_graphs(snaps, mc.n_roles, mc.role_seed, jobs=args.jobs)
    val_g = prepare_graphs(val_snaps, mc.n_roles, mc.role_seed, jobs=args.jobs)
    results, report = train(train_g, val_g, mc, tcfg, jobs=args.jobs)

    out = _out_dir(args.out)
    _write_json(out / "model_config.json", mc.to_dict())
    _write_json(out / "train_config.json", tcfg.to_dict())
    outputs = [out / "model_config.json", out / "train_config.json"]
    best = min(results, key=lambda r: min(r.val_mape) if r.val_mape else np.inf)
    for r in results:
        extra = {"model_config": mc.to_dict(), "seed": r.seed,
                 "best_val_mape": min(r.val_mape) if r.val_mape else None}
        ckpt = r.params.to_checkpoint(mc.hash(), extra)
        p = out / f"checkpoint_seed{r.seed}.json"
        _write_json(p, ckpt)
        outputs.append(p)
        if r is best:
            _write_json(out / "checkpoint.json", ckpt)
            outputs.append(out / "checkpoint.json")
    if args.test:
        test_g = prepare_graphs(_load_snapshots(args.test, "test dataset", m, need_truth=True),
                                mc.n_roles, mc.role_seed, jobs=args.jobs)
        buckets = _buckets(args.buckets)
        for r in results:
            ev = evaluate(model_predictor(r.params, mc), test_g, buckets)
            report.buckets.append({"seed": r.seed, **ev})
            report.rows.extend(report_rows(args.name, r.seed, ev))
    _write_json(out / "report.json", report.to_dict())
    (out / "report.csv").write_text(report.to_csv())
    outputs += [out / "report.json", out / "report.csv"]
    m.outputs = [str(p) for p in outputs]
    m.write(out)
    diverged = [r.seed for r in results if r.diverged]
    if diverged:
        raise DivergedError(f"training diverged for seed(s) {diverged}; see {out / 'report.json'}")
    return EXIT_OK


def _checkpoint_and_config(args, m: RunManifest):
    path = _existing(args.checkpoint, "checkpoint")
    m.add_input(path)
    config = None
    if args.model_config:
        config = _model_config(args, m)
    params, config, obj = load_checkpoint(path, config)
    return params, config, obj


def cmd_predict(args) -> int:
    m = _manifest(args, "predict", [])
    params, config, _ = _checkpoint_and_config(args, m)
    snaps = _load_snapshots(args.input, "input dataset", m, need_truth=False)
    graphs = prepare_graphs([s.without_performance() for s in snaps], config.n_roles, config.role_seed,
                            jobs=args.jobs)
    out = _out_dir(args.out)
    path = out / "predictions.jsonl"
    with path.open("w") as f:
        for i, (s, g) in enumerate(zip(snaps, graphs)):
            delay = forward(g, config, params).delay
            lat = predict_path_latency(delay, g).data
            rec = {"index": i, "pairs": s.traffic.pairs.tolist(), "path_latency": lat.tolist()}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    m.outputs = [str(path)]
    m.write(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    m = _manifest(args, "evaluate", [])
    params, config, obj = _checkpoint_and_config(args, m)
    seed = obj.get("seed", 0)
    m.seeds = [seed]
    snaps = _load_snapshots(args.data, "test dataset", m, need_truth=True)
    graphs = prepare_graphs(snaps, config.n_roles, config.role_seed, jobs=args.jobs)
    buckets = _buckets(args.buckets)
    predictor = model_predictor(params, config)
    ev = evaluate(predictor, graphs, buckets)
    ev["per_snapshot"] = [{"index": i, "n": g.n_base, "mape": mape(predictor(g), g.path_latency)}
                          for i, g in enumerate(graphs)]
    ev.update(config=args.name, seed=seed, config_hash=config.hash())
    out = _out_dir(args.out)
    _write_json(out / "evaluation.json", ev)
    _write_csv(out / "evaluation.csv", report_rows(args.name, seed, ev))
    m.outputs = [str(out / "evaluation.json"), str(out / "evaluation.csv")]
    m.write(out)
    print(f"MAPE {ev['mape']:.3f}%")
    return EXIT_OK


def ablation_summary(rows: list[dict]) -> dict:
    """Whether the NALU readout's across-seed variance is at most the MLP's."""
    by = {r["readout"]: r for r in rows}
    nalu, mlp = by.get("nalu"), by.get("mlp")
    if not nalu or not mlp or nalu["mape_var"] is None or mlp["mape_var"] is None:
        return {"nalu_var": None, "mlp_var": None, "holds": None, "flag": "n/a"}
    holds = nalu["mape_var"] <= mlp["mape_var"]
    return {"nalu_var": nalu["mape_var"], "mlp_var": mlp["mape_var"], "holds": holds,
            "flag": "" if holds else "nalu variance exceeds mlp variance"}


def cmd_ablate(args) -> int:
    m = _manifest(args, "ablate", [])
    base = _model_config(args, m)
    tcfg = _train_config(args, m)
    m.seeds = list(tcfg.seeds)
    train_g = prepare_graphs(_load_snapshots(args.train, "training dataset", m, True),
                             base.n_roles, base.role_seed, jobs=args.jobs)
    val_g = prepare_graphs(_load_snapshots(args.val, "validation dataset", m, True),
                           base.n_roles, base.role_seed, jobs=args.jobs)
    test_g = prepare_graphs(_load_snapshots(args.test, "test dataset", m, True),
                            base.n_roles, base.role_seed, jobs=args.jobs)
    configs = {name: ModelConfig.from_dict({**base.to_dict(), "readout": name}) for name in ("nalu", "mlp")}
    buckets = _buckets(args.buckets)
    rows = ablate(train_g, val_g, test_g, configs, tcfg, buckets, jobs=args.jobs)
    summary = ablation_summary(rows)
    for r in rows:
        if summary["flag"] and r["variance_flag"] == "":
            r["variance_flag"] = summary["flag"]
    out = _out_dir(args.out)
    _write_json(out / "ablation.json", {"rows": rows, "summary": summary, "train_config": tcfg.to_dict()})
    flat = [{"config": r["config"], "seed": s, "mape": v, "mape_mean": r["mape_mean"], "mape_var": r["mape_var"],
             "variance_flag": r["variance_flag"]} for r in rows for s, v in zip(r["seeds"], r["mape_per_seed"])]
    _write_csv(out / "ablation.csv", flat, ("config", "seed", "mape", "mape_mean", "mape_var", "variance_flag"))
    m.outputs = [str(out / "ablation.json"), str(out / "ablation.csv")]
    m.write(out)
    if summary["flag"]:
        log.warning("ablation: %s", summary["flag"])
    return EXIT_OK


def _collect_rows(paths: list[Path], m: RunManifest) -> tuple[list[dict], list[dict]]:
    rows, ablations = [], []
    for d in paths:
        if not d.is_dir():
            raise InputError(f"report input is not a directory: {d}")
        found = False
        for name in ("report.csv", "evaluation.csv"):
            p = d / name
            if p.is_file():
                found = True
                m.add_input(p)
                with p.open() as f:
                    rows.extend(csv.DictReader(f))
        p = d / "ablation.json"
        if p.is_file():
            found = True
            m.add_input(p)
            ablations.append(_read_json(p))
        if not found:
            raise InputError(f"{d} holds no report.csv, evaluation.csv or ablation.json")
    return rows, ablations


def cmd_report(args) -> int:
    m = _manifest(args, "report", [])
    rows, ablations = _collect_rows([Path(p) for p in args.input], m)
    out = _out_dir(args.out)
    _write_csv(out / "report.csv", rows)
    series: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        mid = (float(r["bucket_lo"]) + float(r["bucket_hi"])) / 2
        series.setdefault(r["config"], {}).setdefault(mid, []).append(float(r["mape_mean"]))
    curves = {name: [(x, float(np.mean(v))) for x, v in pts.items()] for name, pts in series.items()}
    (out / "buckets.svg").write_text(plots.line_chart(curves, "MAPE by graph size", "nodes (bucket midpoint)",
                                                      "MAPE (%)"))
    outputs = [out / "report.csv", out / "buckets.svg"]
    summary = {"configs": {name: {str(x): float(np.mean(v)) for x, v in pts.items()}
                           for name, pts in series.items()}}
    if ablations:
        groups: dict[str, list[float]] = {}
        for a in ablations:
            for r in a["rows"]:
                groups.setdefault(r["config"], []).extend(r["mape_per_seed"])
        (out / "ablation.svg").write_text(plots.strip_chart(groups, "Readout ablation: test MAPE per seed",
                                                            "MAPE (%)"))
        outputs.append(out / "ablation.svg")
        summary["ablation"] = [a["summary"] for a in ablations]
    _write_json(out / "report.json", summary)
    outputs.append(out / "report.json")
    m.outputs = [str(p) for p in outputs]
    m.write(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--seed", type=int, default=None, help=f"base seed (default ${SEED_ENV} or 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--model-config", help="JSON file with ModelConfig fields")
    model_flags.add_argument("--readout", choices=("nalu", "mlp"))
    model_flags.add_argument("--n-roles", type=int)
    model_flags.add_argument("--embed-dim", type=int)
    model_flags.add_argument("--wiring", choices=("parallel", "sequential"))

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--train-config", help="JSON file with TrainConfig fields")
    train_flags.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    train_flags.add_argument("--epochs", type=int)
    train_flags.add_argument("--samples-per-epoch", type=int)
    train_flags.add_argument("--lr", type=float)
    train_flags.add_argument("--patience", type=int)
    train_flags.add_argument("--buckets", help="size buckets, e.g. 50:75,75:100")

    p = argparse.ArgumentParser(prog="netlat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a labelled snapshot dataset")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--n-min", type=int)
    g.add_argument("--n-max", type=int)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--degree", type=float, help="target mean node degree")
    g.add_argument("--degree-std", type=float)
    g.add_argument("--pairs-per-node", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("transform", parents=[common], help="build line graphs and roles")
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--n-roles", type=int, default=5)
    t.add_argument("--role-seed", type=int, default=0)
    t.add_argument("--dump", action="store_true", help="also write one indented JSON per snapshot")
    t.set_defaults(fn=cmd_transform)

    tr = sub.add_parser("train", parents=[common, model_flags, train_flags], help="train and checkpoint")
    tr.add_argument("--train", required=True)
    tr.add_argument("--val")
    tr.add_argument("--test")
    tr.add_argument("--name", default="model")
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict", parents=[common, model_flags], help="predict path latencies")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    ev = sub.add_parser("evaluate", parents=[common, model_flags], help="size-bucketed test MAPE")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--buckets")
    ev.add_argument("--name", default="model")
    ev.add_argument("--out", required=True)
    ev.set_defaults(fn=cmd_evaluate)

    ab = sub.add_parser("ablate", parents=[common, model_flags, train_flags], help="NALU vs MLP readout")
    ab.add_argument("--train", required=True)
    ab.add_argument("--val", required=True)
    ab.add_argument("--test", required=True)
    ab.add_argument("--out", required=True)
    ab.set_defaults(fn=cmd_ablate)

    rp = sub.add_parser("report", parents=[common], help="merge CSVs and render SVG plots")
    rp.add_argument("--in", dest="input", nargs="+", required=True, help="output directories of other commands")
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.fn(args)
    except MismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, SnapshotError, UnstableLinkError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
