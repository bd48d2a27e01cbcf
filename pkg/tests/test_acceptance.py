"""Acceptance criteria, each at its stated tolerance and time budget.

Every test appends one PASS/FAIL line to ``conftest.ACCEPTANCE``; the lines
are printed in the terminal summary. The end-to-end and ablation checks share
one trained set of models (module fixture), which dominates the runtime.
"""
import dataclasses
import os
import time

import numpy as np
import pytest
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from netlat import tensorcore as tc
from netlat.datasets import GeneratorConfig, generate_dataset, generate_snapshot
from netlat.linegraph import build_line_graph, project_back
from netlat.model import (ModelConfig, add_linear_params, add_nalu_params, build_adjacencies, dgcn_block,
                          forward, gat_layer, init_params, linear, nalu_cell, predict_path_latency,
                          prepare_graph, prepare_graphs, proximity_matrices, weighted_adjacency)
from netlat.netmodel import route_hops
from netlat.oracle import compute_link_loads, link_delays, little_check
from netlat.roles import assign_roles, build_role_adjacency, structural_features
from netlat.trainer import (DEFAULT_BUCKETS, TrainConfig, ablate, constant_predictor, evaluate, loss,
                            model_predictor, train_seeds)
from netlat.cli import ablation_summary

import bruteforce as bf
from conftest import ACCEPTANCE, small_snapshot
from gradsuite import margin_of

JOBS = os.cpu_count() or 1


def record(name, passed, detail):
    ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return passed


# ---------------------------------------------------------------- formula oracles

def test_formula_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    roles_ok = True
    for seed in range(200):
        snap = small_snapshot(seed, n_max=6)
        lg = build_line_graph(snap)
        lnodes = [tuple(map(int, x)) for x in lg.lnodes]
        worst = max(worst, np.max(np.abs(lg.node_features - bf.node_features(snap, lnodes)), initial=0.0))
        weights = [bf.edge_weight(snap, lnodes[s], lnodes[d]) for s, d in lg.ledges]
        worst = max(worst, np.max(np.abs(lg.weights - np.array(weights)), initial=0.0))
        a = np.asarray(weighted_adjacency(lg).todense())
        for got, want in zip(proximity_matrices(sp.csr_matrix(a)), bf.proximities(a)):
            worst = max(worst, np.max(np.abs(np.asarray(got.todense()) - want), initial=0.0))
        roles = assign_roles(structural_features(lg), 5, seed=0)
        trajs = [set(t.tolist()) for t in lg.trajectories]
        roles_ok &= build_role_adjacency(lg, roles).as_set() == bf.role_pairs(trajs, roles.role_of, lg.n_lnodes)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and roles_ok and secs < 60
    record("formula oracles", ok, f"200 snapshots, max abs err {worst:.1e} (<=1e-10), "
           f"role adjacency {'exact' if roles_ok else 'MISMATCH'}, {secs:.1f}s (<60s)")
    assert ok


# ---------------------------------------------------------------- line-graph structure

def test_structural_checks():
    t0 = time.perf_counter()
    failures = []
    for seed in range(500):
        snap = small_snapshot(seed, n_max=10)
        lg = build_line_graph(snap)
        back = [project_back(lg, i) for i in range(lg.n_lnodes)]
        edges = {(int(s), int(d)) for s, d in lg.ledges}
        checks = {
            "size": lg.n_lnodes <= 2 * snap.topology.m,
            "bijective": len(set(back)) == lg.n_lnodes,
            "no reversal": all(back[s][1] == back[d][0] and back[d][1] != back[s][0] for s, d in lg.ledges),
            "lift": all([back[i] for i in traj] == bf.walk(snap, *snap.traffic.pairs[p])
                        and all((int(x), int(y)) in edges for x, y in zip(traj[:-1], traj[1:]))
                        for p, traj in enumerate(lg.trajectories)),
        }
        failures += [(seed, k) for k, v in checks.items() if not v]
    secs = time.perf_counter() - t0
    ok = not failures and secs < 60
    record("line-graph structure", ok, f"500 snapshots, {len(failures)} violations, {secs:.1f}s (<60s)")
    assert ok


# ---------------------------------------------------------------- gradients

# instances whose nearest kink or log singularity is closer than this are redrawn
MARGIN = 1e-2
GRAD_TOL = 1e-4


def _dgcn_case(rng, seed):
    props = build_adjacencies(build_line_graph(small_snapshot(seed, n_max=5))).propagators()
    s = tc.ParamStore()
    for b in ("theta_F", "theta_in", "theta_out"):
        s.add(f"b.{b}", rng.normal(size=(3, 2)))
    s.add("b.alpha", rng.normal())
    s.add("b.beta", rng.normal())
    s.add("b.skip", rng.normal(size=(3, 6)))
    h = tc.Tensor(rng.normal(size=(props[0].shape[0], 3)), requires_grad=True)
    c = rng.normal(size=(props[0].shape[0], 6))
    return (lambda: tc.sum(dgcn_block(h, props, s, "b") * c)), s.tensors() + [h]


def _nalu_case(rng, seed):
    s = tc.ParamStore()
    for k in ("W_hat", "M_hat", "G"):
        s.add(f"n.{k}", rng.normal(size=(3, 2)))
    x = tc.Tensor(rng.uniform(0.2, 2.0, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3)), requires_grad=True)
    c = rng.normal(size=(4, 2))
    return (lambda: tc.sum(nalu_cell(x, s, "n") * c)), s.tensors() + [x]


def _gat_case(rng, seed):
    g = prepare_graph(small_snapshot(seed, n_max=6))
    s = tc.ParamStore()
    s.add("g.W", rng.normal(size=(3, 4)))
    s.add("g.a_src", rng.normal(size=(2, 2)))
    s.add("g.a_dst", rng.normal(size=(2, 2)))
    h = tc.Tensor(rng.normal(size=g.features.shape), requires_grad=True)
    c = rng.normal(size=(g.n_lnodes, 4))
    return (lambda: tc.sum(gat_layer(h, g.gat_src, g.gat_dst, g.n_lnodes, s, "g", 2) * c)), s.tensors() + [h]


def _forward_case(readout, wiring):
    def build(rng, seed):
        cfg = ModelConfig(embed_dim=3, dgcn_layers=2, gat_heads=2, gat_dim=2, readout_hidden=3,
                          readout=readout, wiring=wiring, edgedrop_p=0.0)
        g = prepare_graph(small_snapshot(seed, n_max=5))
        p = init_params(cfg, int(rng.integers(2**31)))

        def objective():
            out = forward(g, cfg, p)
            return loss(g, out.delay, out.occupancy)
        # an untrained loss is in the thousands (percent); rescaling to O(1) keeps
        # roundoff on near-zero gradient entries below the relative-error floor
        scale = 1.0 / abs(objective().item())
        return (lambda: objective() * scale), p.tensors()
    return build


def _checked_seeds(build, wanted=20, max_draws=1000):
    """(worst relative error, accepted, drawn) over ``wanted`` well-conditioned instances."""
    worst, accepted, draws = 0.0, 0, 0
    while accepted < wanted and draws < max_draws:
        rng = np.random.default_rng(draws)
        fn, params = build(rng, draws)
        draws += 1
        if margin_of(fn) < MARGIN:
            continue
        worst = max(worst, tc.gradcheck(fn, params, eps=1e-5))
        accepted += 1
    return worst, accepted, draws


def test_gradient_suite():
    t0 = time.perf_counter()
    cases = {"dgcn block": _dgcn_case, "nalu cell": _nalu_case, "gat head": _gat_case}
    for readout in ("nalu", "mlp"):
        for wiring in ("parallel", "sequential"):
            cases[f"forward {readout}/{wiring}"] = _forward_case(readout, wiring)
    parts, ok = [], True
    for name, build in cases.items():
        worst, accepted, draws = _checked_seeds(build)
        ok &= accepted >= 20 and worst <= GRAD_TOL
        parts.append(f"{name} {worst:.1e} ({accepted}/{draws})")
    secs = time.perf_counter() - t0
    ok &= secs < 120
    record("gradient suite", ok, f"max rel err (<=1e-4 at eps=1e-5, accepted/drawn): {'; '.join(parts)}; "
           f"{secs:.1f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- shared desk-scale data

BUCKETS = DEFAULT_BUCKETS
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    train_cfg = GeneratorConfig.from_preset("train")
    val_cfg = GeneratorConfig.from_preset("test", n_max=150)
    test_cfg = GeneratorConfig.from_preset("test", n_min=50, n_max=150)
    snaps = {
        "train": generate_dataset(train_cfg, 800, seed=1, jobs=JOBS),
        "val": generate_dataset(val_cfg, 16, seed=2, jobs=JOBS),
        "test": generate_dataset(test_cfg, 150, seed=3, jobs=JOBS),
    }
    graphs = {k: prepare_graphs(v, jobs=JOBS) for k, v in snaps.items()}
    tcfg = TrainConfig(seeds=SEEDS)
    base = ModelConfig()
    trained = {"nalu": train_seeds(graphs["train"], graphs["val"], base, tcfg, jobs=JOBS)}
    return {"snaps": snaps, "graphs": graphs, "train_config": tcfg, "base": base, "trained": trained,
            "setup_seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- queueing identities

def test_queueing_identities(desk):
    little = 0.0
    path_exact = flow_exact = True
    count = 0
    for snaps in desk["snaps"].values():
        for snap in snaps:
            count += 1
            loads = compute_link_loads(snap)
            little = max(little, little_check(loads, snap.performance))
            _, delay = link_delays(loads)
            hop_delay = dict(zip(loads.links, delay.tolist()))
            pair, u, v = route_hops(snap)
            for p, (s, d) in enumerate(snap.traffic.pairs):
                hops = bf.walk(snap, s, d)
                total = 0.0
                for h in hops:
                    total += hop_delay[h]
                path_exact &= total == snap.performance.path_latency[p]
                # per pair: net outflow is +demand at the source, -demand at the sink, 0 elsewhere
                sel = pair == p
                net = np.zeros(snap.n)
                np.add.at(net, u[sel], snap.traffic.mean[p])
                np.subtract.at(net, v[sel], snap.traffic.mean[p])
                want = np.zeros(snap.n)
                want[s] += snap.traffic.mean[p]
                want[d] -= snap.traffic.mean[p]
                flow_exact &= bool(np.array_equal(net, want))
    ok = little < 1e-12 and path_exact and flow_exact
    record("queueing identities", ok, f"{count} snapshots, Little gap {little:.1e} (<1e-12), "
           f"path sum {'exact' if path_exact else 'INEXACT'}, flow conservation "
           f"{'exact' if flow_exact else 'INEXACT'}")
    assert ok


# ---------------------------------------------------------------- NALU extrapolation

def _fit_adder(kind, seed, steps=3000, batch=64, lr=3e-2):
    """Train a 2->1 adder on inputs from [0, 1] with MSE; returns (store, predict, in-range val loss)."""
    rng = np.random.default_rng(seed)
    s = tc.ParamStore()
    if kind == "nalu":
        add_nalu_params(s, "n", 2, 1, rng)
        net = lambda x: nalu_cell(x, s, "n")  # noqa: E731
    else:
        add_linear_params(s, "l0", 2, 16, rng)
        add_linear_params(s, "l1", 16, 1, rng)
        net = lambda x: linear(tc.tanh(linear(x, s, "l0")), s, "l1")  # noqa: E731
    for _ in range(steps):
        x = rng.uniform(0, 1, (batch, 2))
        d = net(x) - x.sum(axis=1, keepdims=True)
        s.zero_grad()
        tc.backward(tc.mean(d * d), s.tensors())
        s.adam_step(lr)
    xv = np.random.default_rng(10_000 + seed).uniform(0, 1, (1000, 2))
    val = float(np.mean((net(xv).data.ravel() - xv.sum(axis=1)) ** 2))
    return net, val


def _extrapolation_mape(kind, restarts=10):
    # restarts are selected by in-range validation loss only; the wide range is never seen
    net, _ = min((_fit_adder(kind, seed) for seed in range(restarts)), key=lambda r: r[1])
    x = np.random.default_rng(99).uniform(0, 100, (2000, 2))
    y = x.sum(axis=1)
    return float(100 * np.mean(np.abs(net(x).data.ravel() - y) / y))


def test_nalu_extrapolation():
    t0 = time.perf_counter()
    nalu = _extrapolation_mape("nalu")
    mlp = _extrapolation_mape("mlp")
    secs = time.perf_counter() - t0
    ok = nalu <= 1.0 and mlp > 10.0 and secs < 300
    record("NALU extrapolation", ok, f"trained on [0,1], tested on [0,100]: NALU MAPE {nalu:.3f}% (<=1%), "
           f"MLP MAPE {mlp:.1f}% (>10%), {secs:.0f}s (<300s)")
    assert ok


# ---------------------------------------------------------------- end-to-end generalization

def test_end_to_end(desk):
    t0 = time.perf_counter()
    graphs = desk["graphs"]
    evals = [evaluate(model_predictor(r.params, desk["base"]), graphs["test"], BUCKETS)
             for r in desk["trained"]["nalu"]]
    test_mape = float(np.mean([e["mape"] for e in evals]))

    def bucket(lo):
        return float(np.mean([b["mape_mean"] for e in evals for b in e["buckets"] if b["lo"] == lo]))
    small, large = bucket(50), bucket(125)
    baseline = evaluate(constant_predictor(graphs["train"]), graphs["test"], BUCKETS)["mape"]
    secs = desk["setup_seconds"] + time.perf_counter() - t0
    a, b, c = test_mape <= 10.0, large <= 2 * small, baseline >= 3 * test_mape
    ok = a and b and c
    record("end-to-end", ok, f"(a) test MAPE {test_mape:.2f}% over {len(SEEDS)} seeds (<=10%) "
           f"{'ok' if a else 'FAIL'}; (b) [125,150] {large:.2f}% vs 2x[50,75] {2 * small:.2f}% "
           f"{'ok' if b else 'FAIL'}; (c) constant baseline {baseline:.1f}% = {baseline / test_mape:.1f}x (>=3x) "
           f"{'ok' if c else 'FAIL'}; {secs / 60:.1f} min incl. data and training")
    assert ok


# ---------------------------------------------------------------- ablation

def test_ablation_report(desk):
    g = desk["graphs"]
    configs = {"nalu": desk["base"], "mlp": dataclasses.replace(desk["base"], readout="mlp")}
    rows = ablate(g["train"], g["val"], g["test"], configs, desk["train_config"], BUCKETS,
                  trained=desk["trained"], jobs=JOBS)
    summary = ablation_summary(rows)
    emitted = {r["config"] for r in rows} == {"nalu", "mlp"} and all(r["mape_var"] is not None for r in rows)
    consistent = summary["holds"] == (summary["nalu_var"] <= summary["mlp_var"])
    means = ", ".join(f"{r['config']} mean {r['mape_mean']:.2f}%" for r in rows)
    status = "holds" if summary["holds"] else "FLAGGED: does not hold"
    ACCEPTANCE.append(f"{'PASS' if emitted and consistent else 'FAIL'}  ablation: report emitted; NALU variance "
                      f"{summary['nalu_var']:.3g} vs MLP {summary['mlp_var']:.3g} across {len(SEEDS)} seeds "
                      f"({status}); {means}")
    assert emitted and consistent


# ---------------------------------------------------------------- inference speed

def test_inference_speed():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    gen = GeneratorConfig.from_preset("test")
    sizes, times = [], []
    with threadpool_limits(1):
        for n in (50, 100, 200, 300):
            g = prepare_graph(generate_snapshot(gen, n, n=n))
            runs = []
            for _ in range(3):
                t = time.perf_counter()
                predict_path_latency(forward(g, cfg, params).delay, g)
                runs.append(time.perf_counter() - t)
            sizes.append(g.n_lnodes)
            times.append(min(runs))
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    ok = times[-1] <= 5.0 and slope <= 1.7
    record("inference speed", ok, f"300 nodes ({sizes[-1]} lnodes) {times[-1] * 1e3:.1f} ms single-threaded "
           f"(<=5s); log-log slope {slope:.2f} over lnodes {sizes} (<=1.7)")
    assert ok
