"""Line-graph latency model: NALU embedding, DGCN blocks, role attention, NALU readout."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensorcore as tc
from .linegraph import LineGraph, build_line_graph
from .netmodel import NetworkSnapshot
from .roles import RoleAdjacency, assign_roles, build_role_adjacency, structural_features
from .tensorcore import ParamStore, Tensor


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    dgcn_layers: int = 3
    gat_heads: int = 2
    gat_dim: int = 16
    n_roles: int = 5
    edgedrop_p: float = 0.1
    readout: str = "nalu"            # "nalu" or "mlp"
    readout_hidden: int = 16
    leaky_slope: float = 0.2
    branch_combine: str = "concat"
    wiring: str = "parallel"         # "parallel" or "sequential"
    delay_unit: float = 1.0
    headroom_channel: bool = True
    role_seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "dgcn_layers", "gat_heads", "gat_dim", "n_roles", "readout_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.edgedrop_p < 1:
            raise ValueError("edgedrop_p must lie in [0, 1)")
        if self.readout not in ("nalu", "mlp"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.wiring not in ("parallel", "sequential"):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if self.branch_combine != "concat":
            raise ValueError("only concat branch combination is supported")
        if not self.delay_unit > 0:
            raise ValueError("delay_unit must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        return tc.config_hash(self.to_dict())


# ---------------------------------------------------------------- adjacencies

@dataclass(frozen=True, eq=False)
class DgcnAdjacencies:
    """Self-looped first-order and second-order in/out proximity matrices."""

    a_f: sp.csr_matrix
    a_s_in: sp.csr_matrix
    a_s_out: sp.csr_matrix

    def matrices(self) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
        return self.a_f, self.a_s_in, self.a_s_out

    def propagators(self) -> tuple[sp.csr_matrix, ...]:
        return tuple(sym_normalize(a) for a in self.matrices())


def weighted_adjacency(lg: LineGraph) -> sp.csr_matrix:
    N = lg.n_lnodes
    return sp.csr_matrix((lg.weights, (lg.ledges[:, 0], lg.ledges[:, 1])), shape=(N, N))


def proximity_matrices(a: sp.spmatrix):
    """First-order and second-order in/out proximities of a weighted digraph, without self-loops."""
    a = sp.csr_matrix(a, dtype=float)
    a_f = (a + a.T) * 0.5
    row = np.asarray(a.sum(axis=1)).ravel()
    col = np.asarray(a.sum(axis=0)).ravel()
    inv_row = np.divide(1.0, row, out=np.zeros_like(row), where=row != 0)
    inv_col = np.divide(1.0, col, out=np.zeros_like(col), where=col != 0)
    a_s_in = a.T @ sp.diags(inv_row) @ a
    a_s_out = a @ sp.diags(inv_col) @ a.T
    return tuple(sp.csr_matrix(x) for x in (a_f, a_s_in, a_s_out))


def build_adjacencies(lg: LineGraph) -> DgcnAdjacencies:
    eye = sp.identity(lg.n_lnodes, format="csr")
    mats = [_symmetrize(m) + eye for m in proximity_matrices(weighted_adjacency(lg))]
    return DgcnAdjacencies(*(sp.csr_matrix(m) for m in mats))


def _symmetrize(m: sp.csr_matrix) -> sp.csr_matrix:
    # products like A^T D A are symmetric up to rounding; make it exact
    return sp.csr_matrix((m + m.T) * 0.5)


def sym_normalize(a: sp.spmatrix) -> sp.csr_matrix:
    d = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, np.sqrt(d), out=np.zeros_like(d), where=d > 0)
    return sp.csr_matrix(sp.diags(inv) @ a @ sp.diags(inv))


def edge_drop(adjs: DgcnAdjacencies, p: float, rng: np.random.Generator | None,
              training: bool) -> DgcnAdjacencies:
    """Zero each symmetric off-diagonal entry pair with probability p (training only)."""
    if not training or p <= 0:
        return adjs
    out = []
    for m in adjs.matrices():
        coo = sp.triu(m, k=1).tocoo()
        keep = rng.random(coo.nnz) >= p
        upper = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=m.shape)
        out.append(sp.csr_matrix(upper + upper.T + sp.diags(m.diagonal())))
    return DgcnAdjacencies(*out)


# ---------------------------------------------------------------- prepared inputs

@dataclass(eq=False)
class GraphInputs:
    """Everything the model consumes for one snapshot, built once and reused."""

    linegraph: LineGraph
    features: np.ndarray
    adjs: DgcnAdjacencies
    propagators: tuple
    role_of: np.ndarray
    role_adjacency: RoleAdjacency
    gat_src: np.ndarray
    gat_dst: np.ndarray
    path_matrix: sp.csr_matrix
    n_base: int
    path_latency: np.ndarray | None = None
    occupancy: np.ndarray | None = None
    occupancy_mask: np.ndarray | None = None
    true_delay: np.ndarray | None = None

    @property
    def n_lnodes(self) -> int:
        return self.linegraph.n_lnodes

    @property
    def has_targets(self) -> bool:
        return self.path_latency is not None


def gat_edges(role_adjacency: RoleAdjacency, n_lnodes: int):
    """(source, destination) arrays: both directions of every role pair plus self-loops."""
    p = role_adjacency.pairs
    loops = np.arange(n_lnodes)
    src = np.concatenate([p[:, 0], p[:, 1], loops])
    dst = np.concatenate([p[:, 1], p[:, 0], loops])
    order = np.lexsort((src, dst))
    return src[order], dst[order]


def path_matrix(lg: LineGraph) -> sp.csr_matrix:
    """(k x N) incidence of OD pairs on lnodes; multiplying by per-lnode delays sums each path."""
    pair_ids = lg.trajectory_pair_ids()
    return sp.csr_matrix((np.ones(len(pair_ids)), (pair_ids, lg.traj_indices)),
                         shape=(lg.n_pairs, lg.n_lnodes))


def prepare_graph(snapshot: NetworkSnapshot, n_roles: int = 5, role_seed: int = 0,
                  mean_packet_size: float | None = None) -> GraphInputs:
    """Line graph, roles, adjacencies and (when ground truth exists) training targets."""
    from . import oracle

    loads = oracle.compute_link_loads(snapshot)
    lg = build_line_graph(snapshot, loads)
    roles = assign_roles(structural_features(lg), n_roles, role_seed)
    ra = build_role_adjacency(lg, roles)
    adjs = build_adjacencies(lg)
    src, dst = gat_edges(ra, lg.n_lnodes)
    g = GraphInputs(lg, lg.node_features, adjs, adjs.propagators(), roles.role_of, ra,
                    src, dst, path_matrix(lg), snapshot.n)
    perf = snapshot.performance
    if perf is not None:
        g.path_latency = np.asarray(perf.path_latency, dtype=float)
        occ = np.zeros(lg.n_lnodes)
        mask = np.zeros(lg.n_lnodes, dtype=bool)
        for i, (u, v) in enumerate(lg.lnodes):
            x = perf.link_occupancy.get((int(u), int(v)))
            if x is not None and x > 0:
                occ[i] = x
                mask[i] = True
        g.occupancy, g.occupancy_mask = occ, mask
        try:
            _, delay = oracle.link_delays(loads, mean_packet_size or oracle.MEAN_PACKET_SIZE)
            d = np.zeros(lg.n_lnodes)
            idx = lg.lnode_index()
            for l, w in zip(loads.links, delay):
                d[idx[l]] = w
            g.true_delay = d
        except oracle.UnstableLinkError:
            g.true_delay = None
    return g


def _prepare_one(args):
    snapshot, n_roles, role_seed, mean_packet_size = args
    return prepare_graph(snapshot, n_roles, role_seed, mean_packet_size)


def prepare_graphs(snapshots, n_roles: int = 5, role_seed: int = 0, mean_packet_size: float | None = None,
                   jobs: int = 1) -> list[GraphInputs]:
    """``prepare_graph`` over many snapshots, optionally in worker processes."""
    tasks = [(s, n_roles, role_seed, mean_packet_size) for s in snapshots]
    if jobs <= 1 or len(tasks) < 2:
        return [_prepare_one(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_prepare_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


# ---------------------------------------------------------------- parameters

def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


def add_nalu_params(store: ParamStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator):
    store.add(f"{prefix}.W_hat", _uniform(rng, d_in, d_out))
    store.add(f"{prefix}.M_hat", _uniform(rng, d_in, d_out))
    store.add(f"{prefix}.G", _uniform(rng, d_in, d_out))


def add_linear_params(store: ParamStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator):
    store.add(f"{prefix}.W", _uniform(rng, d_in, d_out))
    store.add(f"{prefix}.b", np.zeros(d_out))


def add_dgcn_params(store: ParamStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator):
    for branch in ("theta_F", "theta_in", "theta_out"):
        store.add(f"{prefix}.{branch}", _uniform(rng, d_in, d_out))
    store.add(f"{prefix}.alpha", np.ones(()))
    store.add(f"{prefix}.beta", np.ones(()))
    store.add(f"{prefix}.skip", _uniform(rng, d_in, 3 * d_out))


def add_gat_params(store: ParamStore, prefix: str, d_in: int, heads: int, d_head: int,
                   rng: np.random.Generator):
    store.add(f"{prefix}.W", _uniform(rng, d_in, heads * d_head))
    store.add(f"{prefix}.a_src", _uniform(rng, d_head, heads))
    store.add(f"{prefix}.a_dst", _uniform(rng, d_head, heads))


N_INPUT_FEATURES = 3


def _stage_widths(config: ModelConfig) -> tuple[int, int, int]:
    """(model input width, DGCN branch output, GAT branch output)."""
    d_in = N_INPUT_FEATURES + 1 + int(config.headroom_channel)
    return d_in, 3 * config.embed_dim, config.gat_heads * config.gat_dim


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d_in, d_dgcn, d_gat = _stage_widths(config)
    e = config.embed_dim
    if config.readout == "nalu":
        add_nalu_params(store, "embed", d_in, e, rng)
    else:
        add_linear_params(store, "embed", d_in, e, rng)
    width = e
    for layer in range(config.dgcn_layers):
        add_dgcn_params(store, f"dgcn.{layer}", width, e, rng)
        width = 3 * e
    gat_in = e if config.wiring == "parallel" else d_dgcn
    add_gat_params(store, "gat", gat_in, config.gat_heads, config.gat_dim, rng)
    head_in = d_dgcn + d_gat if config.wiring == "parallel" else d_gat + d_dgcn
    h = config.readout_hidden
    if config.readout == "nalu":
        add_nalu_params(store, "readout.0", head_in, h, rng)
        add_nalu_params(store, "readout.1", h, 2, rng)
    else:
        add_linear_params(store, "readout.0", head_in, h, rng)
        add_linear_params(store, "readout.1", h, 2, rng)
    return store


# ---------------------------------------------------------------- layers

NALU_EXP_MAX = 20.0


def nalu_cell(x, params: ParamStore, prefix: str, eps: float = tc.LOG_EPS) -> Tensor:
    """Gated mix of an additive path W x and a multiplicative path exp(W log(|x| + eps))."""
    x = tc.as_tensor(x)
    w = tc.tanh(params[f"{prefix}.W_hat"]) * tc.sigmoid(params[f"{prefix}.M_hat"])
    a = x @ w
    m = tc.exp(tc.clip(tc.guarded_log_abs(x, eps) @ w, -np.inf, NALU_EXP_MAX))
    g = tc.sigmoid(x @ params[f"{prefix}.G"])
    return g * a + (1.0 - g) * m


def linear(x, params: ParamStore, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def dgcn_block(h, propagators, params: ParamStore, prefix: str, slope: float = 0.2) -> Tensor:
    """Three propagated branches, concatenated, plus a linear skip, then leaky ReLU."""
    p_f, p_in, p_out = propagators
    h = tc.as_tensor(h)
    f = tc.spmm(p_f, h @ params[f"{prefix}.theta_F"])
    s_in = tc.spmm(p_in, h @ params[f"{prefix}.theta_in"]) * params[f"{prefix}.alpha"]
    s_out = tc.spmm(p_out, h @ params[f"{prefix}.theta_out"]) * params[f"{prefix}.beta"]
    combined = tc.concat([f, s_in, s_out], axis=1)
    return tc.leaky_relu(combined + h @ params[f"{prefix}.skip"], slope)


def gat_layer(h, src: np.ndarray, dst: np.ndarray, n_nodes: int, params: ParamStore, prefix: str,
              heads: int, slope: float = 0.2, return_attention: bool = False):
    """Multi-head attention of each node over its role neighbours (self-loops included)."""
    h = tc.as_tensor(h)
    wh = h @ params[f"{prefix}.W"]
    d_head = wh.shape[1] // heads
    outs, atts = [], []
    for k in range(heads):
        cols = slice(k * d_head, (k + 1) * d_head)
        whk = wh[:, cols]
        s = whk @ params[f"{prefix}.a_dst"][:, k:k + 1]
        t = whk @ params[f"{prefix}.a_src"][:, k:k + 1]
        e = tc.leaky_relu(tc.gather(s, dst) + tc.gather(t, src), slope)
        att = tc.segment_softmax(e, dst, n_nodes)
        outs.append(tc.segment_sum(tc.gather(whk, src) * att, dst, n_nodes))
        atts.append(att)
    out = tc.concat(outs, axis=1) if heads > 1 else outs[0]
    if return_attention:
        return out, atts
    return out


def _embed(x, config: ModelConfig, params: ParamStore) -> Tensor:
    if config.readout == "nalu":
        return nalu_cell(x, params, "embed")
    return tc.tanh(linear(x, params, "embed"))


def _readout(h, config: ModelConfig, params: ParamStore) -> Tensor:
    if config.readout == "nalu":
        return nalu_cell(nalu_cell(h, params, "readout.0"), params, "readout.1")
    return linear(tc.tanh(linear(h, params, "readout.0")), params, "readout.1")


def input_matrix(features: np.ndarray, headroom: bool = True) -> np.ndarray:
    """Line-graph features plus derived channels: 1 - utilization (optional) and a constant 1.

    The multiplicative NALU path takes logs of its inputs, so it needs a
    channel that stays away from zero and tracks how close a link is to
    saturation; the constant gives the additive path an offset.
    """
    cols = [features]
    if headroom:
        cols.append(1.0 - features[:, :1])
    cols.append(np.ones((features.shape[0], 1)))
    return np.concatenate(cols, axis=1)


@dataclass
class Prediction:
    delay: Tensor        # (N,) seconds per lnode
    occupancy: Tensor    # (N,)


def forward(graph: GraphInputs, config: ModelConfig, params: ParamStore, training: bool = False,
            rng: np.random.Generator | None = None) -> Prediction:
    x = input_matrix(graph.features, config.headroom_channel)
    h0 = _embed(x, config, params)
    props = graph.propagators
    if training and config.edgedrop_p > 0:
        props = edge_drop(graph.adjs, config.edgedrop_p, rng, True).propagators()
    h = h0
    for layer in range(config.dgcn_layers):
        h = dgcn_block(h, props, params, f"dgcn.{layer}", config.leaky_slope)
    gat_in = h0 if config.wiring == "parallel" else h
    g = gat_layer(gat_in, graph.gat_src, graph.gat_dst, graph.n_lnodes, params, "gat",
                  config.gat_heads, config.leaky_slope)
    out = _readout(tc.concat([h, g], axis=1), config, params)
    delay = tc.softplus(out[:, 0]) * config.delay_unit
    return Prediction(delay, out[:, 1])


def predict_path_latency(delay, graph: GraphInputs) -> Tensor:
    """Sum of per-hop delays along every OD trajectory."""
    d = tc.as_tensor(delay)
    return tc.reshape(tc.spmm(graph.path_matrix, tc.reshape(d, (-1, 1))), (-1,))
