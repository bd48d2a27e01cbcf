"""Directed line-graph view of a routing snapshot.

Line-graph nodes ("lnodes") are the directed base links that some routing
entry uses; line-graph edges join consecutive links u->v, v->w with w != u.
Node features carry the link utilization, and edge weights carry the share
of a link's traffic that continues onto the next link, scaled by the
capacity ratio of the two links.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import NetworkSnapshot, route_hops
from .oracle import LinkLoads, compute_link_loads

CAPACITY_SCALE = 100000.0


@dataclass(frozen=True, eq=False)
class LineGraph:
    lnodes: np.ndarray          # (N, 2) base directed links, lexicographically sorted
    ledges: np.ndarray          # (E, 2) lnode index pairs
    weights: np.ndarray         # (E,)
    node_features: np.ndarray   # (N, 3)
    traj_indptr: np.ndarray     # (k + 1,) CSR offsets into traj_indices
    traj_indices: np.ndarray    # lnode indices, hop order per OD pair
    n_base: int

    @property
    def n_lnodes(self) -> int:
        return len(self.lnodes)

    @property
    def trajectories(self) -> list[np.ndarray]:
        p = self.traj_indptr
        return [self.traj_indices[p[i]:p[i + 1]] for i in range(len(p) - 1)]

    @property
    def n_pairs(self) -> int:
        return len(self.traj_indptr) - 1

    def lnode_index(self) -> dict[tuple[int, int], int]:
        return {(int(u), int(v)): i for i, (u, v) in enumerate(self.lnodes)}

    def trajectory_pair_ids(self) -> np.ndarray:
        """OD pair id of every entry of ``traj_indices``."""
        return np.repeat(np.arange(self.n_pairs), np.diff(self.traj_indptr))

    def to_dict(self) -> dict:
        return {
            "lnodes": self.lnodes.tolist(),
            "ledges": [[int(s), int(d), float(w)] for (s, d), w in zip(self.ledges, self.weights)],
            "features": self.node_features.tolist(),
            "trajectories": [t.tolist() for t in self.trajectories],
        }


def project_back(lg: LineGraph, index: int) -> tuple[int, int]:
    if not 0 <= index < lg.n_lnodes:
        raise IndexError(f"lnode index {index} out of range 0..{lg.n_lnodes - 1}")
    u, v = lg.lnodes[index]
    return int(u), int(v)


def valid_routing_links(snapshot: NetworkSnapshot) -> np.ndarray:
    nh = snapshot.routing.next_hop
    n = nh.shape[0]
    cur = np.repeat(np.arange(n), n)
    hop = nh.ravel()
    keep = hop >= 0
    keys = np.unique(cur[keep] * n + hop[keep])
    return np.stack([keys // n, keys % n], axis=1)


def _ledges(lnodes: np.ndarray, n: int) -> np.ndarray:
    by_tail: list[list[int]] = [[] for _ in range(n)]
    by_head: list[list[int]] = [[] for _ in range(n)]
    for i, (u, v) in enumerate(lnodes):
        by_tail[u].append(i)
        by_head[v].append(i)
    out = []
    for node in range(n):
        ins, outs = by_head[node], by_tail[node]
        if not ins or not outs:
            continue
        s = np.repeat(ins, len(outs))
        d = np.tile(outs, len(ins))
        keep = lnodes[s, 0] != lnodes[d, 1]
        out.append(np.stack([s[keep], d[keep]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate(out)
    return e[np.lexsort((e[:, 1], e[:, 0]))]


def _lnode_lookup(lnodes: np.ndarray, n: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    keys = lnodes[:, 0] * n + lnodes[:, 1]
    q = u * n + v
    idx = np.searchsorted(keys, q)
    if len(q) and (np.any(idx >= len(keys)) or np.any(keys[np.minimum(idx, len(keys) - 1)] != q)):
        raise ValueError("trajectory uses a link outside the valid-routing set")
    return idx


def _link_capacity(snapshot: NetworkSnapshot, lnodes: np.ndarray) -> np.ndarray:
    cap = snapshot.topology.link_capacity()
    return np.array([cap[(int(u), int(v))] for u, v in lnodes], dtype=float)


def node_features(snapshot: NetworkSnapshot, loads: LinkLoads, lnodes: np.ndarray,
                  capacity_scale: float = CAPACITY_SCALE) -> np.ndarray:
    """Per lnode: [utilization, capacity / capacity_scale, summed peak / capacity].

    Column 0 is the summed mean throughput over the link divided by its
    capacity; links no OD pair traverses get 0 in columns 0 and 2.
    """
    n = snapshot.n
    cap = _link_capacity(snapshot, lnodes)
    util = np.zeros(len(lnodes))
    load_idx = loads.index()
    for i, (u, v) in enumerate(lnodes):
        j = load_idx.get((int(u), int(v)))
        if j is not None:
            util[i] = loads.summed_traffic[j] / cap[i]
    pair, u, v = route_hops(snapshot)
    hop_lnode = _lnode_lookup(lnodes, n, u, v)
    peak = np.bincount(hop_lnode, weights=snapshot.traffic.peak[pair], minlength=len(lnodes))
    return np.stack([util, cap / capacity_scale, peak / cap], axis=1)


def edge_weights(snapshot: NetworkSnapshot, loads: LinkLoads, lnodes: np.ndarray,
                 ledges: np.ndarray) -> np.ndarray:
    """Per ledge (s, d): traffic continuing from s onto d over s's total, times cap(s) / cap(d)."""
    n = snapshot.n
    N = len(lnodes)
    pair, u, v = route_hops(snapshot)
    hop_lnode = _lnode_lookup(lnodes, n, u, v)
    same = pair[:-1] == pair[1:]
    s, d = hop_lnode[:-1][same], hop_lnode[1:][same]
    keys, inv = np.unique(s * N + d, return_inverse=True)
    through = np.bincount(inv, weights=snapshot.traffic.mean[pair[:-1][same]], minlength=len(keys))
    total = np.bincount(hop_lnode, weights=snapshot.traffic.mean[pair], minlength=N)
    cap = _link_capacity(snapshot, lnodes)
    es, ed = ledges[:, 0], ledges[:, 1]
    q = es * N + ed
    num = np.zeros(len(ledges))
    if len(keys):
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        hit = keys[pos] == q
        num[hit] = through[pos[hit]]
    den = total[es]
    frac = np.divide(num, den, out=np.zeros(len(ledges)), where=den > 0)
    return frac * cap[es] / cap[ed]


def build_line_graph(snapshot: NetworkSnapshot, loads: LinkLoads | None = None,
                     capacity_scale: float = CAPACITY_SCALE) -> LineGraph:
    """Only traffic and routing are read, so snapshots without ground truth work too."""
    if loads is None:
        loads = compute_link_loads(snapshot)
    n = snapshot.n
    lnodes = valid_routing_links(snapshot)
    ledges = _ledges(lnodes, n)
    pair, u, v = route_hops(snapshot)
    hop_lnode = _lnode_lookup(lnodes, n, u, v)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(pair, minlength=snapshot.traffic.k))])
    return LineGraph(
        lnodes=lnodes,
        ledges=ledges,
        weights=edge_weights(snapshot, loads, lnodes, ledges),
        node_features=node_features(snapshot, loads, lnodes, capacity_scale),
        traj_indptr=indptr.astype(np.int64),
        traj_indices=hop_lnode.astype(np.int64),
        n_base=n,
    )
