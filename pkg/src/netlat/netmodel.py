"""Routing-network snapshots: topology, traffic, routing and measured performance.

All containers are immutable after construction. Array-valued fields are
stored as read-only numpy arrays and compared by value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

DEFAULT_CAPACITY_LEVELS = (10000.0, 25000.0, 40000.0, 100000.0)


class SnapshotError(ValueError):
    """Base class for snapshot loading and validation failures."""


class SnapshotFormatError(SnapshotError):
    """Malformed snapshot input; ``location`` names the offending line or field."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class SnapshotValidationError(SnapshotError):
    """A structurally well-formed snapshot violates a domain invariant."""


class RoutingLoopError(SnapshotError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    n: int
    links: tuple[tuple[int, int], ...]
    capacity: np.ndarray
    node_attrs: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "links", tuple((int(u), int(v)) for u, v in self.links))
        object.__setattr__(self, "capacity", _frozen(self.capacity, float))
        object.__setattr__(self, "node_attrs", tuple(tuple(map(float, a)) for a in self.node_attrs))

    @property
    def nodes(self) -> range:
        return range(self.n)

    @property
    def m(self) -> int:
        return len(self.links)

    def link_capacity(self) -> dict[tuple[int, int], float]:
        """Capacity keyed by both orientations of every link."""
        out = {}
        for (u, v), c in zip(self.links, self.capacity):
            out[(u, v)] = float(c)
            out[(v, u)] = float(c)
        return out

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.links:
            nbrs[u].append(v)
            nbrs[v].append(u)
        return [sorted(x) for x in nbrs]

    def adjacency(self) -> csr_matrix:
        if not self.links:
            return csr_matrix((self.n, self.n))
        e = np.asarray(self.links)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))

    def mean_degree(self) -> float:
        return 2.0 * self.m / self.n

    def validate(self) -> None:
        seen = set()
        for u, v in self.links:
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise SnapshotValidationError(f"link ({u},{v}) references a node outside 0..{self.n - 1}")
            if u == v:
                raise SnapshotValidationError(f"self-loop link ({u},{v})")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise SnapshotValidationError(f"duplicate link ({u},{v})")
            seen.add(key)
        if len(self.capacity) != len(self.links):
            raise SnapshotValidationError("one capacity per link required")
        if np.any(~(self.capacity > 0)):
            raise SnapshotValidationError("link capacity > 0 violated")
        if self.n < 1:
            raise SnapshotValidationError("topology needs at least one node")
        ncomp, _ = connected_components(self.adjacency(), directed=False)
        if ncomp != 1:
            raise SnapshotValidationError(f"topology is not connected ({ncomp} components)")

    def __eq__(self, other):
        if not isinstance(other, NetworkTopology):
            return NotImplemented
        return (self.n == other.n and self.links == other.links
                and np.array_equal(self.capacity, other.capacity)
                and self.node_attrs == other.node_attrs)


@dataclass(frozen=True, eq=False)
class TrafficMatrix:
    """OD pairs (k x 2 ints) and their (mean, peak) throughput (k x 2 floats)."""

    pairs: np.ndarray
    demand: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pairs", _frozen(np.reshape(self.pairs, (-1, 2)), np.int64))
        object.__setattr__(self, "demand", _frozen(np.reshape(self.demand, (-1, 2)), float))

    @property
    def k(self) -> int:
        return len(self.pairs)

    @property
    def mean(self) -> np.ndarray:
        return self.demand[:, 0]

    @property
    def peak(self) -> np.ndarray:
        return self.demand[:, 1]

    def validate(self, n: int) -> None:
        if len(self.pairs) != len(self.demand):
            raise SnapshotValidationError("traffic pairs and demand lengths differ")
        if np.any((self.pairs < 0) | (self.pairs >= n)):
            raise SnapshotValidationError("traffic references a node outside the topology")
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise SnapshotValidationError("OD pair source equals destination")
        if np.any(~(self.mean > 0)):
            raise SnapshotValidationError("mean_throughput > 0 violated")
        if np.any(~(self.peak >= self.mean)):
            raise SnapshotValidationError("peak_throughput >= mean_throughput violated")

    def __eq__(self, other):
        if not isinstance(other, TrafficMatrix):
            return NotImplemented
        return np.array_equal(self.pairs, other.pairs) and np.array_equal(self.demand, other.demand)


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    """Dense next-hop table; ``next_hop[c, d]`` is the node after c towards d, -1 on the diagonal."""

    next_hop: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "next_hop", _frozen(self.next_hop, np.int64))

    @property
    def n(self) -> int:
        return self.next_hop.shape[0]

    def validate(self, topology: NetworkTopology) -> None:
        n = topology.n
        if self.next_hop.shape != (n, n):
            raise SnapshotValidationError(f"routing must be {n}x{n}, got {self.next_hop.shape}")
        if np.any(np.diag(self.next_hop) != -1):
            raise SnapshotValidationError("routing diagonal must be -1")
        adj = topology.adjacency().toarray() > 0
        off = ~np.eye(n, dtype=bool)
        hops = self.next_hop[off]
        cur = np.nonzero(off)[0]
        if np.any((hops < 0) | (hops >= n)):
            raise SnapshotValidationError("next_hop entry outside the node range")
        bad = ~adj[cur, hops]
        if np.any(bad):
            i = int(np.argmax(bad))
            c, d = np.argwhere(off)[i]
            raise SnapshotValidationError(
                f"next_hop({c},{d})={hops[i]} is not a neighbor of {c}")
        # every walk must reach its destination within n-1 hops
        dest = np.broadcast_to(np.arange(n), (n, n))
        pos = np.broadcast_to(np.arange(n)[:, None], (n, n)).copy()
        for _ in range(n):
            active = pos != dest
            if not active.any():
                return
            pos[active] = self.next_hop[pos[active], dest[active]]
        raise SnapshotValidationError("routing contains a loop")

    def __eq__(self, other):
        if not isinstance(other, RoutingMatrix):
            return NotImplemented
        return np.array_equal(self.next_hop, other.next_hop)


@dataclass(frozen=True, eq=False)
class PerformanceMatrix:
    path_latency: np.ndarray
    link_occupancy: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "path_latency", _frozen(self.path_latency, float))
        object.__setattr__(self, "link_occupancy",
                           {(int(u), int(v)): float(x) for (u, v), x in self.link_occupancy.items()})

    def validate(self, k: int) -> None:
        if len(self.path_latency) != k:
            raise SnapshotValidationError(f"expected {k} path latencies, got {len(self.path_latency)}")
        if np.any(~(self.path_latency > 0)):
            raise SnapshotValidationError("path latency > 0 violated")
        if any(not (x >= 0) for x in self.link_occupancy.values()):
            raise SnapshotValidationError("link occupancy >= 0 violated")

    def __eq__(self, other):
        if not isinstance(other, PerformanceMatrix):
            return NotImplemented
        return (np.array_equal(self.path_latency, other.path_latency)
                and self.link_occupancy == other.link_occupancy)


@dataclass(frozen=True, eq=False)
class NetworkSnapshot:
    topology: NetworkTopology
    traffic: TrafficMatrix
    routing: RoutingMatrix
    performance: PerformanceMatrix | None = None

    @property
    def n(self) -> int:
        return self.topology.n

    def validate(self) -> "NetworkSnapshot":
        self.topology.validate()
        self.traffic.validate(self.topology.n)
        self.routing.validate(self.topology)
        if self.performance is not None:
            self.performance.validate(self.traffic.k)
            link_set = set(self.topology.link_capacity())
            for key in self.performance.link_occupancy:
                if key not in link_set:
                    raise SnapshotValidationError(f"occupancy for unknown link {key[0]}->{key[1]}")
        return self

    def without_performance(self) -> "NetworkSnapshot":
        return NetworkSnapshot(self.topology, self.traffic, self.routing, None)

    def __eq__(self, other):
        if not isinstance(other, NetworkSnapshot):
            return NotImplemented
        return (self.topology == other.topology and self.traffic == other.traffic
                and self.routing == other.routing and self.performance == other.performance)


# ---------------------------------------------------------------- generation

def generate_topology(n: int, target_mean_degree: float,
                      capacity_levels: Iterable[float] = DEFAULT_CAPACITY_LEVELS,
                      seed: int = 0) -> NetworkTopology:
    """Random connected graph with mean degree within 15% of ``target_mean_degree``.

    A random recursive spanning tree guarantees connectivity; uniformly drawn
    extra links then bring the link count to ``round(n * degree / 2)``. The mean
    degree is therefore fixed by rounding alone, so a target that no whole link
    count reaches is rejected up front.
    """
    levels = np.asarray(list(capacity_levels), dtype=float)
    if n < 3:
        raise ValueError("n must be >= 3")
    if not target_mean_degree <= n - 1:
        raise ValueError(f"mean degree {target_mean_degree} exceeds n-1 = {n - 1}")
    if levels.size == 0 or np.any(levels <= 0):
        raise ValueError("capacity_levels must be non-empty and positive")
    m = int(round(n * target_mean_degree / 2.0))
    m = min(max(m, n - 1), n * (n - 1) // 2)
    if abs(2.0 * m / n - target_mean_degree) > 0.15 * target_mean_degree:
        raise ValueError(f"no connected graph on {n} nodes has mean degree within 15% of {target_mean_degree}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = set()
    for i in range(1, n):
        u, v = int(order[i]), int(order[rng.integers(i)])
        edges.add((min(u, v), max(u, v)))
    while len(edges) < m:
        u, v = (int(x) for x in rng.integers(n, size=2))
        if u != v:
            edges.add((min(u, v), max(u, v)))
    links = tuple(sorted(edges))
    caps = levels[rng.integers(len(levels), size=len(links))]
    topo = NetworkTopology(n, links, caps)
    topo.validate()
    return topo


def generate_routing(topology: NetworkTopology) -> RoutingMatrix:
    """All-pairs hop-count shortest paths; ties go to the smallest neighbor id."""
    n = topology.n
    dist = shortest_path(topology.adjacency(), method="D", unweighted=True, directed=False)
    if not np.all(np.isfinite(dist)):
        raise SnapshotValidationError("topology is not connected")
    next_hop = np.full((n, n), -1, dtype=np.int64)
    for c, nbrs in enumerate(topology.neighbors()):
        nb = np.asarray(nbrs)
        closer = dist[nb, :] == dist[c, :] - 1
        first = np.argmax(closer, axis=0)
        row = nb[first]
        row[c] = -1
        next_hop[c] = row
    return RoutingMatrix(next_hop)


def _walk_all(next_hop: np.ndarray, src: np.ndarray, dst: np.ndarray):
    """Vectorised next-hop walk. Returns (pair index, u, v) arrays, hop-ordered per pair."""
    n = next_hop.shape[0]
    pos = src.copy()
    idx = np.arange(len(src))
    hop_pair, hop_u, hop_v, hop_step = [], [], [], []
    for step in range(n):
        active = pos != dst
        if not active.any():
            break
        ia = idx[active]
        nxt = next_hop[pos[active], dst[active]]
        hop_pair.append(ia)
        hop_u.append(pos[active])
        hop_v.append(nxt)
        hop_step.append(np.full(len(ia), step))
        pos[active] = nxt
    else:
        if np.any(pos != dst):
            raise RoutingLoopError("routing loop: a walk did not terminate")
    if not hop_pair:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e
    pair = np.concatenate(hop_pair)
    step = np.concatenate(hop_step)
    order = np.lexsort((step, pair))
    return pair[order], np.concatenate(hop_u)[order], np.concatenate(hop_v)[order]


def route_hops(snapshot: NetworkSnapshot):
    """Every hop of every OD pair as flat arrays ``(pair, u, v)`` sorted by pair then hop order."""
    p = snapshot.traffic.pairs
    return _walk_all(snapshot.routing.next_hop, p[:, 0].copy(), p[:, 1].copy())


def trajectory(snapshot: NetworkSnapshot, pair_index: int) -> list[tuple[int, int]]:
    if not 0 <= pair_index < snapshot.traffic.k:
        raise IndexError(f"pair index {pair_index} out of range 0..{snapshot.traffic.k - 1}")
    s, d = (int(x) for x in snapshot.traffic.pairs[pair_index])
    nh = snapshot.routing.next_hop
    path, seen, cur = [], {s}, s
    while cur != d:
        nxt = int(nh[cur, d])
        if nxt in seen or nxt < 0:
            raise RoutingLoopError(f"routing loop on pair {pair_index} at node {nxt}")
        path.append((cur, nxt))
        seen.add(nxt)
        cur = nxt
    return path


def generate_traffic(topology: NetworkTopology, routing: RoutingMatrix, k: int,
                     max_utilization: float = 0.95, seed: int = 0) -> TrafficMatrix:
    """Random OD demands, rescaled so that the busiest link sits at ``max_utilization``."""
    if not 0 < max_utilization < 1:
        raise ValueError("max_utilization must lie in (0, 1)")
    n = topology.n
    if n < 2 or k < 1:
        raise ValueError(f"cannot place {k} OD pairs on {n} nodes")
    rng = np.random.default_rng(seed)
    total = n * (n - 1)
    codes = rng.permutation(total)[:k]
    if k > total:
        codes = np.concatenate([codes, rng.integers(total, size=k - total)])
    src = codes // (n - 1)
    off = codes % (n - 1)
    dst = off + (off >= src)
    pairs = np.stack([src, dst], axis=1)

    mean = rng.uniform(0.1, 1.0, size=k)
    peak_factor = rng.uniform(1.0, 3.0, size=k)
    pair_idx, u, v = _walk_all(routing.next_hop, src.copy(), dst.copy())
    key = u * n + v
    load = np.bincount(key, weights=mean[pair_idx], minlength=n * n)
    cap = np.zeros(n * n)
    for (a, b), c in zip(topology.links, topology.capacity):
        cap[a * n + b] = c
        cap[b * n + a] = c
    used = load > 0
    ratio = np.max(load[used] / cap[used])
    mean = mean * (max_utilization / ratio) * (1.0 - 1e-12)
    return TrafficMatrix(pairs, np.stack([mean, mean * peak_factor], axis=1))


# ---------------------------------------------------------------- serialisation

def snapshot_to_dict(s: NetworkSnapshot) -> dict:
    topo = {"n": s.topology.n,
            "links": [[u, v, float(c)] for (u, v), c in zip(s.topology.links, s.topology.capacity)]}
    if s.topology.node_attrs:
        topo["node_attrs"] = [list(a) for a in s.topology.node_attrs]
    out = {
        "topology": topo,
        "traffic": [[int(p[0]), int(p[1]), float(d[0]), float(d[1])]
                    for p, d in zip(s.traffic.pairs, s.traffic.demand)],
        "routing": s.routing.next_hop.tolist(),
    }
    if s.performance is not None:
        out["performance"] = {
            "path_latency": [float(x) for x in s.performance.path_latency],
            "link_occupancy": [[f"{u}->{v}", x] for (u, v), x in sorted(s.performance.link_occupancy.items())],
        }
    return out


def _need(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SnapshotFormatError(f"missing field '{key}'", where)
    return obj[key]


def snapshot_from_dict(obj: dict, where: str = "") -> NetworkSnapshot:
    pre = f"{where}." if where else ""
    topo = _need(obj, "topology", where or "$")
    n = _need(topo, "n", pre + "topology")
    if not isinstance(n, int):
        raise SnapshotFormatError("must be an integer", pre + "topology.n")
    links, caps = [], []
    for i, row in enumerate(_need(topo, "links", pre + "topology")):
        if not (isinstance(row, list) and len(row) == 3):
            raise SnapshotFormatError("expected [u, v, capacity]", f"{pre}topology.links[{i}]")
        links.append((int(row[0]), int(row[1])))
        caps.append(float(row[2]))
    topology = NetworkTopology(n, tuple(links), np.asarray(caps, dtype=float),
                               tuple(topo.get("node_attrs", ())))

    rows = _need(obj, "traffic", where or "$")
    for i, row in enumerate(rows):
        if not (isinstance(row, list) and len(row) == 4):
            raise SnapshotFormatError("expected [s, d, mean, peak]", f"{pre}traffic[{i}]")
    arr = np.asarray(rows, dtype=float).reshape(-1, 4)
    traffic = TrafficMatrix(arr[:, :2].astype(np.int64), arr[:, 2:])

    try:
        nh = np.asarray(_need(obj, "routing", where or "$"), dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"routing is not a dense integer matrix ({exc})", pre + "routing")
    routing = RoutingMatrix(nh)

    perf = None
    if obj.get("performance") is not None:
        p = obj["performance"]
        occ = {}
        for i, item in enumerate(p.get("link_occupancy", [])):
            try:
                a, b = item[0].split("->")
                occ[(int(a), int(b))] = float(item[1])
            except (AttributeError, ValueError, IndexError, TypeError):
                raise SnapshotFormatError("expected [\"u->v\", value]",
                                          f"{pre}performance.link_occupancy[{i}]")
        perf = PerformanceMatrix(np.asarray(_need(p, "path_latency", pre + "performance"), dtype=float), occ)
    return NetworkSnapshot(topology, traffic, routing, perf).validate()


def save_snapshot(s: NetworkSnapshot) -> bytes:
    return json.dumps(snapshot_to_dict(s), separators=(",", ":")).encode()


def load_snapshot(data: bytes | str) -> NetworkSnapshot:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(exc.msg, f"line {exc.lineno} column {exc.colno}") from exc
    return snapshot_from_dict(obj)


def save_dataset(snapshots: Iterable[NetworkSnapshot], path) -> int:
    count = 0
    with open(path, "wb") as fh:
        for s in snapshots:
            fh.write(save_snapshot(s) + b"\n")
            count += 1
    return count


def iter_dataset(path) -> Iterator[NetworkSnapshot]:
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SnapshotFormatError(exc.msg, f"line {lineno} column {exc.colno}") from exc
            try:
                yield snapshot_from_dict(obj, where=f"line {lineno}")
            except SnapshotValidationError as exc:
                raise SnapshotValidationError(f"line {lineno}: {exc}") from exc


def load_dataset(path) -> list[NetworkSnapshot]:
    return list(iter_dataset(path))
