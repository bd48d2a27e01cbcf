"""Analytic M/M/1 ground truth for routing snapshots.

Each directed link is an independent M/M/1 queue fed by the summed mean
throughput of the OD pairs routed over it. Rates are converted to packets/s
with a fixed mean packet size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import NetworkSnapshot, PerformanceMatrix, route_hops

MEAN_PACKET_SIZE = 1000.0


class UnstableLinkError(ValueError):
    def __init__(self, link, utilization):
        self.link = link
        self.utilization = utilization
        super().__init__(f"link {link[0]}->{link[1]} is unstable (utilization {utilization:.6g} >= 1)")


@dataclass(frozen=True, eq=False)
class LinkLoads:
    """Per directed link in use, sorted by (u, v)."""

    links: list[tuple[int, int]]
    summed_traffic: np.ndarray
    capacity: np.ndarray

    @property
    def utilization(self) -> np.ndarray:
        return self.summed_traffic / self.capacity

    def as_dict(self) -> dict[tuple[int, int], float]:
        return dict(zip(self.links, self.summed_traffic.tolist()))

    def index(self) -> dict[tuple[int, int], int]:
        return {l: i for i, l in enumerate(self.links)}


def compute_link_loads(snapshot: NetworkSnapshot) -> LinkLoads:
    n = snapshot.n
    pair, u, v = route_hops(snapshot)
    key = u * n + v
    keys, inv = np.unique(key, return_inverse=True)
    traffic = np.bincount(inv, weights=snapshot.traffic.mean[pair], minlength=len(keys))
    cap_map = snapshot.topology.link_capacity()
    links = [(int(k // n), int(k % n)) for k in keys]
    caps = np.array([cap_map[l] for l in links], dtype=float)
    return LinkLoads(links, traffic, caps)


def link_delays(loads: LinkLoads, mean_packet_size: float = MEAN_PACKET_SIZE):
    """M/M/1 (occupancy, sojourn time) per loaded link; raises on the first unstable link."""
    rho = loads.utilization
    bad = np.nonzero(rho >= 1.0)[0]
    if bad.size:
        i = int(bad[0])
        raise UnstableLinkError(loads.links[i], float(rho[i]))
    lam = loads.summed_traffic / mean_packet_size
    mu = loads.capacity / mean_packet_size
    occupancy = rho / (1.0 - rho)
    delay = 1.0 / (mu - lam)
    return occupancy, delay


def ground_truth(snapshot: NetworkSnapshot, mean_packet_size: float = MEAN_PACKET_SIZE) -> PerformanceMatrix:
    loads = compute_link_loads(snapshot)
    occupancy, delay = link_delays(loads, mean_packet_size)
    n = snapshot.n
    pair, u, v = route_hops(snapshot)
    idx = np.searchsorted([a * n + b for a, b in loads.links], u * n + v)
    latency = np.bincount(pair, weights=delay[idx], minlength=snapshot.traffic.k)
    return PerformanceMatrix(latency, dict(zip(loads.links, occupancy.tolist())))


def little_check(loads: LinkLoads, performance: PerformanceMatrix,
                 mean_packet_size: float = MEAN_PACKET_SIZE) -> float:
    """Largest relative gap between occupancy and arrival rate x sojourn time over loaded links."""
    lam = loads.summed_traffic / mean_packet_size
    mu = loads.capacity / mean_packet_size
    sojourn = 1.0 / (mu - lam)
    expected = lam * sojourn
    occ = np.array([performance.link_occupancy[l] for l in loads.links])
    if occ.size == 0:
        return 0.0
    return float(np.max(np.abs(occ - expected) / expected))


def with_ground_truth(snapshot: NetworkSnapshot, mean_packet_size: float = MEAN_PACKET_SIZE) -> NetworkSnapshot:
    return NetworkSnapshot(snapshot.topology, snapshot.traffic, snapshot.routing,
                           ground_truth(snapshot, mean_packet_size))
