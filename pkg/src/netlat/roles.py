"""Structural roles of line-graph nodes and the same-role co-trajectory adjacency."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, identity, triu
from sklearn.cluster import KMeans

from .linegraph import LineGraph

N_BASE_FEATURES = 5


@dataclass(frozen=True, eq=False)
class RoleAssignment:
    n_roles: int
    role_of: np.ndarray


@dataclass(frozen=True, eq=False)
class RoleAdjacency:
    """Unordered lnode pairs (s < d) sharing a role and an OD trajectory."""

    pairs: np.ndarray   # (P, 2)
    n_lnodes: int

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(s), int(d)) for s, d in self.pairs}

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n_lnodes, self.n_lnodes))
        a[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
        a[self.pairs[:, 1], self.pairs[:, 0]] = 1.0
        return a


def _structure(lg: LineGraph):
    N = lg.n_lnodes
    s, d = lg.ledges[:, 0], lg.ledges[:, 1]
    ones = np.ones(len(s))
    a = csr_matrix((ones, (s, d)), shape=(N, N))
    w = csr_matrix((lg.weights, (s, d)), shape=(N, N))
    return a, w


def _egonet_edges(a: csr_matrix) -> np.ndarray:
    """Directed edges with both endpoints in {v} + undirected neighbours of v."""
    closed = (((a + a.T) + identity(a.shape[0])) > 0).astype(float).tocsr()
    return np.asarray((closed @ a).multiply(closed).sum(axis=1)).ravel()


def structural_features(lg: LineGraph, rounds: int = 2, prune_threshold: float = 0.99) -> np.ndarray:
    """ReFeX-style recursive features, pruned of near-duplicate columns.

    Base features are in/out degree, weighted in/out degree and egonet edge
    count. Each round aggregates the previous round's new columns by mean and
    sum over undirected line-graph neighbours, so ``rounds`` rounds yield
    ``5 * (2 ** (rounds + 1) - 1)`` columns before pruning.
    """
    a, w = _structure(lg)
    base = np.stack([
        np.asarray(a.sum(axis=0)).ravel(),
        np.asarray(a.sum(axis=1)).ravel(),
        np.asarray(w.sum(axis=0)).ravel(),
        np.asarray(w.sum(axis=1)).ravel(),
        _egonet_edges(a),
    ], axis=1)
    und = ((a + a.T) > 0).astype(float).tocsr()
    deg = np.asarray(und.sum(axis=1)).ravel()
    inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    cols = [base]
    last = base
    for _ in range(rounds):
        summed = und @ last
        mean = summed * inv_deg[:, None]
        last = np.concatenate([mean, summed], axis=1)
        cols.append(last)
    return prune_features(np.concatenate(cols, axis=1), prune_threshold)


def prune_features(x: np.ndarray, threshold: float = 0.99) -> np.ndarray:
    """Drop any column whose |correlation| with an earlier kept column exceeds threshold.

    Two constant columns count as duplicates; a constant and a varying column do not.
    """
    if x.shape[0] == 0:
        return x
    centered = x - x.mean(axis=0)
    norm = np.sqrt((centered ** 2).sum(axis=0))
    scale = np.max(np.abs(x), axis=0)
    const = norm <= 1e-12 * np.maximum(scale, 1.0) * np.sqrt(x.shape[0])
    keep: list[int] = []
    for j in range(x.shape[1]):
        dup = False
        for i in keep:
            if const[i] and const[j]:
                dup = True
            elif not const[i] and not const[j]:
                r = centered[:, i] @ centered[:, j] / (norm[i] * norm[j])
                dup = abs(r) > threshold
            if dup:
                break
        if not dup:
            keep.append(j)
    return x[:, keep]


def assign_roles(features: np.ndarray, n_roles: int = 5, seed: int = 0,
                 max_iter: int = 100) -> RoleAssignment:
    """k-means (k-means++ init) on z-scored features.

    Rows are clustered in a canonical (lexicographic) order and roles are
    numbered by first appearance in that order, so the result does not depend
    on how lnodes are indexed.
    """
    N = features.shape[0]
    if N == 0:
        return RoleAssignment(0, np.zeros(0, dtype=np.int64))
    std = features.std(axis=0)
    z = np.divide(features - features.mean(axis=0), std, out=np.zeros_like(features), where=std > 0)
    # rounding keeps the canonical order stable against summation-order noise
    z = np.round(z, 10)
    order = np.lexsort(z.T[::-1]) if z.shape[1] else np.arange(N)
    zs = z[order]
    n_distinct = len(np.unique(zs, axis=0))
    k = max(1, min(n_roles, n_distinct))
    if k == 1:
        labels_sorted = np.zeros(N, dtype=np.int64)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
                        random_state=seed, algorithm="lloyd")
            labels_sorted = km.fit_predict(zs)
    _, first, relabel = np.unique(labels_sorted, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    labels_sorted = rank[relabel]
    role_of = np.empty(N, dtype=np.int64)
    role_of[order] = labels_sorted
    return RoleAssignment(int(role_of.max()) + 1, role_of)


def build_role_adjacency(lg: LineGraph, assignment: RoleAssignment) -> RoleAdjacency:
    N = lg.n_lnodes
    pair_ids = lg.trajectory_pair_ids()
    inc = csr_matrix((np.ones(len(pair_ids)), (pair_ids, lg.traj_indices)), shape=(lg.n_pairs, N))
    co = triu(inc.T @ inc, k=1).tocoo()
    same = assignment.role_of[co.row] == assignment.role_of[co.col]
    pairs = np.stack([co.row[same], co.col[same]], axis=1).astype(np.int64)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return RoleAdjacency(pairs, N)
