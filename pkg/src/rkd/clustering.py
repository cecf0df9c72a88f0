"""HDBSCAN* for a one-dimensional set of scores.

Exact and quadratic: mutual-reachability distances over all pairs, Prim's
MST, a single-linkage hierarchy, the condensed tree and Excess-of-Mass
selection. Edges of equal weight are removed together, so the result does
not depend on input order.

Conventions:

* core distance of a point is the distance to its ``min_samples``-th
  nearest *other* point; ``min_samples`` defaults to ``min_cluster_size - 1``;
* lambda = 1 / distance, with lambda = inf for zero distances;
* a selected cluster contains every point that belonged to it at birth;
* the root may be selected (a single all-covering cluster) unless
  ``allow_single_cluster=False``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CondensedCluster:
    cluster_id: int
    parent: int | None
    birth_lambda: float
    points: np.ndarray
    contributions: list = field(default_factory=list)
    children: list = field(default_factory=list)

    @property
    def stability(self) -> float:
        return math.fsum(self.contributions)


@dataclass
class _Node:
    points: np.ndarray
    weight: float = 0.0
    children: tuple = ()


def mutual_reachability(values: np.ndarray, min_samples: int) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    dist = np.abs(x[:, None] - x[None, :])
    core = np.sort(dist, axis=1)[:, min_samples]
    return np.maximum(dist, np.maximum(core[:, None], core[None, :]))


def prim_mst(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Minimum spanning tree of a dense symmetric weight matrix."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    link = np.full(n, -1)
    edges = []
    current = 0
    in_tree[0] = True
    for _ in range(n - 1):
        closer = ~in_tree & (weights[current] < best)
        best[closer] = weights[current][closer]
        link[closer] = current
        candidates = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidates))
        edges.append((int(link[nxt]), nxt, float(best[nxt])))
        in_tree[nxt] = True
        current = nxt
    return edges


def _single_linkage(n: int, edges) -> _Node:
    """Merge MST edges bottom-up; equal weights merge in one multi-way node."""
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    nodes = {i: _Node(np.array([i])) for i in range(n)}
    edges = sorted(edges, key=lambda e: e[2])
    k = 0
    while k < len(edges):
        w = edges[k][2]
        group = []
        while k < len(edges) and edges[k][2] == w:
            group.append(edges[k])
            k += 1
        before = {}
        for a, b, _ in group:
            for v in (a, b):
                before.setdefault(find(v), nodes[find(v)])
        for a, b, _ in group:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra
        merged: dict[int, list] = {}
        for old_root, node in before.items():
            merged.setdefault(find(old_root), []).append(node)
        for root, parts in merged.items():
            pts = np.sort(np.concatenate([p.points for p in parts]))
            nodes[root] = _Node(pts, w, tuple(parts))
    return nodes[find(0)]


def _lambda(weight: float) -> float:
    return math.inf if weight == 0 else 1.0 / weight


def condensed_tree(values, min_cluster_size: int, min_samples: int | None = None) -> list[CondensedCluster]:
    """Clusters of the condensed hierarchy, parents before children."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    n = x.size
    if min_samples is None:
        min_samples = min_cluster_size - 1
    if n < min_cluster_size or n < 2:
        return []
    top = _single_linkage(n, prim_mst(mutual_reachability(x, min_samples)))
    clusters = [CondensedCluster(0, None, 0.0, top.points)]
    pending = [(0, top)]
    while pending:
        cid, node = pending.pop(0)
        cluster = clusters[cid]
        while True:
            lam = _lambda(node.weight)
            gain = lam - cluster.birth_lambda
            big = [c for c in node.children if c.points.size >= min_cluster_size]
            small = [c for c in node.children if c.points.size < min_cluster_size]
            for c in small:
                cluster.contributions.extend([gain] * c.points.size)
            if len(big) == 1:
                node = big[0]
                continue
            for c in big:
                cluster.contributions.extend([gain] * c.points.size)
                child = CondensedCluster(len(clusters), cid, lam, c.points)
                cluster.children.append(child.cluster_id)
                clusters.append(child)
                pending.append((child.cluster_id, c))
            break
    return clusters


def excess_of_mass(clusters: list[CondensedCluster], allow_single_cluster: bool = True) -> list[int]:
    """Ids of the clusters chosen by Excess-of-Mass (parent wins ties)."""
    if not clusters:
        return []
    best = {}
    keep = {}
    for c in reversed(clusters):
        child_total = math.fsum(best[k] for k in c.children) if c.children else None
        own = c.stability
        root_blocked = c.parent is None and not allow_single_cluster
        if child_total is not None and (child_total > own or root_blocked):
            best[c.cluster_id] = child_total
            keep[c.cluster_id] = False
        else:
            best[c.cluster_id] = own
            keep[c.cluster_id] = not root_blocked
    selected = []
    stack = [0]
    while stack:
        cid = stack.pop()
        if keep[cid]:
            selected.append(cid)
        else:
            stack.extend(clusters[cid].children)
    return sorted(selected)


def hdbscan_1d(scores, min_cluster_size: int, min_samples: int | None = None,
               allow_single_cluster: bool = True) -> np.ndarray:
    """Cluster labels for scalar scores; ``-1`` marks noise.

    Clusters are numbered by their lowest member index. With fewer than
    ``min_cluster_size`` points everything is noise.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.full(x.size, -1, dtype=np.int64)
    clusters = condensed_tree(x, min_cluster_size, min_samples)
    chosen = [clusters[c].points for c in excess_of_mass(clusters, allow_single_cluster)]
    for label, pts in enumerate(sorted(chosen, key=lambda p: int(p.min()))):
        labels[pts] = label
    return labels
