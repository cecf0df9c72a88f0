"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package's numerical code: losses are recomputed
sample by sample from the flat parameter layout, and HDBSCAN is rebuilt
from threshold-graph components and exhaustive antichain search instead
of an MST and a bottom-up pass.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# -- losses over the flat layout W0, b0, W1, b1, ... (W row-major, shape out x in) --

def split_params(theta, layer_sizes):
    out, off = [], 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = np.asarray(theta[off:off + fan_in * fan_out], dtype=np.float64).reshape(fan_out, fan_in)
        off += fan_in * fan_out
        b = np.asarray(theta[off:off + fan_out], dtype=np.float64)
        off += fan_out
        out.append((w, b))
    assert off == len(theta)
    return out


def logits_one(theta, layer_sizes, x, layers=None):
    layers = layers or split_params(theta, layer_sizes)
    a = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        a = w @ a + b
        if i < len(layers) - 1:
            a = np.where(a > 0, a, 0.0)
    return a


def _log_softmax(z):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def ce_loss(theta, layer_sizes, xs, ys):
    layers = split_params(theta, layer_sizes)
    total = 0.0
    for x, y in zip(xs, ys):
        total -= _log_softmax(logits_one(theta, layer_sizes, x, layers))[int(y)]
    return total / len(xs)


def kl_loss(theta, layer_sizes, xs, teacher, T):
    layers = split_params(theta, layer_sizes)
    total = 0.0
    for x, q in zip(xs, teacher):
        logp = _log_softmax(logits_one(theta, layer_sizes, x, layers) / T)
        total += sum(qi * (math.log(qi) - lp) for qi, lp in zip(q, logp) if qi > 0)
    return total / len(xs)


def central_difference(f, theta, h=1e-6):
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# -- HDBSCAN by brute force ---------------------------------------------------------

def core_distances(x, min_samples):
    out = []
    for i, xi in enumerate(x):
        others = sorted(abs(xi - xj) for j, xj in enumerate(x) if j != i)
        out.append(others[min_samples - 1])
    return out


def mutual_reachability(x, min_samples):
    core = core_distances(x, min_samples)
    n = len(x)
    return [[0.0 if i == j else max(core[i], core[j], abs(x[i] - x[j])) for j in range(n)]
            for i in range(n)]


def components(points, d, below):
    """Connected components of ``points`` using only edges with weight < ``below``."""
    left = set(points)
    comps = []
    while left:
        start = min(left)
        seen = {start}
        frontier = [start]
        while frontier:
            i = frontier.pop()
            for j in list(left):
                if j not in seen and d[i][j] < below:
                    seen.add(j)
                    frontier.append(j)
        left -= seen
        comps.append(frozenset(seen))
    return comps


def brute_condensed(x, min_cluster_size, min_samples=None):
    """List of dicts: points (birth set), parent, stability."""
    x = [float(v) for v in x]
    n = len(x)
    if min_samples is None:
        min_samples = min_cluster_size - 1
    if n < min_cluster_size or n < 2:
        return []
    d = mutual_reachability(x, min_samples)
    levels = sorted({d[i][j] for i in range(n) for j in range(i + 1, n)}, reverse=True)
    clusters = [{"points": frozenset(range(n)), "parent": None, "birth": 0.0, "contrib": []}]
    active = {0: frozenset(range(n))}
    for w in levels:
        lam = math.inf if w == 0 else 1.0 / w
        for cid in list(active):
            current = active[cid]
            comps = components(current, d, w)
            if len(comps) == 1:
                continue
            c = clusters[cid]
            big = [s for s in comps if len(s) >= min_cluster_size]
            fallen = sum(len(s) for s in comps if len(s) < min_cluster_size)
            c["contrib"] += [lam - c["birth"]] * fallen
            if len(big) == 1:
                active[cid] = big[0]
                continue
            del active[cid]
            for s in big:
                c["contrib"] += [lam - c["birth"]] * len(s)
                clusters.append({"points": s, "parent": cid, "birth": lam, "contrib": []})
                active[len(clusters) - 1] = s
    for c in clusters:
        c["stability"] = math.fsum(c["contrib"])
    return clusters


def _ancestors(clusters, i):
    out = set()
    p = clusters[i]["parent"]
    while p is not None:
        out.add(p)
        p = clusters[p]["parent"]
    return out


def brute_select(clusters):
    """Antichain of maximum total stability.

    Totals are compared as (number of infinite stabilities, finite sum), so
    zero-diameter clusters always win. Ties prefer antichains that leave no
    leaf uncovered, then shallower clusters (a parent beats children of equal
    total).
    """
    if not clusters:
        return []
    anc = [_ancestors(clusters, i) for i in range(len(clusters))]
    leaves = [i for i in range(len(clusters)) if not any(clusters[j]["parent"] == i for j in range(len(clusters)))]
    best, best_key = (), None
    ids = range(len(clusters))
    for k in range(1, len(clusters) + 1):
        for combo in itertools.combinations(ids, k):
            if any(a in anc[b] or b in anc[a] for a, b in itertools.combinations(combo, 2)):
                continue
            stab = [clusters[i]["stability"] for i in combo]
            total = (sum(math.isinf(v) for v in stab), math.fsum(v for v in stab if not math.isinf(v)))
            covers = all(leaf in combo or anc[leaf] & set(combo) for leaf in leaves)
            depth = sum(len(anc[i]) for i in combo)
            key = (total, covers, -depth)
            if best_key is None or key > best_key:
                best, best_key = combo, key
    return list(best)


def brute_hdbscan(x, min_cluster_size, min_samples=None):
    clusters = brute_condensed(x, min_cluster_size, min_samples)
    labels = [-1] * len(x)
    chosen = [clusters[i]["points"] for i in brute_select(clusters)]
    for lab, pts in enumerate(sorted(chosen, key=min)):
        for p in pts:
            labels[p] = lab
    return labels


def canonical(labels):
    """Rename clusters by first appearance so partitions compare directly."""
    names = {}
    out = []
    for v in labels:
        v = int(v)
        if v == -1:
            out.append(-1)
        else:
            out.append(names.setdefault(v, len(names)))
    return out
