"""Server-side RKD filtering: score, cluster, pick the benign cluster, select an ensemble."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clustering import hdbscan_1d

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityScores:
    scores: np.ndarray
    client_ids: tuple[int, ...]
    zero_norm: tuple[int, ...] = ()  # clients whose vector had zero norm (score set to 0)


@dataclass(frozen=True)
class ClusteringOutcome:
    labels: np.ndarray
    cluster_means: dict
    benign_cluster: int | None
    benign_clients: frozenset
    q_used: int | None = None
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class EnsembleSelection:
    median_params: np.ndarray
    distances: np.ndarray
    threshold: float
    selected: tuple[int, ...]
    k_sigma: float
    client_ids: tuple[int, ...] = field(default=())


def _stack(params: Sequence[np.ndarray]) -> np.ndarray:
    if len(params) == 0:
        raise ValueError("need at least one parameter vector")
    shapes = {np.shape(p) for p in params}
    if len(shapes) != 1 or len(next(iter(shapes))) != 1:
        raise ValueError(f"parameter vectors must share one flat layout, got {sorted(shapes)}")
    return np.stack([np.asarray(p, dtype=np.float64) for p in params])


def cosine_scores(client_params: Sequence[np.ndarray], global_params: np.ndarray,
                  client_ids: Sequence[int] | None = None) -> SimilarityScores:
    """Cosine similarity of each client vector to the global vector."""
    mat = _stack(client_params)
    g = np.asarray(global_params, dtype=np.float64)
    if g.shape != mat.shape[1:]:
        raise ValueError("global vector layout differs from the client vectors")
    g_norm = np.linalg.norm(g)
    if g_norm == 0:
        raise ValueError("global vector has zero norm")
    norms = np.linalg.norm(mat, axis=1)
    dots = mat @ g
    zero = norms == 0
    scores = np.where(zero, 0.0, dots / np.where(zero, 1.0, norms * g_norm))
    scores = np.clip(scores, -1.0, 1.0)
    ids = tuple(range(len(client_params))) if client_ids is None else tuple(client_ids)
    flagged = tuple(ids[i] for i in np.flatnonzero(zero))
    return SimilarityScores(scores, ids, flagged)


def dynamic_min_cluster_size(n_clients: int, round_index: int) -> int:
    """``max(2, ceil(0.2 N - r))``, capped at ``N``."""
    if n_clients < 2:
        raise ValueError("need at least two clients")
    if round_index < 0:
        raise ValueError("round index must be non-negative")
    # 0.2 * N computed as N / 5 avoids ceil(6.000000000000001) for N = 30
    q = max(2, math.ceil(n_clients / 5 - round_index))
    return min(q, n_clients)


def classify_benign(labels, scores, client_ids: Sequence[int] | None = None,
                    q_used: int | None = None) -> ClusteringOutcome:
    """The cluster with the highest mean score is benign; noise is malicious.

    Ties go to the larger cluster, then the lower cluster id. If no cluster
    exists everybody is treated as benign and a warning is recorded.
    """
    labels = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores.scores if isinstance(scores, SimilarityScores) else scores, dtype=np.float64)
    if labels.shape != s.shape:
        raise ValueError("labels and scores must be parallel")
    if client_ids is None:
        client_ids = scores.client_ids if isinstance(scores, SimilarityScores) else range(s.size)
    ids = tuple(client_ids)
    cluster_ids = sorted(set(labels.tolist()) - {-1})
    if not cluster_ids:
        msg = "no cluster found; treating every client as benign"
        log.warning(msg)
        return ClusteringOutcome(labels, {}, None, frozenset(ids), q_used, (msg,))
    means = {k: float(math.fsum(s[labels == k]) / np.count_nonzero(labels == k)) for k in cluster_ids}
    benign = max(cluster_ids, key=lambda k: (means[k], np.count_nonzero(labels == k), -k))
    members = frozenset(ids[i] for i in np.flatnonzero(labels == benign))
    return ClusteringOutcome(labels, means, benign, members, q_used)


def cluster_clients(scores: SimilarityScores, min_cluster_size: int) -> ClusteringOutcome:
    labels = hdbscan_1d(scores.scores, min_cluster_size)
    return classify_benign(labels, scores, q_used=min_cluster_size)


def elementwise_median(params: Sequence[np.ndarray]) -> np.ndarray:
    """Per-coordinate median; even counts take the mean of the middle pair."""
    mat = _stack(params)
    dtype = np.asarray(params[0]).dtype
    return np.median(mat, axis=0).astype(dtype)


def l1_distances(params: Sequence[np.ndarray], median: np.ndarray) -> np.ndarray:
    mat = _stack(params)
    m = np.asarray(median, dtype=np.float64)
    if m.shape != mat.shape[1:]:
        raise ValueError("median layout differs from the client vectors")
    return np.abs(mat - m).sum(axis=1)


def select_ensemble(benign_params: Sequence[np.ndarray], distances, k_sigma: float = 1.0,
                    client_ids: Sequence[int] | None = None,
                    median_params: np.ndarray | None = None) -> EnsembleSelection:
    """Keep clients with ``d_i <= mean(d) + k_sigma * std(d)`` (population std)."""
    if k_sigma < 0:
        raise ValueError("k_sigma must be non-negative")
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0 or d.size != len(benign_params):
        raise ValueError("distances must be non-empty and parallel to the parameter vectors")
    ids = tuple(range(d.size)) if client_ids is None else tuple(client_ids)
    mu = math.fsum(d) / d.size
    sigma = math.sqrt(math.fsum((d - mu) ** 2) / d.size)
    threshold = mu + k_sigma * sigma
    # d_min <= mu always; guard against rounding pushing it just above
    chosen = [ids[i] for i in range(d.size) if d[i] <= threshold or d[i] == d.min()]
    median = elementwise_median(benign_params) if median_params is None else median_params
    return EnsembleSelection(median, d, threshold, tuple(chosen), float(k_sigma), ids)


def median_selection(benign_params: Sequence[np.ndarray], client_ids: Sequence[int],
                     k_sigma: float = 1.0) -> EnsembleSelection:
    median = elementwise_median(benign_params)
    return select_ensemble(benign_params, l1_distances(benign_params, median), k_sigma,
                           client_ids, median)
