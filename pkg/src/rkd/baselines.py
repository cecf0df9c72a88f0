"""Reference aggregators: FedAvg, coordinate median and robust learning rate."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .defense import _stack, elementwise_median

AGGREGATORS = ("fedavg", "coord_median", "rlr", "rkd")


def fedavg(params: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Unweighted mean, or a sample-weighted mean when ``weights`` is given."""
    mat = _stack(params)
    dtype = np.asarray(params[0]).dtype
    if weights is None:
        return mat.mean(axis=0).astype(dtype)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (mat.shape[0],) or w.sum() <= 0:
        raise ValueError("weights must be parallel to params with a positive sum")
    return (w @ mat / w.sum()).astype(dtype)


def coord_median_aggregate(params: Sequence[np.ndarray]) -> np.ndarray:
    return elementwise_median(params)


def rlr_aggregate(updates: Sequence[np.ndarray], threshold: int, server_lr: float,
                  global_params: np.ndarray) -> np.ndarray:
    """Sign-vote each coordinate; flip the server step where agreement is short.

    ``updates`` are client deltas ``theta_i - theta_global``.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    mat = _stack(updates)
    g = np.asarray(global_params)
    if g.shape != mat.shape[1:]:
        raise ValueError("global vector layout differs from the updates")
    votes = np.abs(np.sign(mat).sum(axis=0))
    lr = np.where(votes >= threshold, server_lr, -server_lr)
    return (g.astype(np.float64) + lr * mat.mean(axis=0)).astype(g.dtype)
