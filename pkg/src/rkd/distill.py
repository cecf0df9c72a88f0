"""Ensemble knowledge distillation with stochastic weight averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset
from .rng import stream


@dataclass(frozen=True)
class DistillPlan:
    ensemble: Sequence[nn.MlpModel]
    unlabeled_data: Dataset
    temperature: float = 2.0
    epochs: int = 5
    kd_lr: float = 0.01
    batch_size: int = 64
    swa_per_batch: bool = False
    t2_scaling: bool = False

    def validate(self, init: nn.MlpModel | None = None) -> None:
        if not self.ensemble:
            raise ValueError("distillation needs a non-empty ensemble")
        sizes = {m.layer_sizes for m in self.ensemble}
        if len(sizes) != 1:
            raise ValueError("ensemble members have different architectures")
        if init is not None and init.layer_sizes not in sizes:
            raise ValueError("student architecture differs from the ensemble")
        if self.unlabeled_data is None or len(self.unlabeled_data) == 0:
            raise ValueError("distillation needs unlabeled data")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.kd_lr < 0:
            raise ValueError("epochs and batch_size must be >= 1, kd_lr >= 0")


@dataclass(frozen=True)
class SwaState:
    averaged_params: np.ndarray  # float64 running mean
    n_updates: int


def swa_init(params: np.ndarray) -> SwaState:
    return SwaState(np.asarray(params, dtype=np.float64).copy(), 1)


def swa_fold(state: SwaState, current: np.ndarray) -> SwaState:
    """``(n * avg + current) / (n + 1)``."""
    cur = np.asarray(current, dtype=np.float64)
    if cur.shape != state.averaged_params.shape:
        raise ValueError("SWA snapshot layout does not match the running average")
    n = state.n_updates
    return SwaState((n * state.averaged_params + cur) / (n + 1), n + 1)


def ensemble_logits(ensemble: Sequence[nn.MlpModel], batch) -> np.ndarray:
    """Arithmetic mean of the members' logits (float64)."""
    if not ensemble:
        raise ValueError("empty ensemble")
    if len({m.layer_sizes for m in ensemble}) != 1:
        raise ValueError("ensemble members have different architectures")
    total = None
    for m in ensemble:
        z = nn.forward(m.astype(np.float64), batch)
        total = z if total is None else total + z
    return total / len(ensemble)


def pseudo_labels(logits, T: float) -> np.ndarray:
    return nn.softmax_temperature(logits, T)


@dataclass
class DistillTrace:
    epoch_losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # params folded into SWA, init first


def distill_with_trace(plan: DistillPlan, init: nn.MlpModel, seed: int) -> tuple[nn.MlpModel, DistillTrace]:
    plan.validate(init)
    x = plan.unlabeled_data.images
    n = x.shape[0]
    teacher = pseudo_labels(ensemble_logits(plan.ensemble, x), plan.temperature)

    student = init
    swa = swa_init(nn.flatten(init))
    trace = DistillTrace(snapshots=[nn.flatten(init)])
    for epoch in range(plan.epochs):
        order = stream(seed, "distill_shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            g = nn.kl_divergence_backward(student, x[idx], teacher[idx], plan.temperature, plan.t2_scaling)
            losses.append(g.loss * idx.size)
            student = nn.sgd_step(student, g, plan.kd_lr)
            if plan.swa_per_batch:
                swa = swa_fold(swa, nn.flatten(student))
                trace.snapshots.append(nn.flatten(student))
        if not plan.swa_per_batch:
            swa = swa_fold(swa, nn.flatten(student))
            trace.snapshots.append(nn.flatten(student))
        trace.epoch_losses.append(float(np.sum(losses) / n))
    result = nn.unflatten(swa.averaged_params.astype(init.dtype), init.layer_sizes)
    return result, trace


def distill(plan: DistillPlan, init: nn.MlpModel, seed: int) -> nn.MlpModel:
    """Train ``init`` toward the ensemble's tempered outputs; return the SWA model."""
    return distill_with_trace(plan, init, seed)[0]
