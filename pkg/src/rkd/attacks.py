"""Client-side backdoor behaviours: trigger variants and model poisoning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import TriggerSpec, apply_trigger
from .rng import stream

DATA_KINDS = ("static_trigger", "dba", "pgd_trigger")
MODEL_KINDS = ("scale", "sign_flip", "additive")
ATTACK_KINDS = ("none",) + DATA_KINDS + MODEL_KINDS


@dataclass(frozen=True)
class AttackConfig:
    """What malicious clients do each round.

    ``kind`` names the primary behaviour. The model-poisoning kinds
    (``scale``, ``sign_flip``, ``additive``) train on statically triggered
    data first. ``model_poison`` stacks a model-poisoning step on top of a
    data kind, e.g. ``kind="dba", model_poison="scale"``.
    """

    kind: str = "none"
    model_poison: str | None = None
    poison_fraction: float = 0.5
    trigger_size: int = 3
    trigger_top: int = 0
    trigger_left: int = 0
    trigger_value: float = 1.0
    target_label: int = 0
    gamma: float | None = None
    strict_raw_scaling: bool = False
    top_fraction: float | None = None
    delta_norm: float | None = None
    dba_parts: int | None = None
    pgd_steps: int = 10
    pgd_step_size: float = 0.05
    pgd_epsilon: float = 0.5

    @property
    def data_kind(self) -> str | None:
        if self.kind == "none":
            return None
        return self.kind if self.kind in DATA_KINDS else "static_trigger"

    @property
    def model_kind(self) -> str | None:
        return self.kind if self.kind in MODEL_KINDS else self.model_poison

    def validate(self) -> list[tuple[str, str]]:
        errors = []
        if self.kind not in ATTACK_KINDS:
            errors.append(("attack.kind", f"must be one of {ATTACK_KINDS}"))
        if self.model_poison is not None and self.model_poison not in MODEL_KINDS:
            errors.append(("attack.model_poison", f"must be one of {MODEL_KINDS}"))
        if not 0.0 <= self.poison_fraction <= 1.0:
            errors.append(("attack.poison_fraction", "must lie in [0, 1]"))
        mk = self.model_kind
        if mk == "scale" and not (self.gamma is not None and self.gamma > 0):
            errors.append(("attack.gamma", "scaling attacks need a positive gamma"))
        if mk == "sign_flip" and not (self.top_fraction is not None and 0 < self.top_fraction <= 1):
            errors.append(("attack.top_fraction", "sign flipping needs top_fraction in (0, 1]"))
        if mk == "additive" and not (self.delta_norm is not None and self.delta_norm > 0):
            errors.append(("attack.delta_norm", "additive perturbation needs a positive delta_norm"))
        if self.pgd_steps < 1:
            errors.append(("attack.pgd_steps", "must be >= 1"))
        if self.pgd_step_size < 0:
            errors.append(("attack.pgd_step_size", "must be non-negative"))
        if not 0.0 <= self.pgd_epsilon <= 1.0:
            errors.append(("attack.pgd_epsilon", "must lie in [0, 1]"))
        if self.trigger_size < 1:
            errors.append(("attack.trigger_size", "must be >= 1"))
        if not 0.0 <= self.trigger_value <= 1.0:
            errors.append(("attack.trigger_value", "must lie in [0, 1]"))
        return errors

    def trigger(self, image_shape: tuple[int, int]) -> TriggerSpec:
        h, w = image_shape
        size_h = min(self.trigger_size, h - self.trigger_top)
        size_w = min(self.trigger_size, w - self.trigger_left)
        return TriggerSpec.patch(self.trigger_top, self.trigger_left, size_h, size_w,
                                 self.trigger_value, self.target_label, image_shape)


@dataclass
class MaliciousClientState:
    client_id: int
    sub_trigger: TriggerSpec | None = None
    adapted_trigger: TriggerSpec | None = None
    pgd_losses: list = field(default_factory=list)


def dba_subtrigger(full: TriggerSpec, n_parts: int, part_index: int) -> TriggerSpec:
    """The ``part_index``-th of ``n_parts`` contiguous row-major slices of the patch."""
    if not 1 <= n_parts <= full.size:
        raise ValueError(f"n_parts must lie in [1, {full.size}]")
    if not 0 <= part_index < n_parts:
        raise ValueError(f"part_index must lie in [0, {n_parts})")
    order = np.lexsort((full.coords[:, 1], full.coords[:, 0]))
    chunk = np.array_split(order, n_parts)[part_index]
    return TriggerSpec(full.coords[chunk], full.values[chunk], full.target_label,
                       full.image_height, full.image_width)


def _check_layout(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"parameter layouts differ: {a.shape} vs {b.shape}")


def scale_update(params: np.ndarray, reference: np.ndarray, gamma: float) -> np.ndarray:
    """``reference + gamma * (params - reference)``.

    gamma > 1 amplifies an update (model replacement style); gamma < 1
    shrinks it the way train-and-scale attacks do.
    """
    _check_layout(params, reference)
    if gamma == 1:
        return params.copy()  # r + (p - r) is not always p in floating point
    p = params.astype(np.float64)
    r = reference.astype(np.float64)
    return (r + gamma * (p - r)).astype(params.dtype)


def scale_raw(params: np.ndarray, gamma: float) -> np.ndarray:
    """``gamma * params``, the literal form used by the strict-raw mode."""
    return (gamma * params.astype(np.float64)).astype(params.dtype)


def importance_scores(params: np.ndarray, loss_grads: np.ndarray) -> np.ndarray:
    _check_layout(params, loss_grads)
    return -(loss_grads.astype(np.float64) * params.astype(np.float64))


def top_indices(scores: np.ndarray, top_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(top_fraction * P)`` highest scores, ties by index."""
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    k = max(1, math.ceil(top_fraction * scores.size - 1e-9))
    return np.argsort(-scores, kind="stable")[:k]


def flip_signs(params: np.ndarray, indices: np.ndarray) -> np.ndarray:
    out = params.copy()
    out[indices] = -out[indices]
    return out


def sign_flip_attack(model: nn.MlpModel, loss_grads: nn.GradVector | np.ndarray, top_fraction: float) -> np.ndarray:
    """Negate the parameters with the highest ``-grad * weight`` importance."""
    params = nn.flatten(model)
    g = loss_grads.values if isinstance(loss_grads, nn.GradVector) else np.asarray(loss_grads)
    return flip_signs(params, top_indices(importance_scores(params, g), top_fraction))


def additive_perturbation(params: np.ndarray, delta_norm: float, seed: int) -> np.ndarray:
    """Add a Gaussian direction rescaled to L2 norm ``delta_norm``."""
    if not delta_norm > 0:
        raise ValueError("delta_norm must be positive")
    direction = stream(seed, "additive_perturbation").standard_normal(params.size)
    delta = direction * (delta_norm / np.linalg.norm(direction))
    return (params.astype(np.float64) + delta).astype(params.dtype)


@dataclass(frozen=True)
class PgdResult:
    trigger: TriggerSpec
    losses: list  # target loss before each step, then the final loss


def pgd_trigger_optimize(model: nn.MlpModel, clean_batch: np.ndarray, trigger: TriggerSpec,
                         steps: int, step_size: float, epsilon: float) -> PgdResult:
    """Signed-gradient descent on the patch values toward the target label.

    Only patch pixels move; they stay within ``epsilon`` of their starting
    values and inside ``[0, 1]``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    batch = np.asarray(clean_batch, dtype=np.float64)
    if batch.shape[-1] != trigger.image_height * trigger.image_width:
        raise ValueError("trigger geometry does not match the batch width")
    v0 = trigger.values.astype(np.float64)
    lo = np.maximum(0.0, v0 - epsilon)
    hi = np.minimum(1.0, v0 + epsilon)
    target = np.full(batch.shape[0], trigger.target_label)
    idx = trigger.flat_indices
    values = v0.copy()
    losses = []
    for _ in range(steps):
        triggered = batch.copy()
        triggered[:, idx] = values
        losses.append(nn.cross_entropy_loss(model, triggered, target))
        grad = nn.input_gradient(model, triggered, trigger.target_label)[:, idx].sum(axis=0)
        values = np.clip(values - step_size * np.sign(grad), lo, hi)
    triggered = batch.copy()
    triggered[:, idx] = values
    losses.append(nn.cross_entropy_loss(model, triggered, target))
    return PgdResult(trigger.with_values(values), losses)


__all__ = [
    "AttackConfig", "MaliciousClientState", "dba_subtrigger", "scale_update", "scale_raw",
    "importance_scores", "top_indices", "flip_signs", "sign_flip_attack",
    "additive_perturbation", "PgdResult", "pgd_trigger_optimize", "apply_trigger",
]
