"""Minimal dense network engine.

A multilayer perceptron with ReLU hidden layers and raw-logit outputs,
analytic backprop for cross-entropy and tempered KL losses, plain SGD and
a flat parameter layout used everywhere else in the package.

Parameters are stored in the model dtype (float32 by default). All
arithmetic is carried out in float64 and cast back on the way out, which
keeps results reproducible and lets float64 models be checked against
finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import stream


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]  # weights[l].shape == (sizes[l+1], sizes[l])
    biases: tuple[np.ndarray, ...]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    @property
    def n_params(self) -> int:
        return param_count(self.layer_sizes)

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(
            self.layer_sizes,
            tuple(w.astype(dtype) for w in self.weights),
            tuple(b.astype(dtype) for b in self.biases),
        )

    def equals(self, other: "MlpModel") -> bool:
        """Bitwise equality of architecture, dtype and every parameter."""
        return (
            self.layer_sizes == other.layer_sizes
            and self.dtype == other.dtype
            and np.array_equal(flatten(self), flatten(other))
        )


@dataclass(frozen=True)
class GradVector:
    """Gradient in the canonical flat layout plus the loss it came from."""

    values: np.ndarray
    loss: float


def _check_sizes(layer_sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError(f"need at least an input and an output layer, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    return sizes


def param_count(layer_sizes: Sequence[int]) -> int:
    sizes = _check_sizes(layer_sizes)
    return sum(sizes[l] * sizes[l + 1] + sizes[l + 1] for l in range(len(sizes) - 1))


def init_mlp(layer_sizes: Sequence[int], seed: int, dtype=np.float32) -> MlpModel:
    """He-initialised weights, zero biases; a pure function of ``seed``."""
    sizes = _check_sizes(layer_sizes)
    rng = stream(seed, "init_mlp")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpModel(sizes, tuple(weights), tuple(biases))


def flatten(model: MlpModel) -> np.ndarray:
    """Concatenate ``W0, b0, W1, b1, ...`` (row-major) into one vector."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(params: np.ndarray, layer_sizes: Sequence[int]) -> MlpModel:
    sizes = _check_sizes(layer_sizes)
    params = np.asarray(params)
    if params.ndim != 1 or params.size != param_count(sizes):
        raise ValueError(
            f"parameter vector has length {params.size}, architecture {sizes} "
            f"needs {param_count(sizes)}"
        )
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        weights.append(params[offset:offset + n].reshape(fan_out, fan_in).copy())
        offset += n
        biases.append(params[offset:offset + fan_out].copy())
        offset += fan_out
    return MlpModel(sizes, tuple(weights), tuple(biases))


def _as_batch(model: MlpModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"batch shape {np.shape(batch)} does not match input width {model.layer_sizes[0]}"
        )
    return x


def _forward_cache(model: MlpModel, x: np.ndarray):
    """Return (activations, pre-activations) in float64."""
    acts = [x]
    pres = []
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.astype(np.float64).T + b.astype(np.float64)
        pres.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pres


def forward(model: MlpModel, batch) -> np.ndarray:
    """Logits for a batch of shape ``(n, d_in)``; no output activation."""
    x = _as_batch(model, batch)
    acts, _ = _forward_cache(model, x)
    return acts[-1].astype(model.dtype)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_temperature(logits, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    return np.exp(_log_softmax(z / T))


def _backward(model: MlpModel, acts, pres, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backprop ``delta = dL/dlogits``; return (flat param grads, dL/dinput)."""
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        delta = delta @ model.weights[l].astype(np.float64)
        if l > 0:
            delta = delta * (pres[l - 1] > 0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts), delta


def _check_labels(model: MlpModel, labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ValueError(f"{y.size} labels for a batch of {n}")
    n_out = model.layer_sizes[-1]
    if y.size and (y.min() < 0 or y.max() >= n_out):
        raise ValueError(f"labels must lie in [0, {n_out})")
    return y


def _cross_entropy_parts(model: MlpModel, batch, labels):
    x = _as_batch(model, batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y = _check_labels(model, labels, n)
    acts, pres = _forward_cache(model, x)
    logp = _log_softmax(acts[-1])
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return acts, pres, delta, float(loss)


def cross_entropy_backward(model: MlpModel, batch, labels) -> GradVector:
    """Mean cross-entropy over the batch and its exact parameter gradient."""
    acts, pres, delta, loss = _cross_entropy_parts(model, batch, labels)
    g, _ = _backward(model, acts, pres, delta)
    return GradVector(g.astype(model.dtype), loss)


def cross_entropy_loss(model: MlpModel, batch, labels) -> float:
    x = _as_batch(model, batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = _check_labels(model, labels, x.shape[0])
    acts, _ = _forward_cache(model, x)
    return float(-_log_softmax(acts[-1])[np.arange(x.shape[0]), y].mean())


def _check_teacher(model: MlpModel, teacher_probs, n: int) -> np.ndarray:
    q = np.asarray(teacher_probs, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape != (n, model.layer_sizes[-1]):
        raise ValueError(f"teacher_probs shape {q.shape} does not match ({n}, {model.layer_sizes[-1]})")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("teacher_probs rows must be probability vectors")
    return q


def _kl_loss_rows(q: np.ndarray, logp: np.ndarray) -> np.ndarray:
    # 0 * log 0 terms are defined as 0
    safe_q = np.where(q > 0, q, 1.0)
    return np.where(q > 0, q * (np.log(safe_q) - logp), 0.0).sum(axis=1)


def kl_divergence_backward(
    model: MlpModel, batch, teacher_probs, T: float, t2_scaling: bool = False
) -> GradVector:
    """Mean ``KL(teacher || softmax(student_logits / T))`` and its gradient.

    ``t2_scaling`` multiplies loss and gradient by ``T**2`` (the classic KD
    convention); it is off by default.
    """
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    x = _as_batch(model, batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    q = _check_teacher(model, teacher_probs, n)
    acts, pres = _forward_cache(model, x)
    logp = _log_softmax(acts[-1] / T)
    loss = _kl_loss_rows(q, logp).mean()
    delta = (np.exp(logp) - q) / (T * n)
    if t2_scaling:
        loss *= T * T
        delta *= T * T
    g, _ = _backward(model, acts, pres, delta)
    return GradVector(g.astype(model.dtype), float(loss))


def kl_divergence_loss(model: MlpModel, batch, teacher_probs, T: float, t2_scaling: bool = False) -> float:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    x = _as_batch(model, batch)
    q = _check_teacher(model, teacher_probs, x.shape[0])
    acts, _ = _forward_cache(model, x)
    loss = _kl_loss_rows(q, _log_softmax(acts[-1] / T)).mean()
    return float(loss * T * T if t2_scaling else loss)


def sgd_step(model: MlpModel, grads: GradVector | np.ndarray, lr: float) -> MlpModel:
    """Return a new model with every parameter moved by ``-lr * g``."""
    g = grads.values if isinstance(grads, GradVector) else np.asarray(grads)
    params = flatten(model)
    if g.shape != params.shape:
        raise ValueError(f"gradient length {g.size} does not match model ({params.size})")
    if lr == 0:
        return model
    new = (params.astype(np.float64) - lr * g.astype(np.float64)).astype(model.dtype)
    return unflatten(new, model.layer_sizes)


def input_gradient(model: MlpModel, batch, target_label: int) -> np.ndarray:
    """d(mean cross-entropy toward ``target_label``)/d(input), shaped like the batch."""
    x = _as_batch(model, batch)
    n = x.shape[0]
    acts, pres, delta, _ = _cross_entropy_parts(model, x, np.full(n, target_label))
    _, dx = _backward(model, acts, pres, delta)
    return dx.reshape(np.shape(batch)).astype(np.float64)


# -- checkpoints --------------------------------------------------------------

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(model: MlpModel) -> bytes:
    """Text header (``key=value`` lines, blank-line terminated) + raw LE params."""
    tag = "f64" if model.dtype == np.float64 else "f32"
    params = flatten(model).astype(_DTYPE_TAGS[tag])
    header = (
        "format=rkd-checkpoint\n"
        f"layer_sizes={','.join(str(s) for s in model.layer_sizes)}\n"
        f"dtype={tag}\n"
        "byteorder=little\n"
        f"param_count={params.size}\n"
        "\n"
    )
    return header.encode("ascii") + params.tobytes()


def load_checkpoint(blob: bytes) -> MlpModel:
    end = blob.find(b"\n\n")
    if end < 0:
        raise ValueError("checkpoint header is not terminated")
    fields = {}
    for line in blob[:end].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed checkpoint header line {line!r}")
        fields[key] = value
    try:
        sizes = tuple(int(s) for s in fields["layer_sizes"].split(","))
        dtype = _DTYPE_TAGS[fields["dtype"]]
        count = int(fields["param_count"])
    except KeyError as exc:
        raise ValueError(f"checkpoint header missing or invalid field {exc}") from None
    if fields.get("byteorder", "little") != "little":
        raise ValueError("only little-endian checkpoints are supported")
    payload = blob[end + 2:]
    if len(payload) != count * dtype.itemsize or count != param_count(sizes):
        raise ValueError("checkpoint payload length does not match its header")
    params = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    return unflatten(params, sizes)
