"""Datasets, IDX ingestion, Non-IID partitioning and backdoor triggers."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Flattened images in ``[0, 1]`` with integer labels.

    ``labels`` is ``None`` for unlabeled (distillation) data. ``attack_target``
    is set on triggered evaluation sets; ``labels`` then keeps the true
    classes for bookkeeping.
    """

    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    image_shape: tuple[int, int]
    attack_target: int | None = None

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] < 1:
            raise ValueError("a dataset needs at least one flattened image")
        h, w = self.image_shape
        if h * w != self.images.shape[1]:
            raise ValueError(f"image_shape {self.image_shape} does not match width {self.images.shape[1]}")
        if self.labels is not None:
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels must be parallel to images")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, images=self.images[idx], labels=labels)

    def unlabeled(self) -> "Dataset":
        return replace(self, labels=None)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def square_shape(dim: int) -> tuple[int, int]:
    side = math.isqrt(dim)
    return (side, side) if side * side == dim else (1, dim)


# -- IDX ----------------------------------------------------------------------

def _read_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise ValueError(f"{what} stream truncated in header")
    got, *dims = struct.unpack(f">I{ndim}I", buf[:need])
    if got != magic:
        raise ValueError(f"{what} stream has magic 0x{got:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def load_idx(images_bytes: bytes, labels_bytes: bytes, num_classes: int | None = None) -> Dataset:
    """Parse a big-endian IDX image/label pair (ubyte payloads)."""
    n, rows, cols = _read_header(images_bytes, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,) = _read_header(labels_bytes, IDX_LABELS_MAGIC, 1, "labels")
    if n_labels != n:
        raise ValueError(f"{n} images but {n_labels} labels")
    pixels = images_bytes[16:]
    if len(pixels) < n * rows * cols:
        raise ValueError("images stream truncated")
    if len(labels_bytes) - 8 < n:
        raise ValueError("labels stream truncated")
    raw = np.frombuffer(pixels, dtype=np.uint8, count=n * rows * cols)
    images = (raw.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0))
    labels = np.frombuffer(labels_bytes, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(images, labels, int(num_classes), (rows, cols))


def save_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    """Serialise to an IDX pair; pixels are quantised to ``round(255 * x)``."""
    if dataset.labels is None:
        raise ValueError("cannot export an unlabeled dataset as IDX")
    rows, cols = dataset.image_shape
    n = len(dataset)
    pixels = np.rint(dataset.images.astype(np.float64) * 255.0).clip(0, 255).astype(np.uint8)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def read_idx_files(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    with open(images_path, "rb") as fi, open(labels_path, "rb") as fl:
        return load_idx(fi.read(), fl.read(), num_classes)


# -- synthetic data -----------------------------------------------------------

def blob_centers(num_classes: int, dim: int) -> np.ndarray:
    """Class centres on a regular grid inside ``[0.2, 0.8]^dim``.

    Class ``k`` is written in base ``L`` with ``m`` digits; coordinate ``j``
    carries digit ``j mod m``. Class 0 sits at the all-low corner.
    """
    m = min(dim, max(1, math.ceil(math.log2(num_classes)))) if num_classes > 1 else 1
    levels = 2
    while levels ** m < num_classes:
        levels += 1
    centers = np.empty((num_classes, dim))
    for k in range(num_classes):
        digits = [(k // levels ** i) % levels for i in range(m)]
        for j in range(dim):
            centers[k, j] = 0.2 + 0.6 * digits[j % m] / (levels - 1)
    return centers


def synth_blobs(n_per_class: int, num_classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Balanced Gaussian blobs clipped to the unit cube, class-major order."""
    if min(n_per_class, num_classes, dim) < 1:
        raise ValueError("n_per_class, num_classes and dim must be >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = stream(seed, "synth_blobs")
    centers = blob_centers(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.standard_normal((labels.size, dim))
    images = np.clip(centers[labels] + spread * noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes, square_shape(dim))


# -- partitioning ---------------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quotas = total * weights
    counts = np.floor(quotas).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps lower client ids first on equal remainders
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split sample indices across clients with Dirichlet(alpha) class mixes."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if len(dataset) < n_clients:
        raise ValueError(f"{len(dataset)} samples cannot cover {n_clients} clients")
    rng = stream(seed, "dirichlet_partition")
    C = dataset.num_classes
    props = rng.dirichlet(np.full(C, float(alpha)), size=n_clients)  # (clients, classes)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(C):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        col = props[:, c]
        weights = col / col.sum() if col.sum() > 0 else np.full(n_clients, 1.0 / n_clients)
        counts = _largest_remainder(idx.size, weights)
        start = 0
        for i, k in enumerate(counts):
            buckets[i].extend(idx[start:start + k].tolist())
            start += k
    for i in range(n_clients):
        while not buckets[i]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[i].append(buckets[donor].pop())
    return PartitionPlan(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets), float(alpha), seed)


def class_skew(dataset: Dataset, plan: PartitionPlan) -> float:
    """Mean L1 gap between each client's class mix and the global mix."""
    global_mix = dataset.class_histogram() / len(dataset)
    gaps = []
    for idx in plan.assignments:
        hist = np.bincount(dataset.labels[idx], minlength=dataset.num_classes) / idx.size
        gaps.append(np.abs(hist - global_mix).sum())
    return float(np.mean(gaps))


# -- triggers -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """A set of pixel coordinates with the values written there.

    Rectangular patches come from :meth:`patch`; DBA parts are arbitrary
    row-major slices of a patch, hence the coordinate-list representation.
    """

    coords: np.ndarray  # (k, 2) of (row, col)
    values: np.ndarray  # (k,)
    target_label: int
    image_height: int
    image_width: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)
        if coords.shape[0] == 0 or coords.shape[0] != values.size:
            raise ValueError("a trigger needs one value per (non-empty) coordinate")
        if (coords[:, 0].min() < 0 or coords[:, 0].max() >= self.image_height
                or coords[:, 1].min() < 0 or coords[:, 1].max() >= self.image_width):
            raise ValueError("trigger patch lies outside the image")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("trigger values must lie in [0, 1]")
        if self.target_label < 0:
            raise ValueError("target_label must be non-negative")

    @classmethod
    def patch(cls, top: int, left: int, height: int, width: int, value: float = 1.0,
              target_label: int = 0, image_shape: tuple[int, int] = (28, 28)) -> "TriggerSpec":
        rows, cols = np.meshgrid(np.arange(top, top + height), np.arange(left, left + width), indexing="ij")
        coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
        return cls(coords, np.full(coords.shape[0], value), target_label, *image_shape)

    @property
    def flat_indices(self) -> np.ndarray:
        return self.coords[:, 0] * self.image_width + self.coords[:, 1]

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    def with_values(self, values) -> "TriggerSpec":
        return replace(self, values=np.asarray(values, dtype=np.float32))


def default_trigger(image_shape: tuple[int, int], size: int = 3, target_label: int = 0) -> TriggerSpec:
    """``size`` x ``size`` patch of 1.0 in the top-left corner (clipped to the image)."""
    h, w = image_shape
    return TriggerSpec.patch(0, 0, min(size, h), min(size, w), 1.0, target_label, image_shape)


def _check_trigger_fits(width: int, trigger: TriggerSpec) -> None:
    if width != trigger.image_height * trigger.image_width:
        raise ValueError(
            f"image of width {width} does not match trigger geometry "
            f"{trigger.image_height}x{trigger.image_width}"
        )


def apply_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Copy of ``image`` (one row or a batch) with the patch pixels overwritten."""
    out = np.array(image, copy=True)
    _check_trigger_fits(out.shape[-1], trigger)
    out[..., trigger.flat_indices] = trigger.values.astype(out.dtype)
    return out


def poison_client_data(client_data: Dataset, trigger: TriggerSpec, fraction: float, seed: int) -> Dataset:
    """Trigger and relabel a uniform ``floor(fraction * n)`` subset, order kept."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(client_data)
    k = math.floor(fraction * n + 1e-9)
    if k == 0:
        return client_data
    _check_trigger_fits(client_data.dim, trigger)
    chosen = np.sort(stream(seed, "poison_client_data").choice(n, size=k, replace=False))
    images = client_data.images.copy()
    labels = client_data.labels.copy()
    images[chosen] = apply_trigger(images[chosen], trigger)
    labels[chosen] = trigger.target_label
    return replace(client_data, images=images, labels=labels)


def build_poisoned_testset(test: Dataset, trigger: TriggerSpec) -> Dataset:
    """Triggered copies of every test sample whose true label is not the target."""
    keep = np.flatnonzero(test.labels != trigger.target_label)
    if keep.size == 0:
        raise ValueError("no test samples left after removing the target class")
    images = apply_trigger(test.images[keep], trigger)
    return replace(test, images=images, labels=test.labels[keep], attack_target=trigger.target_label)


def holdout_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (holdout, remainder) index arrays; disjoint, covering ``range(n)``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie strictly between 0 and 1")
    k = math.floor(fraction * n + 1e-9)
    if k == 0:
        raise ValueError(f"holdout of {fraction} x {n} samples would be empty")
    perm = stream(seed, "holdout").permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def holdout_distillation_set(train: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off an unlabeled distillation set before client partitioning."""
    held, rest = holdout_indices(len(train), fraction, seed)
    if rest.size == 0:
        raise ValueError("holdout leaves no data for clients")
    return train.subset(held).unlabeled(), train.subset(rest)
