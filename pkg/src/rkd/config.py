"""Experiment configuration: TOML schema, validation, overrides and hashing.

Top-level keys hold the experiment shape; tables mirror the subsystems::

    n_clients = 10
    rounds = 20
    malicious_fraction = 0.4
    alpha = 0.5
    master_seed = 0
    hidden = [32]

    [dataset]      # source = "synthetic" | "idx"
    [train]        # local_epochs, local_lr, batch_size
    [aggregator]   # kind = "fedavg" | "coord_median" | "rlr" | "rkd"
    [attack]       # see rkd.attacks.AttackConfig
    [defense]      # k_sigma, dispatch_strategy, noise_norm, ablation switches
    [distill]      # temperature, epochs, lr, batch_size, fraction
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import re
import sys
import types
import typing
from dataclasses import dataclass, field

import tomli_w

from .attacks import AttackConfig
from .baselines import AGGREGATORS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    n_per_class: int = 500
    test_per_class: int = 250
    num_classes: int = 4
    dim: int = 16
    spread: float = 0.3
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 2
    local_lr: float = 0.01
    batch_size: int = 64


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "rkd"
    rlr_threshold: int | None = None
    server_lr: float = 1.0
    weighted: bool = False


@dataclass(frozen=True)
class DefenseConfig:
    k_sigma: float = 1.0
    dispatch_strategy: str = "exclusion"
    noise_norm: float = 1e-4
    score_space: str = "params"
    fixed_q: int | None = None
    no_clustering: bool = False
    no_median_selection: bool = False
    no_kd: bool = False


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    fraction: float = 0.16
    swa_per_batch: bool = False
    t2_scaling: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int
    rounds: int
    malicious_fraction: float = 0.0
    alpha: float = 0.5
    master_seed: int = 0
    hidden: tuple[int, ...] = (32,)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    @property
    def n_malicious(self) -> int:
        return math.floor(self.malicious_fraction * self.n_clients + 1e-9)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path changes, e.g. ``replace(**{"attack.gamma": 10})``."""
        raw = to_dict(self)
        for path, value in changes.items():
            _set_path(raw, path.replace("__", ".").split("."), value)
        return build_config(raw)


class ConfigError(ValueError):
    """One or more invalid fields; each problem carries its dotted path and line."""

    def __init__(self, problems: list[tuple[str, int | None, str]]):
        self.problems = problems
        lines = []
        for path, line, msg in problems:
            where = f" (line {line})" if line else ""
            lines.append(f"{path}{where}: {msg}")
        super().__init__("; ".join(lines))


_SECTIONS = {
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "aggregator": AggregatorConfig,
    "attack": AttackConfig,
    "defense": DefenseConfig,
    "distill": DistillConfig,
}


def _locate(text: str | None, path: str) -> int | None:
    """Line number of ``path`` in TOML text (section + key scan)."""
    if not text:
        return None
    *sections, key = path.split(".")
    want = ".".join(sections)
    current = ""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        header = re.match(r"^\[([^\]]+)\]", line)
        if header:
            current = header.group(1).strip()
            if current == path:
                return no
            continue
        if current == want and re.match(rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise TypeError("expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise TypeError("expected a list")
        return tuple(_coerce(v, args[0], path) for v in value)
    raise TypeError(f"unsupported field type {tp}")


def _build_section(cls, data: dict, prefix: str, problems, text):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            problems.append((path, _locate(text, path), "unknown key"))
            continue
        if isinstance(value, dict) and key not in _SECTIONS:
            problems.append((path, _locate(text, path), "unexpected table"))
            continue
        if key in _SECTIONS and cls is ExperimentConfig:
            continue
        try:
            kwargs[key] = _coerce(value, hints[key], path)
        except TypeError as exc:
            problems.append((path, _locate(text, path), f"{exc}, got {value!r}"))
    for f in dataclasses.fields(cls):
        if f.name not in data and f.name not in _SECTIONS:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                problems.append((f"{prefix}{f.name}", None, "required key is missing"))
            else:
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                log.info("config default applied: %s%s = %r", prefix, f.name, default)
    return kwargs


def _validate(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    errs = []
    if cfg.n_clients < 1:
        errs.append(("n_clients", "must be >= 1"))
    if cfg.rounds < 1:
        errs.append(("rounds", "must be >= 1"))
    if not 0.0 <= cfg.malicious_fraction <= 1.0:
        errs.append(("malicious_fraction", "must lie in [0, 1]"))
    if not cfg.alpha > 0:
        errs.append(("alpha", "must be positive"))
    if any(h < 1 for h in cfg.hidden):
        errs.append(("hidden", "layer sizes must be >= 1"))
    d = cfg.dataset
    if d.source not in ("synthetic", "idx"):
        errs.append(("dataset.source", "must be 'synthetic' or 'idx'"))
    elif d.source == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, name):
                errs.append((f"dataset.{name}", "required for idx datasets"))
    if min(d.n_per_class, d.test_per_class, d.num_classes, d.dim) < 1:
        errs.append(("dataset", "n_per_class, test_per_class, num_classes and dim must be >= 1"))
    if d.spread < 0:
        errs.append(("dataset.spread", "must be non-negative"))
    t = cfg.train
    if t.local_epochs < 0:
        errs.append(("train.local_epochs", "must be >= 0"))
    if not t.local_lr > 0:
        errs.append(("train.local_lr", "must be positive"))
    if t.batch_size < 1:
        errs.append(("train.batch_size", "must be >= 1"))
    a = cfg.aggregator
    if a.kind not in AGGREGATORS:
        errs.append(("aggregator.kind", f"must be one of {AGGREGATORS}"))
    if a.kind == "rlr":
        if a.rlr_threshold is None:
            errs.append(("aggregator.rlr_threshold", "required for rlr"))
        elif not 0 <= a.rlr_threshold <= cfg.n_clients:
            errs.append(("aggregator.rlr_threshold", "must lie in [0, n_clients]"))
    if not a.server_lr > 0:
        errs.append(("aggregator.server_lr", "must be positive"))
    if a.kind == "rkd" and cfg.n_clients < 2:
        errs.append(("n_clients", "rkd needs at least two clients"))
    errs.extend(cfg.attack.validate())
    if cfg.dataset.source == "synthetic" and not 0 <= cfg.attack.target_label < d.num_classes:
        errs.append(("attack.target_label", f"must lie in [0, {d.num_classes})"))
    df = cfg.defense
    if df.dispatch_strategy not in ("exclusion", "perturbation"):
        errs.append(("defense.dispatch_strategy", "must be 'exclusion' or 'perturbation'"))
    if not df.noise_norm > 0:
        errs.append(("defense.noise_norm", "must be positive"))
    if df.k_sigma < 0:
        errs.append(("defense.k_sigma", "must be non-negative"))
    if df.score_space not in ("params", "updates"):
        errs.append(("defense.score_space", "must be 'params' or 'updates'"))
    if df.fixed_q is not None and df.fixed_q < 2:
        errs.append(("defense.fixed_q", "must be >= 2"))
    ds = cfg.distill
    if not ds.temperature > 0:
        errs.append(("distill.temperature", "must be positive"))
    if ds.epochs < 1:
        errs.append(("distill.epochs", "must be >= 1"))
    if ds.lr < 0:
        errs.append(("distill.lr", "must be non-negative"))
    if ds.batch_size < 1:
        errs.append(("distill.batch_size", "must be >= 1"))
    if not 0.0 < ds.fraction < 1.0:
        errs.append(("distill.fraction", "must lie strictly between 0 and 1"))
    return errs


def build_config(raw: dict, text: str | None = None) -> ExperimentConfig:
    """Validate a parsed mapping into an :class:`ExperimentConfig`."""
    problems: list = []
    top = _build_section(ExperimentConfig, raw, "", problems, text)
    sections = {}
    for name, cls in _SECTIONS.items():
        data = raw.get(name, {})
        if not isinstance(data, dict):
            problems.append((name, _locate(text, name), "expected a table"))
            continue
        if name not in raw:
            log.info("config default applied: [%s] (all defaults)", name)
        sections[name] = cls(**_build_section(cls, data, f"{name}.", problems, text))
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**top, **sections)
    errs = _validate(cfg)
    if errs:
        raise ConfigError([(path, _locate(text, path), msg) for path, msg in errs])
    return cfg


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(raw: dict, keys: list[str], value) -> None:
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([(".".join(keys), None, "override path crosses a scalar")])
    node[keys[-1]] = value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings; values use TOML literal syntax."""
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            problems.append((item, None, "override must look like key=value"))
            continue
        keys = key.split(".")
        cls = ExperimentConfig
        ok = True
        for i, k in enumerate(keys):
            names = {f.name for f in dataclasses.fields(cls)}
            if k not in names:
                ok = False
                break
            if i < len(keys) - 1:
                if k not in _SECTIONS:
                    ok = False
                    break
                cls = _SECTIONS[k]
        if not ok or (len(keys) == 1 and keys[0] in _SECTIONS):
            problems.append((key, None, "override references an unknown config field"))
            continue
        _set_path(raw, keys, _parse_value(value.strip()))
    if problems:
        raise ConfigError(problems)
    return raw


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse TOML text, apply command-line overrides, validate, fill defaults."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<document>", getattr(exc, "lineno", None), str(exc))]) from None
    if not overrides:
        return build_config(raw, text)
    raw = apply_overrides(raw, overrides)
    overridden = {item.partition("=")[0].strip() for item in overrides}
    try:
        return build_config(raw, text)
    except ConfigError as exc:
        # an overridden value has no line in the file; don't point at the one it replaced
        raise ConfigError([(path, None, f"{msg} (from override)") if path in overridden else (path, line, msg)
                           for path, line, msg in exc.problems]) from None


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if v is not None}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return clean(dataclasses.asdict(cfg))


def to_toml(cfg: ExperimentConfig) -> str:
    """Resolved snapshot; reparses to an equal config."""
    return tomli_w.dumps(to_dict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of everything except ``master_seed`` (used to group seeds)."""
    raw = to_dict(cfg)
    raw.pop("master_seed", None)
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
