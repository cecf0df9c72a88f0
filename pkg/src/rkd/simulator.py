"""The federated round loop: local training, attacks, defense, dispatch, evaluation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attacks import (MaliciousClientState, additive_perturbation, dba_subtrigger,
                      pgd_trigger_optimize, scale_raw, scale_update, sign_flip_attack)
from .baselines import coord_median_aggregate, fedavg, rlr_aggregate
from .config import ExperimentConfig, config_hash
from .data import (Dataset, TriggerSpec, build_poisoned_testset, dirichlet_partition,
                   holdout_distillation_set, poison_client_data, read_idx_files, synth_blobs)
from .defense import (classify_benign, cosine_scores, dynamic_min_cluster_size,
                      elementwise_median, median_selection)
from .clustering import hdbscan_1d
from .distill import DistillPlan, distill_with_trace
from .rng import derive_seed, stream

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    indices: np.ndarray
    role: str  # "benign" | "malicious"
    local_params: np.ndarray | None = None  # last parameters submitted to the server
    received: np.ndarray | None = None  # what the server sent at the start of this round
    attack: MaliciousClientState | None = None

    @property
    def malicious(self) -> bool:
        return self.role == "malicious"


@dataclass
class RoundReport:
    round: int
    mta: float
    asr: float
    benign_set: list
    ensemble: list
    q_used: int | None = None
    malicious_clients: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    cluster_means: dict = field(default_factory=dict)
    distances: list = field(default_factory=list)
    threshold: float | None = None
    kd_losses: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def csv_row(self) -> dict:
        return {
            "round": self.round, "mta": repr(self.mta), "asr": repr(self.asr),
            "benign_count": len(self.benign_set), "ensemble_size": len(self.ensemble),
            "q_used": "" if self.q_used is None else self.q_used,
            "config_hash": self.config_hash, "seed": self.seed,
        }

    def diagnostics(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "timings"}
        out["cluster_means"] = {str(k): v for k, v in self.cluster_means.items()}
        return out


@dataclass
class Federation:
    """Everything a run needs besides the evolving global model."""

    config: ExperimentConfig
    layer_sizes: tuple
    clients: list
    distill_set: Dataset
    test: Dataset
    poisoned_test: Dataset
    trigger: TriggerSpec
    partition: object
    pool: Dataset | None = None  # training data left after the distillation holdout

    @property
    def seed(self) -> int:
        return self.config.master_seed


@dataclass
class ServerOutcome:
    new_global: np.ndarray
    benign_set: frozenset
    ensemble: tuple
    q_used: int | None = None
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None
    cluster_means: dict = field(default_factory=dict)
    distances: np.ndarray | None = None
    threshold: float | None = None
    kd_losses: list = field(default_factory=list)
    warnings: tuple = ()
    timings: dict = field(default_factory=dict)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "idx":
        train = read_idx_files(d.train_images, d.train_labels, d.num_classes)
        test = read_idx_files(d.test_images, d.test_labels, d.num_classes)
        return train, test
    train = synth_blobs(d.n_per_class, d.num_classes, d.dim, d.spread, derive_seed(cfg.master_seed, "train_data"))
    test = synth_blobs(d.test_per_class, d.num_classes, d.dim, d.spread, derive_seed(cfg.master_seed, "test_data"))
    return train, test


def build_federation(cfg: ExperimentConfig) -> Federation:
    train, test = load_datasets(cfg)
    distill_set, remainder = holdout_distillation_set(
        train, cfg.distill.fraction, derive_seed(cfg.master_seed, "holdout"))
    plan = dirichlet_partition(remainder, cfg.n_clients, cfg.alpha, derive_seed(cfg.master_seed, "partition"))
    trigger = cfg.attack.trigger(train.image_shape)
    n_mal = cfg.n_malicious
    clients = []
    for cid, idx in enumerate(plan.assignments):
        role = "malicious" if cid < n_mal else "benign"
        state = ClientState(cid, remainder.subset(idx), idx, role)
        if state.malicious:
            state.attack = MaliciousClientState(cid)
            if cfg.attack.data_kind == "dba":
                parts = min(cfg.attack.dba_parts or n_mal, trigger.size)
                state.attack.sub_trigger = dba_subtrigger(trigger, parts, cid % parts)
            if cfg.attack.data_kind == "pgd_trigger":
                state.attack.adapted_trigger = trigger
        clients.append(state)
    layer_sizes = (train.dim, *cfg.hidden, train.num_classes)
    return Federation(cfg, layer_sizes, clients, distill_set, test,
                      build_poisoned_testset(test, trigger), trigger, plan, remainder)


# -- client side ----------------------------------------------------------------

def sgd_train(model: nn.MlpModel, data: Dataset, epochs: int, lr: float, batch_size: int, seed: int) -> nn.MlpModel:
    n = len(data)
    for epoch in range(epochs):
        order = stream(seed, "local_shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            model = nn.sgd_step(model, nn.cross_entropy_backward(model, data.images[idx], data.labels[idx]), lr)
    return model


def _client_trigger(client: ClientState, fed: Federation, model: nn.MlpModel, seed: int) -> TriggerSpec:
    atk = fed.config.attack
    kind = atk.data_kind
    if kind == "dba":
        return client.attack.sub_trigger
    if kind == "pgd_trigger":
        rng = stream(seed, "pgd_batch")
        take = rng.choice(len(client.data), size=min(64, len(client.data)), replace=False)
        result = pgd_trigger_optimize(model, client.data.images[np.sort(take)], client.attack.adapted_trigger,
                                      atk.pgd_steps, atk.pgd_step_size, atk.pgd_epsilon)
        client.attack.adapted_trigger = result.trigger
        client.attack.pgd_losses.append(result.losses)
        return result.trigger
    return fed.trigger


def local_train(client: ClientState, received: np.ndarray, fed: Federation, seed: int) -> np.ndarray:
    """Train from ``received`` on the client's data; malicious clients attack.

    Malicious clients poison their data first (per the attack's data kind)
    and then apply the configured model-poisoning step to the result.
    """
    cfg = fed.config
    if len(client.data) == 0:
        raise ValueError(f"client {client.client_id} has no data")
    start = np.asarray(received).astype(np.float32)
    model = nn.unflatten(start, fed.layer_sizes)
    data = client.data
    atk = cfg.attack
    attacking = client.malicious and atk.kind != "none"
    if attacking and atk.data_kind is not None:
        trigger = _client_trigger(client, fed, model, seed)
        data = poison_client_data(data, trigger, atk.poison_fraction, derive_seed(seed, "poison"))
    t = cfg.train
    model = sgd_train(model, data, t.local_epochs, t.local_lr, t.batch_size, seed)
    params = nn.flatten(model)
    if attacking:
        kind = atk.model_kind
        if kind == "scale":
            params = scale_raw(params, atk.gamma) if atk.strict_raw_scaling else scale_update(params, start, atk.gamma)
        elif kind == "sign_flip":
            grads = nn.cross_entropy_backward(model, client.data.images, client.data.labels)
            params = sign_flip_attack(model, grads, atk.top_fraction)
        elif kind == "additive":
            params = additive_perturbation(params, atk.delta_norm, derive_seed(seed, "additive"))
    return params


# -- server side ----------------------------------------------------------------

def server_aggregate(fed: Federation, client_params: dict, global_params: np.ndarray,
                     round_index: int) -> ServerOutcome:
    """Turn the round's client vectors into the next global vector."""
    cfg = fed.config
    ids = sorted(client_params)
    vectors = [client_params[i] for i in ids]
    kind = cfg.aggregator.kind
    everyone = frozenset(ids)
    if kind == "fedavg":
        weights = [len(fed.clients[i].data) for i in ids] if cfg.aggregator.weighted else None
        return ServerOutcome(fedavg(vectors, weights), everyone, tuple(ids))
    if kind == "coord_median":
        return ServerOutcome(coord_median_aggregate(vectors), everyone, tuple(ids))
    if kind == "rlr":
        g = np.asarray(global_params, dtype=np.float32)
        updates = [v.astype(np.float64) - g for v in vectors]
        new = rlr_aggregate(updates, cfg.aggregator.rlr_threshold, cfg.aggregator.server_lr, g)
        return ServerOutcome(new, everyone, tuple(ids))
    return _rkd_aggregate(fed, ids, vectors, np.asarray(global_params, dtype=np.float32), round_index)


def _rkd_aggregate(fed, ids, vectors, g, round_index) -> ServerOutcome:
    cfg = fed.config
    dcfg = cfg.defense
    timings = {}
    t0 = time.perf_counter()
    if dcfg.score_space == "updates":
        updates = [v.astype(np.float64) - g for v in vectors]
        reference = elementwise_median(updates)
        if not np.any(reference):
            reference = g.astype(np.float64)
        scores = cosine_scores(updates, reference, ids)
    else:
        scores = cosine_scores(vectors, g, ids)
    timings["scoring"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    warnings = ()
    q = None
    labels = None
    means = {}
    if dcfg.no_clustering:
        benign = frozenset(ids)
    else:
        q = dcfg.fixed_q if dcfg.fixed_q is not None else dynamic_min_cluster_size(len(ids), round_index)
        q = min(q, len(ids))
        labels = hdbscan_1d(scores.scores, q)
        outcome = classify_benign(labels, scores, q_used=q)
        benign, means, warnings = outcome.benign_clients, outcome.cluster_means, outcome.warnings
    timings["clustering"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    benign_ids = [i for i in ids if i in benign]
    benign_vecs = [vectors[ids.index(i)] for i in benign_ids]
    distances = None
    threshold = None
    if dcfg.no_median_selection:
        ensemble = tuple(benign_ids)
    else:
        sel = median_selection(benign_vecs, benign_ids, dcfg.k_sigma)
        ensemble, distances, threshold = sel.selected, sel.distances, sel.threshold
    members = [vectors[ids.index(i)] for i in ensemble]
    aggregated = fedavg(members)
    timings["selection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kd_losses = []
    if dcfg.no_kd:
        new_global = aggregated
    else:
        ds = cfg.distill
        plan = DistillPlan([nn.unflatten(m, fed.layer_sizes) for m in members], fed.distill_set,
                           ds.temperature, ds.epochs, ds.lr, ds.batch_size, ds.swa_per_batch, ds.t2_scaling)
        student, trace = distill_with_trace(plan, nn.unflatten(aggregated, fed.layer_sizes),
                                            derive_seed(fed.seed, "distill", round_index))
        new_global = nn.flatten(student)
        kd_losses = trace.epoch_losses
    timings["distill"] = time.perf_counter() - t0
    return ServerOutcome(new_global, benign, tuple(ensemble), q, scores.scores, labels, means,
                         distances, threshold, kd_losses, warnings, timings)


def dispatch_models(strategy: str, benign_set, new_global: np.ndarray, clients: dict,
                    noise_norm: float, seed: int) -> dict:
    """What each client receives for the next round.

    ``clients`` maps client id to its current local parameters. Benign clients
    get ``new_global``; flagged clients get their own model back (exclusion)
    or ``new_global`` plus a float64 noise vector of norm ``noise_norm``
    (perturbation).
    """
    if strategy not in ("exclusion", "perturbation"):
        raise ValueError(f"unknown dispatch strategy {strategy!r}")
    out = {}
    for cid in sorted(clients):
        if cid in benign_set:
            out[cid] = new_global.copy()
        elif strategy == "exclusion":
            out[cid] = np.array(clients[cid], copy=True)
        else:
            direction = stream(seed, "dispatch_noise", cid).standard_normal(new_global.size)
            eta = direction * (noise_norm / np.linalg.norm(direction))
            out[cid] = new_global.astype(np.float64) + eta
    return out


def evaluate(model: nn.MlpModel, test: Dataset, poisoned: Dataset, target_label: int) -> tuple[float, float]:
    """(main-task accuracy, attack success rate)."""
    if len(test) == 0 or len(poisoned) == 0:
        raise ValueError("evaluation sets must be non-empty")
    clean_pred = np.argmax(nn.forward(model, test.images), axis=1)
    mta = float(np.mean(clean_pred == test.labels))
    bad_pred = np.argmax(nn.forward(model, poisoned.images), axis=1)
    asr = float(np.mean(bad_pred == target_label))
    return mta, asr


def run_round(fed: Federation, global_params: np.ndarray, round_index: int,
              workers: int = 1) -> tuple[np.ndarray, RoundReport]:
    """One round of the RKD loop (or of a baseline aggregator)."""
    cfg = fed.config
    timings = {}
    t0 = time.perf_counter()
    for c in fed.clients:
        if c.received is None:
            c.received = global_params.copy()

    def train_one(c: ClientState) -> np.ndarray:
        return local_train(c, c.received, fed, derive_seed(fed.seed, "client", c.client_id, round_index))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(train_one, fed.clients))
    else:
        results = [train_one(c) for c in fed.clients]
    for c, params in zip(fed.clients, results):
        c.local_params = params
    timings["local_train"] = time.perf_counter() - t0

    outcome = server_aggregate(fed, {c.client_id: c.local_params for c in fed.clients},
                               global_params, round_index)
    timings.update(outcome.timings)

    t0 = time.perf_counter()
    received = dispatch_models(cfg.defense.dispatch_strategy, outcome.benign_set, outcome.new_global,
                               {c.client_id: c.local_params for c in fed.clients},
                               cfg.defense.noise_norm, derive_seed(fed.seed, "dispatch", round_index))
    for c in fed.clients:
        c.received = received[c.client_id]
    timings["dispatch"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = nn.unflatten(outcome.new_global, fed.layer_sizes)
    mta, asr = evaluate(model, fed.test, fed.poisoned_test, fed.trigger.target_label)
    timings["evaluate"] = time.perf_counter() - t0

    report = RoundReport(
        round=round_index, mta=mta, asr=asr,
        benign_set=sorted(outcome.benign_set), ensemble=sorted(outcome.ensemble),
        q_used=outcome.q_used,
        malicious_clients=[c.client_id for c in fed.clients if c.malicious],
        scores=[] if outcome.scores is None else [float(s) for s in outcome.scores],
        labels=[] if outcome.labels is None else [int(l) for l in outcome.labels],
        cluster_means={int(k): float(v) for k, v in outcome.cluster_means.items()},
        distances=[] if outcome.distances is None else [float(d) for d in outcome.distances],
        threshold=outcome.threshold,
        kd_losses=[float(x) for x in outcome.kd_losses],
        warnings=list(outcome.warnings), timings=timings,
        config_hash=config_hash(cfg), seed=cfg.master_seed,
    )
    return outcome.new_global, report


def initial_global(fed: Federation) -> np.ndarray:
    return nn.flatten(nn.init_mlp(fed.layer_sizes, derive_seed(fed.seed, "global_init")))


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None, workers: int = 1,
                   checkpoint_every_round: bool = False) -> list[RoundReport]:
    """Run ``cfg.rounds`` rounds; persist reports after each one when ``output_dir`` is set."""
    from .reports import write_checkpoint, write_reports

    fed = build_federation(cfg)
    global_params = initial_global(fed)
    reports = []
    for r in range(cfg.rounds):
        global_params, report = run_round(fed, global_params, r, workers)
        reports.append(report)
        log.info("round %d: mta=%.4f asr=%.4f benign=%d ensemble=%d", r, report.mta, report.asr,
                 len(report.benign_set), len(report.ensemble))
        if output_dir is not None:
            write_reports(output_dir, reports)
            if checkpoint_every_round:
                write_checkpoint(Path(output_dir) / "checkpoints" / f"round_{r:03d}.ckpt",
                                 nn.unflatten(global_params, fed.layer_sizes))
    if output_dir is not None:
        write_checkpoint(Path(output_dir) / "model.ckpt", nn.unflatten(global_params, fed.layer_sizes))
    return reports


def final_metrics(reports: list[RoundReport]) -> tuple[float, float]:
    return reports[-1].mta, reports[-1].asr


__all__ = [
    "ClientState", "RoundReport", "Federation", "ServerOutcome", "build_federation", "local_train",
    "server_aggregate", "dispatch_models", "evaluate", "run_round", "run_experiment",
    "initial_global", "final_metrics", "sgd_train", "load_datasets",
]
