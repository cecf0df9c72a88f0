"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (collected in the terminal summary)
and then asserts. Simulation runs are cached so later criteria can reuse the
desk-scale runs of earlier ones.
"""
import functools
import math
import time

import numpy as np
import pytest

from rkd import defense as R
from rkd import nn
from rkd.clustering import hdbscan_1d
from rkd.distill import swa_fold, swa_init
from rkd.reports import reports_csv
from rkd.simulator import dispatch_models, run_experiment
from conftest import fixture_config, record_criterion
from oracles import brute_hdbscan, canonical, ce_loss, central_difference, kl_loss, relative_error

SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def desk_run(seed: int, **changes):
    """Final-round (mta, asr) of the desk_blobs fixture with dotted-path changes."""
    cfg = fixture_config("desk_blobs", master_seed=seed, **{k.replace("__", "."): v for k, v in changes.items()})
    last = run_experiment(cfg)[-1]
    return last.mta, last.asr


def _timed_runs(**changes):
    t0 = time.perf_counter()
    out = [desk_run(s, **changes) for s in SEEDS]
    return out, time.perf_counter() - t0


# -- 1 -----------------------------------------------------------------------------------------

def _gradient_instance(rng):
    while True:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 21)) for _ in range(depth)] + [int(rng.integers(2, 11))]
        if nn.param_count(sizes) > 500:
            continue
        model = nn.init_mlp(sizes, int(rng.integers(2**31)), dtype=np.float64)
        model = nn.unflatten(nn.flatten(model) + rng.normal(0, 0.1, model.n_params), sizes)
        x = rng.normal(0, 1, (int(rng.integers(1, 9)), sizes[0]))
        # finite differences straddling a ReLU kink measure the kink, not the gradient
        _, pres = nn._forward_cache(model, x)
        if all(np.abs(z).min() > 1e-3 for z in pres[:-1]):
            return model, x


def test_criterion_01_gradient_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_ce = worst_kl = 0.0
    for _ in range(200):
        m, x = _gradient_instance(rng)
        theta, sizes, k = nn.flatten(m), m.layer_sizes, m.layer_sizes[-1]
        y = rng.integers(0, k, x.shape[0])
        fd = central_difference(lambda t: ce_loss(t, sizes, x, y), theta)
        worst_ce = max(worst_ce, relative_error(nn.cross_entropy_backward(m, x, y).values, fd))
        T = float(rng.uniform(0.5, 4.0))
        q = rng.dirichlet(np.ones(k), x.shape[0])
        fd = central_difference(lambda t: kl_loss(t, sizes, x, q, T), theta)
        worst_kl = max(worst_kl, relative_error(nn.kl_divergence_backward(m, x, q, T).values, fd))
    elapsed = time.perf_counter() - t0
    ok = worst_ce < 1e-4 and worst_kl < 1e-4 and elapsed < 30
    assert record_criterion(1, ok, f"worst rel err ce={worst_ce:.2e} kl={worst_kl:.2e}, {elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------------------

def test_criterion_02_hdbscan_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 9))
        q = int(rng.choice([2, 3]))
        if i % 2:
            scores = rng.uniform(-1, 1, n)
        else:
            scores = rng.integers(-10, 11, n) / 10  # coarse grid: duplicate scores and tied gaps
        mismatches += canonical(hdbscan_1d(scores, q)) != canonical(brute_hdbscan(list(scores), q))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    assert record_criterion(2, ok, f"{mismatches} mismatches over 1000 sets, {elapsed:.1f}s")


# -- 3 -----------------------------------------------------------------------------------------

def test_criterion_03_q_schedule():
    examples = R.dynamic_min_cluster_size(30, 0) == 6 and R.dynamic_min_cluster_size(30, 5) == 2
    formula = all(R.dynamic_min_cluster_size(n, r) == min(n, max(2, math.ceil(n / 5 - r)))
                  for n in range(2, 201) for r in range(0, 60))
    floor = all(R.dynamic_min_cluster_size(n, r) >= 2 for n in range(2, 201) for r in range(0, 200, 7))
    assert record_criterion(3, examples and formula and floor, "Q(30,0)=6, Q(30,5)=2, floor 2, formula grid")


# -- 4 -----------------------------------------------------------------------------------------

ATTACKED_FEDAVG = {"aggregator__kind": "fedavg"}
CLEAN_FEDAVG = {"aggregator__kind": "fedavg", "malicious_fraction": 0.0}


@pytest.mark.slow
def test_criterion_04_defense_efficacy():
    rkd, t1 = _timed_runs()
    fedavg, t2 = _timed_runs(**ATTACKED_FEDAVG)
    clean, t3 = _timed_runs(**CLEAN_FEDAVG)
    fedavg_hits = sum(asr >= 0.8 for _, asr in fedavg)
    rkd_hits = sum(asr <= 0.2 for _, asr in rkd)
    gaps = [c[0] - r[0] for c, r in zip(clean, rkd)]
    elapsed = t1 + t2 + t3
    ok = fedavg_hits >= 4 and rkd_hits >= 4 and max(gaps) <= 0.05 and elapsed < 300
    detail = (f"fedavg asr>=0.8 {fedavg_hits}/5, rkd asr<=0.2 {rkd_hits}/5, "
              f"rkd mta {np.mean([m for m, _ in rkd]):.3f} vs clean {np.mean([m for m, _ in clean]):.3f} "
              f"(worst gap {max(gaps):.3f}), {elapsed:.0f}s")
    assert record_criterion(4, ok, detail)


# -- 5 -----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_no_attack_sanity():
    t0 = time.perf_counter()
    worst = {}
    for kind in ("fedavg", "coord_median", "rlr", "rkd"):
        extra = {"aggregator__rlr_threshold": 4} if kind == "rlr" else {}
        runs = [desk_run(s, malicious_fraction=0.0, aggregator__kind=kind, **extra) for s in SEEDS]
        worst[kind] = max(asr for _, asr in runs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 0.05 and elapsed < 180
    detail = ", ".join(f"{k} max asr {v:.3f}" for k, v in worst.items()) + f", {elapsed:.0f}s"
    assert record_criterion(5, ok, detail)


# -- 6 -----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_ablation_ordering():
    full = [desk_run(s) for s in SEEDS]
    no_clu = [desk_run(s, defense__no_clustering=True) for s in SEEDS]
    asr_hits = sum(a[1] >= f[1] for a, f in zip(no_clu, full))
    full_03 = [desk_run(s, alpha=0.3) for s in SEEDS]
    no_kd_03 = [desk_run(s, alpha=0.3, defense__no_kd=True) for s in SEEDS]
    mta_hits = sum(a[0] <= f[0] - 0.03 for a, f in zip(no_kd_03, full_03))
    ok = asr_hits >= 4 and mta_hits >= 4
    detail = (f"asr(no_clustering)>=asr(full) {asr_hits}/5; "
              f"mta(no_kd)<=mta(full)-0.03 at alpha 0.3 {mta_hits}/5 "
              f"(full {np.mean([m for m, _ in full_03]):.3f}, no_kd {np.mean([m for m, _ in no_kd_03]):.3f})")
    assert record_criterion(6, ok, detail)


# -- 7 -----------------------------------------------------------------------------------------

def test_criterion_07_dispatch_contracts():
    rng = np.random.default_rng(11)
    ok = True
    worst = 0.0
    for trial in range(20):
        n, size = 10, int(rng.integers(5, 400))
        dtype = np.float32 if trial % 2 else np.float64
        local = {i: rng.normal(size=size).astype(dtype) for i in range(n)}
        g = rng.normal(size=size).astype(dtype)
        benign = set(rng.choice(n, int(rng.integers(1, n)), replace=False).tolist())
        ex = dispatch_models("exclusion", benign, g, local, 1e-4, trial)
        for cid in range(n):
            want = g if cid in benign else local[cid]
            ok &= ex[cid].dtype == want.dtype and ex[cid].tobytes() == want.tobytes()
        pert = dispatch_models("perturbation", benign, g, local, 1e-4, trial)
        for cid in set(range(n)) - benign:
            err = abs(np.linalg.norm(np.asarray(pert[cid], np.float64) - g.astype(np.float64)) - 1e-4)
            worst = max(worst, err)
    ok &= worst <= 1e-10
    assert record_criterion(7, bool(ok), f"exclusion bitwise over 20 trials, perturbation |norm - 1e-4| <= {worst:.1e}")


# -- 8 -----------------------------------------------------------------------------------------

def test_criterion_08_swa_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    for m in range(1, 11):
        snaps = rng.normal(size=(m, 300)) * rng.uniform(0.1, 10)
        state = swa_init(snaps[0])
        for s in snaps[1:]:
            state = swa_fold(state, s)
        ref = snaps.mean(axis=0)
        worst = max(worst, np.linalg.norm(state.averaged_params - ref) / np.linalg.norm(ref))
        assert state.n_updates == m
    assert record_criterion(8, worst <= 1e-6, f"worst relative gap {worst:.1e} for m in 1..10")


# -- 9 -----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_determinism():
    ok = True
    for name in ("tiny", "desk_blobs"):
        cfg = fixture_config(name)
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        c = run_experiment(cfg, workers=4)
        ok &= reports_csv(a) == reports_csv(b) == reports_csv(c)
        ok &= [r.diagnostics() for r in a] == [r.diagnostics() for r in c]
    assert record_criterion(9, bool(ok), "tiny and desk_blobs: rerun and 4-worker run byte-identical")


# -- 10 ----------------------------------------------------------------------------------------

def test_criterion_10_median_robustness():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    params = [v.copy() for _ in range(6)] + [100 * v, 100 * v, -100 * v, -100 * v]
    med = R.elementwise_median(params)
    d = R.l1_distances(params, med)
    sel = R.select_ensemble(params, d, 1.0)
    # by hand: |v|_1 = 6.5, so the outliers sit at 99 * 6.5 = 643.5 and 101 * 6.5 = 656.5;
    # mu = 2600 / 10 = 260, E[d^2] = 169016.9, sigma = sqrt(101416.9) = 318.46, eps = 578.46
    eps = 260 + math.sqrt(101416.9)
    ok = (med.tobytes() == v.tobytes() and abs(sel.threshold - eps) <= 1e-9 * eps
          and sel.selected == (0, 1, 2, 3, 4, 5))
    assert record_criterion(10, ok, f"median == v exactly, eps={sel.threshold:.2f}, kept {list(sel.selected)}")
