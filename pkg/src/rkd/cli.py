"""Command-line front end.

Exit codes: 0 success, 2 config error, 3 runtime error. The default output
directory comes from ``RKD_OUTPUT_DIR`` when ``--output-dir`` is omitted.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, config_hash, load_config, to_toml
from .data import class_skew
from .reports import atomic_write, read_checkpoint, read_reports_csv
from .simulator import build_federation, evaluate, initial_global, run_experiment, run_round, server_aggregate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ENV_OUTPUT_DIR = "RKD_OUTPUT_DIR"

log = logging.getLogger("rkd")


def _output_dir(args) -> Path:
    return Path(args.output_dir or os.environ.get(ENV_OUTPUT_DIR) or "rkd_output")


def _check_writable(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK | os.X_OK):
        raise PermissionError(f"output directory {path} is not writable")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(args)
    _check_writable(out)
    atomic_write(out / "config.toml", to_toml(cfg).encode("utf-8"))
    reports = run_experiment(cfg, out, workers=args.workers, checkpoint_every_round=args.checkpoint_every_round)
    last = reports[-1]
    print(f"{out}: {len(reports)} rounds, final mta={last.mta:.4f} asr={last.asr:.4f} "
          f"config_hash={config_hash(cfg)}")
    return EXIT_OK


def cmd_inspect_partition(args) -> int:
    cfg = load_config(args.config, args.set)
    fed = build_federation(cfg)
    k = fed.test.num_classes
    print(f"clients={cfg.n_clients} alpha={cfg.alpha} distill_holdout={len(fed.distill_set)} "
          f"class_skew={class_skew(fed.pool, fed.partition):.4f}")
    print("client  role       size  " + " ".join(f"c{j:<4d}" for j in range(k)))
    for c in fed.clients:
        hist = np.bincount(c.data.labels, minlength=k)
        print(f"{c.client_id:6d}  {c.role:9s} {len(c.data):5d}  " + " ".join(f"{h:<5d}" for h in hist))
    return EXIT_OK


def cmd_eval(args) -> int:
    config_path = Path(args.config)
    ckpt = args.checkpoint
    if config_path.is_dir():
        ckpt = ckpt or config_path / "model.ckpt"
        config_path = config_path / "config.toml"
    if ckpt is None:
        raise ConfigError([("checkpoint", None, "pass --checkpoint or a run directory")])
    cfg = load_config(config_path, args.set)
    fed = build_federation(cfg)
    model = read_checkpoint(ckpt)
    if model.layer_sizes != tuple(fed.layer_sizes):
        raise ValueError(f"checkpoint layers {model.layer_sizes} do not match config {fed.layer_sizes}")
    mta, asr = evaluate(model, fed.test, fed.poisoned_test, fed.trigger.target_label)
    print(f"mta={mta:.4f} asr={asr:.4f}")
    return EXIT_OK


def _collect_reports(paths) -> list[tuple[Path, list[dict]]]:
    found = []
    for p in map(Path, paths):
        csv_path = p / "reports.csv" if p.is_dir() else p
        found.append((csv_path, read_reports_csv(csv_path)))
    return found


def _mean_std(values) -> tuple[float, float]:
    if len(values) == 1:
        return values[0], 0.0
    return statistics.fmean(values), statistics.stdev(values)


def cmd_summarize(args) -> int:
    runs = _collect_reports(args.reports)
    groups: dict[str, list] = {}
    print(f"{'report':40s} {'config_hash':16s} {'seed':>5s} {'rounds':>6s} {'mta':>7s} {'asr':>7s}")
    for path, rows in runs:
        last = rows[-1]
        groups.setdefault(last["config_hash"], []).append((path, last))
        print(f"{str(path):40s} {last['config_hash']:16s} {last['seed']:5d} {len(rows):6d} "
              f"{last['mta']:7.4f} {last['asr']:7.4f}")
    print()
    print(f"{'config_hash':16s} {'runs':>4s} {'mta mean':>9s} {'mta std':>8s} {'asr mean':>9s} {'asr std':>8s}")
    for h, members in groups.items():
        mta = _mean_std([m[1]["mta"] for m in members])
        asr = _mean_std([m[1]["asr"] for m in members])
        print(f"{h:16s} {len(members):4d} {mta[0]:9.4f} {mta[1]:8.4f} {asr[0]:9.4f} {asr[1]:8.4f}")
    if args.timings:
        phases: dict[str, list] = {}
        for path, _ in runs:
            tpath = path.parent / "timings.jsonl"
            if not tpath.exists():
                continue
            for line in tpath.read_text(encoding="utf-8").splitlines():
                for k, v in json.loads(line).items():
                    if k != "round":
                        phases.setdefault(k, []).append(float(v))
        print()
        print(f"{'phase':14s} {'mean s':>10s} {'total s':>10s}")
        for k in sorted(phases):
            print(f"{k:14s} {statistics.fmean(phases[k]):10.5f} {sum(phases[k]):10.4f}")
    return EXIT_OK


def cmd_bench_defense(args) -> int:
    """Time the server-side defense on one round of real client submissions."""
    cfg = load_config(args.config, args.set)
    if cfg.aggregator.kind != "rkd":
        cfg = cfg.replace(**{"aggregator.kind": "rkd"})
    fed = build_federation(cfg)
    g = initial_global(fed)
    run_round(fed, g, 0, args.workers)
    params = {c.client_id: c.local_params for c in fed.clients}
    malicious = {c.client_id for c in fed.clients if c.malicious}
    phases: dict[str, list] = {}
    t0 = time.perf_counter()
    for _ in range(args.repeat):
        outcome = server_aggregate(fed, params, g, 0)
        for k, v in outcome.timings.items():
            phases.setdefault(k, []).append(v)
    total = time.perf_counter() - t0
    caught = len(malicious - outcome.benign_set)
    wrongly_flagged = len(set(params) - malicious - outcome.benign_set)
    print(f"clients={len(params)} malicious={len(malicious)} caught={caught} "
          f"benign_flagged={wrongly_flagged} ensemble={len(outcome.ensemble)} q={outcome.q_used}")
    for k in sorted(phases):
        print(f"{k:12s} {statistics.fmean(phases[k]) * 1e3:10.3f} ms")
    print(f"{'per call':12s} {total / args.repeat * 1e3:10.3f} ms over {args.repeat} repeats")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rkd", description="Federated backdoor-defense simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log applied defaults and per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="TOML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. attack.gamma=10 (repeatable)")
        return sp

    r = with_config(sub.add_parser("run", help="run an experiment"))
    r.add_argument("-o", "--output-dir", help=f"defaults to ${ENV_OUTPUT_DIR} or ./rkd_output")
    r.add_argument("--workers", type=int, default=1, help="threads for client-parallel local training")
    r.add_argument("--checkpoint-every-round", action="store_true")
    r.set_defaults(func=cmd_run)

    i = with_config(sub.add_parser("inspect-partition", help="print per-client class histograms"))
    i.set_defaults(func=cmd_inspect_partition)

    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint (config file or run directory)"))
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("summarize", help="final-round metrics grouped by config hash")
    s.add_argument("reports", nargs="+", help="reports.csv files or run directories")
    s.add_argument("--timings", action="store_true", help="add a per-phase timing table")
    s.set_defaults(func=cmd_summarize)

    b = with_config(sub.add_parser("bench-defense", help="time the defense stages on one round"))
    b.add_argument("--repeat", type=int, default=10)
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_bench_defense)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if getattr(args, "config", None) and Path(exc.filename or "") == Path(args.config):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
