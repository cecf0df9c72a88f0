"""Report and checkpoint persistence (write to a temp file, then rename)."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

from . import nn

CSV_FIELDS = ["round", "mta", "asr", "benign_count", "ensemble_size", "q_used", "config_hash", "seed"]


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def reports_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def _jsonl(records) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)


def write_reports(output_dir: str | Path, reports) -> None:
    """``reports.csv``, ``diagnostics.jsonl`` and ``timings.jsonl``.

    Timings live in their own file so the other two stay byte-identical
    across reruns.
    """
    out = Path(output_dir)
    atomic_write(out / "reports.csv", reports_csv(reports).encode("utf-8"))
    atomic_write(out / "diagnostics.jsonl", _jsonl(r.diagnostics() for r in reports).encode("utf-8"))
    atomic_write(out / "timings.jsonl",
                 _jsonl({"round": r.round, **r.timings} for r in reports).encode("utf-8"))


def write_checkpoint(path: str | Path, model: nn.MlpModel) -> None:
    atomic_write(path, nn.save_checkpoint(model))


def read_checkpoint(path: str | Path) -> nn.MlpModel:
    return nn.load_checkpoint(Path(path).read_bytes())


def read_reports_csv(path: str | Path) -> list[dict]:
    """Parse a ``reports.csv``; raises ``ValueError`` on malformed files."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(CSV_FIELDS) <= set(reader.fieldnames):
            raise ValueError(f"{path}: not a reports.csv (header {reader.fieldnames})")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append({
                    "round": int(row["round"]), "mta": float(row["mta"]), "asr": float(row["asr"]),
                    "benign_count": int(row["benign_count"]), "ensemble_size": int(row["ensemble_size"]),
                    "q_used": int(row["q_used"]) if row["q_used"] else None,
                    "config_hash": row["config_hash"], "seed": int(row["seed"]),
                })
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed row ({exc})") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows
