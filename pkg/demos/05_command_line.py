"""The command-line workflow, driven from Python.

Equivalent shell session:

    python -m rkd inspect-partition tests/fixtures/tiny.toml
    python -m rkd run tests/fixtures/tiny.toml -o runs/s0
    python -m rkd run tests/fixtures/tiny.toml --set master_seed=1 -o runs/s1
    python -m rkd eval runs/s0
    python -m rkd summarize runs/s0 runs/s1 --timings
    python -m rkd bench-defense tests/fixtures/tiny.toml --repeat 5
"""
import tempfile
from pathlib import Path

from rkd.cli import main

TINY = str(Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "tiny.toml")

with tempfile.TemporaryDirectory() as tmp:
    runs = [str(Path(tmp) / f"s{seed}") for seed in (0, 1)]
    steps = [
        ["inspect-partition", TINY],
        ["run", TINY, "-o", runs[0]],
        ["run", TINY, "--set", "master_seed=1", "-o", runs[1]],
        ["eval", runs[0]],
        ["summarize", *runs, "--timings"],
        ["bench-defense", TINY, "--repeat", "5"],
        # a bad value is a config error: exit code 2 and nothing is written
        ["run", TINY, "--set", "malicious_fraction=1.5", "-o", str(Path(tmp) / "bad")],
    ]
    for argv in steps:
        print(f"$ rkd {' '.join(a.replace(tmp, '<tmp>') for a in argv)}")
        code = main(argv)
        print(f"[exit {code}]\n")
