#!/usr/bin/env python3
"""Regenerate the committed golden outputs for the end-to-end CLI chain.

Chain: plan -> simulate -> inject-fault -> simulate (replayed plan), all in
machine format. The acceptance suite re-runs the same chain and compares
byte-for-byte, so regenerate these only when an intentional behavior change
is being committed.

Usage: python3 scripts/make_golden.py [out_dir]
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pipeplan.cli import run

ROOT = Path(__file__).resolve().parent.parent
PROFILE = ROOT / "tests" / "data" / "cnn_4dev.json"

GOLDEN_CHAIN = [
    ("plan.json", lambda d: [
        "plan", "--profile", str(PROFILE), "-M", "4", "-B", "8",
        "--format", "machine", "--out", str(d / "plan.json")]),
    ("sim.json", lambda d: [
        "simulate", "--plan", str(d / "plan.json"),
        "--format", "machine", "--out", str(d / "sim.json")]),
    ("replay.json", lambda d: [
        "inject-fault", "--profile", str(PROFILE), "--plan", str(d / "plan.json"),
        "--device", "nx1", "--fail-at-ms", "1000",
        "--format", "machine", "--out", str(d / "replay.json")]),
    ("resim.json", lambda d: [
        "simulate", "--plan", str(d / "replay.newplan.json"),
        "--format", "machine", "--out", str(d / "resim.json")]),
]

GOLDEN_FILES = [
    "plan.json",
    "sim.json",
    "sim.events.txt",
    "replay.json",
    "replay.newplan.json",
    "resim.json",
    "resim.events.txt",
]


def generate(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, argv in GOLDEN_CHAIN:
        code = run(argv(out_dir))
        if code != 0:
            raise SystemExit(f"step {name} failed with exit code {code}")
        print(f"wrote {out_dir / name}")


if __name__ == "__main__":
    generate(Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "tests" / "golden")
