#!/usr/bin/env python3
"""Regenerate the committed profile fixtures.

Two fixtures:

* ``cnn_4dev.json`` - heterogeneous 4-board cluster training a small CNN:
  feature maps shrink with depth while the parameter mass sits in the tail
  (the fully connected head), so a good plan replicates early layers and
  pipelines the parameter-dense tail.
* ``tx2_3dev.json`` - three identical boards with a tail-heavy 9-layer
  model on a fast LAN; the fixed 3-stage pipeline on it is the setup for
  comparing in-flight micro-batch policies.

Per-layer FLOPs are proportional to measured base times in both fixtures
(FLOPs quantify the workload, which is what replay re-partitioning relies
on). Values are synthetic but shaped like edge-board measurements.

Usage: python3 scripts/make_fixture.py [out_dir]
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from pipeplan.profiles import (
    BandwidthMatrix,
    DeviceProfile,
    LayerProfile,
    WorkloadProfile,
    save_profile,
)

GRID = (1, 2, 4, 8)

# per-sample tensor sizes: activations shrink with depth, params pile up late
ACTIVATION_BYTES = [
    6_400_000, 6_400_000, 3_200_000, 3_200_000, 1_600_000,
    1_600_000, 800_000, 800_000, 200_000, 40_000,
]
PARAM_BYTES = [
    70_000, 150_000, 300_000, 600_000, 1_200_000,
    1_200_000, 2_400_000, 2_400_000, 32_000_000, 8_000_000,
]
FLOPS = [
    90_000_000, 90_000_000, 80_000_000, 80_000_000, 70_000_000,
    70_000_000, 60_000_000, 60_000_000, 64_000_000, 16_000_000,
]

# base per-layer fp time (ms at batch 1) on the fastest board
BASE_FP_MS = [4.5, 4.5, 4.0, 4.0, 3.5, 3.5, 3.0, 3.0, 3.2, 0.8]

# (device_id, speed multiplier, memory budget bytes)
DEVICES = [
    ("nx0", 1.0, 6_000_000_000),
    ("nx1", 1.0, 6_000_000_000),
    ("tx0", 1.6, 4_000_000_000),
    ("nano0", 3.0, 2_000_000_000),
]

# batches scale sublinearly: small batches underuse the GPU
BATCH_FACTOR = {1: 1.0, 2: 1.7, 4: 2.9, 8: 5.2}


def build_profile() -> WorkloadProfile:
    layers = tuple(
        LayerProfile(layer_id=i, activation_bytes=ACTIVATION_BYTES[i],
                     param_bytes=PARAM_BYTES[i], flops=FLOPS[i])
        for i in range(len(ACTIVATION_BYTES))
    )
    devices = []
    for device_id, slow, budget in DEVICES:
        fp = np.array([
            [round(base * slow * BATCH_FACTOR[b], 3) for b in GRID]
            for base in BASE_FP_MS
        ])
        bp = np.array([
            [round(2.0 * base * slow * BATCH_FACTOR[b], 3) for b in GRID]
            for base in BASE_FP_MS
        ])
        devices.append(DeviceProfile(device_id=device_id,
                                     memory_budget_bytes=budget,
                                     fp_time_ms=fp, bp_time_ms=bp))
    ids = tuple(d.device_id for d in devices)
    n = len(ids)
    matrix = np.full((n, n), 100e6)
    matrix[0, 1] = matrix[1, 0] = 1000e6  # the two NX boards share a fast link
    np.fill_diagonal(matrix, 0.0)
    bandwidth = BandwidthMatrix(device_ids=ids, bits_per_second=matrix)
    return WorkloadProfile(
        model_name="synthetic-cnn-10",
        layers=layers,
        devices=tuple(devices),
        bandwidth=bandwidth,
        profiled_batch_sizes=GRID,
    )


BALANCED_GRID = (1, 2, 4, 8)
BALANCED_BATCH_FACTOR = {1: 1.0, 2: 1.8, 4: 3.2, 8: 5.8}
# stage-time profile rises toward the tail so the last stage paces the round
BALANCED_BASE_FP = [1.0, 1.0, 1.0, 1.5, 1.5, 1.5, 3.0, 3.0, 3.0]


def build_balanced_profile() -> WorkloadProfile:
    L = len(BALANCED_BASE_FP)
    layers = tuple(
        LayerProfile(layer_id=i, activation_bytes=600_000, param_bytes=400_000,
                     flops=int(BALANCED_BASE_FP[i] * 20_000_000))
        for i in range(L)
    )
    devices = []
    for name in ("tx2a", "tx2b", "tx2c"):
        fp = np.array([
            [round(base * BALANCED_BATCH_FACTOR[b], 3) for b in BALANCED_GRID]
            for base in BALANCED_BASE_FP
        ])
        devices.append(DeviceProfile(device_id=name, memory_budget_bytes=4_000_000_000,
                                     fp_time_ms=fp, bp_time_ms=2.0 * fp))
    ids = tuple(d.device_id for d in devices)
    matrix = np.full((3, 3), 1000e6)
    np.fill_diagonal(matrix, 0.0)
    return WorkloadProfile(
        model_name="balanced-tail-9",
        layers=layers,
        devices=tuple(devices),
        bandwidth=BandwidthMatrix(device_ids=ids, bits_per_second=matrix),
        profiled_batch_sizes=BALANCED_GRID,
    )


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parent.parent / "tests" / "data")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, builder in (("cnn_4dev.json", build_profile),
                          ("tx2_3dev.json", build_balanced_profile)):
        save_profile(builder(), out_dir / name)
        print(f"wrote {out_dir / name}")


if __name__ == "__main__":
    main()
