#!/usr/bin/env python3
"""Walk through planning a hybrid pipeline for a small heterogeneous cluster.

Builds a profile for a 6-layer model on three unequal boards, asks the
planner for the best stage layout, and compares it against the pure
data-parallel and pure pipeline baselines.
"""

from pathlib import Path

import numpy as np

from pipeplan import (
    BandwidthMatrix,
    DeviceProfile,
    LayerProfile,
    WorkloadProfile,
    comm_volume_hpp,
    plan,
    pure_data_parallel_plan,
    pure_pipeline_plan,
)

GRID = (1, 2, 4, 8)
BATCH_CURVE = {1: 1.0, 2: 1.8, 4: 3.2, 8: 5.9}  # sublinear in batch size


def build_profile() -> WorkloadProfile:
    # a compute-heavy conv front (big activations, few params) feeding a
    # light but parameter-dense classifier tail
    activations = [4_000_000, 2_000_000, 1_000_000, 500_000, 250_000, 50_000]
    params = [100_000, 200_000, 400_000, 800_000, 60_000_000, 30_000_000]
    base_ms = [4.0, 4.0, 4.0, 4.0, 1.2, 0.6]
    layers = tuple(
        LayerProfile(i, activations[i], params[i], int(base_ms[i] * 2e7))
        for i in range(6)
    )
    boards = [("fast0", 1.0, 6_000_000_000),
              ("fast1", 1.0, 6_000_000_000),
              ("slow0", 2.5, 2_000_000_000)]
    devices = []
    for name, slowdown, budget in boards:
        fp = np.array([[b * slowdown * BATCH_CURVE[g] for g in GRID] for b in base_ms])
        devices.append(DeviceProfile(name, budget, fp, 2.0 * fp))
    ids = tuple(d.device_id for d in devices)
    bw = np.full((3, 3), 1000e6)
    np.fill_diagonal(bw, 0)
    return WorkloadProfile("demo-cnn-6", layers, tuple(devices),
                           BandwidthMatrix(ids, bw), GRID)


def describe(tag, cfg, profile):
    volume = comm_volume_hpp(profile, cfg.stages, cfg.micro_batch_count,
                             cfg.micro_batch_size)
    print(f"\n{tag}: estimated round latency "
          f"{cfg.estimated_round_latency_ms:.1f} ms, "
          f"{volume / 1e6:.1f} MB moved per round")
    for s in cfg.stages:
        alloc = ", ".join(f"{d}:{n}" for d, n in sorted(s.allocation.items()))
        print(f"  stage {s.stage_index}: layers {s.layer_start}-{s.layer_end} "
              f"on [{alloc}] (K={s.k_inflight})")


def main() -> None:
    profile = build_profile()
    print(f"profile: {profile.model_name}, {profile.num_layers} layers on "
          f"{len(profile.devices)} devices")

    best = plan(profile, micro_batch_count=4, micro_batch_size=8)
    describe("planner's hybrid layout", best, profile)

    describe("pure data parallelism", pure_data_parallel_plan(profile, 4, 8), profile)
    describe("pure pipeline", pure_pipeline_plan(profile, 4, 8), profile)

    print("\nThe hybrid layout replicates the activation-heavy front across the "
          "fast boards\nand keeps the parameter-dense tail out of the gradient "
          "AllReduce.")


if __name__ == "__main__":
    main()
