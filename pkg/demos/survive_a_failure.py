#!/usr/bin/env python3
"""Detect a device failure with the heartbeat machine and replay the pipeline.

One board of a three-stage pipeline goes silent mid-training: the
coordinator suspects it, probes it, declares it failed, restores its layers
from the backup node in the next stage and re-cuts the partition so the two
surviving stages carry work proportional to their capacity.
"""

from pathlib import Path

from pipeplan import (
    LivenessConfig,
    assign_backups,
    initial_liveness,
    liveness_step,
    load_profile,
    pure_pipeline_plan,
    replan_on_failure,
    simulate_round,
)

PROFILE = Path(__file__).resolve().parent.parent / "tests" / "data" / "tx2_3dev.json"


def main() -> None:
    profile = load_profile(PROFILE)
    cfg = pure_pipeline_plan(profile, micro_batch_count=8, micro_batch_size=4)
    victim = cfg.stages[1].devices[0]
    print(f"running {cfg.num_stages}-stage pipeline; backups:")
    for backup in assign_backups(profile, cfg).stages:
        where = backup.backup_device or "surviving replicas in the stage"
        print(f"  stage {backup.stage_index}: {backup.kind} -> {where}")

    # the victim's last heartbeat arrives at t=1000 ms
    cfg_liveness = LivenessConfig()
    state = initial_liveness([d.device_id for d in profile.devices], cfg_liveness,
                             start_ms=1000.0)
    now, failures = 1000.0, ()
    while not failures:
        now += cfg_liveness.heartbeat_interval_ms
        alive = [d for d in state.devices if d != victim]
        state, failures = liveness_step(state, now, received_heartbeats=alive)
        print(f"t={now:.0f} ms: {victim} is {state.devices[victim].status}")

    replay = replan_on_failure(profile, cfg, victim)
    print(f"\nreplay after losing {victim} (stage {replay.failed_stage_index}):")
    print(f"  partition {list(replay.old_partition)} -> {list(replay.new_partition)}")
    print(f"  migrations: {len(replay.migrations)} hop(s), "
          f"{replay.migration_bytes / 1e6:.1f} MB")
    for op in replay.restores[:4]:
        print(f"  restore layer {op.layer_id} from {op.source_device} "
              f"onto stage {op.to_stage}")
    if len(replay.restores) > 4:
        print(f"  ... and {len(replay.restores) - 4} more restores")

    before = simulate_round(cfg).round_latency_ms
    after = simulate_round(replay.new_plan).round_latency_ms
    n_stages = len(replay.new_plan.stages)
    n_devices = sum(len(s.devices) for s in replay.new_plan.stages)
    print(f"\nsimulated round: {before:.1f} ms before, {after:.1f} ms after "
          f"({n_stages} stage(s) on {n_devices} device(s))")


if __name__ == "__main__":
    main()
