"""Failure detection, model replication and lightweight pipeline replay.

Three cooperating pieces:

* a heartbeat liveness machine, driven purely by explicit
  ``(now_ms, events)`` steps so it needs no real timers and is exhaustively
  testable - devices move Alive -> Suspected -> Probing -> {Alive, Failed};
* topology-driven backup assignment - a multi-device stage restores lost
  weights from its surviving replicas, a single-device stage checkpoints to
  a device in the next stage (the last stage wraps to the first);
* replay planning - after a single-device failure the layer partition is
  re-cut at capacity-weighted FLOPs quantiles and only layers whose stage
  changed migrate, hop by hop between adjacent stages, instead of rerunning
  the full planner and re-shipping whole stage models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .allocator import allocate_microbatch
from .cost_model import StageSpec, flops_proportional_cuts, stage_memory
from .errors import (
    InfeasibleAllocation,
    MultiDeviceFailure,
    NoBackupTarget,
    NoSurvivingDevices,
)
from .planner import K_POLICIES, PlanConfig, build_timeline, round_latency
from .profiles import WorkloadProfile, capacity

ALIVE = "alive"
SUSPECTED = "suspected"
PROBING = "probing"
FAILED = "failed"

HEARTBEAT = "heartbeat"
PROBE_REPLY = "probe_reply"
PROBE_DISPATCHED = "probe_dispatched"
SUSPECT_ELAPSED = "suspect_elapsed"
PROBE_ELAPSED = "probe_elapsed"
SILENCE = "silence"

DEFAULT_HEARTBEAT_INTERVAL_MS = 100.0
DEFAULT_SUSPECT_INTERVALS = 3
DEFAULT_PROBE_INTERVALS = 2

# (status, event) -> next status; unlisted pairs keep the current status
_TRANSITIONS = {
    (ALIVE, HEARTBEAT): ALIVE,
    (ALIVE, PROBE_REPLY): ALIVE,
    (ALIVE, SILENCE): ALIVE,
    (ALIVE, SUSPECT_ELAPSED): SUSPECTED,
    (SUSPECTED, HEARTBEAT): ALIVE,
    (SUSPECTED, PROBE_REPLY): ALIVE,
    (SUSPECTED, PROBE_DISPATCHED): PROBING,
    (PROBING, HEARTBEAT): ALIVE,
    (PROBING, PROBE_REPLY): ALIVE,
    (PROBING, SILENCE): PROBING,
    (PROBING, PROBE_ELAPSED): FAILED,
}


def transition(status: str, event: str) -> str:
    """Pure liveness transition table; Failed is terminal."""
    if status == FAILED:
        return FAILED
    return _TRANSITIONS.get((status, event), status)


@dataclass(frozen=True)
class LivenessConfig:
    heartbeat_interval_ms: float = DEFAULT_HEARTBEAT_INTERVAL_MS
    suspect_timeout_ms: float = DEFAULT_HEARTBEAT_INTERVAL_MS * DEFAULT_SUSPECT_INTERVALS
    probe_timeout_ms: float = DEFAULT_HEARTBEAT_INTERVAL_MS * DEFAULT_PROBE_INTERVALS


@dataclass(frozen=True)
class DeviceLiveness:
    status: str
    last_heartbeat_ms: float
    probe_sent_at_ms: float | None = None


@dataclass(frozen=True)
class LivenessState:
    """Coordinator view of every device's liveness at one logical instant."""

    config: LivenessConfig
    devices: dict[str, DeviceLiveness]
    now_ms: float


def initial_liveness(device_ids, config: LivenessConfig | None = None,
                     start_ms: float = 0.0) -> LivenessState:
    cfg = config or LivenessConfig()
    return LivenessState(
        config=cfg,
        devices={d: DeviceLiveness(ALIVE, start_ms) for d in device_ids},
        now_ms=start_ms,
    )


def liveness_step(state: LivenessState, now_ms: float, received_heartbeats=(),
                  probe_replies=()) -> tuple[LivenessState, tuple[str, ...]]:
    """Advance the liveness machine to ``now_ms``.

    Devices silent past the suspect timeout become Suspected and immediately
    get a probe dispatched (landing them in Probing); a probe reply or a
    fresh heartbeat restores Alive; a probe silent past its own timeout
    declares the device Failed, reported in the returned tuple.
    """
    if now_ms < state.now_ms:
        raise ValueError(f"logical clock moved backwards: {now_ms} < {state.now_ms}")
    heartbeats = set(received_heartbeats)
    replies = set(probe_replies)
    cfg = state.config
    devices: dict[str, DeviceLiveness] = {}
    failures: list[str] = []
    for device_id, dev in state.devices.items():
        status = dev.status
        last = dev.last_heartbeat_ms
        probe_at = dev.probe_sent_at_ms
        if device_id in heartbeats or device_id in replies:
            event = HEARTBEAT if device_id in heartbeats else PROBE_REPLY
            status = transition(status, event)
            if status == ALIVE:
                last, probe_at = now_ms, None
        elif status == ALIVE and now_ms - last >= cfg.suspect_timeout_ms:
            status = transition(status, SUSPECT_ELAPSED)
            status = transition(status, PROBE_DISPATCHED)
            probe_at = now_ms
        elif status == SUSPECTED:
            status = transition(status, PROBE_DISPATCHED)
            probe_at = now_ms
        elif status == PROBING and now_ms - probe_at >= cfg.probe_timeout_ms:
            status = transition(status, PROBE_ELAPSED)
            failures.append(device_id)
        devices[device_id] = DeviceLiveness(status, last, probe_at)
    return LivenessState(cfg, devices, now_ms), tuple(failures)


# ---------------------------------------------------------------------------
# backup assignment
# ---------------------------------------------------------------------------

INTRA_STAGE = "intra-stage"
NEXT_STAGE_NODE = "next-stage-node"


@dataclass(frozen=True)
class StageBackup:
    stage_index: int
    kind: str  # INTRA_STAGE or NEXT_STAGE_NODE
    backup_device: str | None = None


@dataclass(frozen=True)
class BackupAssignment:
    stages: tuple[StageBackup, ...]

    def for_stage(self, stage_index: int) -> StageBackup:
        return self.stages[stage_index]


def _free_memory(profile: WorkloadProfile, plan: PlanConfig, stage: StageSpec,
                 device_id: str) -> int:
    used = stage_memory(profile, stage.layer_range,
                        stage.allocation[device_id], stage.k_inflight,
                        plan.optimizer).total_bytes
    return profile.device(device_id).memory_budget_bytes - used


def assign_backups(profile: WorkloadProfile, plan: PlanConfig) -> BackupAssignment:
    """Choose where each stage's model can be restored from.

    Multi-device stages already replicate their model internally. A
    single-device stage checkpoints to the device with the most free memory
    in the next stage, the last stage wrapping to the first.
    """
    stages = plan.stages
    backups: list[StageBackup] = []
    for stage in stages:
        if len(stage.devices) > 1:
            backups.append(StageBackup(stage.stage_index, INTRA_STAGE))
            continue
        if len(stages) == 1:
            raise NoBackupTarget(
                "a single-stage, single-device pipeline has no backup node")
        nxt = stages[(stage.stage_index + 1) % len(stages)]
        target = min(nxt.devices,
                     key=lambda d: (-_free_memory(profile, plan, nxt, d), d))
        backups.append(StageBackup(stage.stage_index, NEXT_STAGE_NODE, target))
    return BackupAssignment(stages=tuple(backups))


# ---------------------------------------------------------------------------
# replay planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MigrationOp:
    """Move one layer's weights one hop between adjacent stages."""

    layer_id: int
    from_stage: int
    to_stage: int
    nbytes: int


@dataclass(frozen=True)
class RestoreOp:
    """Re-materialize a lost layer from a backup device onto a stage."""

    layer_id: int
    source_device: str
    to_stage: int
    nbytes: int


@dataclass(frozen=True)
class ReplayPlan:
    """Everything needed to resume training after one device failure."""

    failed_device: str
    failed_stage_index: int
    old_partition: tuple[tuple[int, int], ...]
    new_partition: tuple[tuple[int, int], ...]
    migrations: tuple[MigrationOp, ...]
    migration_bytes: int
    restores: tuple[RestoreOp, ...]
    restore_bytes: int
    new_plan: PlanConfig


def migration_plan(old_partition, new_partition, profile: WorkloadProfile):
    """Adjacent-stage migration ops turning one full partition into another.

    Both partitions must cover every layer. A layer moving k stages yields k
    single-hop ops so each hop can run concurrently; total bytes therefore
    weight each moved layer by its hop count.
    """
    old_owner = _owner_by_layer(old_partition, profile.num_layers)
    new_owner = _owner_by_layer(new_partition, profile.num_layers)
    ops: list[MigrationOp] = []
    total = 0
    for layer_id in range(profile.num_layers):
        src, dst = old_owner[layer_id], new_owner[layer_id]
        step = 1 if dst > src else -1
        for hop_from in range(src, dst, step):
            nbytes = profile.layers[layer_id].param_bytes
            ops.append(MigrationOp(layer_id, hop_from, hop_from + step, nbytes))
            total += nbytes
    return tuple(ops), total


def _owner_by_layer(partition, num_layers: int) -> list[int]:
    owner = [-1] * num_layers
    for stage_idx, (start, end) in enumerate(partition):
        for layer_id in range(start, end + 1):
            if owner[layer_id] != -1:
                raise ValueError(f"layer {layer_id} owned by two stages")
            owner[layer_id] = stage_idx
    if any(o == -1 for o in owner):
        raise ValueError("partition does not cover all layers")
    return owner


def _device_capacity(profile: WorkloadProfile, device_id: str, micro_batch: int) -> float:
    # scalar per-device capacity: full model range at the plan's micro-batch
    return capacity(profile, device_id, (0, profile.num_layers - 1), micro_batch)


def replay_for_failures(profile: WorkloadProfile, plan: PlanConfig,
                        failed_devices) -> ReplayPlan:
    """Entry point for liveness-driven replay; rejects simultaneous failures."""
    failed = list(failed_devices)
    if len(failed) != 1:
        raise MultiDeviceFailure(
            f"replay handles exactly one failed device, got {failed!r}")
    return replan_on_failure(profile, plan, failed[0])


def replan_on_failure(profile: WorkloadProfile, plan: PlanConfig,
                      failed_device: str) -> ReplayPlan:
    """Build the replay plan for one failed device.

    The failed device leaves its stage (an emptied stage disappears and its
    layers are restored from the backup node); surviving stages get layer
    shares proportional to their summed device capacities, cut at FLOPs
    quantiles; micro-batch allocations are rebalanced with the allocator.
    """
    matches = [s for s in plan.stages if failed_device in s.devices]
    if len(matches) != 1:
        raise ValueError(f"device {failed_device!r} is not in exactly one stage")
    failed_stage = matches[0]

    survivors: list[tuple[StageSpec, tuple[str, ...]]] = []
    for stage in plan.stages:
        devices = tuple(d for d in stage.devices if d != failed_device)
        if devices:
            survivors.append((stage, devices))
    if not survivors:
        raise NoSurvivingDevices("no devices left to replay the pipeline on")

    B = plan.micro_batch_size
    capacities = [
        math.fsum(_device_capacity(profile, d, B) for d in devices)
        for _, devices in survivors
    ]
    new_count = len(survivors)
    cuts = flops_proportional_cuts(profile.layer_flops(), capacities)
    bounds = [0, *cuts, profile.num_layers]
    new_partition = tuple((bounds[i], bounds[i + 1] - 1) for i in range(new_count))
    old_partition = tuple(s.layer_range for s in plan.stages)

    # surviving-layer migrations: old stage entities renumbered in order
    old_index_of = {stage.stage_index: idx for idx, (stage, _) in enumerate(survivors)}
    lost_range = None
    if failed_stage.stage_index not in old_index_of:
        lost_range = failed_stage.layer_range
    new_owner = _owner_by_layer(new_partition, profile.num_layers)
    migrations: list[MigrationOp] = []
    migration_bytes = 0
    for stage in plan.stages:
        if stage.stage_index not in old_index_of:
            continue
        src = old_index_of[stage.stage_index]
        for layer_id in range(stage.layer_start, stage.layer_end + 1):
            dst = new_owner[layer_id]
            step = 1 if dst > src else -1
            for hop_from in range(src, dst, step):
                nbytes = profile.layers[layer_id].param_bytes
                migrations.append(
                    MigrationOp(layer_id, hop_from, hop_from + step, nbytes))
                migration_bytes += nbytes

    restores: list[RestoreOp] = []
    restore_bytes = 0
    if lost_range is not None:
        backup = assign_backups(profile, plan).for_stage(failed_stage.stage_index)
        for layer_id in range(lost_range[0], lost_range[1] + 1):
            nbytes = profile.layers[layer_id].param_bytes
            restores.append(RestoreOp(layer_id, backup.backup_device,
                                      new_owner[layer_id], nbytes))
            restore_bytes += nbytes

    kfun = K_POLICIES[plan.k_policy]
    new_stages: list[StageSpec] = []
    for idx, ((_, devices), (start, end)) in enumerate(zip(survivors, new_partition)):
        k = kfun(new_count - idx)
        try:
            allocation, _, _ = allocate_microbatch(
                profile, devices, (start, end), B, k, plan.block_size, plan.optimizer)
        except InfeasibleAllocation as err:
            raise InfeasibleAllocation(
                f"replayed stage {idx} (layers {start}..{end} on "
                f"{', '.join(devices)}) violates memory: {err}") from err
        new_stages.append(StageSpec(
            layer_start=start, layer_end=end, devices=devices,
            allocation=dict(allocation.samples), stage_index=idx, k_inflight=k))

    timeline = build_timeline(profile, new_stages, plan.micro_batch_count, B)
    latency, _ = round_latency(timeline)
    new_plan = PlanConfig(
        model_name=plan.model_name,
        stages=new_stages,
        micro_batch_count=plan.micro_batch_count,
        micro_batch_size=B,
        k_policy=plan.k_policy,
        block_size=plan.block_size,
        optimizer=plan.optimizer,
        timeline=timeline,
        estimated_round_latency_ms=latency,
        dominant_step=timeline.dominant_index,
    )
    return ReplayPlan(
        failed_device=failed_device,
        failed_stage_index=failed_stage.stage_index,
        old_partition=old_partition,
        new_partition=new_partition,
        migrations=tuple(migrations),
        migration_bytes=migration_bytes,
        restores=tuple(restores),
        restore_bytes=restore_bytes,
        new_plan=new_plan,
    )
