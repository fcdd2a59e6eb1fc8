"""Dynamic-programming search for the latency-optimal hybrid pipeline plan.

The search space: partition the model's layers into contiguous stages, map
stages onto contiguous runs of the devices sorted by descending memory
(earlier stages hold more activations, so they get the roomier devices), and
split each stage's micro-batch across its group with the allocator. Devices
at the tail of the memory order may stay unused, since a slow device can
hurt more than it helps.

Cells are indexed (l, n, p): the last ``l`` layers as ``p`` stages over the
last ``n`` devices. Extending a sub-pipeline prepends one execution step and
one communication step; the extended round latency depends on the
sub-pipeline only through (a) its aligned dominant work, (b) the residual of
its waiting/AllReduce phases, and (c) its first device group (which paces
the new communication step). Keeping a single best candidate per cell is
therefore not sufficient for exactness - two sub-pipelines can order one way
in isolation and the other way after extension - so each cell retains the
small set of candidates not dominated on all of those coordinates. The
final plan then provably matches exhaustive enumeration of the same space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .allocator import allocate_microbatch
from .cost_model import (
    COMMUNICATION,
    DEFAULT_OPTIMIZER,
    EXECUTION,
    StageSpec,
    Step,
    StepTimeline,
    allreduce_time,
    flops_proportional_cuts,
    round_latency,
    stage_memory,
    transfer_time_ms,
)
from .errors import InfeasibleAllocation, NoFeasiblePlan, OutOfRange
from .profiles import WorkloadProfile

# In-flight bound policies as a function of a stage's distance q >= 1 from the
# pipeline tail (q = P - p). "paper" is the default 2(P-p)-1.
K_POLICIES = {
    "paper": lambda q: 2 * q - 1,
    "a": lambda q: 2 * q,
    "b": lambda q: q,
    "c": lambda q: 2 * q + 1,
}


@dataclass
class PlanConfig:
    """A complete pipeline plan plus its derived timeline and latency estimate."""

    model_name: str
    stages: list[StageSpec]
    micro_batch_count: int
    micro_batch_size: int
    k_policy: str
    block_size: int
    optimizer: str
    timeline: StepTimeline
    estimated_round_latency_ms: float
    dominant_step: int

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_of_layer(self, layer_id: int) -> int:
        for stage in self.stages:
            if stage.layer_start <= layer_id <= stage.layer_end:
                return stage.stage_index
        raise ValueError(f"layer {layer_id} not covered by plan")


def order_devices(profile: WorkloadProfile) -> list[str]:
    """Device ids sorted by descending memory budget, ties by ascending id."""
    return [
        d.device_id
        for d in sorted(profile.devices,
                        key=lambda d: (-d.memory_budget_bytes, d.device_id))
    ]


def _aligned_work(steps, index: int, micro_batches: int) -> float:
    """M x (FP+BP) of a step plus the FP+BP prefix before it.

    This is the execution-phase span the step would have if it were dominant;
    the dominant step is the one maximizing it.
    """
    return (micro_batches * steps[index].total_ms
            + math.fsum(s.total_ms for s in steps[:index]))


def dominant_index(steps, micro_batches: int) -> int:
    """Dominant step of a standalone timeline: max aligned work, first on ties."""
    best, best_idx = -math.inf, 0
    for idx in range(len(steps)):
        value = _aligned_work(steps, idx, micro_batches)
        if value > best:
            best, best_idx = value, idx
    return best_idx


def update_dominant(sub_steps, sub_dominant: int | None, new_exec_step: Step,
                    new_comm_step: Step | None, micro_batches: int) -> int:
    """Dominant step after prepending an execution (+communication) step.

    Only three candidates can win: the sub-pipeline's old dominant step
    (every sub step's alignment shifts by the same new prefix, so their
    relative order is preserved), the new execution step, and the new
    communication step.
    """
    if not sub_steps:
        return 0
    if new_comm_step is None or sub_dominant is None:
        raise ValueError("a non-empty sub-pipeline needs a communication step and its dominant")
    steps = [new_exec_step, new_comm_step, *sub_steps]
    candidates = [0, 1, sub_dominant + 2]
    best, best_idx = -math.inf, 0
    for idx in sorted(candidates):
        value = _aligned_work(steps, idx, micro_batches)
        if value > best:
            best, best_idx = value, idx
    return best_idx


def _phase_residual(steps, micro_batches: int) -> float:
    """max over steps of (waiting + AllReduce - aligned prefix).

    Round latency decomposes as this residual plus the dominant step's
    aligned work; both grow monotonically under extension, which is what
    makes per-cell Pareto pruning exact.
    """
    best = -math.inf
    for idx, s in enumerate(steps):
        waiting = math.fsum(x.fp_ms for x in steps[:idx])
        prefix = math.fsum(x.total_ms for x in steps[:idx])
        best = max(best, waiting + s.allreduce_ms - prefix)
    return best


def _execution_step(fp_ms: float, bp_ms: float, allreduce_ms: float,
                    stage_index: int | None = None) -> Step:
    return Step(EXECUTION, stage_index, fp_ms, bp_ms, allreduce_ms)


def _communication_step(profile: WorkloadProfile, boundary_layer: int,
                        micro_batch: int, left_group, right_group) -> Step:
    nbytes = profile.layers[boundary_layer].activation_bytes * micro_batch
    slowest = profile.bandwidth.min_between(left_group, right_group)
    t = transfer_time_ms(nbytes, slowest)
    return Step(COMMUNICATION, None, t, t, 0.0)


def build_timeline(profile: WorkloadProfile, stages, micro_batch_count: int,
                   micro_batch_size: int) -> StepTimeline:
    """Assemble the alternating step timeline for an ordered stage list.

    Per-stage FP/BP times come from the stored allocations (the slowest
    device paces the step); communication steps carry the boundary activation
    for one micro-batch over the slowest link between adjacent groups.
    """
    from .profiles import BP, FP, exec_time

    steps: list[Step] = []
    for idx, stage in enumerate(stages):
        fp_ms = max(exec_time(profile, d, stage.layer_range, FP, n)
                    for d, n in stage.allocation.items())
        bp_ms = max(exec_time(profile, d, stage.layer_range, BP, n)
                    for d, n in stage.allocation.items())
        ar_ms = allreduce_time(profile, stage.devices, stage.layer_range)
        if idx > 0:
            steps.append(_communication_step(
                profile, stages[idx - 1].layer_end, micro_batch_size,
                stages[idx - 1].devices, stage.devices))
        steps.append(_execution_step(fp_ms, bp_ms, ar_ms, stage.stage_index))
    dm = dominant_index(steps, micro_batch_count)
    return StepTimeline(steps=steps, dominant_index=dm,
                        micro_batch_count=micro_batch_count,
                        micro_batch_size=micro_batch_size)


def estimate_plan(profile: WorkloadProfile, plan: PlanConfig):
    """Re-derive the timeline and latency of an externally supplied plan.

    Validates the stored allocations (sample conservation and per-device
    memory) so baseline and replayed plans go through the same feasibility
    gate as planner output. Returns ``(timeline, latency_ms, argmax_step)``.
    """
    for stage in plan.stages:
        if sorted(stage.allocation) != sorted(stage.devices):
            raise InfeasibleAllocation(
                f"stage {stage.stage_index}: allocation keys differ from the device group")
        if sum(stage.allocation.values()) != plan.micro_batch_size:
            raise InfeasibleAllocation(
                f"stage {stage.stage_index}: allocation covers "
                f"{sum(stage.allocation.values())} of {plan.micro_batch_size} samples")
        for d, n in stage.allocation.items():
            need = stage_memory(profile, stage.layer_range, n, stage.k_inflight,
                                plan.optimizer).total_bytes
            budget = profile.device(d).memory_budget_bytes
            if need > budget:
                raise InfeasibleAllocation(
                    f"stage {stage.stage_index}: device {d} needs {need} bytes "
                    f"but has {budget}")
    timeline = build_timeline(profile, plan.stages, plan.micro_batch_count,
                              plan.micro_batch_size)
    latency, argmax = round_latency(timeline)
    return timeline, latency, argmax


@dataclass
class DpCell:
    """One candidate sub-pipeline for a (layers, devices, stages) key.

    ``steps`` and ``stage_plan`` describe the suffix pipeline head-first;
    ``aligned_ms`` is the dominant step's aligned work and ``residual_ms``
    the waiting/AllReduce residual, the two coordinates extension cost is
    monotone in.
    """

    key: tuple[int, int, int]
    split: tuple[int, int]  # (l', n') this candidate extended
    stage_plan: tuple  # tuple of (layer_start, layer_end, devices, allocation, k)
    steps: tuple
    dominant: int
    latency_ms: float
    aligned_ms: float
    residual_ms: float
    devices_used: int


def _dominates(a: DpCell, b: DpCell) -> bool:
    """a makes b redundant: same head group, no coordinate worse."""
    return (a.stage_plan[0][2] == b.stage_plan[0][2]
            and a.residual_ms <= b.residual_ms
            and a.aligned_ms <= b.aligned_ms
            and a.latency_ms <= b.latency_ms
            and a.devices_used <= b.devices_used)


def _prune(cands: list[DpCell]) -> list[DpCell]:
    kept: list[DpCell] = []
    for cand in cands:
        if any(_dominates(k, cand) for k in kept):
            continue
        kept = [k for k in kept if not _dominates(cand, k)]
        kept.append(cand)
    return kept


def plan(profile: WorkloadProfile, micro_batch_count: int, micro_batch_size: int,
         k_policy: str = "paper", block_size: int = 1,
         optimizer: str = DEFAULT_OPTIMIZER) -> PlanConfig:
    """Search all stage counts, partitions and device runs for the best plan.

    Raises :class:`NoFeasiblePlan` when every configuration breaks some
    memory budget, and :class:`OutOfRange` when the micro-batch size was
    never profiled.
    """
    if micro_batch_count < 1 or micro_batch_size < 1:
        raise ValueError("micro-batch count and size must be >= 1")
    grid_max = profile.profiled_batch_sizes[-1]
    if micro_batch_size > grid_max:
        raise OutOfRange(
            f"micro-batch size {micro_batch_size} exceeds the profiled maximum {grid_max}")
    if k_policy not in K_POLICIES:
        raise ValueError(f"unknown k policy {k_policy!r}")
    kfun = K_POLICIES[k_policy]
    order = order_devices(profile)
    L, N = profile.num_layers, len(order)
    M, B = micro_batch_count, micro_batch_size

    alloc_cache: dict = {}

    def alloc(i: int, j: int, lo: int, hi: int, k: int):
        key = (i, j, lo, hi, k)
        if key not in alloc_cache:
            group = tuple(order[lo:hi])
            try:
                alloc_cache[key] = allocate_microbatch(
                    profile, group, (i, j), B, k, block_size, optimizer)
            except InfeasibleAllocation:
                alloc_cache[key] = None
        return alloc_cache[key]

    cells: dict[tuple[int, int, int], list[DpCell]] = {}

    for p in range(1, min(L, N) + 1):
        k_head = kfun(p)
        for n in range(1, N + 1):
            for l in range(1, L + 1):
                cands: list[DpCell] = []
                for n_sub in range(0, n):
                    for l_sub in range(0, l):
                        if p == 1:
                            if l_sub != 0:
                                continue
                            subs = [None]
                        else:
                            subs = cells.get((l_sub, n_sub, p - 1), [])
                            if not subs:
                                continue
                        i, j = L - l, L - l_sub - 1
                        result = alloc(i, j, N - n, N - n_sub, k_head)
                        if result is None:
                            continue
                        allocation, fp_ms, bp_ms = result
                        head_group = tuple(order[N - n:N - n_sub])
                        ar_ms = allreduce_time(profile, head_group, (i, j))
                        exec_step = _execution_step(fp_ms, bp_ms, ar_ms)
                        head_stage = (i, j, head_group, dict(allocation.samples), k_head)
                        for sub in subs:
                            if sub is None:
                                steps = (exec_step,)
                                dm = 0
                                stage_plan = (head_stage,)
                                used = n - n_sub
                            else:
                                comm = _communication_step(
                                    profile, j, B, head_group, sub.stage_plan[0][2])
                                steps = (exec_step, comm, *sub.steps)
                                dm = update_dominant(sub.steps, sub.dominant,
                                                     exec_step, comm, M)
                                stage_plan = (head_stage, *sub.stage_plan)
                                used = (n - n_sub) + sub.devices_used
                            timeline = StepTimeline(list(steps), dm, M, B)
                            latency, _ = round_latency(timeline)
                            cands.append(DpCell(
                                key=(l, n, p),
                                split=(l_sub, n_sub),
                                stage_plan=stage_plan,
                                steps=steps,
                                dominant=dm,
                                latency_ms=latency,
                                aligned_ms=_aligned_work(steps, dm, M),
                                residual_ms=_phase_residual(steps, M),
                                devices_used=used,
                            ))
                if cands:
                    cells[(l, n, p)] = _prune(cands)

    finals = [
        (cand.latency_ms, p, cand.devices_used, cand)
        for p in range(1, min(L, N) + 1)
        for cand in cells.get((L, N, p), [])
    ]
    if not finals:
        raise NoFeasiblePlan(
            "every partition/grouping violates a memory budget; "
            "try a smaller micro-batch or a looser k policy")
    best = min(finals, key=lambda t: t[:3])[3]

    stages = [
        StageSpec(layer_start=i, layer_end=j, devices=devices,
                  allocation=dict(allocation), stage_index=idx, k_inflight=k)
        for idx, (i, j, devices, allocation, k) in enumerate(best.stage_plan)
    ]
    timeline = build_timeline(profile, stages, M, B)
    latency, _ = round_latency(timeline)
    return PlanConfig(
        model_name=profile.model_name,
        stages=stages,
        micro_batch_count=M,
        micro_batch_size=B,
        k_policy=k_policy,
        block_size=block_size,
        optimizer=optimizer,
        timeline=timeline,
        estimated_round_latency_ms=latency,
        dominant_step=timeline.dominant_index,
    )


# ---------------------------------------------------------------------------
# baseline layouts, scored with the same cost model
# ---------------------------------------------------------------------------


def _finish_plan(profile, stages, M, B, k_policy, block_size, optimizer) -> PlanConfig:
    timeline = build_timeline(profile, stages, M, B)
    latency, _ = round_latency(timeline)
    return PlanConfig(
        model_name=profile.model_name, stages=stages, micro_batch_count=M,
        micro_batch_size=B, k_policy=k_policy, block_size=block_size,
        optimizer=optimizer, timeline=timeline,
        estimated_round_latency_ms=latency,
        dominant_step=timeline.dominant_index,
    )


def pure_pipeline_plan(profile: WorkloadProfile, micro_batch_count: int,
                       micro_batch_size: int, k_policy: str = "paper",
                       optimizer: str = DEFAULT_OPTIMIZER) -> PlanConfig:
    """Straight pipeline baseline: singleton groups, equal-FLOPs cuts."""
    order = order_devices(profile)
    L = profile.num_layers
    parts = min(L, len(order))
    cuts = flops_proportional_cuts(profile.layer_flops(), [1] * parts)
    bounds = [0, *cuts, L]
    kfun = K_POLICIES[k_policy]
    stages = [
        StageSpec(layer_start=bounds[idx], layer_end=bounds[idx + 1] - 1,
                  devices=(order[idx],), allocation={order[idx]: micro_batch_size},
                  stage_index=idx, k_inflight=kfun(parts - idx))
        for idx in range(parts)
    ]
    return _finish_plan(profile, stages, micro_batch_count, micro_batch_size,
                        k_policy, 1, optimizer)


def pure_data_parallel_plan(profile: WorkloadProfile, micro_batch_count: int,
                            micro_batch_size: int, block_size: int = 1,
                            optimizer: str = DEFAULT_OPTIMIZER) -> PlanConfig:
    """Single-stage baseline: the whole model replicated on every device."""
    order = order_devices(profile)
    layer_range = (0, profile.num_layers - 1)
    allocation, _, _ = allocate_microbatch(
        profile, tuple(order), layer_range, micro_batch_size, 1, block_size, optimizer)
    stages = [StageSpec(layer_start=0, layer_end=profile.num_layers - 1,
                        devices=tuple(order), allocation=dict(allocation.samples),
                        stage_index=0, k_inflight=1)]
    return _finish_plan(profile, stages, micro_batch_count, micro_batch_size,
                        "paper", block_size, optimizer)
