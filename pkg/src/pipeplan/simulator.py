"""Deterministic discrete-event simulation of the planned 1F1B pipeline.

The simulator is the ground-truth oracle for the planner's analytic
round-latency estimate. Each timeline step (execution or communication) is a
unit-capacity resource processing one forward or backward item at a time;
communication steps are modeled the same way, so one transfer occupies the
link regardless of direction.

Event rules:

* data dependency: a micro-batch's FP on step s waits for its FP on step
  s-1; its BP on step s waits for its BP on step s+1; on the last step BP
  waits for that micro-batch's own FP;
* 1F1B admission: stage p starts a new FP only while fewer than K_p
  micro-batches are resident (FP finished, BP not yet finished);
* priority: when a step frees up, backward work beats forward work, then
  lower micro-batch id wins;
* gradient sync: each execution step appends one blocking AllReduce interval
  after its final BP.

Identical inputs always produce bit-identical results.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

from .cost_model import EXECUTION, stage_memory
from .errors import EstimateExceedsSimulation
from .profiles import WorkloadProfile

FP_EVENT = "FP"
BP_EVENT = "BP"
FWD_COMM = "FwdComm"
BWD_COMM = "BwdComm"
ALLREDUCE = "AllReduce"

COMM_MODEL = "half-duplex"  # one transfer at a time per communication step

# estimate/simulation comparisons tolerate one nanosecond of float noise
TOLERANCE_MS = 1e-6


@dataclass(frozen=True)
class SimEvent:
    """One scheduled interval on a step; micro_batch is None for AllReduce."""

    step: int
    micro_batch: int | None
    kind: str
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class SimResult:
    """Event-level schedule of one round plus derived diagnostics."""

    events: tuple[SimEvent, ...]
    round_latency_ms: float
    bubble_ms: tuple[float, ...]  # per step
    peak_resident_microbatches: tuple[int, ...]  # per stage
    peak_memory_bytes: tuple[int, ...]  # per stage, worst device
    micro_batch_count: int


@dataclass(frozen=True)
class EstimateReport:
    """Planner estimate versus simulated truth for one plan."""

    estimate_ms: float
    simulated_ms: float
    relative_gap: float
    bubble_ms: tuple[float, ...]
    dominant_step: int
    comm_model: str = COMM_MODEL


def _fwd_kind(step_kind: str) -> str:
    return FP_EVENT if step_kind == EXECUTION else FWD_COMM


def _bwd_kind(step_kind: str) -> str:
    return BP_EVENT if step_kind == EXECUTION else BWD_COMM


def simulate_timeline(steps, micro_batch_count: int,
                      k_by_step: dict[int, int]) -> tuple[tuple[SimEvent, ...], float]:
    """Run the event loop over raw steps; ``k_by_step`` gates execution steps.

    Returns the chronologically sorted events and the round latency.
    """
    num_steps = len(steps)
    M = micro_batch_count
    if num_steps == 0 or M < 1:
        raise ValueError("need at least one step and one micro-batch")

    fp_done = [[False] * M for _ in range(num_steps)]
    bp_done = [[False] * M for _ in range(num_steps)]
    resident = [0] * num_steps
    bp_remaining = [M] * num_steps
    allreduce_done = [step.kind != EXECUTION for step in steps]
    busy = [False] * num_steps
    events: list[SimEvent] = []
    completions: list[tuple[float, int, tuple]] = []
    seq = 0

    def fp_ready(s: int, m: int) -> bool:
        if fp_done[s][m]:
            return False
        if s > 0 and not fp_done[s - 1][m]:
            return False
        if steps[s].kind == EXECUTION and resident[s] >= k_by_step[s]:
            return False
        return True

    def bp_ready(s: int, m: int) -> bool:
        if bp_done[s][m] or not fp_done[s][m]:
            return False
        if s == num_steps - 1:
            return True
        return bp_done[s + 1][m]

    def pick_task(s: int):
        # backward first, then lowest micro-batch id
        for m in range(M):
            if bp_ready(s, m):
                return ("bp", m, steps[s].bp_ms)
        for m in range(M):
            if fp_ready(s, m):
                return ("fp", m, steps[s].fp_ms)
        if (steps[s].kind == EXECUTION and bp_remaining[s] == 0
                and not allreduce_done[s]):
            return ("allreduce", None, steps[s].allreduce_ms)
        return None

    def try_start(s: int, now: float) -> None:
        nonlocal seq
        if busy[s]:
            return
        task = pick_task(s)
        if task is None:
            return
        phase, m, duration = task
        end = now + duration
        if phase == "fp":
            kind = _fwd_kind(steps[s].kind)
        elif phase == "bp":
            kind = _bwd_kind(steps[s].kind)
        else:
            kind = ALLREDUCE
            allreduce_done[s] = True
        events.append(SimEvent(step=s, micro_batch=m, kind=kind,
                               start_ms=now, end_ms=end))
        busy[s] = True
        heapq.heappush(completions, (end, seq, (s, phase, m)))
        seq += 1

    now = 0.0
    for s in range(num_steps):
        try_start(s, now)
    while completions:
        now = completions[0][0]
        while completions and completions[0][0] == now:
            _, _, (s, phase, m) = heapq.heappop(completions)
            busy[s] = False
            if phase == "fp":
                fp_done[s][m] = True
                if steps[s].kind == EXECUTION:
                    resident[s] += 1
            elif phase == "bp":
                bp_done[s][m] = True
                bp_remaining[s] -= 1
                if steps[s].kind == EXECUTION:
                    resident[s] -= 1
        for s in range(num_steps):
            try_start(s, now)

    expected = 2 * num_steps * M + sum(1 for step in steps if step.kind == EXECUTION)
    if len(events) != expected:
        raise RuntimeError(
            f"scheduler stalled with {len(events)} of {expected} events placed")
    latency = max(e.end_ms for e in events)
    ordered = tuple(sorted(
        events, key=lambda e: (e.start_ms, e.step, e.kind, -1 if e.micro_batch is None
                               else e.micro_batch)))
    return ordered, latency


def _peak_residents(events, steps, micro_batch_count: int) -> list[int]:
    """Max simultaneously resident micro-batches per execution step.

    A micro-batch is resident on a stage from its FP completion until its BP
    completion there.
    """
    peaks = []
    for s, step in enumerate(steps):
        if step.kind != EXECUTION:
            continue
        marks = []
        for e in events:
            if e.step != s or e.micro_batch is None:
                continue
            if e.kind == FP_EVENT:
                marks.append((e.end_ms, 0, 1))
            elif e.kind == BP_EVENT:
                marks.append((e.end_ms, -1, -1))
        marks.sort()
        level = peak = 0
        for _, _, delta in marks:
            level += delta
            peak = max(peak, level)
        peaks.append(peak)
    return peaks


def simulate_round(plan, micro_batch_count: int | None = None,
                   profile: WorkloadProfile | None = None) -> SimResult:
    """Simulate one full round of ``plan``.

    ``micro_batch_count`` defaults to the plan's own M. When ``profile`` is
    given, per-stage peak memory is derived from the simulated peak resident
    count and each device's allocation share.
    """
    M = plan.micro_batch_count if micro_batch_count is None else micro_batch_count
    steps = plan.timeline.steps
    k_by_step = {}
    stage_by_step = {}
    for idx, step in enumerate(steps):
        if step.kind == EXECUTION:
            stage = plan.stages[step.stage_index]
            k_by_step[idx] = stage.k_inflight
            stage_by_step[idx] = stage
    events, latency = simulate_timeline(steps, M, k_by_step)

    bubbles = tuple(bubble_from_events(events, s) for s in range(len(steps)))
    peaks = _peak_residents(events, steps, M)

    peak_memory: list[int] = []
    if profile is not None:
        for stage, peak in zip(plan.stages, peaks):
            worst = 0
            for d, n in stage.allocation.items():
                breakdown = stage_memory(profile, stage.layer_range, n,
                                         peak, plan.optimizer)
                worst = max(worst, breakdown.total_bytes)
            peak_memory.append(worst)
    return SimResult(
        events=events,
        round_latency_ms=latency,
        bubble_ms=bubbles,
        peak_resident_microbatches=tuple(peaks),
        peak_memory_bytes=tuple(peak_memory),
        micro_batch_count=M,
    )


def bubble_from_events(events, step: int) -> float:
    """Idle time inside [first start, last end] of one step's schedule."""
    spans = [(e.start_ms, e.end_ms) for e in events if e.step == step]
    if not spans:
        return 0.0
    first = min(s for s, _ in spans)
    last = max(e for _, e in spans)
    busy = math.fsum(e - s for s, e in spans)
    return (last - first) - busy


def bubble_count(result: SimResult, step: int) -> float:
    """Idle milliseconds on ``step`` during the simulated round."""
    if not 0 <= step < len(result.bubble_ms):
        raise ValueError(f"step {step} outside the simulated timeline")
    return result.bubble_ms[step]


def validate_estimate(plan, result: SimResult) -> EstimateReport:
    """Check the analytic estimate against the simulated schedule.

    The estimate only omits bubbles inside the dominant step, so it must not
    exceed the simulated latency (tolerance one nanosecond); a violation
    raises :class:`EstimateExceedsSimulation` and indicates a cost-model bug.
    """
    estimate = plan.estimated_round_latency_ms
    simulated = result.round_latency_ms
    if estimate > simulated + TOLERANCE_MS:
        raise EstimateExceedsSimulation(
            f"estimate {estimate} ms exceeds simulated {simulated} ms")
    gap = 0.0 if simulated == 0 else (simulated - estimate) / simulated
    return EstimateReport(
        estimate_ms=estimate,
        simulated_ms=simulated,
        relative_gap=gap,
        bubble_ms=result.bubble_ms,
        dominant_step=plan.timeline.dominant_index,
    )
