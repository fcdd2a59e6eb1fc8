"""Closed-form cost formulas for hybrid pipeline plans.

Covers stage memory footprints, ring-AllReduce time, the waiting/execution
phase times of the step timeline, round latency, and communication-volume
analytics for hybrid-pipeline (inter-stage pipeline, intra-stage data
parallel) versus hybrid-data-parallel (parameter-server groups, intra-group
pipeline) layouts.

Everything here is a pure function over immutable inputs. Byte counts stay
in bytes; the bytes-to-bits conversion happens in exactly one place,
:func:`transfer_time_ms`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ValidationError
from .profiles import WorkloadProfile

EXECUTION = "execution"
COMMUNICATION = "communication"

# Extra optimizer state per parameter byte. Model weight memory itself counts
# parameters plus accumulated gradients (factor 2), independent of optimizer.
OPTIMIZER_STATE_FACTORS = {
    "sgd": 0,
    "sgd-momentum": 1,
    "adam": 2,
    "adamw": 2,
}

DEFAULT_OPTIMIZER = "sgd-momentum"


def transfer_time_ms(nbytes: float, bits_per_second: float) -> float:
    """Milliseconds to push ``nbytes`` over one link of ``bits_per_second``."""
    if nbytes == 0:
        return 0.0
    if math.isinf(bits_per_second):
        return 0.0
    return nbytes * 8.0 / bits_per_second * 1000.0


@dataclass
class StageSpec:
    """One pipeline stage: a contiguous layer range replicated on a device group."""

    layer_start: int
    layer_end: int  # inclusive
    devices: tuple[str, ...]
    allocation: dict[str, int]  # samples of one micro-batch per device
    stage_index: int
    k_inflight: int  # forward passes admitted before strict 1F1B

    @property
    def layer_range(self) -> tuple[int, int]:
        return (self.layer_start, self.layer_end)


@dataclass
class Step:
    """One execution or communication step of the pipeline timeline."""

    kind: str  # EXECUTION or COMMUNICATION
    stage_index: int | None
    fp_ms: float
    bp_ms: float
    allreduce_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.fp_ms + self.bp_ms


@dataclass
class StepTimeline:
    """Alternating execution/communication steps with the dominant step marked.

    Execution steps sit at even indices and communication steps at odd ones,
    so a pipeline of P stages has S = 2P-1 steps.
    """

    steps: list[Step]
    dominant_index: int
    micro_batch_count: int
    micro_batch_size: int

    def __post_init__(self) -> None:
        for idx, step in enumerate(self.steps):
            expected = EXECUTION if idx % 2 == 0 else COMMUNICATION
            if step.kind != expected:
                raise ValidationError(
                    "step-alternation",
                    f"step {idx} is {step.kind}, expected {expected}")
        if self.steps and not 0 <= self.dominant_index < len(self.steps):
            raise ValidationError(
                "dominant-index",
                f"dominant index {self.dominant_index} outside 0..{len(self.steps) - 1}")

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class MemoryBreakdown:
    """Per-device memory footprint of a stage under the in-flight bound k."""

    model_bytes: int
    optimizer_bytes: int
    activation_bytes_per_microbatch: int
    k_inflight: int
    total_bytes: int


def kp_default(total_stages: int, stage_index: int) -> int:
    """Default in-flight micro-batch bound 2(P-p)-1 for stage p of P."""
    if not 0 <= stage_index < total_stages:
        raise ValueError(f"stage index {stage_index} outside 0..{total_stages - 1}")
    return 2 * (total_stages - stage_index) - 1


def stage_memory(profile: WorkloadProfile, layer_range, samples: int,
                 k_inflight: int, optimizer_kind: str = DEFAULT_OPTIMIZER) -> MemoryBreakdown:
    """Memory footprint of one device holding ``layer_range`` with ``samples`` per micro-batch.

    Model memory counts parameters plus accumulated gradients (2x parameter
    bytes); optimizer state adds an optimizer-dependent multiple; activations
    scale with the per-device share of a micro-batch and stay resident for up
    to ``k_inflight`` concurrent micro-batches.
    """
    if samples < 0:
        raise ValueError("samples must be nonnegative")
    i, j = layer_range
    weight_bytes = profile.param_bytes(i, j)
    factor = OPTIMIZER_STATE_FACTORS[optimizer_kind]
    model_bytes = 2 * weight_bytes
    optimizer_bytes = factor * weight_bytes
    act_bytes = samples * profile.activation_bytes(i, j)
    total = model_bytes + optimizer_bytes + k_inflight * act_bytes
    return MemoryBreakdown(
        model_bytes=model_bytes,
        optimizer_bytes=optimizer_bytes,
        activation_bytes_per_microbatch=act_bytes,
        k_inflight=k_inflight,
        total_bytes=total,
    )


def allreduce_time(profile: WorkloadProfile, group, layer_range) -> float:
    """Ring-AllReduce milliseconds for one gradient sync of ``layer_range`` in ``group``.

    Each device moves 2(|G|-1)/|G| of the stage's gradient bytes; the ring is
    paced by the slowest link inside the group. Single-device groups cost
    nothing.
    """
    members = list(group)
    size = len(members)
    if size <= 1:
        return 0.0
    i, j = layer_range
    weight_bytes = profile.param_bytes(i, j)
    slowest = profile.bandwidth.min_within(members)
    return transfer_time_ms(2.0 * (size - 1) * weight_bytes / size, slowest)


def waiting_time(timeline: StepTimeline, s: int) -> float:
    """Forward-pass time accumulated before step ``s`` reacts to its first input.

    ``s`` may equal the step count, giving the forward span of the whole
    pipeline.
    """
    if not 0 <= s <= timeline.num_steps:
        raise ValueError(f"step {s} outside 0..{timeline.num_steps}")
    return math.fsum(step.fp_ms for step in timeline.steps[:s])


def exec_phase_time(timeline: StepTimeline, s: int) -> float:
    """Execution-phase span of step ``s``, anchored at the dominant step.

    The dominant step runs its M micro-batches compactly; other steps shift
    that span by the FP+BP time between themselves and the dominant step.
    """
    if not 0 <= s < timeline.num_steps:
        raise ValueError(f"step {s} outside 0..{timeline.num_steps - 1}")
    dm = timeline.dominant_index
    dominant = timeline.steps[dm]
    base = timeline.micro_batch_count * dominant.total_ms
    if s < dm:
        return base + math.fsum(step.total_ms for step in timeline.steps[s:dm])
    return base - math.fsum(step.total_ms for step in timeline.steps[dm:s])


def round_latency(timeline: StepTimeline, allreduce_times=None) -> tuple[float, int]:
    """Round latency: the worst step's waiting + execution + AllReduce total.

    Returns ``(latency_ms, argmax_step_index)``. ``allreduce_times`` overrides
    the per-step AllReduce values stored on the timeline (handy for hand-built
    tables); communication steps never synchronize gradients.
    """
    if not timeline.steps:
        return 0.0, 0
    if allreduce_times is None:
        allreduce_times = [step.allreduce_ms for step in timeline.steps]
    if len(allreduce_times) != timeline.num_steps:
        raise ValueError("allreduce_times must align with timeline steps")
    best = -math.inf
    best_step = 0
    for s in range(timeline.num_steps):
        total = (waiting_time(timeline, s)
                 + exec_phase_time(timeline, s)
                 + allreduce_times[s])
        if total > best:
            best = total
            best_step = s
    return best, best_step


# ---------------------------------------------------------------------------
# communication-volume analytics
# ---------------------------------------------------------------------------


def comm_volume_hpp(profile: WorkloadProfile, stages, micro_batch_count: int,
                    micro_batch_size: int) -> int:
    """Bytes moved per round by a hybrid-pipeline layout.

    Intra-group ring AllReduce contributes 2(|g|-1) passes over each stage's
    parameters; every stage boundary additionally carries the boundary
    activation (and its gradient) for each of the mini-batch's samples. A
    single group degenerates to pure data parallelism: AllReduce only.
    """
    stages = list(stages)
    beta = micro_batch_count * micro_batch_size
    allreduce = sum(
        2 * (len(stage.devices) - 1) * profile.param_bytes(*stage.layer_range)
        for stage in stages
    )
    if len(stages) == 1:
        return allreduce
    boundary = sum(
        2 * beta * profile.layers[stage.layer_end].activation_bytes
        for stage in stages[:-1]
    )
    return allreduce + boundary


def comm_volume_hdp(profile: WorkloadProfile, groups, group_batch_sizes,
                    group_cuts=None) -> int:
    """Bytes moved per round by a hybrid-data-parallel layout.

    Each group holds the full model, pipelined internally across its members;
    groups exchange full gradients through a parameter server (2GP for G > 1).
    ``group_batch_sizes`` gives each group's share of the mini-batch.
    ``group_cuts`` optionally fixes each group's internal cut boundaries;
    by default the model is cut at equal-FLOPs quantiles into |g| parts.
    """
    groups = [list(g) for g in groups]
    if len(group_batch_sizes) != len(groups):
        raise ValueError("group_batch_sizes must align with groups")
    if group_cuts is None:
        group_cuts = [
            flops_proportional_cuts(profile.layer_flops(), [1] * len(g))
            for g in groups
        ]
    total_params = profile.param_bytes(0, profile.num_layers - 1)
    ps_volume = 2 * len(groups) * total_params if len(groups) > 1 else 0
    intra = 0
    for g, beta, cuts in zip(groups, group_batch_sizes, group_cuts):
        if len(cuts) != len(g) - 1:
            raise ValueError(f"group of {len(g)} devices needs {len(g) - 1} cuts")
        intra += sum(2 * beta * profile.layers[c - 1].activation_bytes for c in cuts)
    return ps_volume + intra


def flops_proportional_cuts(layer_flops, shares) -> list[int]:
    """Cut boundaries splitting layers into len(shares) parts proportional to shares.

    Returns the list of boundary indices ``c`` (a part ends at layer ``c-1``).
    Each cut lands on the layer boundary closest to its cumulative-FLOPs
    target, ties to the earlier boundary; parts are kept nonempty.
    """
    parts = len(shares)
    num_layers = len(layer_flops)
    if parts < 1:
        raise ValueError("need at least one part")
    if parts > num_layers:
        raise ValueError(f"cannot split {num_layers} layers into {parts} nonempty parts")
    if any(s < 0 for s in shares) or sum(shares) <= 0:
        raise ValueError("shares must be nonnegative with a positive sum")
    prefix = [0]
    for f in layer_flops:
        prefix.append(prefix[-1] + f)
    total_flops = prefix[-1]
    total_share = sum(shares)
    cuts: list[int] = []
    cum_share = 0.0
    prev = 0
    for part in range(parts - 1):
        cum_share += shares[part]
        target = total_flops * cum_share / total_share
        lo = prev + 1
        hi = num_layers - (parts - 1 - part)
        best = min(range(lo, hi + 1), key=lambda c: (abs(prefix[c] - target), c))
        cuts.append(best)
        prev = best
    return cuts
