"""Splitting one micro-batch's samples across a heterogeneous device group.

Two phases:

1. memory-aware balancing: recursively hand each device its
   capacity-proportional share, capped by what still fits its memory budget,
   until the micro-batch is exhausted;
2. straggler offloading: profiled times are non-linear in batch size, so the
   proportional split can leave a straggler; move one block of samples at a
   time from the slowest device to the fastest device with room, stopping
   (and rolling back) as soon as a move stops helping.

The result feeds the per-step forward/backward times of the pipeline
timeline: a step is as slow as its slowest device.

All functions are pure and deterministic; ties break on ascending device id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cost_model import DEFAULT_OPTIMIZER, stage_memory
from .errors import InfeasibleAllocation
from .profiles import BP, FP, WorkloadProfile, capacity, exec_time


@dataclass
class Allocation:
    """Samples of one micro-batch assigned to each device of a group."""

    samples: dict[str, int]
    block_size: int

    @property
    def total(self) -> int:
        return sum(self.samples.values())


def _max_extra_samples(profile: WorkloadProfile, device_id: str, layer_range,
                       current: int, k_inflight: int, optimizer_kind: str) -> int | None:
    """How many more samples fit the device's budget; None if unbounded."""
    dev = profile.device(device_id)
    fixed = stage_memory(profile, layer_range, 0, k_inflight, optimizer_kind).total_bytes
    per_sample = k_inflight * profile.activation_bytes(*layer_range)
    headroom = dev.memory_budget_bytes - fixed - current * per_sample
    if headroom < 0:
        return -1  # cannot even hold the stage model at `current` samples
    if per_sample == 0:
        return None
    return headroom // per_sample


def _proportional_shares(beta: int, members, capacities) -> dict[str, int]:
    """Integer capacity-proportional shares of ``beta`` samples.

    Fractional shares are floored; the remainder goes one sample at a time to
    devices in descending capacity (ascending id on ties).
    """
    total_capacity = math.fsum(capacities[d] for d in members)
    shares = {d: int(capacities[d] / total_capacity * beta) for d in members}
    remainder = beta - sum(shares.values())
    for d in sorted(members, key=lambda d: (-capacities[d], d)):
        if remainder == 0:
            break
        shares[d] += 1
        remainder -= 1
    return shares


def memory_aware_balancing(profile: WorkloadProfile, group, layer_range, beta: int,
                           k_inflight: int, optimizer_kind: str = DEFAULT_OPTIMIZER,
                           block_size: int = 1) -> Allocation:
    """Phase 1: capacity-proportional split under per-device memory budgets.

    Raises :class:`InfeasibleAllocation` when samples remain but every device
    is out of memory (the planner treats that configuration as infinitely
    expensive), or when a group member cannot hold the stage model at all.
    """
    members = sorted(group)
    if not members:
        raise InfeasibleAllocation("empty device group")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    samples = {d: 0 for d in members}
    for d in members:
        if _max_extra_samples(profile, d, layer_range, 0, k_inflight, optimizer_kind) == -1:
            raise InfeasibleAllocation(
                f"device {d} cannot hold the stage model for layers {layer_range}")
    capacities = {d: capacity(profile, d, layer_range, beta) if beta else 1.0
                  for d in members}

    remaining = beta
    active = list(members)
    while remaining > 0:
        active = [
            d for d in active
            if _room(profile, d, layer_range, samples[d], k_inflight, optimizer_kind) >= 1
        ]
        if not active:
            raise InfeasibleAllocation(
                f"{remaining} of {beta} samples do not fit the group's memory budgets")
        shares = _proportional_shares(remaining, active, capacities)
        for d in active:
            room = _room(profile, d, layer_range, samples[d], k_inflight, optimizer_kind)
            take = min(shares[d], room)
            samples[d] += take
            remaining -= take
    return Allocation(samples=samples, block_size=block_size)


def _room(profile, device_id, layer_range, current, k_inflight, optimizer_kind) -> int:
    extra = _max_extra_samples(profile, device_id, layer_range, current,
                               k_inflight, optimizer_kind)
    return 10 ** 9 if extra is None else max(extra, 0)


def _device_latency(profile, device_id, layer_range, samples) -> float:
    return (exec_time(profile, device_id, layer_range, FP, samples)
            + exec_time(profile, device_id, layer_range, BP, samples))


def straggler_offloading(profile: WorkloadProfile, group, layer_range,
                         allocation: Allocation, block_size: int | None = None,
                         k_inflight: int = 1,
                         optimizer_kind: str = DEFAULT_OPTIMIZER) -> Allocation:
    """Phase 2: shave the straggler by re-homing blocks of samples.

    Each iteration moves one block from the slowest device to the fastest
    device with enough spare memory, keeping the move only if the group's
    worst latency strictly improves. At most total/block_size moves happen,
    and the returned allocation is never slower than the input.
    """
    block = allocation.block_size if block_size is None else block_size
    if block < 1:
        raise ValueError("block_size must be >= 1")
    samples = dict(allocation.samples)
    members = sorted(samples)
    if len(members) < 2:
        return Allocation(samples=samples, block_size=block)
    latency = {d: _device_latency(profile, d, layer_range, samples[d]) for d in members}

    max_moves = max(1, allocation.total // block)
    for _ in range(max_moves):
        straggler = min(members, key=lambda d: (-latency[d], d))
        old_worst = latency[straggler]
        move = min(block, samples[straggler])
        if move == 0:
            break
        targets = [
            d for d in members
            if d != straggler
            and _room(profile, d, layer_range, samples[d], k_inflight, optimizer_kind) >= move
        ]
        if not targets:
            break
        target = min(targets, key=lambda d: (latency[d], d))
        samples[straggler] -= move
        samples[target] += move
        new_straggler_lat = _device_latency(profile, straggler, layer_range, samples[straggler])
        new_target_lat = _device_latency(profile, target, layer_range, samples[target])
        if max(new_straggler_lat, new_target_lat,
               *(latency[d] for d in members if d not in (straggler, target))) < old_worst:
            latency[straggler] = new_straggler_lat
            latency[target] = new_target_lat
        else:
            samples[straggler] += move  # roll back the regressing move
            samples[target] -= move
            break
    return Allocation(samples=samples, block_size=block)


def allocate_microbatch(profile: WorkloadProfile, group, layer_range, micro_batch: int,
                        k_inflight: int, block_size: int = 1,
                        optimizer_kind: str = DEFAULT_OPTIMIZER):
    """Run both phases and derive the step's forward/backward times.

    Returns ``(allocation, fp_ms, bp_ms)`` where the step times are the
    slowest device's summed per-layer times at its assigned sample count.
    """
    phase1 = memory_aware_balancing(profile, group, layer_range, micro_batch,
                                    k_inflight, optimizer_kind, block_size)
    final = straggler_offloading(profile, group, layer_range, phase1,
                                 block_size, k_inflight, optimizer_kind)
    fp_ms = max(exec_time(profile, d, layer_range, FP, n)
                for d, n in final.samples.items())
    bp_ms = max(exec_time(profile, d, layer_range, BP, n)
                for d, n in final.samples.items())
    return final, fp_ms, bp_ms
