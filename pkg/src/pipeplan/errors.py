"""Exception types shared across the toolkit.

All library errors derive from :class:`PipePlanError` so callers (and the
CLI) can distinguish input/feasibility problems (exit code 1) from internal
invariant violations (exit code 2, currently only
:class:`EstimateExceedsSimulation`).
"""

from __future__ import annotations


class PipePlanError(Exception):
    """Base class for all pipeplan errors."""


class ParseError(PipePlanError):
    """A profile or plan document is malformed or has an unsupported version."""


class ValidationError(PipePlanError):
    """A document violates a declared invariant.

    Carries the invariant name plus the offending device/layer so tooling can
    point at the exact table cell.
    """

    def __init__(self, invariant: str, message: str, *, device_id: str | None = None,
                 layer_id: int | None = None):
        self.invariant = invariant
        self.device_id = device_id
        self.layer_id = layer_id
        where = []
        if device_id is not None:
            where.append(f"device={device_id}")
        if layer_id is not None:
            where.append(f"layer={layer_id}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"[{invariant}] {message}{suffix}")


class OutOfRange(PipePlanError):
    """A batch size beyond the profiled grid was requested; extrapolation is refused."""


class DegenerateCapacity(PipePlanError):
    """Total FP+BP time over a layer range is zero, so capacity is undefined."""


class InfeasibleAllocation(PipePlanError):
    """No sample allocation fits the device group's memory budgets."""


class NoFeasiblePlan(PipePlanError):
    """Every candidate pipeline configuration violates some memory budget."""


class EstimateExceedsSimulation(PipePlanError):
    """The analytic round-latency estimate exceeded the simulated latency.

    The estimate is meant to be a lower bound (it only omits bubbles inside
    the dominant step), so this signals a cost-model bug.
    """


class NoBackupTarget(PipePlanError):
    """A single-stage, single-device pipeline has nowhere to back up to."""


class NoSurvivingDevices(PipePlanError):
    """A failure left no devices to replay the pipeline on."""


class MultiDeviceFailure(PipePlanError):
    """Simultaneous multi-device failures are outside the replay protocol."""
