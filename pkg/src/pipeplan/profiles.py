"""Measured workload profiles and the versioned JSON document that carries them.

A :class:`WorkloadProfile` bundles everything planning consumes:

* per-layer output-activation bytes, parameter bytes and FLOPs,
* per-device FP/BP time tables sampled on a shared batch-size grid,
* per-device memory budgets,
* the pairwise device-to-device bandwidth matrix (bits/s).

Profile document schema (``format_version`` 1)::

    {
      "format_version": 1,
      "model_name": str,
      "profiled_batch_sizes": [int, ...],          # ascending, contains 1
      "layers": [
        {"layer_id": int, "activation_bytes": int,
         "param_bytes": int, "flops": int}, ...    # layer_id contiguous 0..L-1
      ],
      "devices": [
        {"device_id": str, "memory_budget_bytes": int,
         "fp_time_ms": [[float, ...], ...],        # shape (L, len(grid))
         "bp_time_ms": [[float, ...], ...]}, ...
      ],
      "bandwidth_bps": [[float, ...], ...]         # N x N, symmetric; the
    }                                              # diagonal is ignored
                                                   # (intra-device is free)

Times are milliseconds as 64-bit floats, byte counts are nonnegative
integers, bandwidths are bits per second. Profiles document pure compute
time; whether data-loading overhead is included is up to the producer.

Profiles are immutable after loading; every query below is a pure function,
so one profile can be shared across concurrent planner workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateCapacity, OutOfRange, ParseError, ValidationError

PROFILE_FORMAT_VERSION = 1

FP = "fp"
BP = "bp"


@dataclass(frozen=True)
class LayerProfile:
    """Static per-layer measurements for one sample."""

    layer_id: int
    activation_bytes: int  # output activations; input gradients are the same size
    param_bytes: int
    flops: int = 0  # consumed only by failure-replay re-partitioning


@dataclass(frozen=True)
class DeviceProfile:
    """One device's memory budget and FP/BP time tables.

    ``fp_time_ms``/``bp_time_ms`` have shape ``(num_layers, len(grid))`` and
    are nondecreasing along the batch axis.
    """

    device_id: str
    memory_budget_bytes: int
    fp_time_ms: np.ndarray
    bp_time_ms: np.ndarray


@dataclass(frozen=True)
class BandwidthMatrix:
    """Symmetric device-to-device bandwidth in bits per second."""

    device_ids: tuple[str, ...]
    bits_per_second: np.ndarray

    def _index(self, device_id: str) -> int:
        try:
            return self.device_ids.index(device_id)
        except ValueError:
            raise KeyError(f"unknown device {device_id!r}") from None

    def between(self, a: str, b: str) -> float:
        """Bandwidth of the a<->b link; infinite for intra-device transfers."""
        if a == b:
            return math.inf
        return float(self.bits_per_second[self._index(a), self._index(b)])

    def min_within(self, group) -> float:
        """Slowest link among all device pairs inside one group."""
        ids = list(group)
        if len(ids) <= 1:
            return math.inf
        return min(self.between(a, b) for a in ids for b in ids if a != b)

    def min_between(self, group_a, group_b) -> float:
        """Slowest link between any device of group_a and any of group_b."""
        return min(self.between(a, b) for a in group_a for b in group_b)


@dataclass(frozen=True)
class WorkloadProfile:
    """Validated, immutable container for one model-on-cluster measurement."""

    model_name: str
    layers: tuple[LayerProfile, ...]
    devices: tuple[DeviceProfile, ...]
    bandwidth: BandwidthMatrix
    profiled_batch_sizes: tuple[int, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def device_ids(self) -> tuple[str, ...]:
        return tuple(d.device_id for d in self.devices)

    def device(self, device_id: str) -> DeviceProfile:
        for dev in self.devices:
            if dev.device_id == device_id:
                return dev
        raise KeyError(f"unknown device {device_id!r}")

    def activation_bytes(self, i: int, j: int) -> int:
        """Sum of per-sample activation bytes over layers i..j inclusive."""
        return sum(l.activation_bytes for l in self.layers[i:j + 1])

    def param_bytes(self, i: int, j: int) -> int:
        return sum(l.param_bytes for l in self.layers[i:j + 1])

    def flops(self, i: int, j: int) -> int:
        return sum(l.flops for l in self.layers[i:j + 1])

    def layer_flops(self) -> list[int]:
        return [l.flops for l in self.layers]


def _check_layer_range(profile: WorkloadProfile, layer_range) -> tuple[int, int]:
    i, j = layer_range
    if not (0 <= i <= j < profile.num_layers):
        raise ValueError(f"invalid layer range [{i}, {j}] for L={profile.num_layers}")
    return i, j


def exec_time(profile: WorkloadProfile, device_id: str, layer_range,
              phase: str, batch: int) -> float:
    """Milliseconds of FP or BP over ``layer_range`` at ``batch`` samples.

    Batch sizes between profiled grid points are piecewise-linearly
    interpolated; a batch of 0 costs nothing. Batches beyond the profiled
    maximum raise :class:`OutOfRange` rather than extrapolating.
    """
    i, j = _check_layer_range(profile, layer_range)
    if phase not in (FP, BP):
        raise ValueError(f"phase must be {FP!r} or {BP!r}, got {phase!r}")
    if batch < 0 or batch != int(batch):
        raise ValueError(f"batch must be a nonnegative integer, got {batch!r}")
    if batch == 0:
        return 0.0
    grid = profile.profiled_batch_sizes
    if batch > grid[-1]:
        raise OutOfRange(
            f"batch {batch} exceeds profiled maximum {grid[-1]} on device {device_id}"
        )
    dev = profile.device(device_id)
    table = dev.fp_time_ms if phase == FP else dev.bp_time_ms
    grid_arr = np.asarray(grid, dtype=float)
    return math.fsum(
        float(np.interp(batch, grid_arr, table[l])) for l in range(i, j + 1)
    )


def capacity(profile: WorkloadProfile, device_id: str, layer_range,
             micro_batch: int) -> float:
    """Computing capacity: inverse of total FP+BP time (1/ms) at ``micro_batch``."""
    total = (exec_time(profile, device_id, layer_range, FP, micro_batch)
             + exec_time(profile, device_id, layer_range, BP, micro_batch))
    if total == 0.0:
        raise DegenerateCapacity(
            f"device {device_id} has zero FP+BP time over layers "
            f"{layer_range} at batch {micro_batch}"
        )
    return 1.0 / total


# ---------------------------------------------------------------------------
# document load / save
# ---------------------------------------------------------------------------


def _require(doc: dict, key: str, kind) -> object:
    if key not in doc:
        raise ParseError(f"missing required field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ParseError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _nonneg_int(value, what: str, **where) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    if value < 0:
        raise ValidationError("nonnegative", f"{what} is negative ({value})", **where)
    return value


def iter_violations(doc: dict):
    """Yield every invariant violation in a parsed profile document.

    Structural problems (missing fields, wrong shapes) raise
    :class:`ParseError` immediately since later checks would be meaningless;
    value-level invariants are collected so ``validate-profile`` can report
    them all at once.
    """
    version = _require(doc, "format_version", int)
    if version != PROFILE_FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {version}")
    _require(doc, "model_name", str)
    grid = _require(doc, "profiled_batch_sizes", list)
    layers = _require(doc, "layers", list)
    devices = _require(doc, "devices", list)
    matrix = _require(doc, "bandwidth_bps", list)

    if not layers:
        yield ValidationError("model-size", "profile has no layers")
    if not devices:
        yield ValidationError("cluster-size", "profile has no devices")

    if not grid or any(isinstance(b, bool) or not isinstance(b, int) or b < 1 for b in grid):
        raise ParseError("profiled_batch_sizes must be a nonempty list of integers >= 1")
    if sorted(set(grid)) != grid:
        yield ValidationError("batch-grid", "batch-size grid must be strictly ascending")
    if 1 not in grid:
        yield ValidationError("batch-grid", "batch-size grid must include batch size 1")

    for pos, layer in enumerate(layers):
        if not isinstance(layer, dict):
            raise ParseError(f"layers[{pos}] is not an object")
        lid = _require(layer, "layer_id", int)
        if lid != pos:
            yield ValidationError(
                "layer-order", f"layer_id {lid} at position {pos}; ids must run 0..L-1",
                layer_id=lid)
        for field in ("activation_bytes", "param_bytes", "flops"):
            try:
                _nonneg_int(layer.get(field, 0), field, layer_id=lid)
            except ValidationError as err:
                yield err

    num_layers = len(layers)
    seen_ids: set[str] = set()
    for dev in devices:
        if not isinstance(dev, dict):
            raise ParseError("devices entries must be objects")
        did = _require(dev, "device_id", str)
        if did in seen_ids:
            yield ValidationError("device-ids", f"duplicate device_id {did!r}", device_id=did)
        seen_ids.add(did)
        try:
            _nonneg_int(dev.get("memory_budget_bytes"), "memory_budget_bytes", device_id=did)
        except ValidationError as err:
            yield err
        for field in ("fp_time_ms", "bp_time_ms"):
            table = _require(dev, field, list)
            if len(table) != num_layers:
                raise ParseError(
                    f"device {did}: {field} has {len(table)} rows, expected {num_layers}")
            for lid, row in enumerate(table):
                if not isinstance(row, list) or len(row) != len(grid):
                    raise ParseError(
                        f"device {did}: {field}[{lid}] must have {len(grid)} samples")
                values = []
                for v in row:
                    if isinstance(v, bool) or not isinstance(v, (int, float)):
                        raise ParseError(f"device {did}: {field}[{lid}] has non-numeric entry")
                    values.append(float(v))
                if any(not math.isfinite(v) or v < 0 for v in values):
                    yield ValidationError(
                        "time-domain", f"{field} sample is negative or non-finite",
                        device_id=did, layer_id=lid)
                elif any(b < a for a, b in zip(values, values[1:])):
                    yield ValidationError(
                        "monotonicity", f"{field} decreases with batch size",
                        device_id=did, layer_id=lid)

    n = len(devices)
    if len(matrix) != n or any(not isinstance(r, list) or len(r) != n for r in matrix):
        raise ParseError(f"bandwidth_bps must be a {n}x{n} matrix")
    for a in range(n):
        for b in range(n):
            v = matrix[a][b]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParseError("bandwidth_bps entries must be numbers")
            if a == b:
                continue
            if not math.isfinite(float(v)) or float(v) <= 0:
                yield ValidationError(
                    "bandwidth-positive",
                    f"bandwidth between {devices[a].get('device_id')} and "
                    f"{devices[b].get('device_id')} must be finite and positive")
            elif float(matrix[a][b]) != float(matrix[b][a]):
                yield ValidationError(
                    "bandwidth-symmetric",
                    f"bandwidth_bps[{a}][{b}] != bandwidth_bps[{b}][{a}]")


def _from_document(doc: dict) -> WorkloadProfile:
    for violation in iter_violations(doc):
        raise violation
    grid = tuple(doc["profiled_batch_sizes"])
    layers = tuple(
        LayerProfile(
            layer_id=layer["layer_id"],
            activation_bytes=layer["activation_bytes"],
            param_bytes=layer["param_bytes"],
            flops=layer.get("flops", 0),
        )
        for layer in doc["layers"]
    )
    devices = tuple(
        DeviceProfile(
            device_id=dev["device_id"],
            memory_budget_bytes=dev["memory_budget_bytes"],
            fp_time_ms=np.array(dev["fp_time_ms"], dtype=float),
            bp_time_ms=np.array(dev["bp_time_ms"], dtype=float),
        )
        for dev in doc["devices"]
    )
    bandwidth = BandwidthMatrix(
        device_ids=tuple(d.device_id for d in devices),
        bits_per_second=np.array(doc["bandwidth_bps"], dtype=float),
    )
    return WorkloadProfile(
        model_name=doc["model_name"],
        layers=layers,
        devices=devices,
        bandwidth=bandwidth,
        profiled_batch_sizes=grid,
    )


def load_profile(path) -> WorkloadProfile:
    """Load and fully validate a profile document from ``path``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return _from_document(doc)


def to_document(profile: WorkloadProfile) -> dict:
    """The canonical JSON-ready document for ``profile``."""
    return {
        "format_version": PROFILE_FORMAT_VERSION,
        "model_name": profile.model_name,
        "profiled_batch_sizes": list(profile.profiled_batch_sizes),
        "layers": [
            {
                "layer_id": l.layer_id,
                "activation_bytes": l.activation_bytes,
                "param_bytes": l.param_bytes,
                "flops": l.flops,
            }
            for l in profile.layers
        ],
        "devices": [
            {
                "device_id": d.device_id,
                "memory_budget_bytes": d.memory_budget_bytes,
                "fp_time_ms": [[float(v) for v in row] for row in d.fp_time_ms],
                "bp_time_ms": [[float(v) for v in row] for row in d.bp_time_ms],
            }
            for d in profile.devices
        ],
        "bandwidth_bps": [[float(v) for v in row]
                          for row in profile.bandwidth.bits_per_second],
    }


def save_profile(profile: WorkloadProfile, path) -> None:
    """Write the canonical form of ``profile``; inverse of :func:`load_profile`."""
    from .jsonio import canonical_dumps

    Path(path).write_text(canonical_dumps(to_document(profile)), encoding="utf-8")
