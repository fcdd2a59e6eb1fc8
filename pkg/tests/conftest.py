from pathlib import Path

import numpy as np
import pytest

from pipeplan.profiles import (
    BandwidthMatrix,
    DeviceProfile,
    LayerProfile,
    WorkloadProfile,
    load_profile,
)

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_DIR = Path(__file__).parent / "golden"

DEFAULT_GRID = (1, 2, 4, 8)



def make_profile(layer_specs, device_specs, bandwidth_bps=1e8, grid=DEFAULT_GRID,
                 model_name="test"):
    """Small-profile builder for hand fixtures.

    ``layer_specs``: list of (activation_bytes, param_bytes, flops).
    ``device_specs``: list of (device_id, budget_bytes, fp_base_per_layer,
    curve) where ``fp_base_per_layer`` is one scalar or a per-layer list and
    ``curve`` scales it across the batch grid (defaults to linear in the
    batch size); bp = 2*fp.
    ``bandwidth_bps``: scalar for a uniform full mesh, or a full matrix.
    """
    L = len(layer_specs)
    layers = tuple(
        LayerProfile(i, int(a), int(w), int(f))
        for i, (a, w, f) in enumerate(layer_specs)
    )
    devices = []
    for spec in device_specs:
        device_id, budget, fp_base = spec[0], spec[1], spec[2]
        curve = spec[3] if len(spec) > 3 else tuple(float(b) for b in grid)
        if np.isscalar(fp_base):
            fp_base = [fp_base] * L
        fp = np.array([[fp_base[l] * c for c in curve] for l in range(L)])
        devices.append(DeviceProfile(device_id, int(budget), fp, 2.0 * fp))
    ids = tuple(d.device_id for d in devices)
    n = len(ids)
    if np.isscalar(bandwidth_bps):
        matrix = np.full((n, n), float(bandwidth_bps))
        np.fill_diagonal(matrix, 0.0)
    else:
        matrix = np.array(bandwidth_bps, dtype=float)
    return WorkloadProfile(model_name, layers, tuple(devices),
                           BandwidthMatrix(ids, matrix), tuple(grid))


@pytest.fixture(scope="session")
def cnn_profile():
    return load_profile(DATA_DIR / "cnn_4dev.json")


@pytest.fixture(scope="session")
def balanced_profile():
    return load_profile(DATA_DIR / "tx2_3dev.json")
