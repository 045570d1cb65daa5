from __future__ import annotations

import numpy as np
import pytest

from fedvi.model import ArchConfig, init_params
from fedvi.seeding import substream


def small_arch(**overrides) -> ArchConfig:
    base = dict(
        input_dim=5,
        embed_widths=(7, 6),
        local_dim=2,
        global_dim=4,
        num_classes=3,
        posterior_widths=(8, 8),
    )
    base.update(overrides)
    return ArchConfig(**base)


def max_rel_err(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8) -> float:
    """Largest relative error over coordinates whose magnitude exceeds floor."""
    a, b = approx.ravel(), exact.ravel()
    mask = np.abs(b) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / np.abs(b)[mask]))


@pytest.fixture
def rng():
    return substream(12345, 0)


@pytest.fixture
def tiny_params(rng):
    return init_params(small_arch(), rng)
