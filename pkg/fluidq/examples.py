"""
Built-in fluid queue instances used by the CLI and the test suite.
"""

import numpy as np

from .exceptions import ModelError
from .model import FluidQueueModel

EXAMPLE_NAMES = ("weakly-connected", "cascading")
KAPPA_SWEEP = tuple(10.0 ** e for e in range(0, 9))


def weakly_connected_model() -> FluidQueueModel:
    """
    Six phases in two groups joined by a single rate of 1e-8

    Up phases 1-3 with unit rates, down phases 4-6 with rate -1.001.
    """
    t = np.zeros((6, 6))
    t[0, 5] = 4.0
    t[1, [2, 3, 4]] = 5.0
    t[1, 5] = 1e-8
    t[2, [1, 3, 4]] = 5.0
    t[3, [1, 2, 4]] = 5.0
    t[4, [1, 2, 3]] = 5.0
    t[5, 0] = 4.0
    t[5, 1] = 1.0
    c = [1.0, 1.0, 1.0, -1.001, -1.001, -1.001]
    return FluidQueueModel.from_arrays(3, 3, t, c)


def cascading_model(kappa: float = 1.0) -> FluidQueueModel:
    """
    Eight-phase cascade with a base phase 8 and chains of rate 0.01

    kappa is the fluid rate of phase 1; the remaining up phases fill at rate
    1 and the down phases drain at rate 1.
    """
    if not (np.isfinite(kappa) and kappa > 0):
        raise ModelError(f"kappa must be positive and finite, got {kappa}")
    t = np.zeros((8, 8))
    t[:7, 7] = 1.0
    for src, dst in ((2, 5), (3, 6), (4, 7), (5, 1), (6, 2), (7, 3), (8, 4)):
        t[src - 1, dst - 1] = 0.01
    c = [kappa, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]
    return FluidQueueModel.from_arrays(4, 4, t, c)


def build_example(name: str, kappa: float = 1.0) -> FluidQueueModel:
    if name == "weakly-connected":
        return weakly_connected_model()
    if name == "cascading":
        return cascading_model(kappa)
    raise ModelError(f"unknown example {name!r}, expected one of {', '.join(EXAMPLE_NAMES)}")
