"""Closed-form memory and operation counts per dropout scheme for one dense
layer, and the CO2 savings estimator.

Counts are exact element counts. The ``(1 - p)^2`` factors are evaluated from
the integer slice widths (``w_in * w_out / (n * m)``) so they agree exactly with
what the instrumented layers record.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import RateError
from .slicing import SCHEME_KINDS, _check_rate, slice_width


@dataclass(frozen=True)
class CostReport:
    scheme: str
    b: int
    n: int
    m: int
    p: float
    weight_manipulation_rw: int
    extra_copy_elements: int
    multiply_ops: int
    activation_elements: int

    def as_dict(self):
        return asdict(self)


def table1_costs(scheme: str, b: int, n: int, m: int, p: float) -> CostReport:
    """Costs of a ``b x n`` by ``n -> m`` weight multiply with rate ``p`` on both sides.

    SliceOut's O(1) view bookkeeping is reported as 0 element read/writes.
    """
    if scheme not in SCHEME_KINDS:
        raise ValueError(f"unknown scheme {scheme!r}")
    _check_rate(p)
    if min(b, n, m) < 1:
        raise ValueError("b, n and m must be positive")
    if scheme in ("none", "standard") or p == 0:
        return CostReport(scheme, b, n, m, p, 0, 0, b * n * m, m * b)
    w_in, w_out = slice_width(n, p), slice_width(m, p)
    kept = w_in * w_out
    if scheme == "controlled":
        return CostReport(scheme, b, n, m, p, kept, kept, kept * b, w_out * b)
    return CostReport(scheme, b, n, m, p, 0, 0, kept * b, w_out * b)


CO2_MODES = ("fewer-machines", "bigger-batch", "plain-speedup")


def _check_fraction(name, x):
    if not 0.0 <= x < 1.0 or math.isnan(x):
        raise RateError(f"{name} must lie in [0, 1), got {x}")


def co2_savings(mode: str, speedup: float = 0.0, memory_gain: float = 0.0, pool: int = 4) -> float:
    """Fractional emission savings for one of three ways of cashing in the gains.

    ``fewer-machines``: each machine now needs ``1 - memory_gain`` of its former
    memory, i.e. it has ``memory_gain / (1 - memory_gain)`` of a SliceOut
    workload spare; pooling that headroom over ``pool`` machines and flooring to
    whole machines gives the number that can be switched off (at least one must
    keep running). ``bigger-batch`` and ``plain-speedup`` save the measured
    speedup fraction.
    """
    if mode not in CO2_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {CO2_MODES}")
    _check_fraction("speedup", speedup)
    _check_fraction("memory_gain", memory_gain)
    if mode != "fewer-machines":
        return float(speedup)
    if pool < 1:
        raise ValueError("machine pool must be positive")
    spare = math.floor(pool * memory_gain / (1.0 - memory_gain) + 1e-9)
    return min(spare, pool - 1) / pool
