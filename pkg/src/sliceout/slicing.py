"""Dropout schemes: slice sampling and normalisation for SliceOut, plus the
standard (Bernoulli) and controlled (gather) baselines."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, IndexListError, RateError, WidthError
from .tensor import Tensor, _result, counters, mul_const

SCHEME_KINDS = ("none", "standard", "controlled", "sliceout")
NORMALIZATIONS = ("flow", "probabilistic")


def _check_rate(p):
    if not (0.0 <= p < 1.0) or math.isnan(p):
        raise RateError(f"dropout rate must be in [0, 1), got {p}")


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def slice_width(m: int, p: float) -> int:
    """Number of units kept out of ``m`` at rate ``p`` (at least one)."""
    _check_rate(p)
    if m < 1:
        raise WidthError(f"layer width must be positive, got {m}")
    w = max(1, round_half_away(m * (1.0 - p)))
    if p >= 0.9 and w < 4:
        warnings.warn(f"rate {p} leaves only {w} of {m} units per slice", stacklevel=2)
    return w


def eligible_starts(m: int, w: int) -> range:
    """Start indices ``s`` with ``s + w <= m``."""
    if not 1 <= w <= m:
        raise WidthError(f"slice width {w} invalid for layer width {m}")
    return range(0, m - w + 1)


@dataclass(frozen=True)
class SliceSpec:
    m: int
    w: int
    s: int

    def __post_init__(self):
        if not 1 <= self.w <= self.m:
            raise WidthError(f"slice width {self.w} invalid for layer width {self.m}")
        if self.s < 0 or self.s + self.w > self.m:
            raise BoundsError(f"slice [{self.s}, {self.s + self.w}) outside layer of width {self.m}")

    @property
    def stop(self):
        return self.s + self.w

    @property
    def as_slice(self):
        return slice(self.s, self.s + self.w)

    @classmethod
    def full(cls, m):
        return cls(m, m, 0)


def sample_slice(rng: np.random.Generator, m: int, w: int) -> SliceSpec:
    """Draw a start uniformly from the eligible positions."""
    starts = eligible_starts(m, w)
    if len(starts) == 1:
        return SliceSpec(m, w, 0)
    return SliceSpec(m, w, int(rng.integers(0, len(starts))))


def keep_probability(j: int, m: int, w: int) -> float:
    """Probability that unit ``j`` lies inside a uniformly sampled slice."""
    if not 0 <= j < m:
        raise BoundsError(f"unit index {j} outside [0, {m})")
    n_starts = len(eligible_starts(m, w))
    covered = min(j, m - w) - max(0, j - w + 1) + 1
    return covered / n_starts


@dataclass(frozen=True)
class KeepProfile:
    m: int
    w: int
    probs: np.ndarray = field(repr=False)
    reciprocal: np.ndarray = field(repr=False)

    @property
    def uniform(self):
        return self.w == self.m


def build_keep_profile(m: int, w: int) -> KeepProfile:
    probs = np.array([keep_probability(j, m, w) for j in range(m)])
    # counts are integers over a common denominator, so these hold exactly
    n_starts = m - w + 1
    counts = np.rint(probs * n_starts).astype(np.int64)
    assert counts.sum() == w * n_starts
    assert np.array_equal(counts, counts[::-1])
    if 2 * w >= m:
        assert np.all(counts[m - w:w] == n_starts)
    return KeepProfile(m, w, probs, n_starts / counts)


def flow_norm_factor(m: int, w: int) -> float:
    if not 1 <= w <= m:
        raise WidthError(f"slice width {w} invalid for layer width {m}")
    return m / w


def normalization_factors(spec: SliceSpec, normalization: str) -> np.ndarray | None:
    """Per-unit multipliers for the kept range of ``spec``; None when identity."""
    if spec.w == spec.m:
        return None
    if normalization == "flow":
        return np.full(spec.w, flow_norm_factor(spec.m, spec.w))
    if normalization == "probabilistic":
        return build_keep_profile(spec.m, spec.w).reciprocal[spec.as_slice]
    raise ValueError(f"unknown normalization {normalization!r}")


@dataclass(frozen=True)
class SliceScheme:
    kind: str = "none"
    rate: float = 0.0
    normalization: str = "probabilistic"
    delayed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEME_KINDS}")
        _check_rate(self.rate)
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def active(self):
        """False when the scheme is a no-op (kind none or rate 0)."""
        return self.kind != "none" and self.rate > 0

    @property
    def is_sliceout(self):
        return self.kind == "sliceout"


def apply_standard_dropout(x: Tensor, p: float, rng=None, mask=None) -> Tensor:
    """Inverted dropout: Bernoulli(1-p) keep mask, survivors scaled by 1/(1-p)."""
    _check_rate(p)
    if p == 0:
        return x
    if mask is None:
        mask = rng.random(x.shape) >= p
    mask = np.asarray(mask, dtype=x.dtype)
    return mul_const(x, mask / x.dtype.type(1.0 - p))


def _check_index_list(idx, n, name):
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise IndexListError(f"{name} must be a non-empty 1-d index list")
    if idx[0] < 0 or idx[-1] >= n:
        raise IndexListError(f"{name} out of range [0, {n})")
    if np.any(np.diff(idx) <= 0):
        raise IndexListError(f"{name} must be strictly increasing (sorted, no duplicates)")
    return idx


def controlled_gather(W: Tensor, keep_rows, keep_cols) -> Tensor:
    """Copy the selected rows/columns of ``W`` into newly allocated memory.

    The copy is differentiable: its gradient is scattered back into ``W.grad``.
    """
    if W.ndim != 2:
        raise IndexListError("controlled_gather expects a 2-d weight")
    rows = _check_index_list(keep_rows, W.shape[0], "keep_rows")
    cols = _check_index_list(keep_cols, W.shape[1], "keep_cols")
    grid = np.ix_(rows, cols)
    out = W.data[grid]
    c = counters()
    c.read(out.size)
    c.write(out.size)
    c.copy(out.nbytes)

    def backward(g):
        W._accumulate(g, grid)

    # the copy is weight storage, not an activation
    return _result(out, (W,), backward, "gather", is_view=True)


def sample_kept_units(rng: np.random.Generator, m: int, w: int) -> np.ndarray:
    """Sorted random subset of ``w`` of ``m`` units (controlled dropout)."""
    if w == m:
        return np.arange(m)
    return np.sort(rng.choice(m, size=w, replace=False))


def sliceout_mask_equivalent(m: int, spec: SliceSpec) -> np.ndarray:
    if spec.m != m:
        raise WidthError(f"spec is for width {spec.m}, not {m}")
    mask = np.zeros(m, dtype=np.int8)
    mask[spec.as_slice] = 1
    return mask
