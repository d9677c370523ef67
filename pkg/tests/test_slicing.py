import itertools
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sliceout import slicing
from sliceout.errors import BoundsError, IndexListError, RateError, WidthError
from sliceout.slicing import SliceScheme, SliceSpec
from sliceout.tensor import InstrumentationCounters, Tensor, use_counters


def enumerated_profile(m, w):
    """Coverage fraction of each unit over all eligible starts, as exact fractions."""
    starts = range(m - w + 1)
    return [Fraction(sum(s <= j < s + w for s in starts), len(starts)) for j in range(m)]


def test_slice_width_examples():
    assert slicing.slice_width(10, 0.4) == 6
    assert slicing.slice_width(10, 0.0) == 10
    assert slicing.slice_width(2048, 0.5) == 1024


def test_slice_width_rounds_half_away_and_floors_at_one():
    assert slicing.slice_width(5, 0.5) == 3
    assert slicing.slice_width(3, 0.5) == 2
    with pytest.warns(UserWarning):
        assert slicing.slice_width(10, 0.99) == 1


def test_rate_and_width_errors():
    for p in (-0.1, 1.0, float("nan")):
        with pytest.raises(RateError):
            slicing.slice_width(10, p)
    with pytest.raises(WidthError):
        slicing.slice_width(0, 0.5)
    with pytest.raises(WidthError):
        slicing.eligible_starts(5, 6)
    with pytest.raises(BoundsError):
        SliceSpec(10, 6, 5)


def test_eligible_starts():
    assert list(slicing.eligible_starts(10, 6)) == [0, 1, 2, 3, 4]
    assert list(slicing.eligible_starts(7, 7)) == [0]
    assert len(slicing.eligible_starts(7, 3)) == 5


def test_sample_slice_is_uniform():
    rng = np.random.default_rng(0)
    draws = 100_000
    counts = np.bincount([slicing.sample_slice(rng, 10, 6).s for _ in range(draws)], minlength=5)
    expected = draws / 5
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99.9th percentile of chi-square with 4 degrees of freedom
    assert chi2 < 18.47
    assert len(counts) == 5


def test_sample_slice_full_and_determinism():
    rng = np.random.default_rng(1)
    assert all(slicing.sample_slice(rng, 8, 8).s == 0 for _ in range(20))
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    seq1 = [slicing.sample_slice(r1, 30, 11).s for _ in range(50)]
    seq2 = [slicing.sample_slice(r2, 30, 11).s for _ in range(50)]
    assert seq1 == seq2


def test_keep_probability_examples():
    assert slicing.keep_probability(0, 10, 6) == pytest.approx(0.2)
    assert slicing.keep_probability(1, 10, 6) == pytest.approx(0.4)
    assert slicing.keep_probability(4, 10, 6) == 1.0
    assert slicing.keep_probability(9, 10, 6) == pytest.approx(0.2)
    assert all(slicing.keep_probability(j, 7, 7) == 1.0 for j in range(7))
    assert sum(slicing.keep_probability(j, 10, 6) for j in range(10)) == pytest.approx(6)
    with pytest.raises(BoundsError):
        slicing.keep_probability(10, 10, 6)


def test_keep_profile_examples():
    prof = slicing.build_keep_profile(10, 6)
    assert np.allclose(prof.probs, [0.2, 0.4, 0.6, 0.8, 1, 1, 0.8, 0.6, 0.4, 0.2], rtol=0, atol=1e-15)
    assert np.allclose(prof.reciprocal, [5, 2.5, 5 / 3, 1.25, 1, 1, 1.25, 5 / 3, 2.5, 5], rtol=0, atol=1e-15)
    assert np.allclose(slicing.build_keep_profile(4, 2).probs, [1 / 3, 2 / 3, 2 / 3, 1 / 3])
    assert np.array_equal(slicing.build_keep_profile(5, 5).probs, np.ones(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40).flatmap(lambda m: st.tuples(st.just(m), st.integers(1, m))))
def test_keep_profile_matches_enumeration(mw):
    m, w = mw
    exact = enumerated_profile(m, w)
    prof = slicing.build_keep_profile(m, w)
    assert np.allclose(prof.probs, [float(f) for f in exact], rtol=0, atol=1e-15)
    assert sum(exact) == w
    assert np.array_equal(prof.probs, prof.probs[::-1])
    if 2 * w >= m:
        assert all(prof.probs[j] == 1.0 for j in range(m - w, w))


def test_flow_norm_factor():
    assert slicing.flow_norm_factor(10, 6) == pytest.approx(10 / 6)
    assert slicing.flow_norm_factor(9, 9) == 1.0
    assert slicing.flow_norm_factor(2048, 1024) == 2.0


def test_normalization_factors():
    spec = SliceSpec(10, 6, 2)
    assert np.allclose(slicing.normalization_factors(spec, "probabilistic"), [5 / 3, 1.25, 1, 1, 1.25, 5 / 3])
    assert np.allclose(slicing.normalization_factors(spec, "flow"), 10 / 6)
    assert slicing.normalization_factors(SliceSpec(6, 6, 0), "flow") is None
    with pytest.raises(ValueError):
        slicing.normalization_factors(spec, "other")


def test_scheme_validation():
    assert not SliceScheme("sliceout", 0.0).active
    assert SliceScheme("sliceout", 0.3).is_sliceout
    with pytest.raises(ValueError):
        SliceScheme("slicout", 0.3)
    with pytest.raises(RateError):
        SliceScheme("standard", 1.0)


def test_standard_dropout_examples():
    x = Tensor(np.array([2.0, 4.0]))
    assert slicing.apply_standard_dropout(x, 0.0) is x
    out = slicing.apply_standard_dropout(x, 0.5, mask=np.array([1, 0], dtype=bool))
    assert out.data.tolist() == [4.0, 0.0]


def test_standard_dropout_preserves_mean():
    x = Tensor(np.array([1.0, -2.0, 3.0, 0.5]))
    rng = np.random.default_rng(0)
    big = Tensor(np.tile(x.data, (100_000, 1)))
    out = slicing.apply_standard_dropout(big, 0.3, rng).data.mean(axis=0)
    assert np.allclose(out, x.data, rtol=0.01)


def test_controlled_gather():
    W = Tensor(np.arange(12.0).reshape(3, 4))
    c = InstrumentationCounters()
    with use_counters(c):
        full = slicing.controlled_gather(W, np.arange(3), np.arange(4))
    assert np.array_equal(full.data, W.data)
    assert not np.shares_memory(full.data, W.data)
    assert c.copy_bytes_allocated == 12 * 8
    rows, cols = np.array([0, 2]), np.array([1, 3])
    sub = slicing.controlled_gather(W, rows, cols)
    assert np.array_equal(sub.data, W.data[np.ix_(rows, cols)])


def test_controlled_gather_table_size():
    W = Tensor(np.zeros((1024, 1024), dtype=np.float32))
    rng = np.random.default_rng(0)
    rows = slicing.sample_kept_units(rng, 1024, 512)
    cols = slicing.sample_kept_units(rng, 1024, 512)
    c = InstrumentationCounters()
    with use_counters(c):
        slicing.controlled_gather(W, rows, cols)
    assert c.copy_bytes_allocated // 4 == 262_144


def test_controlled_gather_index_errors():
    W = Tensor(np.zeros((3, 4)))
    for rows in ([2, 0], [0, 0], [0, 3]):
        with pytest.raises(IndexListError):
            slicing.controlled_gather(W, np.array(rows), np.arange(4))


def test_mask_equivalent():
    assert slicing.sliceout_mask_equivalent(10, SliceSpec(10, 6, 2)).tolist() == [0, 0, 1, 1, 1, 1, 1, 1, 0, 0]
    assert slicing.sliceout_mask_equivalent(7, SliceSpec(7, 7, 0)).tolist() == [1] * 7
    masks = [slicing.sliceout_mask_equivalent(12, SliceSpec(12, 5, s)) for s in slicing.eligible_starts(12, 5)]
    assert np.allclose(np.mean(masks, axis=0), slicing.build_keep_profile(12, 5).probs)


def test_no_warning_for_moderate_rates():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for m, p in itertools.product((8, 64, 2048), (0.1, 0.5, 0.8)):
            slicing.slice_width(m, p)
