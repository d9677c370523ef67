import math

import pytest

from sliceout.costmodel import co2_savings, table1_costs
from sliceout.errors import RateError


def test_table_examples():
    c = table1_costs("controlled", 128, 1024, 1024, 0.5)
    assert c.extra_copy_elements == 262_144
    assert c.multiply_ops == 33_554_432
    s = table1_costs("sliceout", 128, 1024, 1024, 0.5)
    assert s.extra_copy_elements == 0 and s.weight_manipulation_rw == 0
    assert s.activation_elements == 65_536
    std = table1_costs("standard", 128, 1024, 1024, 0.5)
    assert std.multiply_ops == 128 * 1024 * 1024 and std.activation_elements == 1024 * 128


@pytest.mark.parametrize("scheme", ["none", "standard", "controlled", "sliceout"])
def test_zero_rate_is_dense(scheme):
    c = table1_costs(scheme, 7, 11, 13, 0.0)
    assert c.multiply_ops == 7 * 11 * 13
    assert c.activation_elements == 13 * 7
    assert c.extra_copy_elements == 0


def test_uses_integer_widths():
    # 11 * 0.7 = 7.7 rounds to 8; 13 * 0.7 = 9.1 rounds to 9
    c = table1_costs("sliceout", 3, 11, 13, 0.3)
    assert c.multiply_ops == 3 * 8 * 9
    assert c.activation_elements == 9 * 3


def test_errors():
    with pytest.raises(RateError):
        table1_costs("sliceout", 1, 4, 4, 1.0)
    with pytest.raises(ValueError):
        table1_costs("blockout", 1, 4, 4, 0.5)
    with pytest.raises(ValueError):
        table1_costs("sliceout", 0, 4, 4, 0.5)


def test_co2_examples():
    assert co2_savings("fewer-machines", memory_gain=0.23, pool=4) == 0.25
    assert co2_savings("plain-speedup", speedup=0.41) == 0.41
    assert co2_savings("bigger-batch", speedup=0.0) == 0.0
    assert co2_savings("fewer-machines", memory_gain=0.0) == 0.0


def test_co2_pool_arithmetic():
    for pool in (1, 2, 4, 8, 16):
        for gain in (0.1, 0.23, 0.5, 0.9):
            expected = min(math.floor(pool * gain / (1 - gain) + 1e-9), pool - 1) / pool
            assert co2_savings("fewer-machines", memory_gain=gain, pool=pool) == expected


def test_co2_errors():
    with pytest.raises(ValueError):
        co2_savings("solar")
    with pytest.raises(RateError):
        co2_savings("plain-speedup", speedup=1.2)
    with pytest.raises(ValueError):
        co2_savings("fewer-machines", memory_gain=0.2, pool=0)
