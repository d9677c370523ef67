"""SliceOut: dropout by contiguous zero-copy slices, with standard and
controlled dropout baselines, instrumentation and verification suites."""

from .costmodel import CostReport, co2_savings, table1_costs
from .errors import SliceOutError
from .slicing import SliceScheme, SliceSpec, build_keep_profile, keep_probability, sample_slice, slice_width
from .trainer import TrainConfig, bench_compare, train

__version__ = "0.1.0"

__all__ = [
    "CostReport", "SliceOutError", "SliceScheme", "SliceSpec", "TrainConfig", "bench_compare",
    "build_keep_profile", "co2_savings", "keep_probability", "sample_slice", "slice_width", "table1_costs", "train",
]
