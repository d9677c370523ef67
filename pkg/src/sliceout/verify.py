"""Exhaustive-enumeration and finite-difference checks of SliceOut's moment
preservation, gradients and operation counts.

Each check runs the library's forward path for every eligible slice and
compares against an independent plain-numpy computation of the full network.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import slicing
from .costmodel import table1_costs
from .errors import SizeError
from .nn import (
    DenseSliceLayer,
    ResidualBlock,
    ResidualBlockConfig,
    TransformerBlock,
    architecture_count,
    channel_sliceout_conv,
    dense_controlled_forward,
    dense_sliceout_forward,
)
from .slicing import SliceScheme, SliceSpec
from .tensor import InstrumentationCounters, Tensor, cross_entropy, grad_check, no_grad, tsum, use_counters

MAX_WIDTH = 64
MAX_ENUMERATION = 250_000


@dataclass
class MomentCheckResult:
    first_moment_deviation: float = float("nan")
    second_moment_deviation: float = float("nan")
    edge_second_moment_deviation: float = float("nan")
    flow_conservation_error: float = float("nan")
    slice_count: int = 0
    band: tuple = ()
    passed: bool = False


@dataclass
class MomentConfig:
    """A stack of affine layers ``widths[i] -> widths[i+1]``; the output of
    layer ``i`` is sliced at ``rates[i]`` (0 leaves it whole)."""

    widths: tuple
    rates: tuple
    seed: int = 0

    def __post_init__(self):
        if len(self.rates) != len(self.widths) - 1:
            raise ValueError("need one rate per layer")
        if max(self.widths) > MAX_WIDTH:
            raise SizeError(f"widths above {MAX_WIDTH} are too large to enumerate")

    def slice_widths(self):
        return [slicing.slice_width(m, p) if p > 0 else m for m, p in zip(self.widths[1:], self.rates)]


def _random_stack(cfg: MomentConfig):
    rng = np.random.default_rng(cfg.seed)
    Ws = [rng.standard_normal((b, a)) for a, b in zip(cfg.widths[:-1], cfg.widths[1:])]
    bs = [rng.standard_normal(b) for b in cfg.widths[1:]]
    x = rng.standard_normal(cfg.widths[0])
    return Ws, bs, x


def _layers(Ws, bs, normalization):
    layers = []
    for W, b in zip(Ws, bs):
        layer = DenseSliceLayer(W.shape[1], W.shape[0], scheme=SliceScheme("sliceout", 0.5, normalization))
        layer.W.data[...] = W
        layer.b.data[...] = b
        layers.append(layer)
    return layers


def _enumerate_outputs(layers, x, out_widths, full_widths):
    """Yield the zero-padded, normalised final output for every slice combination."""
    choices = [range(m - w + 1) for m, w in zip(full_widths, out_widths)]
    total = math.prod(len(c) for c in choices)
    if total > MAX_ENUMERATION:
        raise SizeError(f"{total} slice combinations exceed the enumeration limit")
    with no_grad():
        for starts in itertools.product(*choices):
            specs = [SliceSpec(m, w, s) if w < m else None for m, w, s in zip(full_widths, out_widths, starts)]
            h = Tensor(x[None, :])
            prev = None
            for layer, spec in zip(layers, specs):
                h = dense_sliceout_forward(h, layer, prev, spec)
                prev = spec
            out = np.zeros(full_widths[-1])
            last = specs[-1]
            out[last.as_slice if last is not None else slice(None)] = h.data[0]
            yield out


def _full_forward(Ws, bs, x):
    y = x
    for W, b in zip(Ws, bs):
        y = W @ y + b
    return y


def check_first_moment(cfg: MomentConfig, x=None, normalization="probabilistic", tol=1e-9) -> MomentCheckResult:
    """Average of the sliced network's output over all slices vs the full output."""
    Ws, bs, x0 = _random_stack(cfg)
    x = x0 if x is None else np.asarray(x, dtype=np.float64)
    layers = _layers(Ws, bs, normalization)
    full_widths = list(cfg.widths[1:])
    out_widths = cfg.slice_widths()
    total = np.zeros(full_widths[-1])
    count = 0
    for out in _enumerate_outputs(layers, x, out_widths, full_widths):
        total += out
        count += 1
    dev = float(np.max(np.abs(total / count - _full_forward(Ws, bs, x))))
    conservation = 0.0
    for m, w in zip(full_widths, out_widths):
        probs = slicing.build_keep_profile(m, w).probs
        conservation = max(conservation, abs(float(np.sum(probs * slicing.flow_norm_factor(m, w))) - m))
    if normalization == "probabilistic":
        passed = bool(dev < tol)
    else:
        # flow normalisation is only exact in aggregate: sum_j P(j) * m / w == m
        passed = bool(conservation < 1e-9)
    return MomentCheckResult(first_moment_deviation=dev, flow_conservation_error=conservation,
                             slice_count=count, passed=passed)


def middle_band(m, w):
    """Units kept by every eligible slice: ``[m - w, w - 1]`` (possibly empty)."""
    return tuple(range(m - w, w))


def check_second_moment(m, w, n=None, seed=0, input_width=None, tol=0.05) -> MomentCheckResult:
    """Enumerated ``E[S(y_j1) S(y_j2)]`` vs ``y_j1 y_j2`` for ``j1`` in the middle band.

    The layer ``n -> m`` has its output sliced to width ``w`` with probabilistic
    normalisation. ``input_width`` optionally slices the input too; that
    variant is reported, since input-slice correlations are not covered by the
    band argument.
    """
    n = n or m
    if max(m, n) > MAX_WIDTH:
        raise SizeError(f"widths above {MAX_WIDTH} are too large to enumerate")
    if 2 * w < m:
        raise SizeError(f"second-moment check needs rate <= 0.5 (w={w}, m={m})")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    x = rng.standard_normal(n)
    y = W @ x + b
    layer = _layers([W], [b], "probabilistic")[0]
    in_choices = [None] if input_width in (None, n) else [SliceSpec(n, input_width, s) for s in range(n - input_width + 1)]
    in_recip = None if input_width in (None, n) else slicing.build_keep_profile(n, input_width).reciprocal
    acc = np.zeros((m, m))
    count = 0
    with no_grad():
        for in_spec in in_choices:
            xin = x if in_spec is None else x[in_spec.as_slice] * in_recip[in_spec.as_slice]
            for s in range(m - w + 1):
                spec = SliceSpec(m, w, s)
                h = dense_sliceout_forward(Tensor(xin[None, :]), layer, in_spec, spec)
                out = np.zeros(m)
                out[spec.as_slice] = h.data[0]
                acc += np.outer(out, out)
                count += 1
    second = acc / count
    target = np.outer(y, y)
    rel = np.abs(second - target) / (np.abs(target) + 1e-12)
    band = middle_band(m, w)
    edges = [j for j in range(m) if j not in band]
    band_dev = float(rel[list(band), :].max()) if band else 0.0
    edge_dev = float(rel[np.ix_(edges, edges)].max()) if edges else 0.0
    return MomentCheckResult(second_moment_deviation=band_dev, edge_second_moment_deviation=edge_dev,
                             slice_count=count, band=band, passed=bool(band_dev < tol))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _dense_case(spec_in, spec_out, seed=0):
    rng = np.random.default_rng(seed)
    layer = DenseSliceLayer(4, 4, rng, scheme=SliceScheme("sliceout", 0.5, "probabilistic"))
    x = Tensor(rng.standard_normal((3, 4 if spec_in is None else spec_in.w)))
    labels = rng.integers(0, 2 if spec_out is not None else 4, size=3)

    def f(inputs):
        return cross_entropy(dense_sliceout_forward(inputs[0], layer, spec_in, spec_out), labels)

    return f, [x, layer.W, layer.b]


def _block_case(spec, seed=0):
    rng = np.random.default_rng(seed)
    cfg = ResidualBlockConfig(2, 4, SliceScheme("sliceout", 0.5, "probabilistic"), delayed_normalization=True)
    block = ResidualBlock(cfg, rng)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    target = rng.standard_normal((2, 2, 4, 4))

    def f(inputs):
        if spec is None:
            with_scheme = block.config.scheme
            block.config.scheme = SliceScheme()
            try:
                out = block(inputs[0], training=True)
            finally:
                block.config.scheme = with_scheme
        else:
            out = channel_sliceout_conv(inputs[0], block, spec)
        return tsum(out * Tensor(target))

    return f, [x, block.conv1.W, block.bn_mid.gamma, block.bn_mid.beta, block.conv2.W]


def _attention_case(sliced, seed=0):
    rng = np.random.default_rng(seed)
    block = TransformerBlock(4, 1, 4, SliceScheme("sliceout", 0.5, "probabilistic"), rng)
    if sliced:
        block.set_specs(SliceSpec(4, 2, 1), SliceSpec(4, 2, 2), SliceSpec(4, 2, 0))
    else:
        block.scheme = SliceScheme()
        block.set_specs(None, None, None)
    x = Tensor(rng.standard_normal((1, 2, 4)))
    target = rng.standard_normal((1, 2, 4))

    def f(inputs):
        return tsum(block(inputs[0], training=True) * Tensor(target))

    return f, [x, block.Wq, block.Wk, block.Wv, block.Wo, block.ff1.W, block.ff2.W]


def check_gradients(epsilon=1e-6):
    """Max relative finite-difference error per case (all 64-bit)."""
    results = {}
    f, inputs = _dense_case(SliceSpec(4, 2, 1), SliceSpec(4, 2, 2))
    results["dense_sliced"] = grad_check(f, inputs, epsilon)
    f, inputs = _dense_case(None, None)
    results["dense_unsliced"] = grad_check(f, inputs, epsilon)
    f, inputs = _block_case(SliceSpec(4, 2, 1))
    results["resblock_channel_sliced"] = grad_check(f, inputs, epsilon)
    f, inputs = _block_case(None)
    results["resblock_unsliced"] = grad_check(f, inputs, epsilon)
    f, inputs = _attention_case(True)
    results["attention_sliced"] = grad_check(f, inputs, epsilon)
    f, inputs = _attention_case(False)
    results["attention_unsliced"] = grad_check(f, inputs, epsilon)
    return results


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------


@dataclass
class CountCheck:
    name: str
    expected: int
    observed: int

    @property
    def passed(self):
        return self.expected == self.observed


def instrumented_dense_step(scheme, b, n, m, p, seed=0, dtype=np.float32):
    """One forward/backward pass of a single ``n -> m`` layer, both sides at rate ``p``.

    Returns ``(counters, output_elements)``.
    """
    rng = np.random.default_rng(seed)
    layer = DenseSliceLayer(n, m, rng, dtype, SliceScheme(scheme, p))
    w_in, w_out = slicing.slice_width(n, p), slicing.slice_width(m, p)
    c = InstrumentationCounters()
    with use_counters(c):
        if scheme == "sliceout":
            in_spec, out_spec = slicing.sample_slice(rng, n, w_in), slicing.sample_slice(rng, m, w_out)
            x = Tensor(rng.standard_normal((b, w_in)).astype(dtype))
            y = dense_sliceout_forward(x, layer, in_spec, out_spec)
        elif scheme == "controlled":
            cols = slicing.sample_kept_units(rng, n, w_in)
            rows = slicing.sample_kept_units(rng, m, w_out)
            x = Tensor(rng.standard_normal((b, w_in)).astype(dtype))
            y = dense_controlled_forward(x, layer, rows, cols)
        else:
            x = Tensor(rng.standard_normal((b, n)).astype(dtype))
            y = dense_sliceout_forward(x, layer, None, None)
        out_elements = y.size
        tsum(y).backward()
    return c, out_elements


def enumerate_masks(in_side=None, out_side=None):
    """Number of distinct rank-1 weight masks ``r (x) c`` over all slice pairs."""
    n, w1 = in_side if in_side is not None else (1, 1)
    m, w2 = out_side if out_side is not None else (1, 1)
    masks = set()
    for s1 in range(n - w1 + 1):
        c = np.zeros(n, dtype=np.uint8)
        c[s1:s1 + w1] = 1
        for s2 in range(m - w2 + 1):
            r = np.zeros(m, dtype=np.uint8)
            r[s2:s2 + w2] = 1
            masks.add(np.outer(r, c).tobytes())
    return len(masks)


def check_counts(dense_cases=((128, 1024, 1024, 0.5), (32, 48, 40, 0.3)), arch_cases=None):
    """Instrumented counts vs the cost model, and mask enumeration vs
    :func:`architecture_count`."""
    checks = []
    for b, n, m, p in dense_cases:
        for scheme in ("standard", "controlled", "sliceout"):
            c, out_el = instrumented_dense_step(scheme, b, n, m, p)
            cost = table1_costs(scheme, b, n, m, p)
            tag = f"{scheme} b={b} n={n} m={m} p={p}"
            checks.append(CountCheck(f"multiply_ops {tag}", cost.multiply_ops, c.multiply_ops))
            checks.append(CountCheck(f"activation_elements {tag}", cost.activation_elements, out_el))
            checks.append(CountCheck(f"copy_elements {tag}", cost.extra_copy_elements, c.copy_bytes_allocated // 4))
    if arch_cases is None:
        arch_cases = [((10, 6), None), (None, (10, 6)), ((10, 6), (8, 4)), ((7, 3), (9, 9)), ((64, 40), (50, 30))]
    for in_side, out_side in arch_cases:
        checks.append(CountCheck(f"architectures in={in_side} out={out_side}",
                                 architecture_count(in_side, out_side), enumerate_masks(in_side, out_side)))
    return checks


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteOutcome:
    name: str
    passed: bool
    detail: str


def default_moment_configs(count=20, seed=0):
    rng = np.random.default_rng(seed)
    configs = []
    for i in range(count):
        depth = 1 + i % 2
        widths = tuple(int(v) for v in rng.integers(2, 33, size=depth + 1))
        rates = tuple(float(r) for r in rng.choice([0.1, 0.2, 0.3, 0.4, 0.5], size=depth))
        configs.append(MomentConfig(widths, rates, seed=seed + i))
    return configs


def suite_moments():
    out = []
    for cfg in default_moment_configs():
        r = check_first_moment(cfg)
        out.append(SuiteOutcome(f"first moment {cfg.widths} rates={cfg.rates}", r.passed,
                                f"deviation {r.first_moment_deviation:.2e} over {r.slice_count} slices"))
    r = check_first_moment(MomentConfig((6, 10, 8), (0.4, 0.5), seed=1), normalization="flow")
    out.append(SuiteOutcome("flow conservation (6,10,8)", r.passed,
                            f"conservation error {r.flow_conservation_error:.2e}; "
                            f"pointwise deviation {r.first_moment_deviation:.3f} (not asserted)"))
    r = check_second_moment(16, 10, seed=0)
    out.append(SuiteOutcome("second moment m=16 w=10", r.passed,
                            f"band {r.band[0]}..{r.band[-1]} deviation {r.second_moment_deviation:.2e}; "
                            f"edge deviation {r.edge_second_moment_deviation:.3f} (not asserted)"))
    return out


def suite_grads(tol=1e-5):
    return [SuiteOutcome(f"gradient {name}", bool(err < tol), f"max relative error {err:.2e}")
            for name, err in check_gradients().items()]


def suite_counts():
    return [SuiteOutcome(c.name, c.passed, f"expected {c.expected}, observed {c.observed}") for c in check_counts()]


SUITES = {"moments": suite_moments, "grads": suite_grads, "counts": suite_counts}


def run_suite(name="all"):
    if name == "all":
        return [o for fn in SUITES.values() for o in fn()]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
