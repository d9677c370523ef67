"""Layers and blocks that route SliceOut through dense, convolutional, residual
and attention computations.

Sliced weights are always zero-copy views of the full parameters. Each forward
pass records which region of a parameter it touched (``Parameter.regions``) so
the optimisers update only that region in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import slicing
from .errors import AlignmentError, ShapeError, SizeError, UsageError
from .slicing import SliceScheme, SliceSpec
from .tensor import (
    Tensor,
    add,
    add_bias,
    batchnorm,
    bmm,
    conv2d,
    layer_norm,
    matmul,
    mul_const,
    mul_scalar,
    region_view,
    relu,
    reshape,
    slice_view,
    softmax,
    transpose,
)

FULL = Ellipsis


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.regions = []

    def touch(self, index=FULL):
        self.regions.append(index)

    def view(self, specs: dict) -> Tensor:
        """Zero-copy view restricted to ``{axis: SliceSpec}``; records the region."""
        index = [slice(None)] * self.ndim
        for axis, spec in specs.items():
            if spec is None:
                continue
            if spec.m != self.shape[axis]:
                raise AlignmentError(f"spec for width {spec.m} applied to axis of length {self.shape[axis]}")
            index[axis] = spec.as_slice
        index = tuple(index)
        if all(s == slice(None) for s in index):
            self.touch(FULL)
            return self
        self.touch(index)
        return region_view(self, index)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _normalize(y: Tensor, spec: SliceSpec | None, normalization: str, axis: int) -> Tensor:
    if spec is None:
        return y
    factors = slicing.normalization_factors(spec, normalization)
    if factors is None:
        return y
    return mul_const(y, factors, axis=axis)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


class DenseSliceLayer:
    """Fully connected layer ``y = x W^T + b`` with optional input/output slices."""

    def __init__(self, n_in, n_out, rng=None, dtype=np.float64, scheme: SliceScheme | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Parameter(_uniform(rng, (n_out, n_in), n_in, dtype))
        self.b = Parameter(_uniform(rng, (n_out,), n_in, dtype))
        self.scheme = scheme or SliceScheme()
        self.in_spec: SliceSpec | None = None
        self.out_spec: SliceSpec | None = None

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x, normalize=True):
        return dense_sliceout_forward(x, self, normalize=normalize)


def dense_sliceout_forward(x: Tensor, layer: DenseSliceLayer, in_spec=FULL, out_spec=FULL,
                           normalize=True) -> Tensor:
    """Forward through the ``out_spec`` x ``in_spec`` weight sub-view.

    Specs default to the ones stored on ``layer``. When the layer's scheme is
    SliceOut the output is normalised unless ``normalize`` is False or the
    scheme defers normalisation.
    """
    in_spec = layer.in_spec if in_spec is FULL else in_spec
    out_spec = layer.out_spec if out_spec is FULL else out_spec
    expected = in_spec.w if in_spec is not None else layer.n_in
    if x.ndim != 2 or x.shape[1] != expected:
        raise AlignmentError(f"input has {x.shape[-1]} features, weight slice expects {expected}")
    W = layer.W.view({0: out_spec, 1: in_spec})
    y = matmul(x, transpose(W))
    if out_spec is None or out_spec.w == out_spec.m:
        layer.b.touch(FULL)
        y = add_bias(y, layer.b)
    else:
        y = add_bias(y, layer.b.view({0: out_spec}))
    if normalize and layer.scheme.is_sliceout and not layer.scheme.delayed:
        y = _normalize(y, out_spec, layer.scheme.normalization, axis=1)
    return y


def dense_controlled_forward(x: Tensor, layer: DenseSliceLayer, rows, cols) -> Tensor:
    """Controlled dropout: multiply with a gathered copy of the kept weights."""
    rows = np.arange(layer.n_out) if rows is None else rows
    cols = np.arange(layer.n_in) if cols is None else cols
    if x.shape[1] != len(cols):
        raise AlignmentError(f"input has {x.shape[1]} features, gathered weight expects {len(cols)}")
    layer.W.touch(FULL)
    layer.b.touch(FULL)
    Wg = slicing.controlled_gather(layer.W, rows, cols)
    y = matmul(x, transpose(Wg))
    return add_bias(y, layer.b, index=None if len(rows) == layer.n_out else rows)


# ---------------------------------------------------------------------------
# convolution and batch norm
# ---------------------------------------------------------------------------


class Conv2d:
    def __init__(self, c_in, c_out, k=3, padding=1, stride=1, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        self.W = Parameter((rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(2.0 / fan_in)).astype(dtype))
        self.padding = padding
        self.stride = stride

    def parameters(self):
        return [self.W]


class BatchNorm:
    """Per-channel batch norm with full-width parameters and running statistics."""

    def __init__(self, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x, training=True, spec: SliceSpec | None = None):
        seg = slice(None) if spec is None else spec.as_slice
        return batchnorm(
            x, self.gamma.view({0: spec}), self.beta.view({0: spec}),
            self.running_mean[seg], self.running_var[seg],
            training=training, momentum=self.momentum, eps=self.eps,
        )


class NormState:
    """Tracks that a block normalises at most once per forward pass."""

    def __init__(self):
        self.applied = False


def delayed_normalize(y: Tensor, factors, state: NormState, axis=1) -> Tensor:
    """Apply normalisation ``factors`` (scalar or per-channel) at a late point."""
    if state.applied:
        raise UsageError("normalisation already applied in this block")
    state.applied = True
    if factors is None:
        return y
    if np.ndim(factors) == 0:
        return mul_scalar(y, float(factors)) if factors != 1 else y
    return mul_const(y, factors, axis=axis)


@dataclass
class ResidualBlockConfig:
    channels: int
    width: int
    scheme: SliceScheme
    delayed_normalization: bool = False
    placement: str = "first-conv"

    def __post_init__(self):
        if self.placement not in ("first-conv", "input-patch"):
            raise ValueError(f"unknown placement {self.placement!r}")


class ResidualBlock:
    """Pre-activation residual block: BN-ReLU-conv1-BN-ReLU-conv2 plus skip.

    Channel-SliceOut slices conv1's output channels, the middle batch norm and
    conv2's input channels with one shared spec. Patch-SliceOut slices a spatial
    window of conv1's input. ``delayed_normalization`` moves the normalisation
    from directly after slicing to just before conv2.
    """

    def __init__(self, config: ResidualBlockConfig, rng=None, dtype=np.float64, input_hw=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_hw = input_hw
        c, f = config.channels, config.width
        self.config = config
        self.bn_in = BatchNorm(c, dtype)
        self.conv1 = Conv2d(c, f, 3, 1, rng=rng, dtype=dtype)
        self.bn_mid = BatchNorm(f, dtype)
        self.conv2 = Conv2d(f, c, 3, 1, rng=rng, dtype=dtype)
        self.spec: SliceSpec | None = None
        self.window = None

    def parameters(self):
        return [*self.bn_in.parameters(), *self.conv1.parameters(),
                *self.bn_mid.parameters(), *self.conv2.parameters()]

    def channel_width(self):
        return slicing.slice_width(self.config.width, self.config.scheme.rate)

    def resample(self, rng):
        """Draw this step's slice; returns the number of slices sampled."""
        cfg = self.config
        if not (cfg.scheme.is_sliceout and cfg.scheme.active):
            self.spec = self.window = None
            return 0
        if cfg.placement == "first-conv":
            self.spec = slicing.sample_slice(rng, cfg.width, self.channel_width())
        else:
            if self.input_hw is None:
                raise UsageError("patch placement needs the block's input_hw to sample a window")
            self.window = patch_sample(rng, self.input_hw, cfg.scheme.rate)
        return 1

    def __call__(self, x, training=True, rng=None):
        cfg = self.config
        sliced = training and cfg.scheme.is_sliceout and cfg.scheme.active
        if sliced and cfg.placement == "input-patch":
            return patch_block_forward(x, self, rng, training)
        if sliced:
            return channel_sliceout_conv(x, self, training=training)
        a = relu(self.bn_in(x, training))
        h = conv2d(a, self.conv1.W.view({}), padding=1)
        h = relu(self.bn_mid(h, training))
        if training and cfg.scheme.kind == "standard" and cfg.scheme.rate > 0:
            h = slicing.apply_standard_dropout(h, cfg.scheme.rate, rng)
        out = conv2d(h, self.conv2.W.view({}), padding=1)
        return add(out, x)


def channel_sliceout_conv(x: Tensor, block: ResidualBlock, spec=None, *, bn_spec=FULL, conv2_spec=FULL,
                          training=True, bn_identity=False) -> Tensor:
    """Residual block forward with Channel-SliceOut.

    ``bn_spec`` and ``conv2_spec`` default to ``spec``; passing anything else
    is an alignment error. ``bn_identity`` replaces the middle batch norm by the
    identity (used to check that normalisation placement commutes).
    """
    spec = block.spec if spec is None else spec
    bn_spec = spec if bn_spec is FULL else bn_spec
    conv2_spec = spec if conv2_spec is FULL else conv2_spec
    if bn_spec != spec or conv2_spec != spec:
        raise AlignmentError(f"conv1 slice {spec} differs from batch-norm {bn_spec} / conv2 {conv2_spec} slice")
    cfg = block.config
    if spec is not None and spec.m != cfg.width:
        raise AlignmentError(f"slice for width {spec.m} used on a block of width {cfg.width}")
    factors = slicing.normalization_factors(spec, cfg.scheme.normalization) if spec is not None else None
    state = NormState()

    a = relu(block.bn_in(x, training))
    h = conv2d(a, block.conv1.W.view({0: spec}), padding=1)
    if not cfg.delayed_normalization:
        h = delayed_normalize(h, factors, state)
    if not bn_identity:
        h = block.bn_mid(h, training, spec)
    h = relu(h)
    if cfg.delayed_normalization:
        h = delayed_normalize(h, factors, state)
    block._pre_projection = h
    out = conv2d(h, block.conv2.W.view({1: spec}), padding=1)
    return add(out, x)


# ---------------------------------------------------------------------------
# patch sliceout
# ---------------------------------------------------------------------------


def patch_size(h: int, w: int, p: float):
    keep = math.sqrt(1.0 - p)
    return max(1, slicing.round_half_away(h * keep)), max(1, slicing.round_half_away(w * keep))


def patch_sample(rng, hw, p):
    """Window ``(top, left, height, width)`` drawn uniformly over eligible positions."""
    h, w = hw
    ph, pw = patch_size(h, w, p)
    top = slicing.sample_slice(rng, h, ph).s
    left = slicing.sample_slice(rng, w, pw).s
    return top, left, ph, pw


def patch_sliceout(x: Tensor, p: float, rng=None, window=None):
    """Zero-copy spatial window of ``x`` [b,C,H,W] shared across batch and channels.

    Returns ``(view, flow_factor, window)`` where the factor is ``HW / (h'w')``.
    """
    slicing._check_rate(p)
    h, w = x.shape[2:]
    if window is None:
        window = patch_sample(rng, (h, w), p)
    top, left, ph, pw = window
    if ph > h or pw > w or top < 0 or left < 0 or top + ph > h or left + pw > w:
        raise SizeError(f"window {window} does not fit a {h}x{w} input")
    if (ph, pw) == (h, w):
        return x, 1.0, window
    view = slice_view(slice_view(x, 2, top, ph), 3, left, pw)
    return view, (h * w) / (ph * pw), window


def patch_block_forward(x: Tensor, block: ResidualBlock, rng, training=True):
    cfg = block.config
    window = block.window if block.window is not None else patch_sample(rng, x.shape[2:], cfg.scheme.rate)
    block.window = window
    state = NormState()
    a = relu(block.bn_in(x, training))
    a, factor, _ = patch_sliceout(a, cfg.scheme.rate, window=window)
    if not cfg.delayed_normalization:
        a = delayed_normalize(a, factor, state)
    h = conv2d(a, block.conv1.W.view({}), padding=1)
    h = relu(block.bn_mid(h, training))
    if cfg.delayed_normalization:
        h = delayed_normalize(h, factor, state)
    out = conv2d(h, block.conv2.W.view({}), padding=1)
    skip, _, _ = patch_sliceout(x, cfg.scheme.rate, window=window)
    return add(out, skip)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionSliceConfig:
    d_model: int
    heads: int
    d_sliced: int
    qk_spec: SliceSpec | None = None
    v_spec: SliceSpec | None = None
    ff_spec: SliceSpec | None = None

    @property
    def d_head(self):
        return self.d_model // self.heads


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, alpha: float, q_spec=None, k_spec=FULL):
    """``softmax(q k^T / sqrt(alpha)) v`` for [B,T,d] inputs.

    Returns ``(output, weights)``. Queries and keys must come from the same
    slice.
    """
    k_spec = q_spec if k_spec is FULL else k_spec
    if q_spec != k_spec:
        raise AlignmentError(f"query slice {q_spec} and key slice {k_spec} differ")
    if q.shape[-1] != k.shape[-1]:
        raise AlignmentError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError("keys and values must have the same number of positions")
    scores = mul_scalar(bmm(q, transpose(k)), 1.0 / math.sqrt(alpha))
    weights = softmax(scores, axis=-1)
    return bmm(weights, v), weights


def attention_sliceout(Q: Tensor, K: Tensor, V: Tensor, cfg: AttentionSliceConfig, training=True):
    """Attention over already-sliced projections with temperature ``alpha``.

    During sliced training ``alpha`` is the sliced query/key width; otherwise it
    is the per-head width.
    """
    spec = cfg.qk_spec
    alpha = cfg.d_sliced if (training and spec is not None) else cfg.d_head
    return scaled_attention(Q, K, V, alpha, spec, spec)


class TransformerBlock:
    """Post-norm encoder block: multi-head attention then a ReLU feed-forward.

    SliceOut slices every head's query/key rows with one shared spec (temperature
    adjusted, no normalisation), every head's value rows with a second spec
    (normalised) and the feed-forward hidden units with a third (normalised).
    """

    def __init__(self, d_model, heads, d_ff, scheme: SliceScheme | None = None, rng=None, dtype=np.float64):
        if d_model % heads:
            raise ShapeError("d_model must be divisible by heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.scheme = scheme or SliceScheme()
        self.d_model, self.heads, self.d_ff = d_model, heads, d_ff
        self.Wq = Parameter(_uniform(rng, (d_model, d_model), d_model, dtype))
        self.Wk = Parameter(_uniform(rng, (d_model, d_model), d_model, dtype))
        self.Wv = Parameter(_uniform(rng, (d_model, d_model), d_model, dtype))
        self.Wo = Parameter(_uniform(rng, (d_model, d_model), d_model, dtype))
        self.ln1 = (Parameter(np.ones(d_model, dtype)), Parameter(np.zeros(d_model, dtype)))
        self.ff1 = DenseSliceLayer(d_model, d_ff, rng, dtype, self.scheme)
        self.ff2 = DenseSliceLayer(d_ff, d_model, rng, dtype, self.scheme)
        self.ln2 = (Parameter(np.ones(d_model, dtype)), Parameter(np.zeros(d_model, dtype)))
        self.cfg = AttentionSliceConfig(d_model, heads, d_model // heads)

    def parameters(self):
        return [self.Wq, self.Wk, self.Wv, self.Wo, *self.ln1, *self.ff1.parameters(),
                *self.ff2.parameters(), *self.ln2]

    def resample(self, rng):
        if not (self.scheme.is_sliceout and self.scheme.active):
            self.set_specs(None, None, None)
            return 0
        dh = self.cfg.d_head
        w = slicing.slice_width(dh, self.scheme.rate)
        qk = slicing.sample_slice(rng, dh, w)
        v = slicing.sample_slice(rng, dh, w)
        ff = slicing.sample_slice(rng, self.d_ff, slicing.slice_width(self.d_ff, self.scheme.rate))
        self.set_specs(qk, v, ff)
        return 3

    def set_specs(self, qk, v, ff):
        c = self.cfg
        c.qk_spec, c.v_spec, c.ff_spec = qk, v, ff
        c.d_sliced = qk.w if qk is not None else c.d_head

    def _head_rows(self, W, head, spec):
        dh = self.cfg.d_head
        if spec is None:
            return W.view({0: SliceSpec(self.d_model, dh, head * dh)})
        return W.view({0: SliceSpec(self.d_model, spec.w, head * dh + spec.s)})

    def __call__(self, x: Tensor, training=True, rng=None):
        b, t, d = x.shape
        cfg = self.cfg
        sliced = training and self.scheme.is_sliceout and self.scheme.active
        qk_spec = cfg.qk_spec if sliced else None
        v_spec = cfg.v_spec if sliced else None
        ff_spec = cfg.ff_spec if sliced else None
        run_cfg = AttentionSliceConfig(d, self.heads, cfg.d_sliced if sliced else cfg.d_head, qk_spec, v_spec, ff_spec)
        standard = training and self.scheme.kind == "standard" and self.scheme.rate > 0

        x2 = reshape(x, (b * t, d))
        dh = cfg.d_head
        attn_out = None
        for head in range(self.heads):
            q = matmul(x2, transpose(self._head_rows(self.Wq, head, qk_spec)))
            k = matmul(x2, transpose(self._head_rows(self.Wk, head, qk_spec)))
            v = matmul(x2, transpose(self._head_rows(self.Wv, head, v_spec)))
            if v_spec is not None:
                v = _normalize(v, v_spec, self.scheme.normalization, axis=1)
            wq = q.shape[1]
            o, _ = attention_sliceout(reshape(q, (b, t, wq)), reshape(k, (b, t, wq)),
                                      reshape(v, (b, t, v.shape[1])), run_cfg, training)
            o = reshape(o, (b * t, v.shape[1]))
            if standard:
                o = slicing.apply_standard_dropout(o, self.scheme.rate, rng)
            if v_spec is None:
                cols = SliceSpec(d, dh, head * dh)
            else:
                cols = SliceSpec(d, v_spec.w, head * dh + v_spec.s)
            proj = matmul(o, transpose(self.Wo.view({1: cols})))
            attn_out = proj if attn_out is None else add(attn_out, proj)
        for p in (*self.ln1, *self.ln2):
            p.touch(FULL)
        h1 = layer_norm(add(x2, attn_out), *self.ln1)
        self.ff1.in_spec, self.ff1.out_spec = None, ff_spec
        self.ff2.in_spec, self.ff2.out_spec = ff_spec, None
        f = relu(dense_sliceout_forward(h1, self.ff1))
        if standard:
            f = slicing.apply_standard_dropout(f, self.scheme.rate, rng)
        f = dense_sliceout_forward(f, self.ff2)
        out = layer_norm(add(h1, f), *self.ln2)
        return reshape(out, (b, t, d))


# ---------------------------------------------------------------------------
# architecture counting
# ---------------------------------------------------------------------------


def architecture_count(in_side=None, out_side=None) -> int:
    """Distinct sub-networks a weight matrix is sampled from.

    Each side is ``(layer_width, slice_width)`` or None when that side of the
    matrix is not sliced.
    """
    count = 1
    for side in (in_side, out_side):
        if side is not None:
            m, w = side
            count *= len(slicing.eligible_starts(m, w))
    return count
