"""Small trainable networks built from the :mod:`sliceout.nn` layers."""

from __future__ import annotations

import math

import numpy as np

from . import slicing
from .errors import ConfigError, ShapeError
from .nn import (
    FULL,
    DenseSliceLayer,
    Conv2d,
    BatchNorm,
    ResidualBlock,
    ResidualBlockConfig,
    TransformerBlock,
    Parameter,
    dense_controlled_forward,
    dense_sliceout_forward,
)
from .slicing import SliceScheme
from .tensor import Tensor, add_bias, conv2d, mean, mul_scalar, relu, reshape


class MLP:
    """Fully connected ReLU network; the scheme is applied on every hidden layer.

    SliceOut slices the output rows of each hidden layer's weight and the input
    columns of the next layer with the same spec, normalising right after the
    hidden layer. Controlled dropout gathers a random kept subset instead.
    """

    def __init__(self, sizes, scheme: SliceScheme | None = None, rng=None, dtype=np.float64):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.scheme = scheme or SliceScheme()
        self.layers = [DenseSliceLayer(a, b, rng, dtype, self.scheme) for a, b in zip(sizes[:-1], sizes[1:])]
        self.slicing_enabled = True
        self.hidden_specs = [None] * (len(sizes) - 2)
        self.kept_units = [None] * (len(sizes) - 2)
        self.widths = [slicing.slice_width(m, self.scheme.rate) for m in self.sizes[1:-1]]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def _scheme_live(self):
        return self.slicing_enabled and self.scheme.active

    def resample(self, rng, dropout_rng=None):
        """Draw per-step slices (or kept subsets); returns how many were drawn."""
        self.hidden_specs = [None] * len(self.widths)
        self.kept_units = [None] * len(self.widths)
        if not self._scheme_live:
            return 0
        if self.scheme.kind == "sliceout":
            self.hidden_specs = [slicing.sample_slice(rng, m, w) for m, w in zip(self.sizes[1:-1], self.widths)]
            return len(self.widths)
        if self.scheme.kind == "controlled":
            self.kept_units = [slicing.sample_kept_units(rng, m, w) for m, w in zip(self.sizes[1:-1], self.widths)]
            return len(self.widths)
        return 0

    def forward(self, x: Tensor, training=True, rng=None) -> Tensor:
        live = training and self._scheme_live
        kind = self.scheme.kind if live else "none"
        h = x
        n_hidden = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            last = i == n_hidden
            if kind == "sliceout":
                layer.in_spec = self.hidden_specs[i - 1] if i > 0 else None
                layer.out_spec = None if last else self.hidden_specs[i]
                h = dense_sliceout_forward(h, layer)
            elif kind == "controlled":
                rows = None if last else self.kept_units[i]
                cols = self.kept_units[i - 1] if i > 0 else None
                h = dense_controlled_forward(h, layer, rows, cols)
            else:
                h = dense_sliceout_forward(h, layer, None, None)
            if last:
                break
            h = relu(h)
            if kind == "standard":
                h = slicing.apply_standard_dropout(h, self.scheme.rate, rng)
            elif kind == "controlled":
                h = mul_scalar(h, layer.n_out / len(self.kept_units[i]))
        return h

    __call__ = forward


class ConvNet:
    """Stem conv, a stack of residual blocks, global average pooling, linear head."""

    def __init__(self, in_shape, classes, channels=8, width=16, blocks=1, scheme: SliceScheme | None = None,
                 placement="first-conv", delayed=False, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        c_in, h, w = in_shape
        self.in_shape = tuple(in_shape)
        self.scheme = scheme or SliceScheme()
        if self.scheme.kind == "controlled":
            raise ConfigError("controlled dropout is only defined for the mlp model")
        self.stem = Conv2d(c_in, channels, 3, 1, rng=rng, dtype=dtype)
        cfg = ResidualBlockConfig(channels, width, self.scheme, delayed, placement)
        self.blocks = [ResidualBlock(cfg, rng, dtype, input_hw=(h, w)) for _ in range(blocks)]
        self.bn_out = BatchNorm(channels, dtype)
        self.head = DenseSliceLayer(channels, classes, rng, dtype)
        self.slicing_enabled = True

    def parameters(self):
        ps = list(self.stem.parameters())
        for b in self.blocks:
            ps += b.parameters()
        return ps + self.bn_out.parameters() + self.head.parameters()

    def resample(self, rng, dropout_rng=None):
        if not (self.slicing_enabled and self.scheme.active):
            for b in self.blocks:
                b.spec = b.window = None
            return 0
        return sum(b.resample(rng) for b in self.blocks)

    def forward(self, x: Tensor, training=True, rng=None) -> Tensor:
        n = x.shape[0]
        x = reshape(x, (n, *self.in_shape))
        self.stem.W.touch(FULL)
        h = conv2d(x, self.stem.W, padding=1)
        live = training and self.slicing_enabled
        for b in self.blocks:
            if live:
                h = b(h, True, rng)
            else:
                saved = b.config.scheme
                b.config.scheme = SliceScheme()
                try:
                    h = b(h, training, rng)
                finally:
                    b.config.scheme = saved
        h = relu(self.bn_out(h, training))
        h = mean(h, axis=(2, 3))
        return dense_sliceout_forward(h, self.head, None, None)

    __call__ = forward


class AttentionNet:
    """Splits a flat input into ``tokens`` chunks, embeds them, runs one
    transformer block and classifies the mean-pooled sequence."""

    def __init__(self, dim, classes, tokens=4, d_model=32, heads=2, d_ff=64, scheme: SliceScheme | None = None,
                 rng=None, dtype=np.float64):
        if dim % tokens:
            raise ConfigError(f"input dim {dim} is not divisible into {tokens} tokens")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.scheme = scheme or SliceScheme()
        if self.scheme.kind == "controlled":
            raise ConfigError("controlled dropout is only defined for the mlp model")
        self.tokens, self.token_dim, self.d_model = tokens, dim // tokens, d_model
        self.embed = DenseSliceLayer(self.token_dim, d_model, rng, dtype)
        self.pos = Parameter((rng.standard_normal(tokens * d_model) * 0.02).astype(dtype))
        self.block = TransformerBlock(d_model, heads, d_ff, self.scheme, rng, dtype)
        self.head = DenseSliceLayer(d_model, classes, rng, dtype)
        self.slicing_enabled = True

    def parameters(self):
        return [*self.embed.parameters(), self.pos, *self.block.parameters(), *self.head.parameters()]

    def resample(self, rng, dropout_rng=None):
        if not self.slicing_enabled:
            self.block.set_specs(None, None, None)
            return 0
        return self.block.resample(rng)

    def forward(self, x: Tensor, training=True, rng=None) -> Tensor:
        n = x.shape[0]
        t, d = self.tokens, self.d_model
        e = dense_sliceout_forward(reshape(x, (n * t, self.token_dim)), self.embed, None, None)
        self.pos.touch(FULL)
        e = add_bias(reshape(e, (n, t * d)), self.pos)
        saved = self.block.scheme
        if not self.slicing_enabled:
            self.block.scheme = SliceScheme()
        try:
            h = self.block(reshape(e, (n, t, d)), training, rng)
        finally:
            self.block.scheme = saved
        h = mean(h, axis=1)
        return dense_sliceout_forward(h, self.head, None, None)

    __call__ = forward


def square_side(dim):
    side = int(math.isqrt(dim))
    if side * side != dim:
        raise ConfigError(f"input dim {dim} is not a square image; resblock model needs H*W inputs")
    return side
