"""Training loop, SliceOut schedule and per-step instrumentation."""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import slicing
from .errors import ConfigError, RateError, TrainingError
from .models import MLP, AttentionNet, ConvNet, square_side
from .optim import SGD, Adam
from .slicing import SliceScheme
from .tensor import InstrumentationCounters, Tensor, cross_entropy, no_grad, use_counters

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    channels: int = 8
    width: int = 16
    blocks: int = 1
    placement: str = "first-conv"
    tokens: int = 4
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64

    def __post_init__(self):
        if self.kind not in ("mlp", "resblock", "attention"):
            raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: SliceScheme = field(default_factory=SliceScheme)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 10
    batch: int = 64
    seed: int = 0
    cutoff_fraction: float | None = None
    precision: str = "f64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be positive")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.cutoff_fraction is not None and not 0.0 <= self.cutoff_fraction <= 1.0:
            raise ConfigError("cutoff_fraction must lie in [0, 1]")

    @property
    def effective_cutoff(self):
        if self.cutoff_fraction is not None:
            return self.cutoff_fraction
        return 0.0 if self.model.kind == "mlp" else 0.1

    @property
    def cutoff_epochs(self):
        return math.floor(self.epochs * self.effective_cutoff)


@dataclass
class StepMetrics:
    step_time: float
    element_reads: int
    element_writes: int
    copy_bytes_allocated: int
    peak_activation_bytes: int
    multiply_ops: int
    loss: float
    accuracy: float


@dataclass
class EpochMetrics:
    epoch: int
    scheme: str
    p: float
    step_time_ms: float
    peak_activation_bytes: int
    copy_bytes: int
    multiply_ops: int
    train_loss: float
    train_acc: float
    test_acc: float
    slice_samples: int
    sliceout_enabled: bool


@dataclass
class RunRecord:
    config: TrainConfig
    epochs: list
    params: list

    @property
    def final(self):
        return self.epochs[-1]


def build_model(model_cfg: ModelConfig, scheme: SliceScheme, in_dim: int, classes: int, dtype, rng):
    if model_cfg.kind == "mlp":
        return MLP([in_dim, *model_cfg.hidden, classes], scheme, rng, dtype)
    if model_cfg.kind == "resblock":
        side = square_side(in_dim)
        return ConvNet((1, side, side), classes, model_cfg.channels, model_cfg.width, model_cfg.blocks,
                       scheme, model_cfg.placement, scheme.delayed, rng, dtype)
    return AttentionNet(in_dim, classes, model_cfg.tokens, model_cfg.d_model, model_cfg.heads, model_cfg.d_ff,
                        scheme, rng, dtype)


def build_optimizer(cfg: OptimizerConfig, params):
    if cfg.kind == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)


def accuracy(model, x, y, dtype, batch=1024):
    if len(y) == 0:
        return float("nan")
    correct = 0
    with no_grad():
        for i in range(0, len(y), batch):
            logits = model(Tensor(x[i:i + batch].astype(dtype, copy=False)), training=False)
            correct += int((logits.data.argmax(axis=1) == y[i:i + batch]).sum())
    return correct / len(y)


def run_step(model, optimizer, xb, yb, slice_rng, dropout_rng, counters):
    """One resample -> forward -> backward -> sliced update step.

    Returns ``(StepMetrics, slices_drawn)``.
    """
    counters.reset()
    t0 = time.perf_counter()
    with use_counters(counters):
        optimizer.zero_grad()
        drawn = model.resample(slice_rng)
        logits = model(Tensor(xb), training=True, rng=dropout_rng)
        loss = cross_entropy(logits, yb)
        loss.backward()
        optimizer.step()
    dt = time.perf_counter() - t0
    acc = float((logits.data.argmax(axis=1) == yb).mean())
    return StepMetrics(dt, counters.element_reads, counters.element_writes, counters.copy_bytes_allocated,
                       counters.peak_activation_bytes, counters.multiply_ops, float(loss.data), acc), drawn


def train(config: TrainConfig, dataset) -> RunRecord:
    """Train on ``dataset``; deterministic for a fixed config and seed."""
    if len(dataset.y_train) == 0:
        raise ConfigError("training set is empty")
    dtype = DTYPES[config.precision]
    init_rng = np.random.default_rng(config.seed)
    slice_rng = np.random.default_rng([config.seed, config.scheme.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, config.scheme.seed, 2])
    shuffle_rng = np.random.default_rng([config.seed, 3])

    model = build_model(config.model, config.scheme, dataset.x_train.shape[1], dataset.classes, dtype, init_rng)
    optimizer = build_optimizer(config.optimizer, model.parameters())
    counters = InstrumentationCounters()
    x_train = dataset.x_train.astype(dtype, copy=False)
    y_train = dataset.y_train
    n = len(y_train)
    last_sliced_epoch = config.epochs - config.cutoff_epochs

    history = []
    for epoch in range(1, config.epochs + 1):
        model.slicing_enabled = epoch <= last_sliced_epoch
        order = shuffle_rng.permutation(n)
        steps, samples = [], 0
        for i in range(0, n, config.batch):
            idx = order[i:i + config.batch]
            xb, yb = x_train[idx], y_train[idx]
            m, drawn = run_step(model, optimizer, xb, yb, slice_rng, dropout_rng, counters)
            if not math.isfinite(m.loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            steps.append(m)
            samples += drawn
        em = EpochMetrics(
            epoch=epoch,
            scheme=config.scheme.kind,
            p=config.scheme.rate,
            step_time_ms=1000 * statistics.median(s.step_time for s in steps),
            peak_activation_bytes=max(s.peak_activation_bytes for s in steps),
            copy_bytes=sum(s.copy_bytes_allocated for s in steps),
            multiply_ops=sum(s.multiply_ops for s in steps),
            train_loss=float(np.mean([s.loss for s in steps])),
            train_acc=accuracy(model, x_train, y_train, dtype),
            test_acc=accuracy(model, dataset.x_test, dataset.y_test, dtype),
            slice_samples=samples,
            sliceout_enabled=model.slicing_enabled,
        )
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f", epoch, em.train_loss, em.train_acc, em.test_acc)
        history.append(em)
    return RunRecord(config, history, [p.data.copy() for p in model.parameters()])


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    scheme: str
    step_time_ms: float
    peak_activation_bytes: int
    copy_bytes: int
    multiply_ops: int
    rel_time_pct: float = 100.0
    rel_memory_pct: float = 100.0


BENCH_SCHEMES = ("standard", "sliceout", "controlled")


def _bench_model(model, width, depth, in_dim, classes, scheme, dtype, rng):
    if model == "mlp":
        return MLP([in_dim, *([width] * depth), classes], scheme, rng, dtype)
    if model == "resblock":
        side = square_side(in_dim)
        return ConvNet((1, side, side), classes, 8, width, depth, scheme, rng=rng, dtype=dtype)
    if model == "attention":
        return AttentionNet(in_dim, classes, 4, width, 4, 2 * width, scheme, rng, dtype)
    raise ConfigError(f"unknown model family {model!r}")


def bench_compare(model="mlp", width=2048, batch=256, p=0.5, schemes=BENCH_SCHEMES, trials=3, steps=5,
                  warmup=3, depth=3, in_dim=784, classes=10, precision="f32", normalization="probabilistic",
                  seed=0):
    """Median step time and peak activation bytes per scheme, relative to
    standard dropout (= 100%)."""
    if trials < 3:
        raise ConfigError("bench needs at least 3 trials")
    slicing._check_rate(p)
    if slicing.round_half_away(width * (1 - p)) < 1:
        raise RateError(f"width {width} keeps no units at rate {p}")
    for s in schemes:
        if s not in slicing.SCHEME_KINDS:
            raise ConfigError(f"unknown scheme {s!r}")
    if model != "mlp" and "controlled" in schemes:
        raise ConfigError("controlled dropout is only benchmarked on the mlp model")
    order = ["standard"] + [s for s in schemes if s != "standard"]
    dtype = DTYPES[precision]
    data_rng = np.random.default_rng(seed)
    xb = data_rng.standard_normal((batch, in_dim)).astype(dtype)
    yb = data_rng.integers(0, classes, size=batch)

    times = {s: [] for s in order}
    stats = {}
    for trial in range(trials):
        for s in order:
            scheme = SliceScheme(s, p, normalization, seed=seed)
            net = _bench_model(model, width, depth, in_dim, classes, scheme, dtype, np.random.default_rng(seed))
            opt = Adam(net.parameters(), lr=1e-4)
            srng = np.random.default_rng([seed, trial, 1])
            drng = np.random.default_rng([seed, trial, 2])
            counters = InstrumentationCounters()
            for _ in range(warmup):
                run_step(net, opt, xb, yb, srng, drng, counters)
            for _ in range(steps):
                m, _ = run_step(net, opt, xb, yb, srng, drng, counters)
                times[s].append(m.step_time)
            stats[s] = m
            del net, opt
    rows = []
    for s in order:
        m = stats[s]
        rows.append(BenchRow(s, 1000 * statistics.median(times[s]), m.peak_activation_bytes,
                             m.copy_bytes_allocated, m.multiply_ops))
    base = rows[0]
    for r in rows:
        r.rel_time_pct = 100.0 * r.step_time_ms / base.step_time_ms
        r.rel_memory_pct = 100.0 * r.peak_activation_bytes / base.peak_activation_bytes
    return rows
