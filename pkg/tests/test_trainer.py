import numpy as np
import pytest

from sliceout.data import Dataset, gen_blobs
from sliceout.errors import ConfigError, RateError, ShapeError, TrainingError
from sliceout.models import MLP, AttentionNet, ConvNet
from sliceout.optim import Adam, adam_step, sgd_momentum_step
from sliceout.slicing import SliceScheme
from sliceout.tensor import Tensor, cross_entropy
from sliceout.trainer import ModelConfig, OptimizerConfig, TrainConfig, bench_compare, train


@pytest.fixture(scope="module")
def small_blobs():
    return gen_blobs(classes=4, dim=16, n=40, seed=0)


def test_sgd_examples():
    p, v = np.array([1.0]), np.zeros(1)
    sgd_momentum_step(p, np.zeros(1), v, lr=0.1)
    assert p.tolist() == [1.0]
    sgd_momentum_step(p, np.ones(1), v, lr=0.1, momentum=0.9)
    assert p == pytest.approx([0.9])


def test_adam_first_step_moves_by_lr():
    p, m, v = np.array([0.5]), np.zeros(1), np.zeros(1)
    adam_step(p, np.ones(1), m, v, t=1, lr=1e-3)
    assert 0.5 - p[0] == pytest.approx(1e-3, rel=1e-6)
    p2 = np.array([0.5])
    adam_step(p2, np.zeros(1), np.zeros(1), np.zeros(1), t=1)
    assert p2[0] == 0.5


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.zeros(2), np.zeros(3), np.zeros(2), lr=0.1)
    with pytest.raises(ShapeError):
        adam_step(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(2), t=1)


def test_adam_updates_only_touched_regions():
    rng = np.random.default_rng(0)
    net = MLP([6, 10, 3], SliceScheme("sliceout", 0.5), rng)
    opt = Adam(net.parameters(), lr=0.01)
    before = [p.data.copy() for p in net.parameters()]
    opt.zero_grad()
    net.resample(np.random.default_rng(1))
    spec = net.hidden_specs[0]
    cross_entropy(net(Tensor(rng.standard_normal((4, 6)))), np.array([0, 1, 2, 0])).backward()
    opt.step()
    W0, _, W1, _ = [p.data for p in net.parameters()]
    outside = np.ones(10, dtype=bool)
    outside[spec.as_slice] = False
    assert np.array_equal(W0[outside], before[0][outside])
    assert np.array_equal(W1[:, outside], before[2][:, outside])


def test_training_is_deterministic(small_blobs):
    cfg = TrainConfig(ModelConfig("mlp", hidden=[16]), SliceScheme("sliceout", 0.3), epochs=3, batch=16, seed=4)
    a, b = train(cfg, small_blobs), train(cfg, small_blobs)
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_zero_rate_sliceout_is_bit_identical_to_none(small_blobs):
    base = dict(model=ModelConfig("mlp", hidden=[16, 16]), epochs=3, batch=16, seed=2)
    a = train(TrainConfig(scheme=SliceScheme("none"), **base), small_blobs)
    b = train(TrainConfig(scheme=SliceScheme("sliceout", 0.0), **base), small_blobs)
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_cutoff_schedule(small_blobs):
    cfg = TrainConfig(ModelConfig("mlp", hidden=[8]), SliceScheme("sliceout", 0.3), epochs=20, batch=80,
                      cutoff_fraction=0.1)
    assert cfg.cutoff_epochs == 2
    rec = train(cfg, small_blobs)
    samples = [e.slice_samples for e in rec.epochs]
    assert samples[-2:] == [0, 0]
    assert all(s > 0 for s in samples[:-2])
    assert not rec.epochs[-1].sliceout_enabled


def test_default_cutoff_per_family():
    assert TrainConfig(ModelConfig("mlp")).effective_cutoff == 0.0
    assert TrainConfig(ModelConfig("resblock")).effective_cutoff == 0.1


def test_resblock_and_attention_train(small_blobs):
    for kind in ("resblock", "attention"):
        model = ModelConfig(kind, channels=2, width=4, tokens=4, d_model=8, heads=2, d_ff=8)
        rec = train(TrainConfig(model, SliceScheme("sliceout", 0.5), epochs=2, batch=40), small_blobs)
        assert np.isfinite(rec.final.train_loss)
        assert rec.epochs[0].slice_samples > 0


def test_patch_placement_trains(small_blobs):
    model = ModelConfig("resblock", channels=2, width=4, placement="input-patch")
    rec = train(TrainConfig(model, SliceScheme("sliceout", 0.5), epochs=1, batch=40), small_blobs)
    assert np.isfinite(rec.final.train_loss)


def test_controlled_dropout_only_for_mlp():
    with pytest.raises(ConfigError):
        ConvNet((1, 4, 4), 3, scheme=SliceScheme("controlled", 0.5))
    with pytest.raises(ConfigError):
        AttentionNet(16, 3, scheme=SliceScheme("controlled", 0.5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    x = np.full((8, 4), np.inf)
    ds = Dataset(x, np.zeros(8, dtype=int), x[:2], np.zeros(2, dtype=int), 2)
    with pytest.raises(TrainingError) as info:
        train(TrainConfig(ModelConfig("mlp", hidden=[4]), epochs=2, batch=8), ds)
    assert info.value.epoch == 1


def test_config_validation(small_blobs):
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        ModelConfig("rnn")
    with pytest.raises(ConfigError):
        OptimizerConfig("rmsprop")
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ConfigError):
        train(TrainConfig(), empty)


def test_bench_validation():
    with pytest.raises(ConfigError):
        bench_compare(width=32, trials=1)
    with pytest.raises(ConfigError):
        bench_compare(width=32, schemes=("standard", "bogus"))
    with pytest.raises(RateError):
        bench_compare(width=1, p=0.9)


def test_bench_small_counts():
    rows = bench_compare(width=64, batch=16, p=0.5, trials=3, steps=1, warmup=1, in_dim=32, depth=2)
    by = {r.scheme: r for r in rows}
    assert by["standard"].rel_time_pct == 100.0
    assert by["sliceout"].copy_bytes == 0
    assert by["controlled"].copy_bytes > 0
    assert by["sliceout"].multiply_ops < by["standard"].multiply_ops
    assert by["sliceout"].peak_activation_bytes < by["standard"].peak_activation_bytes
