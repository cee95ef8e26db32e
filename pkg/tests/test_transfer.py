import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tests.conftest import linear_bundle, synthetic_bundle
from weightshare.autodiff import ParameterRegistry
from weightshare.checkpoint import snapshot
from weightshare.config import TrainConfig
from weightshare.errors import ConfigError, ShapeError
from weightshare.layers import NetworkSpec, build_network, trunk_prefix
from weightshare.optim import AdamState, EMAState
from weightshare.synthetic import MEDIUM, SMALL
from weightshare.training import gradient_step, train_single, validation_cost
from weightshare.transfer import (
    TransferMode,
    choose_resize,
    finetune,
    pad_spectra,
    pretrained_network,
    resize_bundle,
    spline_resample,
    strategy_mode,
    transfer_trunk,
)


def pretrained(p=64, arch=1, seed=4):
    """Checkpoint of an untrained network whose EMA shadows differ from its raw weights."""
    registry = ParameterRegistry(seed)
    net = build_network(NetworkSpec(name="source", input_length=p, architecture_id=arch), registry)
    ema = EMAState.track(net.parameters())
    for shadow in ema.shadows.values():
        shadow += 0.25
    for buffer in registry.buffers.values():
        buffer += 0.5
    return snapshot(registry, ema, architecture_id=arch, input_length=p)


def test_pad_examples():
    np.testing.assert_array_equal(pad_spectra([1.0, 2.0, 3.0], 5), [1, 1, 2, 3, 3])
    np.testing.assert_array_equal(pad_spectra([1.0, 2.0, 3.0], 6), [1, 1, 2, 3, 3, 3])
    np.testing.assert_array_equal(pad_spectra([1.0, 2.0, 3.0], 6, mode="zero"), [0, 1, 2, 3, 0, 0])
    np.testing.assert_array_equal(pad_spectra([1.0, 2.0], 2), [1.0, 2.0])
    with pytest.raises(ShapeError):
        pad_spectra([1.0, 2.0, 3.0], 2)
    with pytest.raises(ConfigError):
        pad_spectra([1.0, 2.0], 4, mode="reflect")


@given(st.integers(1, 40), st.integers(0, 30))
def test_pad_keeps_the_original_in_the_centre(p, extra):
    x = np.random.default_rng(p).normal(size=(3, p))
    padded = pad_spectra(x, p + extra)
    left = extra // 2
    np.testing.assert_array_equal(padded[:, left : left + p], x)


@pytest.mark.parametrize("p, q", [(100, 650), (550, 680), (64, 96), (680, 550), (4, 2)])
def test_spline_is_exact_on_linear_signals(p, q):
    x = 0.3 * np.arange(p) - 2.0
    out = spline_resample(x, q)
    expected = -2.0 + 0.3 * (p - 1) * np.linspace(0.0, 1.0, q)
    np.testing.assert_allclose(out, expected, atol=1e-9)
    assert out[0] == x[0]
    assert out[-1] == x[-1]


def test_spline_identity_and_constant():
    x = np.random.default_rng(0).normal(size=(2, 30))
    np.testing.assert_array_equal(spline_resample(x, 30), x)
    np.testing.assert_allclose(spline_resample(np.full(10, 1.5), 23), 1.5, atol=1e-12)


def test_spline_approximates_quadratics():
    p = 50
    grid = np.linspace(0.0, 1.0, p)
    out = spline_resample(grid**2, 2 * p)
    truth = np.linspace(0.0, 1.0, 2 * p) ** 2
    assert np.max(np.abs(out - truth)) < 1e-3


def test_spline_needs_four_points():
    with pytest.raises(ShapeError):
        spline_resample([1.0, 2.0, 3.0], 10)
    with pytest.raises(ShapeError):
        spline_resample(np.arange(10.0), 1)


def test_strategy_modes():
    assert strategy_mode("tl_ws_stop") == TransferMode("stop", "weight_share")
    assert strategy_mode("tl_ws_full") == TransferMode("full", "weight_share")
    assert strategy_mode("tl_stop", "auto", 401, 550) == TransferMode("stop", "pad")
    assert strategy_mode("tl_full", "auto", 650, 550) == TransferMode("full", "spline")
    assert strategy_mode("tl_full", "pad") == TransferMode("full", "pad")
    assert TransferMode("stop").frozen and not TransferMode("full").frozen
    assert choose_resize(550, 550) == "pad"
    with pytest.raises(ConfigError):
        strategy_mode("weight_share")
    with pytest.raises(ConfigError):
        strategy_mode("tl_stop")


def test_resize_bundle_keeps_rows_and_splits():
    bundle = linear_bundle(p=64)
    padded = resize_bundle(bundle, 96, "pad")
    assert padded.input_length == 96
    assert padded.splits is bundle.splits
    np.testing.assert_array_equal(padded.targets, bundle.targets)
    assert resize_bundle(bundle, 96, "weight_share") is bundle
    assert resize_bundle(bundle, 48, "spline").input_length == 48


def test_transfer_copies_ema_trunk_and_buffers():
    checkpoint = pretrained()
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), TransferMode("full"))
    source = checkpoint.ema_values()
    for p in net.trunk_parameters():
        np.testing.assert_array_equal(p.values, source[p.id])
        assert p.trainable
    prefix = trunk_prefix(1)
    for bid, buffer in net.registry.buffers.items():
        if bid.startswith(prefix):
            np.testing.assert_array_equal(buffer, checkpoint.buffers[bid])
    assert not net.trunk_frozen
    assert net.meta["transfer"] == {"gradient": "full", "resize": "weight_share"}


def test_weight_shared_transfer_to_a_longer_input():
    checkpoint = pretrained(p=550)
    net = pretrained_network(checkpoint, NetworkSpec(name="wheat", input_length=650), TransferMode("stop"))
    assert net.flatten_length == 240
    assert checkpoint.meta["input_length"] == 550
    assert net.forward(np.zeros((2, 650))).shape == (2, 1)


def test_transfer_errors():
    checkpoint = pretrained(arch=1)
    with pytest.raises(ConfigError):
        pretrained_network(checkpoint, NetworkSpec(name="t", input_length=64, architecture_id=2), TransferMode("stop"))
    with pytest.raises(ShapeError):
        pretrained_network(checkpoint, NetworkSpec(name="t", input_length=96), TransferMode("stop", "pad"))


def test_stop_gradient_never_moves_the_trunk():
    checkpoint = pretrained()
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), TransferMode("stop"))
    bundle = linear_bundle(p=96, seed=7)
    trunk_ids = {p.id for p in net.trunk_parameters()}
    assert trunk_ids.isdisjoint(p.id for p in net.trainable_parameters())

    buffers = {bid: b.copy() for bid, b in net.registry.buffers.items() if bid.startswith(trunk_prefix(1))}
    result = finetune(net, bundle, TrainConfig.transfer(epochs=3, batch_size=32, learning_rate=1e-2, min_learning_rate=1e-4))
    source = checkpoint.ema_values()
    for p in net.trunk_parameters():
        np.testing.assert_array_equal(p.values, source[p.id])
        np.testing.assert_array_equal(result.parameters[p.id], source[p.id])
    for bid, value in buffers.items():
        np.testing.assert_array_equal(net.registry.buffers[bid], value)


def test_full_gradient_moves_the_trunk():
    checkpoint = pretrained()
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), TransferMode("full"))
    bundle = linear_bundle(p=96, seed=7)
    x, y = bundle.subset("train")
    before = {p.id: p.values.copy() for p in net.trunk_parameters()}
    gradient_step(net, x[:32], y[:32], bundle, AdamState(), np.random.default_rng(0))
    assert all(not np.array_equal(p.values, before[p.id]) for p in net.trunk_parameters())


def test_finetune_with_zero_epochs_returns_the_transferred_network():
    checkpoint = pretrained()
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), TransferMode("full"))
    before = net.registry.parameter_values()
    result = finetune(net, linear_bundle(p=96), TrainConfig.transfer(epochs=0))
    assert result.update == 0
    for pid, value in before.items():
        np.testing.assert_array_equal(result.parameters[pid], value)


@pytest.mark.parametrize("strategy, small_length", [("tl_stop", 64), ("tl_full", 128)])
def test_finetune_resizes_to_the_pretrained_length(strategy, small_length):
    checkpoint = pretrained(p=96)
    mode = strategy_mode(strategy, "auto", small_length, 96)
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), mode)
    result = finetune(net, linear_bundle(p=small_length), TrainConfig.transfer(epochs=1, batch_size=64), mode)
    assert result.meta["input_length"] == 96
    assert mode.resize == ("pad" if small_length < 96 else "spline")


def test_finetune_rejects_length_mismatch_without_resizing():
    checkpoint = pretrained(p=96)
    net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=96), TransferMode("stop"))
    with pytest.raises(ShapeError):
        finetune(net, linear_bundle(p=64), TrainConfig.transfer(epochs=1))


def test_pad_with_equal_lengths_matches_weight_sharing():
    checkpoint = pretrained(p=64)
    config = TrainConfig.transfer(epochs=2, batch_size=32)
    results = []
    for resize in ("weight_share", "pad"):
        mode = TransferMode("stop", resize)
        net = pretrained_network(checkpoint, NetworkSpec(name="target", input_length=64), mode, seed=1)
        results.append(finetune(net, linear_bundle(p=64), config, mode))
    first, second = results
    assert first.score == second.score
    for pid, value in first.parameters.items():
        np.testing.assert_array_equal(second.parameters[pid], value)


@pytest.fixture(scope="module")
def medium_trunk():
    medium = synthetic_bundle(MEDIUM)
    net = build_network(NetworkSpec(name="medium", input_length=MEDIUM.length), ParameterRegistry(0))
    return train_single(net, medium, TrainConfig(updates=400, learning_rate=1e-2, min_learning_rate=1e-4, seed=0))


@pytest.mark.slow
def test_pretrained_trunk_beats_training_from_scratch(medium_trunk):
    small = synthetic_bundle(SMALL)
    spec = NetworkSpec(name="small", input_length=SMALL.length)
    transferred, scratch = [], []
    for seed in range(5):
        config = TrainConfig.transfer(epochs=None, updates=300, learning_rate=1e-2, min_learning_rate=1e-4, seed=seed)
        net = pretrained_network(medium_trunk, spec, TransferMode("full", "weight_share"), seed)
        finetune(net, small, config)
        transferred.append(validation_cost(net, small))

        fresh = build_network(spec, ParameterRegistry(seed))
        train_single(fresh, small, config)
        scratch.append(validation_cost(fresh, small))
    assert np.mean(transferred) < np.mean(scratch)
