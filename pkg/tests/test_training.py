import numpy as np
import pytest

from tests.conftest import linear_bundle, synthetic_bundle
from weightshare import autodiff as ad
from weightshare.autodiff import ParameterRegistry, Tape
from weightshare.config import TrainConfig
from weightshare.errors import ConfigError, DataError, WeightShareError
from weightshare.layers import NetworkSpec, build_network
from weightshare.synthetic import MEDIUM, SMALL
from weightshare.training import batches, cotrain, network_cost, steps_per_epoch, train_single, validation_cost


def fast_config(**overrides):
    settings = {
        "epochs": 3,
        "batch_size": 32,
        "learning_rate": 1e-2,
        "min_learning_rate": 1e-4,
        "patience": 5,
        "seed": 0,
    }
    return TrainConfig(**{**settings, **overrides})


def network(name="linear", p=64, seed=0, registry=None, **spec):
    return build_network(NetworkSpec(name=name, input_length=p, **spec), registry or ParameterRegistry(seed))


def test_batches_reshuffle_and_drop_single_rows():
    stream = batches(np.random.default_rng(0), 9, 4)
    first_pass = [next(stream) for _ in range(2)]
    assert [len(b) for b in first_pass] == [4, 4]
    seen = np.concatenate(first_pass)
    assert len(set(seen.tolist())) == 8
    assert len(next(stream)) == 4


def test_training_reduces_validation_cost(small_bundle):
    net = network()
    initial = validation_cost(net, small_bundle)
    checkpoint = train_single(net, small_bundle, fast_config(epochs=40))
    assert checkpoint.score < 0.5 * initial
    assert validation_cost(net, small_bundle) == pytest.approx(checkpoint.score, rel=1e-12)
    assert len(checkpoint.meta["history"]) <= 40


def test_zero_epochs_returns_initialization(small_bundle):
    net = network()
    before = net.registry.parameter_values()
    checkpoint = train_single(net, small_bundle, fast_config(epochs=0))
    assert checkpoint.update == 0
    assert checkpoint.meta["history"] == []
    for pid, value in before.items():
        np.testing.assert_array_equal(checkpoint.parameters[pid], value)
        np.testing.assert_array_equal(net.registry[pid].values, value)


def test_training_is_deterministic(small_bundle):
    first = train_single(network(seed=3), small_bundle, fast_config())
    second = train_single(network(seed=3), small_bundle, fast_config())
    assert first.score == second.score
    assert first.update == second.update
    for pid, value in first.parameters.items():
        np.testing.assert_array_equal(second.parameters[pid], value)
    for pid, value in first.shadows.items():
        np.testing.assert_array_equal(second.shadows[pid], value)


def test_update_budget_caps_training(small_bundle):
    checkpoint = train_single(network(), small_bundle, fast_config(epochs=None, updates=7))
    # 140 training rows at batch 32 make five steps per epoch
    assert len(checkpoint.meta["history"]) == 2
    assert checkpoint.update <= 7


def test_exhausted_schedule_stops_at_first_stall(small_bundle):
    config = fast_config(epochs=50, learning_rate=1e-9, min_learning_rate=1e-9, patience=1)
    best = validation_cost(network(), small_bundle)
    checkpoint = train_single(network(), small_bundle, config)
    history = checkpoint.meta["history"]
    expected = len(history)
    for epoch, score in enumerate(history):
        if not score < best:
            expected = epoch + 1
            break
        best = score
    assert len(history) == expected


def test_restored_checkpoint_reproduces_score(small_bundle):
    net = network()
    checkpoint = train_single(net, small_bundle, fast_config())
    for p in net.parameters():
        p.values[...] = 0.0
    net.registry.assign(checkpoint.ema_values(), checkpoint.buffers)
    assert validation_cost(net, small_bundle) == checkpoint.score


def test_empty_training_split_is_rejected(small_bundle):
    empty = small_bundle.__class__(
        small_bundle.name,
        small_bundle.spectra,
        small_bundle.targets,
        {**small_bundle.splits, "train": np.array([], dtype=int)},
        small_bundle.target_means,
    )
    with pytest.raises(DataError):
        train_single(network(), empty, fast_config())


def test_wrmse_needs_target_means(small_bundle):
    bundle = small_bundle.__class__(small_bundle.name, small_bundle.spectra, small_bundle.targets, small_bundle.splits)
    with pytest.raises(DataError):
        train_single(network(cost="wrmse"), bundle, fast_config())


def test_decoupling_penalty_trains(small_bundle):
    checkpoint = train_single(network(decouple_lambda=0.1), small_bundle, fast_config(epochs=2))
    assert np.isfinite(checkpoint.score)


def cotrain_pair(seed=0):
    registry = ParameterRegistry(seed)
    nets = [network("short", 64, registry=registry), network("long", 96, registry=registry)]
    bundles = [linear_bundle(p=64, seed=seed, name="short"), linear_bundle(p=96, seed=seed + 10, name="long")]
    return registry, nets, bundles


def test_cotrain_rejects_separate_registries(small_bundle):
    nets = [network("a", seed=0), network("b", seed=1)]
    with pytest.raises(WeightShareError, match="one parameter registry"):
        cotrain(nets, [small_bundle, small_bundle], fast_config())


def test_cotrain_checks_inputs(small_bundle):
    registry = ParameterRegistry(0)
    nets = [network("a", registry=registry), network("b", registry=registry)]
    with pytest.raises(ConfigError):
        cotrain(nets, [small_bundle], fast_config())
    with pytest.raises(ConfigError):
        cotrain(nets, [small_bundle, small_bundle], fast_config(cost_weights=[1.0]))
    mixed = [network("c", registry=registry), network("d", registry=registry, architecture_id=2)]
    with pytest.raises(WeightShareError):
        cotrain(mixed, [small_bundle, small_bundle], fast_config())


def test_cotrain_validates_every_pass_and_at_the_end():
    _, nets, bundles = cotrain_pair()
    checkpoint = cotrain(nets, bundles, fast_config(epochs=None, updates=6))
    # five rounds cover the 140 training rows at batch 32
    assert len(checkpoint.meta["history"]) == 2


@pytest.mark.parametrize("mode", ["alternate", "weighted_sum"])
def test_cotrain_updates_shared_trunk_and_both_heads(mode):
    registry, nets, bundles = cotrain_pair()
    before = registry.parameter_values()
    checkpoint = cotrain(nets, bundles, fast_config(epochs=8, cotrain_mode=mode))

    assert checkpoint.update > 0
    assert len(checkpoint.meta["history"]) == 8
    assert [n["name"] for n in checkpoint.meta["networks"]] == ["short", "long"]
    assert checkpoint.score == pytest.approx(sum(validation_cost(n, b) for n, b in zip(nets, bundles)), rel=1e-12)
    for net in nets:
        assert any(not np.array_equal(p.values, before[p.id]) for p in net.head_parameters())
        assert any(not np.array_equal(p.values, before[p.id]) for p in net.trunk_parameters())


def test_cotrain_is_deterministic():
    _, nets_a, bundles = cotrain_pair()
    _, nets_b, _ = cotrain_pair()
    first = cotrain(nets_a, bundles, fast_config(epochs=1))
    second = cotrain(nets_b, bundles, fast_config(epochs=1))
    assert first.score == second.score
    for pid, value in first.parameters.items():
        np.testing.assert_array_equal(second.parameters[pid], value)


def test_steps_per_epoch_skips_single_row_tails():
    assert steps_per_epoch(140, 32) == 5
    assert steps_per_epoch(129, 128) == 1
    assert steps_per_epoch(130, 128) == 2
    assert steps_per_epoch(5, 128) == 1


def test_cotrain_validates_after_real_passes_over_the_largest_set():
    registry = ParameterRegistry(0)
    nets = [network("short", 64, registry=registry), network("long", 96, registry=registry)]
    bundles = [
        linear_bundle(n=60, p=64, name="short", counts=(33, 10, 5)),
        linear_bundle(n=60, p=96, seed=10, name="long", counts=(20, 10, 5)),
    ]
    checkpoint = cotrain(nets, bundles, fast_config(epochs=None, updates=6, batch_size=16))
    # 33 rows at batch 16 give two batches a pass, the leftover row is never drawn
    assert len(checkpoint.meta["history"]) == 3


@pytest.mark.parametrize("alphas", [(1.0, 1.0), (1.0, 0.5)])
def test_joint_gradient_is_the_weighted_sum_of_sub_step_gradients(alphas):
    _, nets, bundles = cotrain_pair()
    picks = [bundle.subset("train") for bundle in bundles]
    params = list({p.id: p for net in nets for p in net.parameters()}.values())

    def cost(k):
        x, y = picks[k]
        return network_cost(nets[k], x[:32], y[:32], bundles[k], "train", np.random.default_rng(k))

    separate = []
    for k in range(2):
        with Tape() as tape:
            loss = cost(k)
        separate.append(ad.backward(tape, loss, params))
    with Tape() as tape:
        total = ad.add(ad.mul(cost(0), alphas[0]), ad.mul(cost(1), alphas[1]))
    joint = ad.backward(tape, total, params)

    for p in params:
        expected = alphas[0] * separate[0][p.id] + alphas[1] * separate[1][p.id]
        np.testing.assert_allclose(joint[p.id], expected, rtol=1e-10, atol=1e-12)
    for k, other in ((0, 1), (1, 0)):
        assert all(not np.any(separate[k][p.id]) for p in nets[other].head_parameters())
        assert any(np.any(separate[k][p.id]) for p in nets[k].trunk_parameters())


@pytest.mark.slow
def test_cotraining_helps_the_small_set_against_training_from_scratch():
    medium, small = synthetic_bundle(MEDIUM), synthetic_bundle(SMALL)
    shared, alone = [], []
    for seed in range(5):
        config = TrainConfig(updates=150, seed=seed)
        registry = ParameterRegistry(seed)
        nets = [
            build_network(NetworkSpec(name="medium", input_length=MEDIUM.length), registry),
            build_network(NetworkSpec(name="small", input_length=SMALL.length), registry),
        ]
        cotrain(nets, [medium, small], config)
        shared.append(validation_cost(nets[1], small))

        net = build_network(NetworkSpec(name="small", input_length=SMALL.length), ParameterRegistry(seed))
        train_single(net, small, config)
        alone.append(validation_cost(net, small))
    assert np.mean(shared) <= 1.1 * np.mean(alone)
    assert np.mean(shared) < np.mean(alone)
