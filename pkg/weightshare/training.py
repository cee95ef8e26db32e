"""Single-network training and alternating co-training over a shared trunk."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence

import numpy as np
from tqdm import tqdm

from weightshare import autodiff as ad
from weightshare.autodiff import Parameter, Tape
from weightshare.checkpoint import Checkpoint, restore, snapshot
from weightshare.config import TrainConfig, get_settings
from weightshare.dataio import DatasetBundle
from weightshare.errors import ConfigError, DataError, WeightShareError
from weightshare.layers import Mode, Network, predict
from weightshare.losses import MetricReport, decouple_penalty, evaluate_predictions, rmse, wrmse
from weightshare.optim import AdamState, EMAState, LRSchedule, adam_step, ema_update, lr_schedule_step, shadows_applied

logger = logging.getLogger(__name__)


def data_cost(net: Network, predictions, targets, bundle: DatasetBundle):
    if net.spec.cost == "wrmse":
        if bundle.target_means is None:
            raise DataError(f"{bundle.name}: wrmse needs strictly positive training target means")
        return wrmse(predictions, targets, bundle.target_means)
    return rmse(predictions, targets)


def network_cost(net: Network, spectra, targets, bundle: DatasetBundle, mode: Mode = "train", rng=None):
    """Training cost of one batch: RMSE or WRMSE, plus the decoupling penalty when enabled."""
    cost = data_cost(net, net.forward(spectra, mode, rng), targets, bundle)
    if net.spec.decouple_lambda > 0:
        penalty = decouple_penalty(net.decouple_weight, net.spec.decouple_lambda, net.spec.decouple_diagonal)
        cost = ad.add(cost, penalty)
    return cost


def validation_cost(net: Network, bundle: DatasetBundle, ema: EMAState | None = None, split: str = "validation") -> float:
    """Eval-mode cost on ``split`` with EMA shadows swapped in (penalty excluded)."""
    spectra, targets = bundle.subset(split)
    if len(spectra) == 0:
        raise DataError(f"{bundle.name}: empty {split} split")
    batch_size = get_settings().eval_batch_size
    if ema is None:
        return data_cost(net, predict(net, spectra, batch_size), targets, bundle).item()
    with shadows_applied(ema, net.parameters()):
        return data_cost(net, predict(net, spectra, batch_size), targets, bundle).item()


def evaluate_split(net: Network, bundle: DatasetBundle, split: str) -> MetricReport:
    spectra, targets = bundle.subset(split)
    predictions = predict(net, spectra, get_settings().eval_batch_size)
    return evaluate_predictions(predictions, targets, bundle.target_means)


def network_meta(net: Network, config: TrainConfig) -> dict:
    return {
        **net.meta,
        "architecture_id": net.architecture_id,
        "input_length": net.input_length,
        "networks": [net.spec.model_dump()],
        "config": config.model_dump(mode="json"),
    }


def batches(rng: np.random.Generator, n: int, batch_size: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches, one reshuffled pass over ``n`` rows at a time.

    A trailing batch of a single row is dropped; batch norm needs two.
    """
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) >= 2:
                yield idx


def steps_per_epoch(n: int, batch_size: int) -> int:
    """Batches that :func:`batches` yields per pass over ``n`` rows."""
    return max(1, n // batch_size + (n % batch_size >= 2))


def _train_rows(bundle: DatasetBundle) -> tuple[np.ndarray, np.ndarray]:
    spectra, targets = bundle.subset("train")
    if len(spectra) == 0:
        raise DataError(f"{bundle.name}: empty training split")
    if len(spectra) < 2:
        raise DataError(f"{bundle.name}: training needs at least two samples, got {len(spectra)}")
    return spectra, targets


def gradient_step(
    net: Network,
    spectra: np.ndarray,
    targets: np.ndarray,
    bundle: DatasetBundle,
    adam: AdamState,
    rng: np.random.Generator,
) -> float:
    """One Adam step on ``net``'s own cost; returns the batch cost."""
    params = net.trainable_parameters()
    with Tape() as tape:
        cost = network_cost(net, spectra, targets, bundle, "train", rng)
    gradients = ad.backward(tape, cost, params)
    adam_step(adam, {p.id: p for p in params}, gradients)
    return cost.item()


def _finish(net_registry, ema: EMAState, best: Checkpoint) -> Checkpoint:
    # leave the registry holding the selected model: EMA weights with the saved BN statistics
    restore(best, net_registry, ema)
    net_registry.assign(best.ema_values(), best.buffers)
    return best


def train_single(net: Network, bundle: DatasetBundle, config: TrainConfig) -> Checkpoint:
    """Mini-batch Adam training of one network, keeping the best EMA validation checkpoint.

    Stops after ``config.epochs`` passes or ``config.updates`` steps, whichever
    comes first, or when the learning rate sits at its floor for a full patience
    window (``stop_at_min_lr``).  On return the registry holds the selected EMA
    weights.
    """
    spectra, targets = _train_rows(bundle)
    rng = np.random.default_rng(config.seed)
    adam = AdamState.from_config(config)
    schedule = LRSchedule.from_config(config)
    ema = EMAState.track(net.parameters(), config.ema_decay)
    meta = network_meta(net, config)

    best = snapshot(net.registry, ema, 0, validation_cost(net, bundle, ema), config.seed, **meta)
    per_epoch = steps_per_epoch(len(spectra), config.batch_size)
    epochs = config.epochs if config.epochs is not None else math.ceil(config.updates / per_epoch)
    budget = config.updates if config.updates is not None else epochs * per_epoch
    stream = batches(rng, len(spectra), config.batch_size)
    history: list[float] = []
    updates = 0

    logger.info("training %s on %s: %d rows, up to %d epochs", net.name, bundle.name, len(spectra), epochs)
    progress = tqdm(range(epochs), desc=f"train {net.name}", disable=not get_settings().progress, leave=False)
    for epoch in progress:
        for _ in range(per_epoch):
            if updates >= budget:
                break
            idx = next(stream)
            gradient_step(net, spectra[idx], targets[idx], bundle, adam, rng)
            ema_update(ema, net.parameters())
            updates += 1

        score = validation_cost(net, bundle, ema)
        history.append(score)
        logger.info("%s epoch %d: validation %.6g", net.name, epoch + 1, score)
        improved = score < best.score
        if improved:
            best = snapshot(net.registry, ema, updates, score, config.seed, **meta)
        adam.learning_rate, dropped = lr_schedule_step(schedule, improved)
        if dropped:
            logger.info("%s epoch %d: learning rate -> %.3g", net.name, epoch + 1, adam.learning_rate)
        progress.set_postfix(val=f"{score:.4g}", lr=f"{adam.learning_rate:.2g}")
        if updates >= budget or (schedule.exhausted and config.stop_at_min_lr):
            break

    best.meta["history"] = history
    logger.info("%s: best validation %.6g at update %d", net.name, best.score, best.update)
    return _finish(net.registry, ema, best)


def _check_cotrain(nets: Sequence[Network], bundles: Sequence[DatasetBundle], config: TrainConfig) -> None:
    if len(nets) != len(bundles):
        raise ConfigError(f"cotrain: {len(nets)} networks but {len(bundles)} data sets")
    if not nets:
        raise ConfigError("cotrain: no networks given")
    registry = nets[0].registry
    if any(net.registry is not registry for net in nets):
        raise WeightShareError("cotrain: networks must be built from one parameter registry")
    if len({net.architecture_id for net in nets}) != 1:
        raise WeightShareError("cotrain: networks use different trunk architectures")
    if len({net.name for net in nets}) != len(nets):
        raise ConfigError("cotrain: network names must be unique")
    if config.cost_weights is not None and len(config.cost_weights) != len(nets):
        raise ConfigError(f"cotrain: {len(config.cost_weights)} cost weights for {len(nets)} networks")


def _union(nets: Sequence[Network]) -> list[Parameter]:
    seen: dict[str, Parameter] = {}
    for net in nets:
        for param in net.parameters():
            seen.setdefault(param.id, param)
    return list(seen.values())


def cotrain(nets: Sequence[Network], bundles: Sequence[DatasetBundle], config: TrainConfig) -> Checkpoint:
    """Co-train networks sharing one trunk.

    Each round draws one batch per data set.  In ``alternate`` mode every network
    then takes its own Adam step in the configured order; in ``weighted_sum`` mode
    the weighted costs are summed into one step.  Validation runs once per pass
    over the largest training set and the checkpoint minimizing the summed EMA
    validation cost is kept.
    """
    _check_cotrain(nets, bundles, config)
    registry = nets[0].registry
    rows = [_train_rows(bundle) for bundle in bundles]
    rng = np.random.default_rng(config.seed)
    adam = AdamState.from_config(config)
    schedule = LRSchedule.from_config(config)
    params = _union(nets)
    ema = EMAState.track(params, config.ema_decay)
    weights = config.cost_weights or [1.0] * len(nets)
    meta = {
        "architecture_id": nets[0].architecture_id,
        "input_length": nets[0].input_length,
        "networks": [net.spec.model_dump() for net in nets],
        "config": config.model_dump(mode="json"),
    }

    def summed_validation() -> float:
        return sum(validation_cost(net, bundle, ema) for net, bundle in zip(nets, bundles))

    best = snapshot(registry, ema, 0, summed_validation(), config.seed, **meta)
    rounds_per_epoch = max(steps_per_epoch(len(x), config.batch_size) for x, _ in rows)
    budget = config.updates if config.updates is not None else config.epochs * rounds_per_epoch
    streams = [batches(rng, len(x), config.batch_size) for x, _ in rows]
    history: list[float] = []

    logger.info(
        "co-training %s for %d rounds (%s), validating every %d rounds",
        [net.name for net in nets], budget, config.cotrain_mode, rounds_per_epoch,
    )
    progress = tqdm(range(budget), desc="cotrain", disable=not get_settings().progress, leave=False)
    for round_index in progress:
        picks = [next(stream) for stream in streams]
        if config.cotrain_mode == "alternate":
            for net, bundle, (x, y), idx in zip(nets, bundles, rows, picks):
                gradient_step(net, x[idx], y[idx], bundle, adam, rng)
                ema_update(ema, params)
        else:
            trainable = [p for p in params if p.trainable]
            with Tape() as tape:
                costs = [
                    ad.mul(network_cost(net, x[idx], y[idx], bundle, "train", rng), alpha)
                    for net, bundle, (x, y), idx, alpha in zip(nets, bundles, rows, picks, weights)
                ]
                total = costs[0]
                for cost in costs[1:]:
                    total = ad.add(total, cost)
            gradients = ad.backward(tape, total, trainable)
            adam_step(adam, {p.id: p for p in trainable}, gradients)
            ema_update(ema, params)

        done = round_index + 1
        if done % rounds_per_epoch and done != budget:
            continue
        score = summed_validation()
        history.append(score)
        logger.info("round %d: summed validation %.6g", done, score)
        improved = score < best.score
        if improved:
            best = snapshot(registry, ema, done, score, config.seed, **meta)
        adam.learning_rate, dropped = lr_schedule_step(schedule, improved)
        if dropped:
            logger.info("round %d: learning rate -> %.3g", done, adam.learning_rate)
        progress.set_postfix(val=f"{score:.4g}", lr=f"{adam.learning_rate:.2g}")
        if schedule.exhausted and config.stop_at_min_lr:
            logger.info("learning rate floor exhausted after %d rounds", done)
            break

    best.meta["history"] = history
    logger.info("co-training: best summed validation %.6g at round %d", best.score, best.update)
    return _finish(registry, ema, best)
