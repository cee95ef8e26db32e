"""Adam, EMA parameter shadows and the patience-based learning-rate schedule."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from weightshare.autodiff import Parameter
from weightshare.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    # bias correction uses per-parameter update counts
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config) -> "AdamState":
        return cls(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)


def adam_step(state: AdamState, parameters: Mapping[str, Parameter], gradients: Mapping[str, np.ndarray]) -> None:
    """Bias-corrected Adam update in place for every parameter present in ``gradients``."""
    for pid, grad in gradients.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"adam_step: non-finite gradient for {pid!r}")
        if parameters[pid].shape != np.shape(grad):
            raise ShapeError(f"adam_step: gradient {np.shape(grad)} for {pid!r} of shape {parameters[pid].shape}")

    state.step += 1
    for pid, grad in gradients.items():
        param = parameters[pid]
        if not param.trainable:
            continue
        if pid not in state.first:
            state.first[pid] = np.zeros_like(param.values)
            state.second[pid] = np.zeros_like(param.values)
            state.counts[pid] = 0
        t = state.counts[pid] = state.counts[pid] + 1
        m, v = state.first[pid], state.second[pid]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        param.values[...] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class EMAState:
    """Shadow copy of every tracked parameter, smoothed after each optimizer step."""

    decay: float = 0.99
    shadows: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def track(cls, parameters: Iterable[Parameter], decay: float = 0.99) -> "EMAState":
        return cls(decay, {p.id: p.values.copy() for p in parameters})

    def copy(self) -> "EMAState":
        return EMAState(self.decay, {pid: v.copy() for pid, v in self.shadows.items()})


def ema_update(ema: EMAState, parameters: Iterable[Parameter]) -> None:
    """shadow <- decay * shadow + (1 - decay) * value for trainable parameters; frozen ones are copied."""
    params = list(parameters)
    missing = [p.id for p in params if p.id not in ema.shadows]
    if missing:
        raise ShapeError(f"ema_update: parameters {missing} have no shadow")
    for param in params:
        shadow = ema.shadows[param.id]
        if shadow.shape != param.shape:
            raise ShapeError(f"ema_update: {param.id!r} drifted from {shadow.shape} to {param.shape}")
        if not param.trainable:
            # a frozen value is its own average
            shadow[...] = param.values
            continue
        shadow *= ema.decay
        shadow += (1.0 - ema.decay) * param.values


@contextmanager
def shadows_applied(ema: EMAState, parameters: Iterable[Parameter]):
    """Swap the EMA shadows into ``parameters`` for the duration of the block."""
    params = [p for p in parameters if p.id in ema.shadows]
    backup = {p.id: p.values.copy() for p in params}
    try:
        for p in params:
            p.values[...] = ema.shadows[p.id]
        yield
    finally:
        for p in params:
            p.values[...] = backup[p.id]


@dataclass
class LRSchedule:
    learning_rate: float
    drop_factor: float = 2.0
    patience: int = 10
    min_learning_rate: float = 3e-5
    streak: int = 0
    exhausted: bool = False

    @classmethod
    def from_config(cls, config) -> "LRSchedule":
        return cls(config.learning_rate, config.lr_drop_factor, config.patience, config.min_learning_rate)


def lr_schedule_step(schedule: LRSchedule, improved: bool) -> tuple[float, bool]:
    """Record one validation outcome; returns the new rate and whether it dropped.

    A full patience window without improvement at the floor marks the schedule
    ``exhausted``.
    """
    if improved:
        schedule.streak = 0
        return schedule.learning_rate, False
    schedule.streak += 1
    if schedule.streak < schedule.patience:
        return schedule.learning_rate, False
    schedule.streak = 0
    if schedule.learning_rate <= schedule.min_learning_rate:
        schedule.exhausted = True
        return schedule.learning_rate, False
    schedule.learning_rate = max(schedule.learning_rate / schedule.drop_factor, schedule.min_learning_rate)
    logger.debug("learning rate dropped to %.3g", schedule.learning_rate)
    return schedule.learning_rate, True
