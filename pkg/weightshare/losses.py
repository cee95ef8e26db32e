"""Training costs and evaluation metrics.

``rmse``, ``wrmse`` and ``decouple_penalty`` are differentiable and return
tensors; the remaining metrics work on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from weightshare import autodiff as ad
from weightshare.autodiff import Parameter, Tensor
from weightshare.errors import ConfigError, DataError, ShapeError, StatisticsError


@dataclass(frozen=True)
class TargetMeans:
    """Training-split mean of every target; denominators of WRMSE."""

    values: tuple[float, ...]
    units: str | None = None

    def __post_init__(self):
        if any(not v > 0 for v in self.values):
            raise DataError(f"target means must be strictly positive, got {self.values}")

    @classmethod
    def from_targets(cls, targets: np.ndarray, units: str | None = None) -> "TargetMeans":
        targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
        return cls(tuple(float(v) for v in targets.mean(axis=0)), units)

    def __len__(self) -> int:
        return len(self.values)


def _pair(predictions, targets) -> tuple[Tensor, Tensor]:
    pred = ad.as_tensor(predictions)
    true = ad.as_tensor(targets)
    if pred.values.size != true.values.size:
        raise ShapeError(f"predictions {pred.shape} and targets {true.shape} differ in size")
    if pred.values.size == 0:
        raise DataError("cannot score an empty set of predictions")
    if pred.shape != true.shape:
        true = Tensor(true.values.reshape(pred.shape))
    return pred, true


def rmse(predictions, targets) -> Tensor:
    pred, true = _pair(predictions, targets)
    err = ad.sub(pred, true)
    return ad.sqrt(ad.mean(ad.mul(err, err)))


def wrmse(predictions, targets, means: TargetMeans | tuple[float, ...]) -> Tensor:
    """Mean over targets of per-target RMSE divided by the training mean of that target."""
    pred, true = _pair(predictions, targets)
    values = np.asarray(means.values if isinstance(means, TargetMeans) else means, dtype=np.float64)
    if np.any(values <= 0):
        raise DataError(f"wrmse: target means must be positive, got {values.tolist()}")
    if pred.ndim == 1:
        pred = ad.reshape(pred, (-1, 1))
        true = Tensor(true.values.reshape(-1, 1))
    if pred.shape[1] != values.size:
        raise ShapeError(f"wrmse: {pred.shape[1]} target columns but {values.size} means")
    err = ad.sub(pred, true)
    per_target = ad.sqrt(ad.mean(ad.mul(err, err), axis=0))
    return ad.mean(ad.div(per_target, values))


def decouple_penalty(weight, lam: float, include_diagonal: bool = True) -> Tensor:
    """lam * sum_{i < p_out} sum_{i' >= i} sum_l |w[l, i] * w[l, i']| for a (p_in, p_out) matrix.

    ``include_diagonal=False`` starts the inner sum at ``i + 1``.
    """
    if lam < 0:
        raise ConfigError(f"decouple_penalty: lambda must be non-negative, got {lam}")
    w = weight.tensor if isinstance(weight, Parameter) else ad.as_tensor(weight)
    if w.ndim != 2:
        raise ShapeError(f"decouple_penalty: expected a matrix, got shape {w.shape}")
    p_out = w.shape[1]
    mask = np.triu(np.ones((p_out, p_out)), k=0 if include_diagonal else 1)
    mask[p_out - 1, :] = 0.0
    magnitude = ad.abs_(w)
    gram = ad.matmul(ad.transpose(magnitude, (1, 0)), magnitude)
    return ad.mul(ad.sum_(ad.mul(gram, mask)), lam)


# -- evaluation metrics ----------------------------------------------------------


def _errors(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predictions.values if isinstance(predictions, Tensor) else predictions, dtype=np.float64)
    true = np.asarray(targets.values if isinstance(targets, Tensor) else targets, dtype=np.float64)
    pred, true = pred.reshape(-1), true.reshape(-1)
    if pred.size != true.size:
        raise ShapeError(f"predictions ({pred.size}) and targets ({true.size}) differ in length")
    if pred.size == 0:
        raise DataError("cannot score an empty set of predictions")
    return true - pred, true


def mad(predictions, targets) -> float:
    """Median absolute deviation of the errors about their median."""
    err, _ = _errors(predictions, targets)
    return float(np.median(np.abs(err - np.median(err))))


def sep_r2_bias(predictions, targets) -> tuple[float, float, float]:
    err, true = _errors(predictions, targets)
    if err.size < 2:
        raise DataError("sep/r2/bias need at least two predictions")
    spread = np.sum((true - true.mean()) ** 2)
    if spread == 0:
        raise StatisticsError("r2 is undefined for constant targets")
    bias = float(err.mean())
    sep = float(np.sqrt(np.sum((err - bias) ** 2) / (err.size - 1)))
    r2 = float(1.0 - np.sum(err**2) / spread)
    return sep, r2, bias


@dataclass(frozen=True)
class MetricReport:
    rmse: tuple[float, ...]
    mad: tuple[float, ...]
    sep: tuple[float, ...]
    r2: tuple[float, ...]
    bias: tuple[float, ...]
    wrmse: float | None = None

    @property
    def n_targets(self) -> int:
        return len(self.rmse)

    def as_dict(self) -> dict[str, float]:
        """Flat metric map; multi-target metrics get a 1-based ``_j`` suffix."""
        out: dict[str, float] = {}
        for name in ("rmse", "mad", "sep", "r2", "bias"):
            values = getattr(self, name)
            if len(values) == 1:
                out[name] = values[0]
            else:
                out.update({f"{name}_{j + 1}": v for j, v in enumerate(values)})
        if self.wrmse is not None:
            out["wrmse"] = self.wrmse
        return out


def evaluate_predictions(predictions, targets, means: TargetMeans | None = None) -> MetricReport:
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(targets, dtype=np.float64)
    pred = pred.reshape(len(pred), -1)
    true = true.reshape(len(true), -1)
    if pred.shape != true.shape:
        raise ShapeError(f"predictions {pred.shape} and targets {true.shape} differ")
    columns = {"rmse": [], "mad": [], "sep": [], "r2": [], "bias": []}
    for j in range(true.shape[1]):
        sep, r2, bias = sep_r2_bias(pred[:, j], true[:, j])
        columns["rmse"].append(rmse(pred[:, j], true[:, j]).item())
        columns["mad"].append(mad(pred[:, j], true[:, j]))
        columns["sep"].append(sep)
        columns["r2"].append(r2)
        columns["bias"].append(bias)
    score = wrmse(pred, true, means).item() if means is not None else None
    return MetricReport(**{k: tuple(v) for k, v in columns.items()}, wrmse=score)
