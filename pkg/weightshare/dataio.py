"""Data set loading, paired repetition splits and scatter augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from utils.table_loaders import read_raw_rows
from weightshare.config import AugmentationConfig, DatasetRegistry, SplitCounts
from weightshare.errors import DataError
from weightshare.losses import TargetMeans

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "holdout", "test")


@dataclass(frozen=True)
class DatasetBundle:
    """Spectra (n x p) and targets (n x t) plus named index sets into them."""

    name: str
    spectra: np.ndarray
    targets: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    target_means: TargetMeans | None = None
    units: str | None = None

    def __post_init__(self):
        if self.spectra.ndim != 2 or self.targets.ndim != 2:
            raise DataError(f"{self.name}: spectra and targets must be matrices")
        if len(self.spectra) != len(self.targets):
            raise DataError(f"{self.name}: {len(self.spectra)} spectra but {len(self.targets)} target rows")

    @property
    def n_samples(self) -> int:
        return len(self.spectra)

    @property
    def input_length(self) -> int:
        return self.spectra.shape[1]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    def indices(self, split: str) -> np.ndarray:
        try:
            return self.splits[split]
        except KeyError:
            raise DataError(f"{self.name}: no {split!r} split (have {sorted(self.splits)})") from None

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.spectra[idx], self.targets[idx]

    def split_sizes(self) -> dict[str, int]:
        return {name: len(idx) for name, idx in self.splits.items()}

    def with_spectra(self, spectra: np.ndarray) -> "DatasetBundle":
        """Same rows and splits, new spectra (e.g. after resizing)."""
        if len(spectra) != self.n_samples:
            raise DataError(f"{self.name}: replacement spectra have {len(spectra)} rows, expected {self.n_samples}")
        return replace(self, spectra=np.asarray(spectra, dtype=np.float64))


def load_csv(path: str | Path, targets: int, header: bool = False, name: str | None = None) -> DatasetBundle:
    """Rows of ``targets`` leading target values followed by the spectrum."""
    path = Path(path)
    if targets < 1:
        raise DataError(f"{path}: need at least one target column, got {targets}")
    try:
        raw = read_raw_rows(path, header)
    except FileNotFoundError:
        raise DataError(f"data file {path} does not exist") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: ragged rows: {exc}") from exc
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no data rows") from None
    if raw.empty:
        raise DataError(f"{path}: no data rows")

    offset = 2 if header else 1
    width = raw.shape[1]
    if targets >= width:
        raise DataError(f"{path}: row {offset} has {width} fields, need more than {targets} target columns")
    short = raw.isna().any(axis=1).to_numpy()
    if short.any():
        row = int(np.argmax(short))
        count = int(raw.iloc[row].notna().sum())
        raise DataError(f"{path}: row {row + offset} has {count} fields, expected {width}")

    values = raw.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        raise DataError(f"{path}: row {row + offset}, column {col + 1}: non-numeric field {raw.iat[row, col]!r}")

    matrix = values.to_numpy(dtype=np.float64)
    logger.info("loaded %s: %d rows, %d targets, %d spectral points", path, len(matrix), targets, width - targets)
    return DatasetBundle(name or path.stem, matrix[:, targets:].copy(), matrix[:, :targets].copy())


def load_bundle(registry: DatasetRegistry, name: str) -> DatasetBundle:
    """Load a registry data set; a separate test file becomes a fixed ``test`` split."""
    entry = registry.entry(name)
    main = load_csv(registry.resolve(entry.path), entry.targets, entry.header, name)
    if entry.test_path is None:
        return replace(main, units=entry.units)
    test = load_csv(registry.resolve(entry.test_path), entry.targets, entry.header, name)
    if test.input_length != main.input_length:
        raise DataError(f"{name}: test spectra have length {test.input_length}, training data {main.input_length}")
    n = main.n_samples
    return DatasetBundle(
        name,
        np.vstack([main.spectra, test.spectra]),
        np.vstack([main.targets, test.targets]),
        {"test": np.arange(n, n + test.n_samples)},
        units=entry.units,
    )


def _target_means(targets: np.ndarray, units: str | None) -> TargetMeans | None:
    means = targets.mean(axis=0)
    if np.all(means > 0):
        return TargetMeans(tuple(float(v) for v in means), units)
    logger.debug("training targets have non-positive means %s; wrmse unavailable", means.tolist())
    return None


def split_repetition(
    bundle: DatasetBundle,
    counts: SplitCounts,
    repetition: int,
    seed: int,
    rotating_test: int | None = None,
) -> DatasetBundle:
    """Deterministic train/validation/holdout draw for one repetition.

    Every strategy sees the same split for the same ``(seed, repetition)``.  With
    ``rotating_test`` each repetition takes its own block of test rows from one
    seed-wide permutation, so test sets never overlap.
    """
    if repetition < 0:
        raise DataError(f"repetition index must be non-negative, got {repetition}")
    n = bundle.n_samples
    fixed_test = bundle.splits.get("test")
    pool = np.setdiff1d(np.arange(n), fixed_test) if fixed_test is not None else np.arange(n)

    splits: dict[str, np.ndarray] = {}
    if rotating_test is not None:
        order = np.random.default_rng(seed).permutation(pool)
        start, stop = repetition * rotating_test, (repetition + 1) * rotating_test
        if stop > len(order):
            raise DataError(
                f"{bundle.name}: {len(order)} samples allow at most {len(order) // rotating_test} "
                f"non-overlapping test sets of {rotating_test}; repetition {repetition} is out of range"
            )
        splits["test"] = np.sort(order[start:stop])
        pool = np.setdiff1d(pool, splits["test"])
    elif fixed_test is not None:
        splits["test"] = fixed_test

    if counts.total > len(pool):
        raise DataError(f"{bundle.name}: split needs {counts.total} samples but only {len(pool)} are available")
    chosen = np.random.default_rng([seed, repetition]).permutation(pool)[: counts.total]
    bounds = np.cumsum([counts.train, counts.validation, counts.holdout])
    splits["train"] = np.sort(chosen[: bounds[0]])
    splits["validation"] = np.sort(chosen[bounds[0] : bounds[1]])
    splits["holdout"] = np.sort(chosen[bounds[1] : bounds[2]])

    means = _target_means(bundle.targets[splits["train"]], bundle.units)
    return replace(bundle, splits=splits, target_means=means)


def augment(bundle: DatasetBundle, config: AugmentationConfig, repetition: int = 0) -> DatasetBundle:
    """Append ``multiplier - 1`` scattered copies of every train and validation spectrum.

    Each copy is ``mul * x + off + slope * ramp`` with ``ramp`` running from -0.5
    to 0.5 over the spectrum; offsets and slopes scale with the global standard
    deviation of the training absorbances.
    """
    if config.multiplier == 1:
        return bundle
    rng = np.random.default_rng([config.seed, repetition])
    sigma = float(bundle.spectra[bundle.indices("train")].std())
    ramp = np.linspace(-0.5, 0.5, bundle.input_length)
    spectra, targets = [bundle.spectra], [bundle.targets]
    splits = dict(bundle.splits)
    next_row = bundle.n_samples

    for split in ("train", "validation"):
        idx = bundle.indices(split)
        source = np.repeat(idx, config.multiplier - 1)
        k = len(source)
        mul = rng.uniform(1 - config.multiplicative_scale, 1 + config.multiplicative_scale, (k, 1))
        off = rng.uniform(-config.offset_scale, config.offset_scale, (k, 1)) * sigma
        slope = rng.uniform(-config.slope_scale, config.slope_scale, (k, 1)) * sigma
        copies = mul * bundle.spectra[source] + off + slope * ramp
        if config.noise_scale > 0:
            copies = copies + rng.normal(0.0, config.noise_scale * sigma, copies.shape)
        spectra.append(copies)
        targets.append(bundle.targets[source])
        splits[split] = np.concatenate([idx, np.arange(next_row, next_row + k)])
        next_row += k

    logger.debug("augmented %s x%d: %d rows", bundle.name, config.multiplier, next_row)
    return replace(bundle, spectra=np.vstack(spectra), targets=np.vstack(targets), splits=splits)
