"""Seeded synthetic spectra for demos and smoke experiments.

Both data sets draw absorbance curves from Gaussian bands on a sloped baseline
and derive the target from one filter shared between them, so a trunk learned
on one carries over to the other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from utils.table_loaders import dump_yaml, write_frame
from weightshare.config import CONFIG_VERSION

logger = logging.getLogger(__name__)

FILTER_LENGTH = 9


@dataclass(frozen=True)
class SyntheticSpec:
    name: str
    samples: int
    length: int
    test_samples: int
    counts: tuple[int, int, int]
    band_shift: float = 0.0


MEDIUM = SyntheticSpec("medium", 5000, 96, 500, (3000, 750, 400))
SMALL = SyntheticSpec("small", 150, 64, 100, (100, 25, 15), band_shift=0.05)


def shared_filter(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    theta = rng.normal(0.0, 1.0, FILTER_LENGTH)
    return theta / np.linalg.norm(theta)


def make_spectra(rng: np.random.Generator, n: int, length: int, band_shift: float = 0.0, bands: int = 4) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, length)
    centers = rng.uniform(0.15, 0.85, (n, bands, 1)) + band_shift
    widths = rng.uniform(0.03, 0.12, (n, bands, 1))
    heights = rng.uniform(0.2, 1.0, (n, bands, 1))
    peaks = (heights * np.exp(-0.5 * ((grid - centers) / widths) ** 2)).sum(axis=1)
    baseline = rng.uniform(0.1, 0.3, (n, 1)) + rng.uniform(-0.1, 0.1, (n, 1)) * grid
    return peaks + baseline + rng.normal(0.0, 0.005, (n, length))


def make_targets(spectra: np.ndarray, theta: np.ndarray, rng: np.random.Generator, noise: float = 0.02) -> np.ndarray:
    """Mean rectified response of ``theta`` over the spectrum, shifted to stay positive."""
    response = np.stack([np.convolve(row, theta, mode="same") for row in spectra])
    y = np.maximum(response, 0.0).mean(axis=1) * 5.0 + 1.0
    return (y + rng.normal(0.0, noise, len(y)))[:, None]


def make_dataset(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, spec.length, spec.samples])
    n = spec.samples + spec.test_samples
    spectra = make_spectra(rng, n, spec.length, spec.band_shift)
    return spectra, make_targets(spectra, shared_filter(seed), rng)


def _frame(spectra: np.ndarray, targets: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(np.hstack([targets, spectra]))


def write_demo(
    out_dir: str | Path, seed: int = 0, specs: tuple[SyntheticSpec, SyntheticSpec] = (MEDIUM, SMALL)
) -> dict[str, Path]:
    """Write the medium and small data sets, a registry and one experiment config per kind."""
    out = Path(out_dir)
    written: dict[str, Path] = {}
    datasets = {}
    for spec in specs:
        spectra, targets = make_dataset(spec, seed)
        pool = slice(0, spec.samples)
        test = slice(spec.samples, None)
        written[spec.name] = write_frame(_frame(spectra[pool], targets[pool]), out / f"{spec.name}.csv")
        written[f"{spec.name}_test"] = write_frame(_frame(spectra[test], targets[test]), out / f"{spec.name}_test.csv")
        train, validation, holdout = spec.counts
        datasets[spec.name] = {
            "path": f"{spec.name}.csv",
            "test_path": f"{spec.name}_test.csv",
            "targets": 1,
            "header": True,
            "counts": {"train": train, "validation": validation, "holdout": holdout},
        }
    written["registry"] = dump_yaml({"version": CONFIG_VERSION, "datasets": datasets}, out / "datasets.yaml")

    common = {
        "version": CONFIG_VERSION,
        "registry": "datasets.yaml",
        "repetitions": 2,
        "seed": seed,
        "architectures": [1],
        "augmentation": {"multiplier": 2, "seed": seed},
        "output_dir": "runs",
    }
    medium, small = (spec.name for spec in specs)
    experiments = {
        "single": {"kind": "single", "datasets": [small], "train": {"updates": 300, "patience": 3}},
        "cotrain": {"kind": "cotrain", "datasets": [medium, small], "train": {"updates": 300, "patience": 3}},
        "transfer": {
            "kind": "transfer",
            "datasets": [medium, small],
            "train": {"updates": 300, "patience": 3},
            "transfer_train": {"epochs": 20, "patience": 5},
        },
    }
    for kind, body in experiments.items():
        written[kind] = dump_yaml({**common, **body, "output_dir": f"runs/{kind}"}, out / f"{kind}.yaml")
    logger.info("wrote demo data and configs to %s", out)
    return written
