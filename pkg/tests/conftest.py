import os

import hypothesis
import numpy as np
import pytest

os.environ.setdefault("WEIGHTSHARE_PROGRESS", "false")

from utils.table_loaders import dump_yaml, load_yaml  # noqa: E402
from weightshare.autodiff import ParameterRegistry  # noqa: E402
from weightshare.config import SplitCounts, get_settings  # noqa: E402
from weightshare.dataio import DatasetBundle, split_repetition  # noqa: E402
from weightshare.losses import TargetMeans  # noqa: E402
from weightshare.synthetic import SyntheticSpec, make_dataset, write_demo  # noqa: E402

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

get_settings.cache_clear()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs")


@pytest.fixture
def registry():
    return ParameterRegistry(seed=0)


def linear_bundle(n=200, p=64, seed=0, noise=0.05, name="linear", counts=(140, 40, 20)):
    """y = w . x + noise on smooth random spectra, already split."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, 8))
    grid = np.linspace(0.0, 1.0, p)
    spectra = base @ np.stack([np.sin((k + 1) * np.pi * grid) for k in range(8)]) / 4.0
    w = np.random.default_rng(seed + 1).normal(size=p) / np.sqrt(p)
    targets = (spectra @ w + 2.0 + rng.normal(0.0, noise, n))[:, None]
    order = rng.permutation(n)
    train, val, hold = np.cumsum(counts)
    splits = {
        "train": np.sort(order[:train]),
        "validation": np.sort(order[train:val]),
        "holdout": np.sort(order[val:hold]),
        "test": np.sort(order[hold:]) if hold < n else np.sort(order[val:hold]),
    }
    means = TargetMeans.from_targets(targets[splits["train"]])
    return DatasetBundle(name, spectra, targets, splits, means)


@pytest.fixture
def small_bundle():
    return linear_bundle()


TINY_SPECS = (
    SyntheticSpec("medium", 120, 96, 20, (60, 20, 10)),
    SyntheticSpec("small", 60, 64, 20, (30, 10, 10), band_shift=0.05),
)


@pytest.fixture
def demo_dir(tmp_path):
    """Tiny synthetic data sets with a registry and one config per experiment kind."""
    out = tmp_path / "demo"
    write_demo(out, seed=0, specs=TINY_SPECS)
    return out


def tiny_config(demo_dir, kind, **changes):
    """Rewrite a demo config with a training budget small enough for tests."""
    path = demo_dir / f"{kind}.yaml"
    data = load_yaml(path)
    data["train"] = {"updates": 6, "batch_size": 16, "patience": 3}
    data["transfer_train"] = {"epochs": 2, "batch_size": 16}
    data.update(changes)
    return dump_yaml(data, demo_dir / f"{kind}_tiny.yaml")


def synthetic_bundle(spec: SyntheticSpec, seed=0):
    """A demo data set split by its own counts; the extra test rows stay in the pool."""
    spectra, targets = make_dataset(spec, seed)
    train, validation, holdout = spec.counts
    counts = SplitCounts(train=train, validation=validation, holdout=holdout)
    return split_repetition(DatasetBundle(spec.name, spectra, targets), counts, 0, seed)
