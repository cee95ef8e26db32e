"""Experiment runner: paired repetitions, architecture selection and report tables."""

from __future__ import annotations

import io
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from rich.console import Console
from rich.table import Table

from utils.table_loaders import read_score_table, write_frame, write_text
from weightshare.autodiff import ParameterRegistry
from weightshare.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from weightshare.config import (
    STRATEGY_LABELS,
    DatasetEntry,
    DatasetRegistry,
    ExperimentConfig,
    get_settings,
    load_registry,
)
from weightshare.dataio import DatasetBundle, augment, load_bundle, split_repetition
from weightshare.errors import ConfigError, DataError, StatisticsError
from weightshare.layers import Network, NetworkSpec, build_network
from weightshare.losses import MetricReport
from weightshare.statcompare import (
    ComparisonTable,
    TestResult,
    f_variance_test,
    friedman_iman_davenport,
    nemenyi_cd,
    rank_groups,
    summary_table,
    wilcoxon_signed_rank,
)
from weightshare.training import cotrain, evaluate_split, train_single, validation_cost
from weightshare.transfer import choose_resize, finetune, pretrained_network, resize_bundle, strategy_mode

logger = logging.getLogger(__name__)

RECORD_KEYS = ("repetition", "dataset", "strategy", "architecture_id", "holdout_score", "checkpoint")


@dataclass
class RunRecord:
    repetition: int
    dataset: str
    strategy: str
    architecture_id: int
    holdout_score: float
    metrics: dict[str, float]
    checkpoint: str
    wall_time: float = 0.0

    def row(self) -> dict:
        return {
            "repetition": self.repetition,
            "dataset": self.dataset,
            "strategy": self.strategy,
            "architecture_id": self.architecture_id,
            "holdout_score": self.holdout_score,
            "checkpoint": self.checkpoint,
            **self.metrics,
        }


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    output_dir: Path
    files: list[Path] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return records_frame(self.records)


def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([r.row() for r in records])
    if frame.empty:
        return pd.DataFrame(columns=list(RECORD_KEYS))
    return frame.sort_values(["dataset", "strategy", "repetition"], kind="stable").reset_index(drop=True)


def network_spec(name: str, entry: DatasetEntry, input_length: int, architecture_id: int) -> NetworkSpec:
    return NetworkSpec(
        name=name,
        architecture_id=architecture_id,
        input_length=input_length,
        fc1=entry.fc1,
        fc2=entry.fc2,
        cost=entry.cost,
        decouple_lambda=entry.decouple_lambda,
    )


def run_seed(master: int, *keys: int) -> int:
    """Seed shared by every strategy for the same (master, keys)."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def _selection_split(bundle: DatasetBundle) -> str:
    return "holdout" if len(bundle.splits.get("holdout", ())) else "validation"


@dataclass
class _Candidate:
    net: Network
    bundle: DatasetBundle
    checkpoint: Checkpoint

    @property
    def holdout(self) -> float:
        return validation_cost(self.net, self.bundle, None, _selection_split(self.bundle))


# -- one repetition --------------------------------------------------------------


def prepare_bundles(
    config: ExperimentConfig, registry: DatasetRegistry, bundles: dict[str, DatasetBundle], repetition: int
) -> dict[str, DatasetBundle]:
    prepared = {}
    for name, bundle in bundles.items():
        entry = registry.entry(name)
        split = split_repetition(bundle, registry.counts_for(name), repetition, config.seed, entry.rotating_test)
        prepared[name] = augment(split, config.augmentation, repetition)
    return prepared


def _train_individual(config, registry, bundle: DatasetBundle, arch: int, seed: int) -> _Candidate:
    spec = network_spec(bundle.name, registry.entry(bundle.name), bundle.input_length, arch)
    net = build_network(spec, ParameterRegistry(seed))
    checkpoint = train_single(net, bundle, config.train.model_copy(update={"seed": seed}))
    return _Candidate(net, bundle, checkpoint)


def _train_shared(config, registry, bundles: Sequence[DatasetBundle], arch: int, seed: int) -> list[_Candidate]:
    params = ParameterRegistry(seed)
    nets = [
        build_network(network_spec(b.name, registry.entry(b.name), b.input_length, arch), params) for b in bundles
    ]
    checkpoint = cotrain(nets, bundles, config.train.model_copy(update={"seed": seed}))
    return [_Candidate(net, b, checkpoint) for net, b in zip(nets, bundles)]


def _train_transfer(config, registry, bundle: DatasetBundle, strategy: str, source: Checkpoint, seed: int) -> _Candidate:
    arch = source.architecture_id
    pretrained_length = int(source.meta["input_length"])
    mode = strategy_mode(strategy, config.tl_resize, bundle.input_length, pretrained_length)
    length = bundle.input_length if mode.resize == "weight_share" else pretrained_length
    resized = resize_bundle(bundle, length, mode.resize, config.pad_mode)
    spec = network_spec(bundle.name, registry.entry(bundle.name), length, arch)
    net = pretrained_network(source, spec, mode, seed)
    train_config = config.transfer_train.model_copy(update={"seed": seed})
    checkpoint = finetune(net, resized, train_config, pad_mode=config.pad_mode)
    return _Candidate(net, resized, checkpoint)


def _record(candidates: dict[int, _Candidate], repetition: int, strategy: str, out: Path, started: float) -> RunRecord:
    """Keep the architecture with the lowest holdout cost and score it on the test split."""
    scores = {arch: c.holdout for arch, c in candidates.items()}
    arch = min(scores, key=lambda a: (scores[a], a))
    chosen = candidates[arch]
    name = chosen.bundle.name
    path = out / "checkpoints" / f"rep{repetition:03d}" / f"{name}_{strategy}_arch{arch}.safetensors"
    save_checkpoint(chosen.checkpoint, path)
    report: MetricReport = evaluate_split(chosen.net, chosen.bundle, "test")
    elapsed = time.perf_counter() - started
    logger.info("rep %d %s/%s: arch %d, holdout %.5g, test %s (%.1fs)", repetition, name, strategy, arch, scores[arch], report.as_dict(), elapsed)
    return RunRecord(repetition, name, strategy, arch, scores[arch], report.as_dict(), str(path.relative_to(out)), elapsed)


def run_repetition(
    config: ExperimentConfig,
    registry: DatasetRegistry,
    bundles: dict[str, DatasetBundle],
    repetition: int,
    pretrained: dict[int, Checkpoint] | None = None,
) -> list[RunRecord]:
    out = Path(config.output_dir)
    prepared = prepare_bundles(config, registry, bundles, repetition)
    names = list(config.datasets)
    targets = names[1:] if config.kind == "transfer" else names
    records: list[RunRecord] = []

    for strategy in config.strategies:
        started = time.perf_counter()
        per_dataset: dict[str, dict[int, _Candidate]] = {name: {} for name in targets}
        for arch in config.architectures:
            seed = run_seed(config.seed, repetition, arch)
            if strategy == "individual":
                for name in targets:
                    per_dataset[name][arch] = _train_individual(config, registry, prepared[name], arch, seed)
            elif strategy == "weight_share":
                for candidate in _train_shared(config, registry, [prepared[n] for n in names], arch, seed):
                    if candidate.bundle.name in per_dataset:
                        per_dataset[candidate.bundle.name][arch] = candidate
            else:
                target = targets[0]
                per_dataset[target][arch] = _train_transfer(
                    config, registry, prepared[target], strategy, pretrained[arch], seed
                )
        for name in targets:
            records.append(_record(per_dataset[name], repetition, strategy, out, started))
    return records


# -- whole experiment ------------------------------------------------------------


def check_inputs(config: ExperimentConfig, registry: DatasetRegistry) -> None:
    """Fail before any training: unknown data sets, missing files, bad repetition counts."""
    for name in config.datasets:
        entry = registry.entry(name)
        for path in (entry.path, entry.test_path):
            if path is not None and not registry.resolve(path).exists():
                raise DataError(f"data file {registry.resolve(path)} for {name!r} does not exist")
        if entry.rotating_test is None and entry.test_path is None:
            raise ConfigError(f"{name!r} has no test set")
        registry.counts_for(name)
    for arch, path in config.pretrained.items():
        if arch in config.architectures and not Path(path).exists():
            raise DataError(f"pretrained checkpoint {path} does not exist")


def pretrain_sources(
    config: ExperimentConfig, registry: DatasetRegistry, bundles: dict[str, DatasetBundle]
) -> dict[int, Checkpoint]:
    """Source trunks for transfer: configured checkpoints, else the medium set trained alone."""
    sources: dict[int, Checkpoint] = {}
    medium = config.datasets[0]
    out = Path(config.output_dir) / "pretrained"
    for arch in config.architectures:
        if arch in config.pretrained:
            sources[arch] = load_checkpoint(config.pretrained[arch])
            continue
        bundle = prepare_bundles(config, registry, {medium: bundles[medium]}, 0)[medium]
        candidate = _train_individual(config, registry, bundle, arch, run_seed(config.seed, arch))
        save_checkpoint(candidate.checkpoint, out / f"{medium}_arch{arch}.safetensors")
        sources[arch] = candidate.checkpoint
    return sources


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    registry = load_registry(config.registry)
    check_inputs(config, registry)
    bundles = {name: load_bundle(registry, name) for name in config.datasets}
    pretrained = pretrain_sources(config, registry, bundles) if config.kind == "transfer" else None

    n_jobs = config.n_jobs or get_settings().n_jobs
    logger.info("%s experiment: %d repetitions of %s on %s (n_jobs=%d)", config.kind, config.repetitions, config.strategies, config.datasets, n_jobs)
    batches = Parallel(n_jobs=n_jobs)(
        delayed(run_repetition)(config, registry, bundles, r, pretrained) for r in range(config.repetitions)
    )
    records = [record for batch in batches for record in batch]

    out = Path(config.output_dir)
    frame = records_frame(records)
    files = [write_frame(frame, out / "records.csv")]
    files += write_reports(frame, out)
    return ExperimentResult(records, out, files)


# -- reports ---------------------------------------------------------------------


def metric_columns(frame: pd.DataFrame) -> list[str]:
    return [c for c in frame.columns if c not in RECORD_KEYS]


def comparison_tables(frame: pd.DataFrame) -> dict[tuple[str, str], pd.DataFrame]:
    """One repetition x strategy score table per (data set, metric)."""
    tables = {}
    for dataset, group in frame.groupby("dataset", sort=True):
        order = list(dict.fromkeys(group["strategy"]))
        for metric in metric_columns(group):
            wide = group.pivot(index="repetition", columns="strategy", values=metric)
            tables[(dataset, metric)] = wide[order].sort_index()
    return tables


def render_text(title: str, frame: pd.DataFrame, index: bool = True) -> str:
    table = Table(title=title)
    if index:
        table.add_column("")
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for label, row in frame.iterrows():
        cells = [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row]
        table.add_row(*([str(label)] if index else []), *cells)
    console = Console(file=io.StringIO(), width=160, color_system=None, force_terminal=False)
    console.print(table)
    return console.file.getvalue()


def write_reports(frame: pd.DataFrame, out: str | Path) -> list[Path]:
    """Comparison-table CSVs plus per-strategy summary tables (CSV and text)."""
    out = Path(out)
    files: list[Path] = []
    for (dataset, metric), wide in comparison_tables(frame).items():
        files.append(write_frame(wide.reset_index(drop=True), out / "comparisons" / f"{dataset}__{metric}.csv"))

    text = []
    for (dataset, strategy), group in frame.groupby(["dataset", "strategy"], sort=True):
        summary = summary_table(group[metric_columns(group)].astype(np.float64))
        files.append(write_frame(summary, out / "summaries" / f"{dataset}__{strategy}.csv", index=True))
        label = STRATEGY_LABELS.get(strategy, strategy)
        text.append(render_text(f"{dataset}: {label} ({len(group)} repetitions)", summary))
    if text:
        files.append(write_text("\n".join(text), out / "summaries" / "summary.txt"))
    return files


def report(records_path: str | Path, out: str | Path) -> list[Path]:
    path = Path(records_path)
    if not path.exists():
        raise DataError(f"records file {path} does not exist")
    return write_reports(pd.read_csv(path), out)


# -- comparisons -----------------------------------------------------------------


def metric_from_path(path: Path) -> str:
    return path.stem.split("__")[-1]


def load_comparison(path: str | Path) -> ComparisonTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"comparison table {path} does not exist")
    try:
        scores = read_score_table(path)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric scores: {exc}") from exc
    return ComparisonTable.for_metric(metric_from_path(path), scores)


def pairwise_row(source: str, table: ComparisonTable) -> dict:
    """Wilcoxon and F test of the second column (candidate) against the first (baseline)."""
    if table.scores.shape[1] != 2:
        raise StatisticsError(f"{source}: pairwise mode needs exactly 2 columns, got {table.scores.shape[1]}")
    baseline, candidate = table.strategies
    oriented = table.values()
    raw = table.scores.to_numpy(dtype=np.float64)
    signed: TestResult = wilcoxon_signed_rank(oriented[:, 1], oriented[:, 0])
    f: TestResult = f_variance_test(raw[:, 0], raw[:, 1])
    return {
        "table": source,
        "metric": table.metric,
        "baseline": baseline,
        "candidate": candidate,
        "n": signed.extra["n"],
        "wilcoxon_z": signed.statistic,
        "wilcoxon_p": signed.p_value,
        "r_plus": signed.extra["r_plus"],
        "r_minus": signed.extra["r_minus"],
        "f": f.statistic,
        "f_p": f.p_value,
    }


def multiple_rows(metric: str, tables: Sequence[ComparisonTable], alpha: float) -> list[dict]:
    columns = tables[0].strategies
    if any(t.strategies != columns for t in tables):
        raise StatisticsError(f"{metric}: stacked tables must list the same strategies in the same order")
    stacked = ComparisonTable(
        metric, pd.concat([t.scores for t in tables], ignore_index=True), tables[0].lower_is_better, tables[0].absolute
    )
    result = friedman_iman_davenport(stacked)
    k, n = len(columns), stacked.scores.shape[0]
    cd = nemenyi_cd(k, n, alpha)
    ranks = pd.Series(result.extra["ranks"])
    groups = rank_groups(ranks, cd)
    group_of = {name: i + 1 for i, members in enumerate(groups) for name in members}
    return [
        {
            "metric": metric,
            "strategy": name,
            "average_rank": ranks[name],
            "group": group_of[name],
            "n": n,
            "iman_davenport": result.statistic,
            "p_value": result.p_value,
            "cd": cd,
        }
        for name in ranks.sort_values(kind="stable").index
    ]


@dataclass
class CompareReport:
    mode: str
    frame: pd.DataFrame
    text: str


def run_compare(paths: Sequence[str | Path], mode: str = "pairwise", alpha: float = 0.05) -> CompareReport:
    """Pairwise: one row per table.  Multiple: tables of the same metric are stacked row-wise."""
    if not paths:
        raise ConfigError("compare: no comparison tables given")
    loaded = [(Path(p), load_comparison(p)) for p in paths]
    if mode == "pairwise":
        frame = pd.DataFrame([pairwise_row(path.name, table) for path, table in loaded])
        title = "Pairwise comparison (Wilcoxon signed-rank, F test on variance)"
        return CompareReport(mode, frame, render_text(title, frame, index=False))
    if mode == "multiple":
        by_metric: dict[str, list[ComparisonTable]] = {}
        for _, table in loaded:
            by_metric.setdefault(table.metric, []).append(table)
        rows = [row for metric, tables in by_metric.items() for row in multiple_rows(metric, tables, alpha)]
        frame = pd.DataFrame(rows)
        title = f"Friedman / Iman-Davenport with Nemenyi CD (alpha={alpha})"
        return CompareReport(mode, frame, render_text(title, frame, index=False))
    raise ConfigError(f"compare: unknown mode {mode!r}; expected pairwise or multiple")


def write_compare(result: CompareReport, out: str | Path) -> list[Path]:
    out = Path(out)
    return [
        write_frame(result.frame, out / f"compare_{result.mode}.csv"),
        write_text(result.text, out / f"compare_{result.mode}.txt"),
    ]


# -- stored checkpoints ----------------------------------------------------------


def load_network(checkpoint: Checkpoint, name: str | None = None) -> Network:
    """Rebuild the named network of a checkpoint and load its EMA weights."""
    specs = [NetworkSpec.model_validate(s) for s in checkpoint.meta.get("networks", [])]
    if not specs:
        raise DataError("checkpoint carries no network description")
    matches = [s for s in specs if name is None or s.name == name]
    if not matches:
        raise DataError(f"checkpoint has no network {name!r}; it holds {[s.name for s in specs]}")
    params = ParameterRegistry(checkpoint.seed)
    nets = [build_network(spec, params) for spec in specs]
    params.assign(checkpoint.ema_values(), checkpoint.buffers)
    return next(net for net in nets if net.spec.name == matches[0].name)


def evaluate_checkpoint(path: str | Path, registry_path: str | Path, dataset: str) -> MetricReport:
    """Score a stored checkpoint on a registry data set's test rows (all rows if it has no test file)."""
    checkpoint = load_checkpoint(path)
    registry = load_registry(registry_path)
    bundle = load_bundle(registry, dataset)
    try:
        net = load_network(checkpoint, dataset)
    except DataError:
        net = load_network(checkpoint)
        logger.warning("checkpoint has no network named %r; using %r", dataset, net.name)
    if "test" not in bundle.splits:
        bundle = DatasetBundle(bundle.name, bundle.spectra, bundle.targets, {"test": np.arange(bundle.n_samples)}, units=bundle.units)
    if bundle.input_length != net.input_length:
        pad_mode = checkpoint.meta.get("transfer", {}).get("pad_mode", "edge")
        method = choose_resize(bundle.input_length, net.input_length)
        bundle = resize_bundle(bundle, net.input_length, method, pad_mode)
    return evaluate_split(net, bundle, "test")
