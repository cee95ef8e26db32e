"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import pandas as pd
from dotenv import load_dotenv
from rich.console import Console

from utils.logging_utils import setup_logging
from utils.table_loaders import write_frame
from weightshare.config import get_settings, load_experiment_config
from weightshare.errors import WeightShareError
from weightshare.experiment import evaluate_checkpoint, report, run_compare, run_experiment, write_compare
from weightshare.synthetic import write_demo

logger = logging.getLogger("weightshare")

console = Console()


def _architectures(value: str | None) -> list[int] | None:
    if value is None:
        return None
    return [1, 2] if value == "both" else [int(value)]


def _strategies(value: str | None) -> list[str] | None:
    if value is None:
        return None
    return [s.strip() for s in value.split(",") if s.strip()]


def experiment_options(func):
    options = [
        click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path)),
        click.option("--seed", type=click.IntRange(min=0), default=None, help="Master seed."),
        click.option("--reps", type=click.IntRange(min=1), default=None, help="Number of repetitions."),
        click.option("--arch", type=click.Choice(["1", "2", "both"]), default=None),
        click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None),
        click.option("--strategy", default=None, help="Comma separated strategy names."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run(kind: str, config_path: Path, seed, reps, arch, out, strategy) -> None:
    config = load_experiment_config(
        config_path,
        kind=kind,
        seed=seed,
        repetitions=reps,
        architectures=_architectures(arch),
        output_dir=str(out) if out is not None else None,
        strategies=_strategies(strategy),
    )
    result = run_experiment(config)
    console.print(f"{len(result.records)} runs written to [bold]{result.output_dir}[/bold]")


@click.group()
@click.option("--log-level", default=None, help="Overrides WEIGHTSHARE_LOG_LEVEL.")
@click.option("--log-file", type=click.Path(dir_okay=False), default=None)
def cli(log_level, log_file):
    """Co-train 1D CNNs with shared convolutional trunks and compare strategies."""
    setup_logging(log_level or get_settings().log_level, log_file)


@cli.command()
@experiment_options
def train(config_path, seed, reps, arch, out, strategy):
    """Train every data set individually."""
    _run("single", config_path, seed, reps, arch, out, strategy)


@cli.command(name="cotrain")
@experiment_options
def cotrain_command(config_path, seed, reps, arch, out, strategy):
    """Individual training against weight-shared co-training."""
    _run("cotrain", config_path, seed, reps, arch, out, strategy)


@cli.command(name="transfer")
@experiment_options
def transfer_command(config_path, seed, reps, arch, out, strategy):
    """Weight sharing against the four transfer learning strategies."""
    _run("transfer", config_path, seed, reps, arch, out, strategy)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--registry", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--dataset", required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="CSV file for the metrics.")
def evaluate(checkpoint, registry, dataset, out):
    """Score a stored checkpoint on a data set's test rows."""
    metrics = evaluate_checkpoint(checkpoint, registry, dataset).as_dict()
    for name, value in metrics.items():
        console.print(f"{name:>10}  {value:.6g}")
    if out is not None:
        write_frame(pd.DataFrame([metrics]), out)


@cli.command()
@click.argument("tables", nargs=-1, required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--mode", type=click.Choice(["pairwise", "multiple"]), default="pairwise")
@click.option("--alpha", type=click.Choice(["0.05", "0.10"]), default="0.05")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
def compare(tables, mode, alpha, out):
    """Wilcoxon/F tests (pairwise) or Friedman with Nemenyi CD (multiple)."""
    result = run_compare(tables, mode, float(alpha))
    console.print(result.text, markup=False, highlight=False)
    if out is not None:
        write_compare(result, out)


@cli.command(name="report")
@click.option("--records", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
def report_command(records, out):
    """Rebuild comparison and summary tables from records.csv."""
    files = report(records, out)
    console.print(f"wrote {len(files)} files to [bold]{out}[/bold]")


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=click.IntRange(min=0), default=0)
def demo(out, seed):
    """Write seeded synthetic data sets, a registry and example configs."""
    written = write_demo(out, seed)
    console.print(f"wrote {len(written)} files to [bold]{out}[/bold]")


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    try:
        cli.main(args=argv, prog_name="weightshare", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except WeightShareError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
