import logging

import click
from rich.console import Console
from rich.table import Table

from .common import guarded, make_runner, run_options
from ..services.experiment_runner import RunOutcome, plot_run

logger = logging.getLogger(__name__)

console = Console(stderr=True)


def _summary(outcome: RunOutcome, title: str) -> None:
    frame = outcome.metrics_frame()
    if frame.empty:
        return
    grouped = frame.groupby(["method", "sweep_value"], sort=False)["weighted_mean"]
    table = Table(title=title)
    for column in ("method", "sweep", "mean over seeds", "std"):
        table.add_column(column)
    for (method, sweep), mean in grouped.mean().items():
        std = grouped.std(ddof=0)[(method, sweep)]
        table.add_row(str(method), str(sweep), f"{mean:.4f}", f"{std:.4f}")
    console.print(table)


@click.command()
@run_options
@guarded
def synthetic(config_path, out_dir, seeds, threads):
    """Closed-form ridge track on synthetic regression clients"""
    runner = make_runner(config_path, out_dir, seeds, threads)
    outcome = runner.run_synthetic()
    _summary(outcome, "test MSE")
    click.echo(str(runner.output_dir))


@click.command()
@run_options
@guarded
def federated(config_path, out_dir, seeds, threads):
    """PPFE and the neural baselines on a partitioned classification task"""
    runner = make_runner(config_path, out_dir, seeds, threads)
    outcome = runner.run_federated()
    _summary(outcome, outcome.metrics[0].metric if outcome.metrics else "")
    click.echo(str(runner.output_dir))


@click.command()
@run_options
@guarded
def ablation(config_path, out_dir, seeds, threads):
    """Like federated, adding the WP and WPW variants of the first PPFE plan"""
    runner = make_runner(config_path, out_dir, seeds, threads)
    outcome = runner.run_ablation()
    _summary(outcome, "ablation")
    click.echo(str(runner.output_dir))


@click.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@guarded
def plot(run_dir):
    """Re-render plots/*.svg from RUN_DIR/metrics.csv"""
    for path in plot_run(run_dir):
        click.echo(str(path))
