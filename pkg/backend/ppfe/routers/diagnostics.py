import click
from rich.console import Console
from rich.table import Table

from .common import guarded, make_runner, run_options

console = Console()


@click.command("partition-stats")
@run_options
@guarded
def partition_stats(config_path, out_dir, seeds, threads):
    """Per-client sample counts, label counts and label entropy of the first seed"""
    runner = make_runner(config_path, out_dir, seeds, threads)
    frame = runner.partition_stats()
    table = Table(title=f"{len(frame)} clients")
    for column in ("statistic", "min", "mean", "max"):
        table.add_column(column)
    for column in ("num_samples", "num_labels", "entropy"):
        values = frame[column]
        table.add_row(column, f"{values.min():.4g}", f"{values.mean():.4g}", f"{values.max():.4g}")
    console.print(table)


@click.command()
@run_options
@click.option("--width-base", type=click.IntRange(min=1), default=None, help="W_b of the head width schedule")
@click.option("--alpha", type=click.FloatRange(min=0.0), default=0.0, show_default=True, help="width decay exponent")
@guarded
def bound(config_path, out_dir, seeds, threads, width_base, alpha):
    """Per-stage D_t, D'_t and the bound terms for the first PPFE plan"""
    runner = make_runner(config_path, out_dir, seeds, threads)
    rows, n_harm = runner.bound(width_base, alpha)
    table = Table(title=f"n_harm = {n_harm:.6g}")
    for column in ("stage", "depth", "width", "D_t", "D'_t", "shared", "personal", "boosting", "bound"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(
            str(row.stage), str(row.personal_layers), str(row.width),
            str(row.personal_parameters), str(row.shared_parameters),
            f"{row.shared_term:.4f}", f"{row.personal_term:.4f}", f"{row.boosting_term:.4f}", f"{row.bound:.4f}",
        )
    console.print(table)
