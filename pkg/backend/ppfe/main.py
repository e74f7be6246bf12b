import logging

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from .routers import diagnostics, experiments
from .utils.config import get_settings

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, get_settings().log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@click.group()
@click.option("--verbose", is_flag=True, help="debug logging")
def cli(verbose: bool) -> None:
    """Progressive personalized federated ensembles: experiments and diagnostics"""
    load_dotenv()
    configure_logging(verbose)


cli.add_command(experiments.synthetic)
cli.add_command(experiments.federated)
cli.add_command(experiments.ablation)
cli.add_command(experiments.plot)
cli.add_command(diagnostics.partition_stats)
cli.add_command(diagnostics.bound)


def main() -> None:
    cli(prog_name="ppfe")


if __name__ == "__main__":
    main()
