import functools
import json
import logging
from pathlib import Path
from typing import Callable, List, Optional

import click

from ..models.config_models import ExperimentConfig
from ..services.experiment_runner import ExperimentRunner, load_config, resolve_seeds
from ..utils.config import get_settings
from ..utils.errors import ConfigError, PPFEError
from ..utils.helpers import parse_seed_list

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3


def emit_error(payload: dict, code: int) -> None:
    click.echo(json.dumps(payload, sort_keys=True), err=True)
    raise click.exceptions.Exit(code)


def guarded(command: Callable) -> Callable:
    """Turn library errors into a JSON line on stderr and a nonzero exit"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PPFEError as e:
            logger.debug("Command failed", exc_info=True)
            emit_error(e.to_dict(), EXIT_USAGE)
        except OSError as e:
            logger.debug("I/O failure", exc_info=True)
            emit_error({"error": type(e).__name__, "message": str(e), "path": getattr(e, "filename", None)}, EXIT_IO)

    return wrapper


def _seeds_option(ctx, param, value) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return parse_seed_list(value)
    except ValueError as e:
        raise click.BadParameter(str(e))


def run_options(command: Callable) -> Callable:
    """--config, --out, --seeds and --threads shared by every run command"""
    command = click.option("--threads", type=click.IntRange(min=1), default=None, help="worker threads (default PPFE_THREADS)")(command)
    command = click.option("--seeds", callback=_seeds_option, default=None, help="comma separated seeds, overrides the config")(command)
    command = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="run directory")(command)
    command = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True, help="experiment JSON file")(command)
    return command


def make_runner(
    config_path: str,
    out_dir: Optional[str],
    seeds: Optional[List[int]],
    threads: Optional[int],
    config: Optional[ExperimentConfig] = None,
) -> ExperimentRunner:
    settings = get_settings()
    config = config or load_config(config_path)
    if out_dir is None:
        out_dir = config.output_dir or str(Path(settings.output_dir) / config.name)
    threads = threads or settings.threads
    resolved = resolve_seeds(config, seeds)
    if not resolved:
        raise ConfigError("/seeds", "no seeds to run")
    logger.info(f"Config {config.name}: seeds {resolved}, {threads} thread(s), output {out_dir}")
    return ExperimentRunner(config, out_dir, resolved, threads)
