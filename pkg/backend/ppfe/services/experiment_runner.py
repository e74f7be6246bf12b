"""
Experiment orchestration behind the CLI: config loading, data construction,
method runs, evaluation and the CSV/SVG outputs of a run directory.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import ValidationError

from .baselines import MethodResult, run_baseline
from .capacity import capacity_report, plan_from_width_schedule
from .datagen import (
    ClientDataset,
    gen_synthetic_classification,
    gen_synthetic_regression,
    load_dataset,
    make_partitioner,
    partition_stats,
    pool_from_dataset,
    split_train_test,
)
from .network import Activation, Model, build_mlp
from .plotting import AxesMeta, plot_svg, series_from_metrics
from .ppfe import ensemble_accuracy, ensemble_mse
from .ridge import run_linear_experiment
from .tensor_core import Rng
from ..models.config_models import (
    AblationMethod,
    ClassRestrictionPartition,
    ExperimentConfig,
    FileTask,
    FixedHeadMethod,
    LocalOnlyMethod,
    PPFEMethod,
    SyntheticClassificationTask,
    SyntheticRegressionTask,
    method_label,
)
from ..models.report_models import CapacityRow, MetricsRow, RoundReport, StageReport
from ..utils.config import get_settings
from ..utils.errors import ConfigError, PPFEError
from ..utils.helpers import format_float, harmonic_mean

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

METRICS_COLUMNS = ["method", "seed", "sweep_param", "sweep_value", "num_clients", "metric", "weighted_mean", "mean"]
CLIENTS_COLUMNS = ["method", "seed", "sweep_param", "sweep_value", "client_id", "n_k", "value"]
ROUNDS_COLUMNS = ["method", "seed", "sweep_value", "stage", "round", "participants", "mean_loss", "transmitted"]
STAGES_COLUMNS = [
    "method", "seed", "stage", "personal_layers", "rounds", "shared_parameters", "personal_parameters",
    "dense_personal_parameters", "reduction_fraction", "transmitted", "transmitted_fraction",
    "mean_beta", "mean_epsilon", "mean_train_error",
]


# Config loading

def json_pointer(document: Any, loc: Sequence[Union[str, int]]) -> str:
    """
    Map a pydantic error location onto the raw JSON document. Union tags
    that pydantic inserts (the ``kind`` value of a discriminated member)
    are not part of the document and are skipped.
    """
    parts: List[str] = []
    current = document
    for index, item in enumerate(loc):
        if isinstance(current, dict):
            if item in current:
                parts.append(str(item))
                current = current[item]
                continue
            if current.get("kind") == item and index < len(loc) - 1:
                continue
            parts.append(str(item))
            current = None
        elif isinstance(current, list) and isinstance(item, int) and 0 <= item < len(current):
            parts.append(str(item))
            current = current[item]
        else:
            parts.append(str(item))
            current = None
    return "/" + "/".join(p.replace("~", "~0").replace("/", "~1") for p in parts)


def validate_budgets(config: ExperimentConfig) -> None:
    """Every compared federated method spends exactly ``fed.rounds`` rounds"""
    if config.is_regression:
        if config.methods:
            raise ConfigError("/methods", "regression tasks list their methods under /task/methods")
        task = config.task
        labels = [method_label(m) for m in task.methods]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ConfigError("/task/methods", f"duplicate method labels {duplicates}; set distinct 'name' fields")
        coefs = task.spec.local_variance_coefs
        if coefs is not None and task.sweep is not None and task.sweep.parameter == "num_clients":
            if any(v != len(coefs) for v in task.sweep.values):
                raise ConfigError(
                    "/task/spec/local_variance_coefs",
                    f"{len(coefs)} per-client coefficients do not fit every num_clients sweep value",
                )
        return
    if not config.methods:
        raise ConfigError("/methods", "at least one method is required")
    if config.partition is None:
        raise ConfigError("/partition", "federated tasks need a partition")
    task = config.task
    if isinstance(task, SyntheticClassificationTask) and isinstance(config.partition, ClassRestrictionPartition):
        if config.partition.classes_per_client > task.num_classes:
            raise ConfigError(
                "/partition/classes_per_client",
                f"{config.partition.classes_per_client} exceeds num_classes {task.num_classes}",
            )
    num_layers = len(config.architecture.hidden) + 1
    for i, method in enumerate(config.methods):
        if isinstance(method, (PPFEMethod, AblationMethod)):
            total = method.plan.total_rounds
            if total != config.fed.rounds:
                raise ConfigError(
                    f"/methods/{i}/plan/stages",
                    f"stage rounds sum to {total}, the budget is fed.rounds={config.fed.rounds}",
                )
            deepest = method.plan.stages[-1].personal_layers
            if deepest > num_layers:
                raise ConfigError(f"/methods/{i}/plan/stages", f"{deepest} personal layers exceed {num_layers} layers")
        if isinstance(method, FixedHeadMethod):
            if method.warmup_rounds and method.warmup_rounds >= config.fed.rounds:
                raise ConfigError(f"/methods/{i}/warmup_rounds", f"warm-up uses the whole {config.fed.rounds}-round budget")
            if method.personal_depth > num_layers:
                raise ConfigError(f"/methods/{i}/personal_depth", f"exceeds {num_layers} layers")
    labels = [method_label(m) for m in config.methods]
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise ConfigError("/methods", f"duplicate method labels {duplicates}; set distinct 'name' fields")


def parse_config(document: Any) -> ExperimentConfig:
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        pointer = json_pointer(document, first["loc"])
        logger.error(f"Invalid config at {pointer}: {first['msg']}")
        raise ConfigError(pointer, first["msg"])
    validate_budgets(config)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment file; OSError propagates for missing files"""
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("/", f"invalid JSON at line {e.lineno}: {e.msg}")
    return parse_config(document)


def resolve_seeds(config: ExperimentConfig, override: Optional[Sequence[int]] = None) -> List[int]:
    """CLI flag, then the config file, then PPFE_SEED"""
    if override:
        return list(override)
    if config.seeds:
        return list(config.seeds)
    return [get_settings().seed]


def with_ablation_variants(config: ExperimentConfig) -> ExperimentConfig:
    """Add WP and WPW runs derived from the first PPFE plan when the config lists none"""
    if any(isinstance(m, AblationMethod) for m in config.methods):
        return config
    base = next((m for m in config.methods if isinstance(m, PPFEMethod)), None)
    if base is None:
        raise ConfigError("/methods", "ablation needs a ppfe method to derive WP/WPW from")
    extra = [AblationMethod(variant=v, plan=base.plan) for v in ("WP", "WPW")]
    return config.model_copy(update={"methods": list(config.methods) + extra})


# Data and models

def build_clients(config: ExperimentConfig, seed: int) -> List[ClientDataset]:
    """Partitioned clients with train/test splits for a federated task"""
    task = config.task
    rng = Rng(seed).child("data")
    if isinstance(task, SyntheticRegressionTask):
        clients, _ = gen_synthetic_regression(task.spec, rng)
        return clients
    per_client = task.samples_per_client + task.test_samples_per_client
    if isinstance(task, SyntheticClassificationTask):
        oversample = task.pool_oversample if isinstance(config.partition, ClassRestrictionPartition) else 1.0
        pool = gen_synthetic_classification(
            task.num_clients, per_client, task.dim, task.num_classes, task.class_sep, rng.child("pool"), oversample
        )
    elif isinstance(task, FileTask):
        pool = pool_from_dataset(load_dataset(task.path, task.num_classes))
    else:
        raise ConfigError("/task/kind", f"unsupported task {task.kind}")
    if config.partition is None:
        raise ConfigError("/partition", "federated tasks need a partition")
    partitioner = make_partitioner(config.partition)
    clients = partitioner(pool, task.num_clients, per_client, rng.child("partition"))
    return split_train_test(clients, task.test_samples_per_client / per_client, rng.child("split"))


def model_dims(config: ExperimentConfig, clients: Sequence[ClientDataset]) -> List[int]:
    num_classes = max(int(c.num_classes or 0) for c in clients)
    return [clients[0].dim] + list(config.architecture.hidden) + [num_classes]


def build_model(config: ExperimentConfig, clients: Sequence[ClientDataset], seed: int) -> Model:
    return build_mlp(
        model_dims(config, clients),
        Rng(seed).child("init"),
        Activation(config.architecture.activation),
    )


# Run outputs

@dataclass
class RunOutcome:
    metrics: List[MetricsRow] = field(default_factory=list)
    rounds: List[Dict[str, Any]] = field(default_factory=list)
    stages: List[Dict[str, Any]] = field(default_factory=list)

    def metrics_frame(self) -> pd.DataFrame:
        records = [{
            "method": row.method,
            "seed": row.seed,
            "sweep_param": row.sweep_param or "",
            "sweep_value": row.sweep_value or "",
            "num_clients": row.num_clients,
            "metric": row.metric,
            "weighted_mean": row.weighted_mean,
            "mean": row.mean,
        } for row in self.metrics]
        return pd.DataFrame.from_records(records, columns=METRICS_COLUMNS)

    def clients_frame(self) -> pd.DataFrame:
        records = [
            {
                "method": row.method,
                "seed": row.seed,
                "sweep_param": row.sweep_param or "",
                "sweep_value": row.sweep_value or "",
                "client_id": cid,
                "n_k": n,
                "value": v,
            }
            for row in self.metrics
            for cid, n, v in zip(row.client_ids, row.client_sizes, row.client_values)
        ]
        return pd.DataFrame.from_records(records, columns=CLIENTS_COLUMNS)


def _round_records(label: str, seed: int, sweep_value: str, reports: Sequence[RoundReport]) -> List[Dict[str, Any]]:
    return [{
        "method": label,
        "seed": seed,
        "sweep_value": sweep_value,
        "stage": r.stage,
        "round": r.round_index,
        "participants": len(r.participants),
        "mean_loss": r.mean_loss,
        "transmitted": r.transmitted,
    } for r in reports]


def _stage_records(label: str, seed: int, reports: Sequence[StageReport]) -> List[Dict[str, Any]]:
    records = []
    for r in reports:
        errors = r.client_train_error
        records.append({
            "method": label,
            "seed": seed,
            "stage": r.stage,
            "personal_layers": r.personal_layers,
            "rounds": r.rounds,
            "shared_parameters": r.shared_parameters,
            "personal_parameters": r.personal_parameters,
            "dense_personal_parameters": r.dense_personal_parameters,
            "reduction_fraction": r.reduction_fraction,
            "transmitted": r.transmitted,
            "transmitted_fraction": r.transmitted_fraction,
            "mean_beta": r.mean_beta,
            "mean_epsilon": r.mean_epsilon,
            "mean_train_error": sum(errors) / len(errors) if errors else 0.0,
        })
    return records


def _sweep_label(parameter: str, value) -> str:
    if value == "uniform-random":
        return value
    if parameter == "num_clients":
        return str(int(value))
    return format_float(float(value))


class ExperimentRunner:
    """Runs one validated config over its seeds and writes the run directory"""

    def __init__(self, config: ExperimentConfig, output_dir: Union[str, Path], seeds: Sequence[int], threads: int = 1):
        self.config = config
        self.output_dir = Path(output_dir)
        self.seeds = list(seeds)
        self.threads = threads

    # Regression track

    def run_synthetic(self) -> RunOutcome:
        task = self.config.task
        if not isinstance(task, SyntheticRegressionTask):
            raise ConfigError("/task/kind", "the synthetic command needs a synthetic_regression task")
        outcome = RunOutcome()
        points: List[Tuple[Optional[str], Any]] = [(None, None)]
        if task.sweep is not None:
            points = [(task.sweep.parameter, v) for v in task.sweep.values]
        for parameter, value in points:
            spec = task.spec
            sweep_value = None
            if parameter is not None:
                if parameter == "num_clients":
                    if value == "uniform-random":
                        raise ConfigError("/task/sweep/values", "num_clients sweep values must be numbers")
                    coefs = spec.local_variance_coefs
                    if coefs is not None and len(coefs) != int(value):
                        raise ConfigError(
                            "/task/spec/local_variance_coefs",
                            f"{len(coefs)} coefficients cannot cover the {int(value)}-client sweep point",
                        )
                    spec = spec.model_copy(update={"num_clients": int(value)})
                else:
                    spec = spec.model_copy(update={"personalization_ratio": value})
                sweep_value = _sweep_label(parameter, value)
            for seed in self.seeds:
                started = time.perf_counter()
                results = run_linear_experiment(spec, task.methods, seed, task.lambda_grid, task.holdout_fraction)
                for method in task.methods:
                    label = method_label(method)
                    result = results[label]
                    outcome.metrics.append(MetricsRow(
                        method=label,
                        seed=seed,
                        sweep_param=parameter,
                        sweep_value=sweep_value,
                        metric="test_mse",
                        client_ids=list(range(len(result.client_mse))),
                        client_sizes=result.client_sizes,
                        client_values=result.client_mse,
                    ))
                logger.info(f"Seed {seed} {parameter or ''}={sweep_value or ''} done in {time.perf_counter() - started:.2f}s")
        self.write(outcome)
        return outcome

    # Federated track

    def evaluate(self, label: str, seed: int, result: MethodResult, test: Sequence[ClientDataset], train: Sequence[ClientDataset]) -> MetricsRow:
        classification = all(c.is_classification for c in test)
        values = [
            ensemble_accuracy(e, t) if classification else ensemble_mse(e, t)
            for e, t in zip(result.ensembles, test)
        ]
        return MetricsRow(
            method=label,
            seed=seed,
            metric="test_accuracy" if classification else "test_mse",
            client_ids=[c.client_id for c in train],
            client_sizes=[c.n for c in train],
            client_values=values,
        )

    def run_federated(self) -> RunOutcome:
        if self.config.is_regression:
            raise ConfigError("/task/kind", "use the synthetic command for synthetic_regression tasks")
        outcome = RunOutcome()
        for seed in self.seeds:
            clients = build_clients(self.config, seed)
            train = [c.train_part() for c in clients]
            test = [c.test_part() for c in clients]
            model = build_model(self.config, clients, seed)
            logger.info(f"Seed {seed}: {len(train)} clients, model {model!r}")
            for method in self.config.methods:
                label = method_label(method)
                started = time.perf_counter()
                result = run_baseline(train, model, method, self.config.fed, seed, self.threads)
                if not isinstance(method, LocalOnlyMethod) and len(result.round_reports) != self.config.fed.rounds:
                    raise PPFEError(
                        f"{label} ran {len(result.round_reports)} rounds, the budget is {self.config.fed.rounds}"
                    )
                row = self.evaluate(label, seed, result, test, train)
                outcome.metrics.append(row)
                outcome.rounds.extend(_round_records(label, seed, "", result.round_reports))
                outcome.stages.extend(_stage_records(label, seed, result.stage_reports))
                logger.info(
                    f"Seed {seed} {label}: {row.metric} {row.weighted_mean:.4f} "
                    f"({time.perf_counter() - started:.1f}s)"
                )
        self.write(outcome)
        return outcome

    def run_ablation(self) -> RunOutcome:
        self.config = with_ablation_variants(self.config)
        return self.run_federated()

    # Diagnostics

    def partition_stats(self) -> pd.DataFrame:
        clients = build_clients(self.config, self.seeds[0])
        frame = partition_stats([c.train_part() for c in clients])
        self.output_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(self.output_dir / "partition_stats.csv", index=False, float_format=FLOAT_FORMAT)
        return frame

    def bound(self, width_base: Optional[int] = None, alpha: float = 0.0) -> Tuple[List[CapacityRow], float]:
        if self.config.is_regression:
            raise ConfigError("/task/kind", "the bound needs a federated task")
        method = next((m for m in self.config.methods if isinstance(m, (PPFEMethod, AblationMethod))), None)
        if method is None:
            raise ConfigError("/methods", "the bound needs a ppfe method")
        plan = method.plan
        if width_base is not None:
            plan = plan_from_width_schedule([s.rounds for s in plan.stages], width_base, alpha)
        clients = build_clients(self.config, self.seeds[0])
        sizes = [c.train_part().n for c in clients]
        rows = capacity_report(model_dims(self.config, clients), plan, sizes, width_base, alpha)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame.from_records([r.model_dump() for r in rows])
        frame.to_csv(self.output_dir / "capacity.csv", index=False, float_format=FLOAT_FORMAT)
        return rows, harmonic_mean(sizes)

    # Files

    def write(self, outcome: RunOutcome) -> None:
        out = self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        metrics = outcome.metrics_frame()
        metrics.to_csv(out / "metrics.csv", index=False, float_format=FLOAT_FORMAT)
        outcome.clients_frame().to_csv(out / "clients.csv", index=False, float_format=FLOAT_FORMAT)
        pd.DataFrame.from_records(outcome.rounds, columns=ROUNDS_COLUMNS).to_csv(
            out / "rounds.csv", index=False, float_format=FLOAT_FORMAT
        )
        if outcome.stages:
            pd.DataFrame.from_records(outcome.stages, columns=STAGES_COLUMNS).to_csv(
                out / "stages.csv", index=False, float_format=FLOAT_FORMAT
            )
        render_plots(metrics, out / "plots", title=self.config.name)
        logger.info(f"Wrote {len(outcome.metrics)} metric rows to {out}")


def render_plots(metrics: pd.DataFrame, directory: Union[str, Path], title: str = "") -> List[Path]:
    """One chart per metric: method series over the sweep axis, std error bars over seeds"""
    written = []
    for metric, frame in metrics.groupby("metric", sort=True):
        series, ticks = series_from_metrics(frame)
        sweep_param = str(frame["sweep_param"].fillna("").iloc[0]) or "run"
        meta = AxesMeta(title=title, x_label=sweep_param, y_label=str(metric), x_ticks=ticks)
        written.append(plot_svg(series, meta, Path(directory) / f"{metric}.svg"))
    return written


def plot_run(run_dir: Union[str, Path]) -> List[Path]:
    """Re-render the charts of an existing run directory"""
    run_dir = Path(run_dir)
    metrics = pd.read_csv(run_dir / "metrics.csv", dtype={"sweep_value": str, "sweep_param": str})
    return render_plots(metrics, run_dir / "plots", title=run_dir.name)
