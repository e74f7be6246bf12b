#!/usr/bin/env python3
"""
Tests for the command line: run directories, determinism and structured errors
"""

import json
import os
import sys

import pandas as pd
import pytest
from click.testing import CliRunner

# Add the backend directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppfe.main import cli
from ppfe.services.experiment_runner import json_pointer, load_config

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")

REGRESSION = {
    "name": "tiny_regression",
    "task": {
        "kind": "synthetic_regression",
        "spec": {"num_clients": 4, "samples_per_client": 30, "dim": 3},
        "sweep": {"parameter": "num_clients", "values": [3, 4]},
    },
    "seeds": [0, 1],
}

CLASSIFICATION = {
    "name": "tiny_classification",
    "task": {
        "kind": "synthetic_classification",
        "num_clients": 4,
        "samples_per_client": 20,
        "test_samples_per_client": 10,
        "dim": 4,
        "num_classes": 3,
    },
    "partition": {"kind": "class_restriction", "classes_per_client": 2},
    "architecture": {"hidden": [6, 5]},
    "fed": {"participation": 0.5, "local_epochs": 1, "batch_size": 10, "rounds": 4},
    "methods": [
        {"kind": "fedavg"},
        {
            "kind": "ppfe",
            "plan": {"stages": [{"personal_layers": 0, "rounds": 2}, {"personal_layers": 1, "rounds": 2}]},
        },
    ],
    "seeds": [0],
}


def _write(tmp_path, document, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return str(path)


def _invoke(*args):
    return CliRunner().invoke(cli, list(args), catch_exceptions=False)


def _error(result):
    lines = [line for line in result.output.splitlines() if line.startswith('{"error"')]
    assert lines, result.output
    return json.loads(lines[-1])


def test_synthetic_run_directory(tmp_path):
    config = _write(tmp_path, REGRESSION)
    out = tmp_path / "run"
    result = _invoke("synthetic", "--config", config, "--out", str(out))
    assert result.exit_code == 0, result.output
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == ["method", "seed", "sweep_param", "sweep_value", "num_clients", "metric", "weighted_mean", "mean"]
    assert len(metrics) == 3 * 2 * 2
    assert set(metrics["sweep_value"]) == {3, 4}
    assert (out / "plots" / "test_mse.svg").exists()


def test_weighted_means_recompute_from_client_rows(tmp_path):
    config = _write(tmp_path, REGRESSION)
    out = tmp_path / "run"
    _invoke("synthetic", "--config", config, "--out", str(out))
    metrics = pd.read_csv(out / "metrics.csv")
    clients = pd.read_csv(out / "clients.csv")
    for _, row in metrics.iterrows():
        part = clients[(clients.method == row.method) & (clients.seed == row.seed) & (clients.sweep_value == row.sweep_value)]
        recomputed = (part.n_k * part.value).sum() / part.n_k.sum()
        assert recomputed == pytest.approx(row.weighted_mean, rel=1e-12)
        assert len(part) == row.num_clients


def test_rerun_is_byte_identical(tmp_path):
    config = _write(tmp_path, REGRESSION)
    _invoke("synthetic", "--config", config, "--out", str(tmp_path / "a"))
    _invoke("synthetic", "--config", config, "--out", str(tmp_path / "b"))
    for name in ("metrics.csv", "clients.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override(tmp_path):
    config = _write(tmp_path, REGRESSION)
    out = tmp_path / "run"
    _invoke("synthetic", "--config", config, "--out", str(out), "--seeds", "7")
    assert set(pd.read_csv(out / "metrics.csv")["seed"]) == {7}


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    from ppfe.utils.config import get_settings

    document = {k: v for k, v in REGRESSION.items() if k != "seeds"}
    config = _write(tmp_path, document)
    monkeypatch.setenv("PPFE_SEED", "13")
    get_settings.cache_clear()
    try:
        out = tmp_path / "run"
        _invoke("synthetic", "--config", config, "--out", str(out))
        assert set(pd.read_csv(out / "metrics.csv")["seed"]) == {13}
    finally:
        get_settings.cache_clear()


def test_federated_is_thread_independent(tmp_path):
    config = _write(tmp_path, CLASSIFICATION)
    one, many = tmp_path / "one", tmp_path / "many"
    assert _invoke("federated", "--config", config, "--out", str(one), "--threads", "1").exit_code == 0
    assert _invoke("federated", "--config", config, "--out", str(many), "--threads", "3").exit_code == 0
    for name in ("metrics.csv", "rounds.csv", "stages.csv"):
        assert (one / name).read_bytes() == (many / name).read_bytes()
    rounds = pd.read_csv(one / "rounds.csv")
    assert (rounds.groupby("method").size() == 4).all()
    stages = pd.read_csv(one / "stages.csv")
    assert list(stages["stage"]) == [1, 2]


def test_ablation_adds_variants(tmp_path):
    config = _write(tmp_path, CLASSIFICATION)
    out = tmp_path / "run"
    assert _invoke("ablation", "--config", config, "--out", str(out)).exit_code == 0
    assert {"WP", "WPW", "ppfe", "fedavg"} <= set(pd.read_csv(out / "metrics.csv")["method"])


def test_invalid_value_reports_pointer(tmp_path):
    document = json.loads(json.dumps(CLASSIFICATION))
    document["fed"]["participation"] = 2.0
    result = _invoke("federated", "--config", _write(tmp_path, document))
    assert result.exit_code == 2
    error = _error(result)
    assert error["error"] == "ConfigError"
    assert error["pointer"] == "/fed/participation"


def test_nested_union_pointer_skips_tags(tmp_path):
    document = json.loads(json.dumps(CLASSIFICATION))
    document["methods"][1]["plan"]["stages"][1]["rounds"] = 0
    result = _invoke("federated", "--config", _write(tmp_path, document))
    assert _error(result)["pointer"] == "/methods/1/plan/stages/1/rounds"


def test_empty_seeds_is_a_schema_error(tmp_path):
    document = dict(REGRESSION, seeds=[])
    result = _invoke("synthetic", "--config", _write(tmp_path, document))
    assert result.exit_code == 2
    assert _error(result)["pointer"] == "/seeds"


def test_round_budget_mismatch(tmp_path):
    document = json.loads(json.dumps(CLASSIFICATION))
    document["fed"]["rounds"] = 5
    result = _invoke("federated", "--config", _write(tmp_path, document))
    assert result.exit_code == 2
    assert _error(result)["pointer"] == "/methods/1/plan/stages"


def _coef_sweep(values):
    document = json.loads(json.dumps(REGRESSION))
    document["task"]["spec"] = {"num_clients": 3, "samples_per_client": 30, "dim": 4, "local_variance_coefs": [1.0, 0.5, 2.0]}
    document["task"]["sweep"] = {"parameter": "num_clients", "values": values}
    return document


def test_client_coefficients_follow_client_count(tmp_path):
    out = tmp_path / "run"
    result = _invoke("synthetic", "--config", _write(tmp_path, _coef_sweep([3])), "--out", str(out))
    assert result.exit_code == 0, result.output
    assert set(pd.read_csv(out / "metrics.csv")["num_clients"]) == {3}


def test_client_coefficients_reject_other_client_counts(tmp_path):
    result = _invoke("synthetic", "--config", _write(tmp_path, _coef_sweep([3, 4])))
    assert result.exit_code == 2
    assert _error(result)["pointer"] == "/task/spec/local_variance_coefs"


def test_missing_config_is_an_io_error(tmp_path):
    result = _invoke("synthetic", "--config", str(tmp_path / "nope.json"))
    assert result.exit_code == 3
    assert _error(result)["error"] == "FileNotFoundError"


def test_wrong_command_for_task(tmp_path):
    result = _invoke("synthetic", "--config", _write(tmp_path, CLASSIFICATION))
    assert result.exit_code == 2


def test_bound_prints_counts(tmp_path):
    out = tmp_path / "bound"
    result = _invoke("bound", "--config", _write(tmp_path, CLASSIFICATION), "--out", str(out))
    assert result.exit_code == 0, result.output
    assert "n_harm" in result.output
    capacity = pd.read_csv(out / "capacity.csv")
    assert capacity["personal_parameters"].iloc[0] == 0
    assert capacity["personal_parameters"].iloc[1] == 5 * 3 + 3


def test_file_task_class_count_sets_output_width(tmp_path):
    data = tmp_path / "data.csv"
    rows = [f"{i * 0.1},{(i * 7 % 5) * 0.3},{i % 3}" for i in range(20)]
    data.write_text("x0,x1,label\n" + "\n".join(rows) + "\n")
    document = json.loads(json.dumps(CLASSIFICATION))
    document["task"] = {
        "kind": "file",
        "path": str(data),
        "num_clients": 2,
        "samples_per_client": 6,
        "test_samples_per_client": 4,
        "num_classes": 6,
    }
    document["partition"] = {"kind": "iid"}
    out = tmp_path / "bound"
    result = _invoke("bound", "--config", _write(tmp_path, document), "--out", str(out))
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out / "capacity.csv")["personal_parameters"].iloc[1] == 5 * 6 + 6


def test_partition_stats(tmp_path):
    out = tmp_path / "stats"
    result = _invoke("partition-stats", "--config", _write(tmp_path, CLASSIFICATION), "--out", str(out))
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "partition_stats.csv")
    assert frame["num_labels"].between(1, 2).all()
    assert len(frame) == 4


def test_plot_rerenders(tmp_path):
    config = _write(tmp_path, REGRESSION)
    out = tmp_path / "run"
    _invoke("synthetic", "--config", config, "--out", str(out))
    (out / "plots" / "test_mse.svg").unlink()
    assert _invoke("plot", str(out)).exit_code == 0
    assert (out / "plots" / "test_mse.svg").exists()


@pytest.mark.parametrize("name", ["fig2a.json", "fig2b.json", "desk_classification.json", "ablation_mr.json", "ablation_heads.json"])
def test_shipped_configs_validate(name):
    config = load_config(os.path.join(CONFIG_DIR, name))
    assert config.seeds == [0, 1, 2, 3, 4]


def test_json_pointer_escapes():
    assert json_pointer({"a/b": {"c~d": 1}}, ("a/b", "c~d")) == "/a~1b/c~0d"
    assert json_pointer({"task": {"kind": "x", "dim": 0}}, ("task", "x", "dim")) == "/task/dim"
