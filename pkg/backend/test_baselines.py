#!/usr/bin/env python3
"""
Tests for the comparison methods and their equivalences with FedAvg and PPFE
"""

import os
import sys

import numpy as np
import pytest

# Add the backend directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppfe.models.config_models import (
    AblationMethod,
    FedAvgFTMethod,
    FedAvgMethod,
    FedConfig,
    FixedHeadMethod,
    LocalOnlyMethod,
    PPFEMethod,
    StagePlan,
    StageSpec,
    TrainMode,
)
from ppfe.services.baselines import run_baseline, run_fixed_head, train_local_only
from ppfe.services.datagen import ClassRestrictionPartitioner, gen_synthetic_classification, split_train_test
from ppfe.services.network import build_mlp
from ppfe.services.ppfe import ensemble_accuracy, run_ppfe
from ppfe.services.tensor_core import Rng


def _clients(seed=0, num=6, n=30):
    pool = gen_synthetic_classification(num, n, 6, 4, 3.0, Rng(seed), oversample=2.0)
    return ClassRestrictionPartitioner(2)(pool, num, n, Rng(seed).child("p"))


def _config(rounds=4):
    return FedConfig(participation=0.5, local_epochs=1, batch_size=10, lr=0.05, lr_body=0.01, rounds=rounds)


def _params(layers):
    return [p for layer in layers for p in layer.parameters().values()]


def _identical(a, b):
    pa, pb = _params(a), _params(b)
    return len(pa) == len(pb) and all(np.array_equal(x, y) for x, y in zip(pa, pb))


@pytest.fixture
def setup():
    return _clients(), build_mlp([6, 8, 5, 4], Rng(1))


def test_fixed_head_depth_zero_is_fedavg(setup):
    clients, model = setup
    fedavg = run_baseline(clients, model, FedAvgMethod(), _config(), seed=3)
    fixed = run_baseline(clients, model, FixedHeadMethod(personal_depth=0), _config(), seed=3)
    for a, b in zip(fedavg.ensembles, fixed.ensembles):
        assert _identical(a.members[0].model().layers, b.members[0].model().layers)


def test_fedavg_ft_with_zero_epochs_is_fedavg(setup):
    clients, model = setup
    fedavg = run_baseline(clients, model, FedAvgMethod(), _config(), seed=3)
    ft = run_baseline(clients, model, FedAvgFTMethod(ft_epochs=0), _config(), seed=3)
    for a, b in zip(fedavg.ensembles, ft.ensembles):
        assert _identical(a.members[0].model().layers, b.members[0].model().layers)


def test_single_stage_ppfe_method_is_fedavg(setup):
    clients, model = setup
    fedavg = run_baseline(clients, model, FedAvgMethod(), _config(), seed=3)
    plan = StagePlan(stages=[StageSpec(personal_layers=0, rounds=4)])
    ppfe = run_baseline(clients, model, PPFEMethod(plan=plan), _config(), seed=3)
    assert _identical(fedavg.ensembles[0].members[0].shared, ppfe.ensembles[0].members[0].shared)


def test_warm_fixed_head_matches_two_stage_plan_without_reweighting(setup):
    """Warm-up then split equals a two-stage run whose second member carries the prediction"""
    clients, model = setup
    method = FixedHeadMethod(personal_depth=1, warmup_rounds=2)
    fixed = run_fixed_head(clients, model, _config(), 3, method)
    plan = StagePlan(
        stages=[StageSpec(personal_layers=0, rounds=2), StageSpec(personal_layers=1, rounds=2)],
        reweighting=False,
    )
    staged = run_ppfe(clients, model, plan, _config(), seed=3)
    for a, b in zip(fixed.ensembles, staged.ensembles):
        assert _identical(a.members[0].shared, b.members[1].shared)
        assert _identical(a.members[0].head, b.members[1].head)


def test_fixed_head_keeps_heads_personal(setup):
    clients, model = setup
    result = run_baseline(clients, model, FixedHeadMethod(personal_depth=2), _config(), seed=0)
    assert len(result.round_reports) == 4
    heads = [e.members[0].head for e in result.ensembles]
    assert not _identical(heads[0], heads[1])
    assert _identical(result.ensembles[0].members[0].shared, result.ensembles[1].members[0].shared)


def test_alternating_mode_runs(setup):
    clients, model = setup
    method = FixedHeadMethod(personal_depth=1, mode=TrainMode.ALTERNATING, head_epochs=1, body_epochs=1)
    result = run_baseline(clients, model, method, _config(), seed=0)
    assert len(result.round_reports) == 4


def test_warmup_must_leave_rounds(setup):
    clients, model = setup
    with pytest.raises(ValueError):
        run_fixed_head(clients, model, _config(), 0, FixedHeadMethod(personal_depth=1, warmup_rounds=4))


def test_local_only_uses_no_communication(setup):
    clients, model = setup
    result = run_baseline(clients, model, LocalOnlyMethod(), _config(), seed=0)
    assert result.round_reports == []
    assert len(result.ensembles) == len(clients)
    trained = train_local_only(clients[0], model, _config(), Rng(0), epochs=0)
    assert _identical(trained.layers, model.layers)


def test_ablation_variants(setup):
    clients, model = setup
    plan = StagePlan(stages=[StageSpec(personal_layers=d, rounds=2) for d in (0, 1, 2)])
    wp = run_baseline(clients, model, AblationMethod(variant="WP", plan=plan), _config(6), seed=0)
    wpw = run_baseline(clients, model, AblationMethod(variant="WPW", plan=plan), _config(6), seed=0)
    assert [r.personal_layers for r in wp.stage_reports] == [0, 1, 1]
    assert [r.personal_layers for r in wpw.stage_reports] == [0, 1, 1]
    assert len(wp.ensembles[0].members) == 3


def _run_accuracy(method, seed, rounds=40):
    pool_clients = _clients(seed=seed, num=20, n=60)
    clients = split_train_test(pool_clients, 0.25, Rng(seed).child("split"))
    train = [c.train_part() for c in clients]
    test = [c.test_part() for c in clients]
    model = build_mlp([6, 16, 8, 4], Rng(seed).child("init"))
    config = FedConfig(participation=0.2, local_epochs=2, batch_size=10, lr=0.05, lr_body=0.01, rounds=rounds)
    result = run_baseline(train, model, method, config, seed)
    sizes = np.array([c.n for c in train])
    accuracy = np.array([ensemble_accuracy(e, t) for e, t in zip(result.ensembles, test)])
    return float(np.dot(sizes, accuracy) / sizes.sum())


@pytest.mark.slow
def test_ppfe_beats_fedavg_on_restricted_classes():
    plan = StagePlan(stages=[StageSpec(personal_layers=d, rounds=10) for d in (0, 1, 2, 3)])
    for seed in range(3):
        ppfe = _run_accuracy(PPFEMethod(plan=plan), seed)
        fedavg = _run_accuracy(FedAvgMethod(), seed)
        assert ppfe >= fedavg


def _two_stage_plan():
    return StagePlan(stages=[StageSpec(personal_layers=0, rounds=2), StageSpec(personal_layers=1, rounds=2)])


def test_wpw_matches_warm_fixed_head(setup):
    """Without reweighting the one-layer head after a FedAvg stage is the warm M1 baseline"""
    clients, model = setup
    fixed = run_baseline(clients, model, FixedHeadMethod(personal_depth=1, warmup_rounds=2), _config(), seed=5)
    wpw = run_baseline(clients, model, AblationMethod(variant="WPW", plan=_two_stage_plan()), _config(), seed=5)
    for a, b in zip(fixed.ensembles, wpw.ensembles):
        assert _identical(a.members[0].shared, b.members[1].shared)
        assert _identical(a.members[0].head, b.members[1].head)


def test_wp_reweights_where_wpw_does_not(setup):
    clients, model = setup
    wp = run_baseline(clients, model, AblationMethod(variant="WP", plan=_two_stage_plan()), _config(), seed=5)
    wpw = run_baseline(clients, model, AblationMethod(variant="WPW", plan=_two_stage_plan()), _config(), seed=5)
    for a, b in zip(wp.ensembles, wpw.ensembles):
        assert _identical(a.members[0].shared, b.members[0].shared)
    assert not all(_identical(a.members[1].head, b.members[1].head) for a, b in zip(wp.ensembles, wpw.ensembles))
