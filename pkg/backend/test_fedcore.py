#!/usr/bin/env python3
"""
Tests for the federated round engine
"""

import logging
import os
import sys

import numpy as np
import pytest

# Add the backend directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppfe.models.config_models import FedConfig
from ppfe.services.datagen import ClientDataset, IIDPartitioner, gen_synthetic_classification
from ppfe.services.fedcore import (
    ClientState,
    FederatedTrainer,
    aggregate_shared,
    comm_account,
    local_train,
    participation_count,
    run_fedavg,
    sample_clients,
)
from ppfe.services.network import Dense, build_mlp, count_layers
from ppfe.services.tensor_core import Rng
from ppfe.utils.errors import AggregationError, TrainingDivergedError


def _clients(num=6, n=20, seed=0):
    pool = gen_synthetic_classification(num, n, 5, 3, 3.0, Rng(seed))
    return [ClientState(c.client_id, c) for c in IIDPartitioner()(pool, num, n, Rng(seed).child("p"))]


def _config(**overrides):
    values = dict(participation=0.5, local_epochs=1, batch_size=5, lr=0.05, rounds=3)
    values.update(overrides)
    return FedConfig(**values)


def _same_layers(a, b):
    return all(
        np.array_equal(pa, pb)
        for la, lb in zip(a, b)
        for pa, pb in zip(la.parameters().values(), lb.parameters().values())
    )


@pytest.mark.parametrize("k,rho,expected", [(10, 0.1, 1), (30, 0.1, 3), (7, 0.5, 4), (5, 1.0, 5), (3, 0.01, 1)])
def test_participation_count(k, rho, expected):
    assert participation_count(k, rho) == expected


def test_sample_clients_sorted_and_reproducible():
    a = sample_clients(20, 0.25, Rng(1).child("sample", 0))
    b = sample_clients(20, 0.25, Rng(1).child("sample", 0))
    assert a == b == sorted(a) and len(a) == 5
    assert sample_clients(20, 0.25, Rng(1), full=True) == list(range(20))


def test_client_weights_must_sum_to_n():
    data = ClientDataset(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        ClientState(0, data, weights=np.ones(3) * 2)


def test_aggregate_is_mean():
    updates = {
        2: [Dense(np.full((1, 2), 3.0), np.array([1.0]))],
        0: [Dense(np.full((1, 2), 1.0), np.array([0.0]))],
    }
    result = aggregate_shared(updates)
    assert np.array_equal(result[0].weight, np.full((1, 2), 2.0))
    assert result[0].bias[0] == 0.5


def test_aggregate_rejects_incongruent_updates():
    with pytest.raises(AggregationError):
        aggregate_shared({0: [Dense(np.ones((1, 2)), np.zeros(1))], 1: [Dense(np.ones((2, 2)), np.zeros(2))]})
    with pytest.raises(AggregationError):
        aggregate_shared({})


def test_local_train_leaves_inputs_untouched():
    clients = _clients()
    model = build_mlp([5, 4, 3], Rng(0))
    before = [layer.clone() for layer in model.layers]
    update = local_train(clients[0], model.layers, [], _config(), None, Rng(1))
    assert _same_layers(model.layers, before)
    assert not _same_layers(update.shared, before)


def test_zero_weight_samples_do_not_matter():
    """A client whose extra rows all carry weight zero trains like the client without them"""
    base = ClientDataset(Rng(0).standard_normal((10, 3)), Rng(1).standard_normal(10))
    padded = ClientDataset(
        np.vstack([base.features, Rng(2).standard_normal((10, 3))]),
        np.concatenate([base.targets, Rng(3).standard_normal(10)]),
    )
    weights = np.concatenate([np.full(10, 2.0), np.zeros(10)])
    config = _config(batch_size=20, local_epochs=1)
    model = build_mlp([3, 1], Rng(4))
    a = local_train(ClientState(0, base), model.layers, [], config, None, Rng(5), epochs=1)
    b = local_train(ClientState(0, padded, weights=weights), model.layers, [], config, None, Rng(5), epochs=1)
    assert np.allclose(a.shared[0].weight, b.shared[0].weight)


def test_divergence_is_reported():
    data = ClientDataset(np.full((4, 2), 1e200), np.full(4, 1e200))
    with pytest.raises(TrainingDivergedError) as info:
        local_train(ClientState(3, data), build_mlp([2, 1], Rng(0)).layers, [], _config(lr=1.0), None, Rng(0))
    assert info.value.client_id == 3


def test_run_rounds_reports_and_full_final_round():
    clients = _clients()
    trainer = FederatedTrainer(clients, _config(), seed=0)
    model = build_mlp([5, 4, 3], Rng(0))
    _, reports = trainer.run_rounds(model.layers, 3)
    assert [r.round_index for r in reports] == [0, 1, 2]
    assert len(reports[0].participants) == 3
    assert reports[-1].participants == list(range(6))
    assert reports[0].transmitted == 2 * count_layers(model.layers) * 3


def test_fedavg_independent_of_thread_count():
    model = build_mlp([5, 4, 3], Rng(0))
    single, _ = run_fedavg(_clients(), model, _config(), seed=4, threads=1)
    many, _ = run_fedavg(_clients(), model, _config(), seed=4, threads=4)
    assert _same_layers(single.layers, many.layers)


def test_alternating_updates_freeze_the_other_side():
    clients = _clients()
    model = build_mlp([5, 4, 3], Rng(0))
    for c in clients:
        c.head = [model.layers[2].clone()]
    trainer = FederatedTrainer(clients, _config(participation=1.0, rounds=1), seed=0)
    shared, _ = trainer.run_rounds(model.layers[:2], 1, alternate=(1, 0))
    # zero body epochs: the body only sees the head pass, which freezes it
    for new, old in zip(shared, model.layers[:2]):
        for name, param in new.parameters().items():
            assert np.allclose(param, old.parameters()[name], rtol=1e-12, atol=1e-15)
    assert not _same_layers(clients[0].head, [model.layers[2]])


def test_comm_account():
    totals = comm_account([100, 40], [4, 4], num_clients=10, rho=0.2)
    # 2 participants x 3 rounds + 10 in the final round
    assert totals == [2 * 100 * 16, 2 * 40 * 16]
    with pytest.raises(ValueError):
        comm_account([1], [1, 2], 10, 0.1)


def test_zero_learning_rate_changes_nothing():
    clients = _clients()
    model = build_mlp([5, 4, 3], Rng(0))
    update = local_train(clients[0], model.layers, [], _config(), None, Rng(1), lr_shared=0.0, epochs=2)
    assert _same_layers(update.shared, model.layers)


def test_single_weighted_sample_trains_like_that_sample_alone():
    data = ClientDataset(Rng(0).standard_normal((8, 3)), Rng(1).standard_normal(8))
    alone = ClientDataset(data.features[5:6], data.targets[5:6])
    weights = np.zeros(8)
    weights[5] = 8.0
    config = _config(batch_size=8)
    model = build_mlp([3, 4, 1], Rng(2))
    a = local_train(ClientState(0, data, weights=weights), model.layers, [], config, None, Rng(3), epochs=3)
    b = local_train(ClientState(0, alone), model.layers, [], config, None, Rng(3), epochs=3)
    for la, lb in zip(a.shared, b.shared):
        for name, param in la.parameters().items():
            np.testing.assert_allclose(param, lb.parameters()[name], rtol=0, atol=1e-10)


def test_one_client_fedavg_is_sequential_local_sgd():
    client = _clients(num=1)[0]
    config = _config(participation=1.0, local_epochs=2, rounds=3)
    model = build_mlp([5, 4, 3], Rng(0))
    global_model, _ = run_fedavg([client], model, config, seed=6)
    layers = model.layers
    for r in range(3):
        layers = local_train(client, layers, [], config, None, Rng(6).child("round", r, "client", 0)).shared
    assert _same_layers(global_model.layers, layers)


def test_rounds_log_wall_time(caplog):
    trainer = FederatedTrainer(_clients(), _config(), seed=0)
    with caplog.at_level(logging.INFO, logger="ppfe.services.fedcore"):
        _, reports = trainer.run_rounds(build_mlp([5, 4, 3], Rng(0)).layers, 2)
    assert all(r.wall_time >= 0.0 for r in reports)
    lines = [m for m in caplog.messages if m.startswith("Stage 1 round")]
    assert len(lines) == 2 and all(m.endswith("s") for m in lines)
