#!/usr/bin/env python3
"""
Tests for the network core: shapes, losses, backpropagation and SGD partitions
"""

import os
import sys

import numpy as np
import pytest

# Add the backend directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppfe.services.network import (
    Activation,
    ActivationLayer,
    Dense,
    LossKind,
    LowRankDense,
    MaskedDense,
    Model,
    Partition,
    SgdMomentum,
    backward,
    build_mlp,
    forward,
    loss_gradient,
    parameter_count,
    per_sample_losses,
    predict,
    sgd_step,
    split_for_personal_depth,
    weighted_loss,
)
from ppfe.services.tensor_core import Rng
from ppfe.utils.errors import DimensionMismatchError, RankError, StaleCacheError


def _mixed_net(rng: Rng) -> Model:
    """Two hidden layers covering dense, low-rank and masked kinds"""
    mask = (rng.child("mask").uniform(size=(3, 5)) > 0.3).astype(float)
    return Model([
        Dense(rng.child("d").standard_normal((5, 4)), rng.child("db").standard_normal(5)),
        ActivationLayer(Activation.TANH),
        MaskedDense(rng.child("m").standard_normal((3, 5)), rng.child("mb").standard_normal(3), mask),
        ActivationLayer(Activation.TANH),
        LowRankDense(rng.child("a").standard_normal((3, 2)), rng.child("b").standard_normal((2, 3)),
                     rng.child("lb").standard_normal(3)),
    ])


def _numeric_gradient(model, x, y, w, kind, layer, name, h=1e-5):
    param = model.layers[layer].parameters()[name]
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        original = param[idx]
        param[idx] = original + h
        plus = weighted_loss(predict(model, x), y, w, kind)
        param[idx] = original - h
        minus = weighted_loss(predict(model, x), y, w, kind)
        param[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


@pytest.mark.parametrize("kind", [LossKind.MSE, LossKind.CROSS_ENTROPY])
def test_gradient_check(kind):
    """Central differences against backprop on 20 random draws"""
    for draw in range(20):
        rng = Rng(100 + draw)
        model = _mixed_net(rng)
        x = rng.child("x").standard_normal((6, 4))
        w = rng.child("w").uniform(0.1, 2.0, 6)
        if kind is LossKind.MSE:
            y = rng.child("y").standard_normal((6, 3))
        else:
            y = rng.child("y").choice(3, 6, replace=True)
        out, cache = forward(model, x)
        grads = backward(model, cache, loss_gradient(out, y, w, kind))
        for index, layer in enumerate(model.layers):
            for name in layer.parameters():
                numeric = _numeric_gradient(model, x, y, w, kind, index, name)
                analytic = grads[index][name]
                if isinstance(layer, MaskedDense) and name == "weight":
                    numeric = numeric * layer.mask
                scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
                assert np.abs(numeric - analytic).max() / scale <= 1e-4, (draw, index, name)


def test_dense_shapes_and_mismatch():
    model = build_mlp([4, 8, 3], Rng(0))
    assert predict(model, np.ones((5, 4))).shape == (5, 3)
    with pytest.raises(DimensionMismatchError):
        predict(model, np.ones((5, 3)))


def test_layer_composition_is_checked():
    with pytest.raises(DimensionMismatchError):
        Model([Dense(np.ones((3, 2)), np.zeros(3)), Dense(np.ones((2, 4)), np.zeros(2))])


def test_low_rank_rank_limit():
    with pytest.raises(RankError):
        LowRankDense(np.ones((2, 3)), np.ones((3, 4)), np.zeros(2))


def test_low_rank_parameter_count():
    layer = LowRankDense(np.ones((6, 2)), np.ones((2, 5)), np.zeros(6))
    assert layer.parameter_count() == 2 * (6 + 5) + 6
    assert np.array_equal(layer.dense_weight(), np.full((6, 5), 2.0))


def test_masked_entries_stay_zero_after_updates():
    rng = Rng(1)
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    layer = MaskedDense(np.ones((2, 2)), np.zeros(2), mask)
    model = Model([layer])
    opt = SgdMomentum(lr=0.1, momentum=0.5)
    for step in range(3):
        x = rng.child("x", step).standard_normal((4, 2))
        out, cache = forward(model, x)
        grads = backward(model, cache, loss_gradient(out, np.zeros((4, 2)), np.ones(4), LossKind.MSE))
        sgd_step(opt, model, grads)
    assert layer.weight[0, 1] == 0.0 and layer.weight[1, 0] == 0.0
    assert layer.parameter_count() == 2 + 2


def test_stale_cache_is_rejected():
    model = build_mlp([2, 2], Rng(0))
    out, cache = forward(model, np.ones((1, 2)))
    grads = backward(model, cache, np.ones_like(out))
    sgd_step(SgdMomentum(lr=0.1), model, grads)
    with pytest.raises(StaleCacheError):
        backward(model, cache, np.ones_like(out))


def test_sgd_step_respects_partition():
    model = build_mlp([3, 4, 2], Rng(2), split=2)
    before = [layer.clone() for layer in model.layers]
    out, cache = forward(model, np.ones((2, 3)))
    grads = backward(model, cache, loss_gradient(out, [0, 1], np.ones(2), LossKind.CROSS_ENTROPY))
    sgd_step(SgdMomentum(lr=0.5), model, grads, Partition.PERSONAL)
    assert np.array_equal(model.layers[0].weight, before[0].weight)
    assert not np.array_equal(model.layers[2].weight, before[2].weight)


def test_momentum_accumulates():
    model = Model([Dense(np.zeros((1, 1)), np.zeros(1))])
    opt = SgdMomentum(lr=1.0, momentum=0.5)
    for _ in range(2):
        out, cache = forward(model, np.zeros((1, 1)))
        grads = backward(model, cache, np.ones((1, 1)))
        sgd_step(opt, model, grads)
    # bias gradient 1 each step: -1 then -(0.5 + 1)
    assert model.layers[0].bias[0] == pytest.approx(-2.5)


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        SgdMomentum(lr=-0.1)
    with pytest.raises(ValueError):
        SgdMomentum(lr=0.1, momentum=1.0)


def test_weighted_loss_ignores_zero_weight_rows():
    out = np.array([[0.0], [10.0]])
    assert weighted_loss(out, [0.0, 0.0], [1.0, 0.0], LossKind.MSE) == 0.0
    with pytest.raises(ValueError):
        weighted_loss(out, [0.0, 0.0], [0.0, 0.0], LossKind.MSE)


def test_cross_entropy_uniform_scores():
    losses = per_sample_losses(np.zeros((2, 4)), [1, 3], LossKind.CROSS_ENTROPY)
    assert np.allclose(losses, np.log(4.0))


def test_split_for_personal_depth():
    model = build_mlp([4, 8, 6, 2], Rng(0))
    layers = model.layers
    assert split_for_personal_depth(layers, 0) == len(layers)
    assert split_for_personal_depth(layers, 1) == 4
    assert split_for_personal_depth(layers, 3) == 0
    with pytest.raises(ValueError):
        split_for_personal_depth(layers, 4)


def test_parameter_count_by_partition():
    model = build_mlp([4, 8, 2], Rng(0), split=2)
    assert parameter_count(model, Partition.SHARED) == 4 * 8 + 8
    assert parameter_count(model, Partition.PERSONAL) == 8 * 2 + 2
    assert parameter_count(model) == 58
