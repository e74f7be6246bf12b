#!/usr/bin/env python3
"""
Tests for the tensor core: seeded streams, matmul checks and the Jacobi SVD
"""

import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

# Add the backend directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ppfe.services.tensor_core import (
    Rng,
    frobenius,
    gaussian,
    matmul,
    reconstruct,
    reduction_factor,
    svd,
    tail_energy,
    truncate_svd,
)
from ppfe.utils.errors import ConvergenceError, DimensionMismatchError, NonFiniteError, RankError


def _oracle_singular_values(a):
    """Square roots of the eigenvalues of A^T A (or A A^T for wide inputs)"""
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    values = np.linalg.eigvalsh(gram)[::-1]
    return np.sqrt(np.clip(values, 0.0, None))


def test_child_streams_are_reproducible():
    """Same labels give the same stream; siblings differ"""
    a = Rng(7).child("round", 3, "client", 1).standard_normal((4,))
    b = Rng(7).child("round", 3, "client", 1).standard_normal((4,))
    c = Rng(7).child("round", 3, "client", 2).standard_normal((4,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_does_not_consume_parent():
    parent = Rng(11)
    first = Rng(11).standard_normal((3,))
    parent.child("x")
    assert np.array_equal(parent.standard_normal((3,)), first)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionMismatchError) as info:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert info.value.shapes == ((2, 3), (2, 3))


def test_matmul_rejects_overflow():
    with pytest.raises(NonFiniteError):
        matmul(np.full((1, 1), 1e308), np.full((1, 1), 1e308))


def test_gaussian_zero_std_is_constant():
    m = gaussian(Rng(0), 3, 2, mean=1.5, std=0.0)
    assert np.all(m == 1.5)
    with pytest.raises(ValueError):
        gaussian(Rng(0), 1, 1, std=-1.0)


def test_svd_identity():
    r = svd(np.eye(4))
    assert np.allclose(r.s, np.ones(4))
    assert np.allclose(reconstruct(r), np.eye(4))


def test_svd_zero_matrix_has_orthonormal_factors():
    r = svd(np.zeros((5, 3)))
    assert np.all(r.s == 0.0)
    assert np.allclose(r.u.T @ r.u, np.eye(3))
    assert np.allclose(r.vt @ r.vt.T, np.eye(3))


def test_svd_rank_one():
    a = np.outer([1.0, 2.0, 2.0], [3.0, 4.0])
    r = svd(a)
    assert r.s[0] == pytest.approx(15.0, rel=1e-12)
    assert r.s[1] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(r.u.T @ r.u, np.eye(2), atol=1e-10)


def test_svd_wide_matrix():
    a = Rng(3).standard_normal((3, 7))
    r = svd(a)
    assert r.u.shape == (3, 3) and r.vt.shape == (3, 7)
    assert frobenius(reconstruct(r) - a) <= 1e-10 * frobenius(a)


def test_svd_reports_non_convergence():
    a = Rng(5).standard_normal((6, 6))
    with pytest.raises(ConvergenceError) as info:
        svd(a, max_sweeps=1, tolerance=0.0)
    assert info.value.iterations == 1


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_svd_matches_gram_oracle(rows, cols, seed):
    a = Rng(seed).standard_normal((rows, cols))
    r = svd(a)
    assert np.all(np.diff(r.s) <= 1e-12)
    assert np.allclose(r.s, _oracle_singular_values(a), atol=1e-8 * max(1.0, r.s[0]))
    assert frobenius(reconstruct(r) - a) <= 1e-8 * max(frobenius(a), 1e-300)


@pytest.mark.slow
def test_svd_reconstruction_large_random():
    """Fifty random matrices up to 64x64"""
    root = Rng(2024)
    for i in range(50):
        dims = root.child("dims", i).choice(64, 2, replace=True) + 1
        a = root.child("a", i).standard_normal(tuple(int(d) for d in dims))
        r = svd(a)
        assert frobenius(reconstruct(r) - a) <= 1e-8 * frobenius(a)
        assert np.allclose(r.s, _oracle_singular_values(a), rtol=1e-7, atol=1e-9)


def test_truncation_error_equals_tail_energy():
    a = Rng(9).standard_normal((10, 6))
    r = svd(a)
    for rank in range(1, 7):
        left, right = truncate_svd(r, rank)
        assert left.shape == (10, rank) and right.shape == (rank, 6)
        error = frobenius(left @ right - a) ** 2
        assert error == pytest.approx(tail_energy(r, rank), abs=1e-9)


def test_truncate_rank_bounds():
    r = svd(np.eye(3))
    with pytest.raises(RankError):
        truncate_svd(r, 0)
    with pytest.raises(RankError):
        truncate_svd(r, 4)


def test_reduction_factor():
    assert reduction_factor(64, 32, 8) == pytest.approx(64 * 32 / (8 * 96))
    with pytest.raises(RankError):
        reduction_factor(4, 4, 0)
