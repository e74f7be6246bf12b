"""
Closed-form ridge track: local, federated-average and staged (boosted)
linear estimators on the synthetic regression clients.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .datagen import ClientDataset, gen_synthetic_regression
from .ppfe import reweight_from_losses
from .tensor_core import Matrix, Rng, Vector, as_matrix
from ..models.config_models import (
    LinearFedAvg,
    LinearLocal,
    LinearPPFE,
    SyntheticRegressionSpec,
    default_lambda_grid,
    method_label,
)
from ..models.report_models import RidgeFit
from ..utils.errors import DatasetError, DimensionMismatchError, SingularSystemError

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-8


def ridge_solve(x: Matrix, y: Vector, lam: float, weights: Optional[Vector] = None) -> Vector:
    """Solve (X^T W X + lam I) w = X^T W y by Cholesky"""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatchError("ridge_solve", x.shape, y.shape)
    xw = x if weights is None else x * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    gram = xw.T @ x + lam * np.eye(x.shape[1])
    rhs = xw.T @ y
    try:
        factor = cho_factor(gram, lower=True, check_finite=True)
    except LinAlgError as e:
        raise SingularSystemError(f"normal equations not positive definite at lambda={lam}: {e}")
    w = cho_solve(factor, rhs)
    residual = np.linalg.norm(gram @ w - rhs)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(gram) * np.linalg.norm(w), 1e-300)
    if not np.all(np.isfinite(w)) or residual > RESIDUAL_TOLERANCE * scale:
        raise SingularSystemError(f"ill-conditioned normal equations at lambda={lam} (residual {residual:.3e})")
    return w


def mse(x: Matrix, y: Vector, w: Vector) -> float:
    diff = as_matrix(x) @ w - np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.mean(diff * diff))


def _holdout(dataset: ClientDataset, fraction: float, rng: Rng) -> Tuple[ClientDataset, ClientDataset]:
    if dataset.n < 2:
        raise DatasetError(f"client {dataset.client_id} has too few samples for a holdout split")
    return dataset.split_holdout(fraction, rng)


def select_lambda(
    dataset: ClientDataset,
    grid: Sequence[float],
    holdout_fraction: float,
    rng: Rng,
    weights: Optional[Vector] = None,
) -> RidgeFit:
    """Pick lambda by holdout MSE (ties go to the smaller lambda), then refit on all rows"""
    if not grid:
        raise ValueError("lambda grid is empty")
    fit, hold = _holdout(_with_row_ids(dataset), holdout_fraction, rng)
    fit_w = None
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        fit_w = weights[fit.indices]
    best_lam, best_mse = None, np.inf
    for lam in sorted(grid):
        try:
            w = ridge_solve(fit.features, fit.targets, lam, fit_w)
        except SingularSystemError:
            logger.debug(f"Skipping singular lambda={lam} on client {dataset.client_id}")
            continue
        score = mse(hold.features, hold.targets, w)
        if score < best_mse:
            best_lam, best_mse = lam, score
    if best_lam is None:
        raise SingularSystemError(f"every lambda in the grid is singular for client {dataset.client_id}")
    return RidgeFit(w=ridge_solve(dataset.features, dataset.targets, best_lam, weights), lam=best_lam, val_mse=best_mse)


def _with_row_ids(dataset: ClientDataset) -> ClientDataset:
    """Tag rows with their position so holdout parts map back to parent rows"""
    return ClientDataset(
        features=dataset.features,
        targets=dataset.targets,
        num_classes=dataset.num_classes,
        client_id=dataset.client_id,
        indices=np.arange(dataset.n),
    )


# Methods

@dataclass
class LinearResult:
    """Per-client test MSE of one linear method"""

    client_mse: List[float]
    client_sizes: List[int]
    lambdas: List[float] = field(default_factory=list)
    betas: List[List[float]] = field(default_factory=list)
    coefficients: List[List[float]] = field(default_factory=list)
    components: List[List[Vector]] = field(default_factory=list)
    predictors: List[Vector] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.client_mse))


def _splits(clients: Sequence[ClientDataset]) -> Tuple[List[ClientDataset], List[ClientDataset]]:
    train = [_with_row_ids(c.train_part()) for c in clients]
    test = [c.test_part() for c in clients]
    return train, test


def run_local(clients: Sequence[ClientDataset], grid: Sequence[float], holdout: float, rng: Rng) -> LinearResult:
    train, test = _splits(clients)
    fits = [select_lambda(d, grid, holdout, rng.child("holdout", d.client_id)) for d in train]
    return LinearResult(
        client_mse=[mse(t.features, t.targets, f.w) for t, f in zip(test, fits)],
        client_sizes=[d.n for d in train],
        lambdas=[f.lam for f in fits],
    )


def fedavg_solution(
    train: Sequence[ClientDataset], grid: Sequence[float], holdout: float, rng: Rng
) -> Tuple[Vector, float]:
    """Average of client ridge solutions under one shared lambda chosen by mean holdout MSE"""
    parts = [_holdout(d, holdout, rng.child("holdout", d.client_id)) for d in train]
    best_lam, best_score = None, np.inf
    for lam in sorted(grid):
        try:
            w = np.mean([ridge_solve(f.features, f.targets, lam) for f, _ in parts], axis=0)
        except SingularSystemError:
            continue
        score = float(np.mean([mse(h.features, h.targets, w) for _, h in parts]))
        if score < best_score:
            best_lam, best_score = lam, score
    if best_lam is None:
        raise SingularSystemError("every lambda in the grid is singular for the federated average")
    solutions = np.stack([ridge_solve(d.features, d.targets, best_lam) for d in train])
    return solutions.mean(axis=0), best_lam


def run_fedavg_linear(clients: Sequence[ClientDataset], grid: Sequence[float], holdout: float, rng: Rng) -> LinearResult:
    train, test = _splits(clients)
    w, lam = fedavg_solution(train, grid, holdout, rng)
    logger.debug(f"Linear FedAvg picked lambda={lam}")
    return LinearResult(
        client_mse=[mse(t.features, t.targets, w) for t in test],
        client_sizes=[d.n for d in train],
        lambdas=[lam] * len(train),
    )


def _normalized_losses(x: Matrix, y: Vector, w: Vector) -> Vector:
    diff = as_matrix(x) @ w - y
    losses = diff * diff
    peak = losses.max()
    return losses / peak if peak > 0 else losses


def _fit_stage(
    dataset: ClientDataset,
    offset: Vector,
    weights: Vector,
    grid: Sequence[float],
    holdout: float,
    rng: Rng,
    residual: bool,
) -> Vector:
    """
    Weighted ridge for one boosting stage. In residual mode the target is
    y - X offset and lambda is chosen by the holdout MSE of offset + v.
    """
    target = dataset.targets - dataset.features @ offset if residual else dataset.targets
    stage_data = ClientDataset(dataset.features, target, client_id=dataset.client_id, indices=dataset.indices)
    fit, hold = _holdout(stage_data, holdout, rng)
    rows, hold_rows = fit.indices, hold.indices
    best_lam, best_score = None, np.inf
    for lam in sorted(grid):
        try:
            v = ridge_solve(fit.features, fit.targets, lam, weights[rows])
        except SingularSystemError:
            continue
        predictor = offset + v if residual else v
        score = mse(dataset.features[hold_rows], dataset.targets[hold_rows], predictor)
        if score < best_score:
            best_lam, best_score = lam, score
    if best_lam is None:
        raise SingularSystemError(f"every stage lambda is singular for client {dataset.client_id}")
    return ridge_solve(stage_data.features, stage_data.targets, best_lam, weights)


def stage_coefficient(beta: float, base: float) -> float:
    """Weight of a residual stage: its beta relative to the stage-1 beta, kept in [0, 1]"""
    ratio = beta / base if base > 0 else beta
    return min(max(ratio, 0.0), 1.0)


def run_ppfe_linear(
    clients: Sequence[ClientDataset],
    method: LinearPPFE,
    grid: Sequence[float],
    holdout: float,
    rng: Rng,
    eps_clamp: Optional[float] = None,
) -> LinearResult:
    """
    Stage 1 is the federated average. Each later stage fits a weighted ridge
    per client with the lambda grid shrunk by ``lambda_decay`` per stage.

    Reweighting sees the running ensemble with the new stage at coefficient 1;
    once its beta is known the stage enters with ``stage_coefficient`` (residual
    mode) or as a beta-weighted average of full predictors (beta mode).
    """
    train, test = _splits(clients)
    w_avg, lam = fedavg_solution(train, grid, holdout, rng)
    residual = method.combine == "residual"
    mses, betas_all, coefs_all, components_all, predictors = [], [], [], [], []
    for dataset, test_set in zip(train, test):
        client_rng = rng.child("ppfe", dataset.client_id)
        weights = np.ones(dataset.n)
        components = [w_avg]
        result = reweight_from_losses(_normalized_losses(dataset.features, dataset.targets, w_avg), weights, eps_clamp)
        betas = [result.beta]
        coefs = [1.0]
        if method.reweighting:
            weights = result.weights
        predictor = w_avg.copy()
        for t in range(2, method.stages + 1):
            stage_grid = [g * method.lambda_decay ** (-(t - 1)) for g in grid]
            v = _fit_stage(dataset, predictor, weights, stage_grid, holdout, client_rng.child("stage", t), residual)
            components.append(v)
            if residual:
                candidate = predictor + v
            else:
                positive = [max(b, 0.0) for b in betas] + [1.0]
                candidate = np.average(np.stack(components), axis=0, weights=positive)
            result = reweight_from_losses(_normalized_losses(dataset.features, dataset.targets, candidate), weights, eps_clamp)
            betas.append(result.beta)
            if method.reweighting:
                weights = result.weights
            if residual:
                coefs.append(stage_coefficient(result.beta, betas[0]))
                predictor = predictor + coefs[-1] * v
            else:
                positive = [max(b, 0.0) for b in betas]
                total = sum(positive)
                coefs = [p / total for p in positive] if total > 0 else [0.0] * (len(betas) - 1) + [1.0]
                predictor = np.average(np.stack(components), axis=0, weights=coefs)
        mses.append(mse(test_set.features, test_set.targets, predictor))
        betas_all.append(betas)
        coefs_all.append(coefs)
        components_all.append(components)
        predictors.append(predictor)
    return LinearResult(
        client_mse=mses,
        client_sizes=[d.n for d in train],
        lambdas=[lam] * len(train),
        betas=betas_all,
        coefficients=coefs_all,
        components=components_all,
        predictors=predictors,
    )


def run_linear_method(clients: Sequence[ClientDataset], method, grid: Sequence[float], holdout: float, rng: Rng) -> LinearResult:
    if isinstance(method, LinearLocal):
        return run_local(clients, grid, holdout, rng.child("local"))
    if isinstance(method, LinearFedAvg):
        return run_fedavg_linear(clients, grid, holdout, rng.child("fedavg"))
    if isinstance(method, LinearPPFE):
        return run_ppfe_linear(clients, method, grid, holdout, rng.child("ppfe"))
    raise ValueError(f"unknown linear method {method!r}")


def run_linear_experiment(
    spec: SyntheticRegressionSpec,
    methods: Sequence,
    seed: int,
    grid: Optional[Sequence[float]] = None,
    holdout: float = 0.2,
) -> Dict[str, LinearResult]:
    """Generate one synthetic population and evaluate every method on it"""
    grid = list(grid) if grid is not None else default_lambda_grid()
    rng = Rng(seed)
    clients, _ = gen_synthetic_regression(spec, rng.child("data"))
    results = {}
    for method in methods:
        result = run_linear_method(clients, method, grid, holdout, rng)
        label = method_label(method)
        results[label] = result
        logger.info(f"Linear {label}: mean test MSE {result.mean:.6f} over {len(clients)} clients")
    return results
