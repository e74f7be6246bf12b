"""
Staged boosting over progressively personalized models.

Stage 1 is plain FedAvg. Every later stage moves trailing layers from the
shared body into per-client heads (optionally reduced to low rank or masked),
trains with the client's current sample weights, and appends the stage model
to the client's ensemble with coefficient beta.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import load_model, save_model
from .datagen import ClientDataset
from .fedcore import ClientState, FederatedTrainer
from .network import (
    Layer,
    LossKind,
    LowRankDense,
    MaskedDense,
    Model,
    count_layers,
    parametric_indices,
    per_sample_losses,
    predict,
    split_for_personal_depth,
)
from .tensor_core import Matrix, Rng, Vector, svd, truncate_svd
from ..models.config_models import (
    FedConfig,
    LowRankReduction,
    MaskReduction,
    NoReduction,
    ReweightSign,
    StagePlan,
)
from ..models.report_models import RoundReport, StageReport
from ..utils.config import get_settings
from ..utils.errors import DimensionMismatchError, RankError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReweightResult:
    beta: float
    epsilon: float
    weights: Vector


def reweight_from_losses(
    losses: Vector,
    weights: Vector,
    eps_clamp: Optional[float] = None,
    sign: ReweightSign = ReweightSign.ALGORITHM,
) -> ReweightResult:
    """
    eps = sum(w*l) / (max(l) * sum(w)), clamped; beta = 0.5*log((1-eps)/eps);
    w_i <- w_i * exp(+-beta*l_i), rescaled so the weights sum to their count.
    """
    eps_clamp = get_settings().reweight_eps_clamp if eps_clamp is None else eps_clamp
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        raise ValueError("cannot reweight an empty dataset")
    if losses.shape != weights.shape:
        raise DimensionMismatchError("reweight", losses.shape, weights.shape)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("per-sample losses must be finite and non-negative")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("sample weights must be non-negative with a positive sum")

    max_loss = float(losses.max())
    raw = eps_clamp if max_loss == 0.0 else float(np.dot(weights, losses) / (max_loss * weights.sum()))
    epsilon = min(max(raw, eps_clamp), 1.0 - eps_clamp)
    if epsilon != raw:
        logger.warning(f"Clamped weighted error {raw:.6g} to {epsilon:.6g}")
    beta = 0.5 * math.log((1.0 - epsilon) / epsilon)

    direction = 1.0 if ReweightSign(sign) is ReweightSign.ALGORITHM else -1.0
    with np.errstate(divide="ignore"):
        log_w = np.log(weights) + direction * beta * losses
    log_w -= log_w[np.isfinite(log_w)].max()
    updated = np.exp(log_w)
    updated *= weights.size / updated.sum()
    return ReweightResult(beta=beta, epsilon=epsilon, weights=updated)


def reweight_losses(output: Matrix, targets, kind: LossKind, loss_clip: Optional[float]) -> Vector:
    """Per-sample losses fed to reweighting: CE clipped, MSE scaled into [0, 1]"""
    losses = per_sample_losses(output, targets, kind)
    if LossKind(kind) is LossKind.CROSS_ENTROPY:
        return np.minimum(losses, loss_clip) if loss_clip is not None else losses
    peak = losses.max() if losses.size else 0.0
    return losses / peak if peak > 0 else losses


def reweight(
    predictor: Callable[[Matrix], Matrix],
    dataset: ClientDataset,
    weights: Vector,
    eps_clamp: Optional[float] = None,
    sign: ReweightSign = ReweightSign.ALGORITHM,
    loss_clip: Optional[float] = None,
) -> ReweightResult:
    kind = LossKind.CROSS_ENTROPY if dataset.is_classification else LossKind.MSE
    if loss_clip is None and kind is LossKind.CROSS_ENTROPY:
        loss_clip = get_settings().ce_loss_clip
    losses = reweight_losses(predictor(dataset.features), dataset.targets, kind, loss_clip)
    return reweight_from_losses(losses, weights, eps_clamp, sign)


# Ensembles

@dataclass
class EnsembleMember:
    shared: List[Layer]
    head: List[Layer]
    beta: float

    def model(self) -> Model:
        return Model(list(self.shared) + list(self.head), len(self.shared))


@dataclass
class Ensemble:
    """A client's stage models and their boosting coefficients"""

    client_id: int
    members: List[EnsembleMember] = field(default_factory=list)

    @property
    def betas(self) -> List[float]:
        return [m.beta for m in self.members]

    @property
    def num_stages(self) -> int:
        return len(self.members)


def ensemble_predict(ensemble: Ensemble, x: Matrix, betas: Optional[Sequence[float]] = None) -> Matrix:
    """sum_t beta_t * g_t(f_t(x)); raw scores before any softmax"""
    if not ensemble.members:
        raise ValueError("ensemble has no members")
    betas = ensemble.betas if betas is None else list(betas)
    total = None
    for member, beta in zip(ensemble.members, betas):
        out = predict(member.model(), x)
        if total is None:
            total = beta * out
        elif out.shape != total.shape:
            raise DimensionMismatchError("ensemble member output", total.shape, out.shape)
        else:
            total = total + beta * out
    return total


def ensemble_classify(ensemble: Ensemble, x: Matrix) -> np.ndarray:
    return np.argmax(ensemble_predict(ensemble, x), axis=1)


def ensemble_accuracy(ensemble: Ensemble, dataset: ClientDataset) -> float:
    if dataset.n == 0:
        return float("nan")
    return float(np.mean(ensemble_classify(ensemble, dataset.features) == dataset.targets))


def ensemble_mse(ensemble: Ensemble, dataset: ClientDataset) -> float:
    out = ensemble_predict(ensemble, dataset.features)
    return float(np.mean(per_sample_losses(out, dataset.targets, LossKind.MSE)))


def bias_bound(gamma: float, stages: int) -> float:
    """exp(-2 gamma^2 T): training-error ceiling when every stage error is <= 1/2 - gamma"""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if stages < 0:
        raise ValueError(f"stage count must be non-negative, got {stages}")
    return math.exp(-2.0 * gamma * gamma * stages)


# Stage transitions

def stage_mask(shape: Tuple[int, int], fraction: float, seed: int, stage: int, position: int) -> Matrix:
    """Binary mask with exactly round(fraction*size) zeros, identical for every client"""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must lie in [0, 1], got {fraction}")
    size = shape[0] * shape[1]
    zeros = int(round(fraction * size))
    mask = np.ones(size)
    mask[Rng(seed).child("mask", stage, position).permutation(size)[:zeros]] = 0.0
    return mask.reshape(shape)


def _dense_weight(layer: Layer) -> Tuple[Matrix, Vector]:
    if isinstance(layer, LowRankDense):
        return layer.dense_weight(), layer.bias
    return layer.weight, layer.bias


def _low_rank(layer: Layer, rank: int) -> LowRankDense:
    weight, bias = _dense_weight(layer)
    if rank > min(weight.shape):
        raise RankError(f"rank {rank} exceeds min dimension of a {weight.shape[0]}x{weight.shape[1]} layer")
    a, b = truncate_svd(svd(weight), rank)
    return LowRankDense(a, b, bias)


def reduce_layers(
    layers: Sequence[Layer],
    reduction,
    stage: int,
    first_position: int,
    first_personalization: bool,
    head_depth: int,
    reference: Optional[Sequence[Layer]] = None,
) -> List[Layer]:
    """
    Reduce newly personalized layers. ``first_position`` is the index of
    ``layers[0]`` in the full model; ``reference`` is the full FedAvg layer list
    used as the low-rank warm start when requested.
    """
    out = [layer.clone() for layer in layers]
    if isinstance(reduction, NoReduction) or reduction is None:
        return out
    params = parametric_indices(out)
    for order, index in enumerate(params):
        position = first_position + index
        layer = out[index]
        if isinstance(reduction, LowRankReduction):
            # moved layers sit at the input end of the head
            from_output = head_depth - 1 - order
            rank = reduction.ranks[min(from_output, len(reduction.ranks) - 1)]
            source = layer
            if reduction.warm_start == "fedavg" and reference is not None:
                source = reference[position]
            out[index] = _low_rank(source, rank)
        elif isinstance(reduction, MaskReduction):
            fraction = reduction.initial_fraction if first_personalization else reduction.increment_fraction
            weight, bias = _dense_weight(layer)
            mask = stage_mask(weight.shape, fraction, reduction.seed, stage, position)
            out[index] = MaskedDense(weight, bias, mask)
    return out


def transition_stage(
    shared: Sequence[Layer],
    heads: Dict[int, List[Layer]],
    depth: int,
    stage: int,
    reduction=None,
    reference: Optional[Sequence[Layer]] = None,
) -> Tuple[List[Layer], Dict[int, List[Layer]]]:
    """
    Move trailing shared layers into the heads so that ``depth`` parametric
    layers are personal. The moved layers warm-start from the previous shared
    weights, then are reduced once and copied to every client.
    """
    if not heads:
        raise ValueError("transition needs at least one client head")
    sample_head = next(iter(heads.values()))
    full = list(shared) + list(sample_head)
    new_split = split_for_personal_depth(full, depth)
    if new_split > len(shared):
        raise ValueError(f"personal depth {depth} is shallower than the current head")
    moved = list(shared[new_split:])
    previous_depth = len(parametric_indices(sample_head))
    reduced = reduce_layers(
        moved,
        reduction,
        stage,
        first_position=new_split,
        first_personalization=previous_depth == 0,
        head_depth=depth,
        reference=reference,
    )
    new_shared = [layer.clone() for layer in shared[:new_split]]
    new_heads = {
        k: [layer.clone() for layer in reduced] + [layer.clone() for layer in head]
        for k, head in sorted(heads.items())
    }
    return new_shared, new_heads


def dense_parameter_count(layers: Sequence[Layer]) -> int:
    """Parameter count the layers would have without any reduction"""
    total = 0
    for layer in layers:
        if layer.trainable:
            weight, bias = _dense_weight(layer)
            total += weight.size + bias.size
    return total


# Driver

@dataclass
class PPFEResult:
    ensembles: List[Ensemble]
    stage_reports: List[StageReport]
    round_reports: List[RoundReport]
    fedavg_model: Model


def _stage_rates(plan_stage, config: FedConfig, first: bool) -> Tuple[float, float]:
    lr_shared = plan_stage.lr_shared
    if lr_shared is None:
        lr_shared = config.lr if first else config.lr_body
    lr_personal = config.lr if plan_stage.lr_personal is None else plan_stage.lr_personal
    return lr_shared, lr_personal


def _train_error(ensemble: Ensemble, dataset: ClientDataset) -> float:
    if dataset.is_classification:
        return 1.0 - ensemble_accuracy(ensemble, dataset)
    return ensemble_mse(ensemble, dataset)


def _close_stage(
    state: ClientState,
    ensemble: Ensemble,
    shared: List[Layer],
    plan: StagePlan,
    reweighting: bool,
) -> Tuple[float, float]:
    """Append the stage model, compute beta against the partial ensemble, update weights"""
    member = EnsembleMember(shared=shared, head=[layer.clone() for layer in state.head], beta=1.0)
    ensemble.members.append(member)
    result = reweight(
        lambda x: ensemble_predict(ensemble, x),
        state.dataset,
        state.weights,
        eps_clamp=plan.eps_clamp,
        sign=plan.reweight_sign,
        loss_clip=plan.loss_clip,
    )
    member.beta = result.beta
    state.betas.append(result.beta)
    state.epsilons.append(result.epsilon)
    if reweighting:
        state.weights = result.weights
    return result.beta, result.epsilon


def run_ppfe(
    clients: Sequence[ClientDataset],
    model: Model,
    plan: StagePlan,
    config: FedConfig,
    seed: int,
    threads: int = 1,
    progressive: Optional[bool] = None,
    reweighting: Optional[bool] = None,
    on_round: Optional[Callable[[RoundReport], None]] = None,
) -> PPFEResult:
    """
    Train the per-client ensembles. ``progressive=False`` caps the head at one
    layer (WP); ``reweighting=False`` keeps unit sample weights (WPW).
    """
    progressive = plan.progressive if progressive is None else progressive
    reweighting = plan.reweighting if reweighting is None else reweighting
    states = [ClientState(k, dataset) for k, dataset in enumerate(clients)]
    trainer = FederatedTrainer(states, config, seed, threads)
    ensembles = [Ensemble(client_id=k) for k in range(len(states))]
    full_size = count_layers(model.layers)

    shared: List[Layer] = [layer.clone() for layer in model.layers]
    for state in states:
        state.head = []
    fedavg_model: Optional[Model] = None
    stage_reports: List[StageReport] = []
    round_reports: List[RoundReport] = []
    last_errors: Dict[int, float] = {}

    for index, stage_spec in enumerate(plan.stages):
        stage = index + 1
        depth = stage_spec.personal_layers if progressive else min(stage_spec.personal_layers, 1)
        if stage > 1:
            shared, heads = transition_stage(
                shared,
                {s.client_id: s.head for s in states},
                depth,
                stage,
                stage_spec.reduction,
                reference=fedavg_model.layers if fedavg_model is not None else None,
            )
            for state in states:
                state.head = heads[state.client_id]
        lr_shared, lr_personal = _stage_rates(stage_spec, config, first=stage == 1)
        logger.info(f"Stage {stage}/{plan.num_stages}: {depth} personal layers, {stage_spec.rounds} rounds")
        shared, reports = trainer.run_rounds(
            shared, stage_spec.rounds, stage=stage, lr_shared=lr_shared, lr_personal=lr_personal, on_round=on_round
        )
        round_reports.extend(reports)
        if stage == 1:
            fedavg_model = Model([layer.clone() for layer in shared])

        betas, epsilons, errors = [], [], []
        for state, ensemble in zip(states, ensembles):
            beta, epsilon = _close_stage(state, ensemble, shared, plan, reweighting)
            betas.append(beta)
            epsilons.append(epsilon)
            errors.append(_train_error(ensemble, state.dataset))
            previous = last_errors.get(state.client_id)
            if previous is not None and errors[-1] > previous + 1e-12:
                logger.warning(f"Client {state.client_id}: ensemble train error rose at stage {stage}")
            last_errors[state.client_id] = errors[-1]

        head = states[0].head
        personal = count_layers(head)
        dense_personal = dense_parameter_count(head)
        shared_size = count_layers(shared)
        stage_reports.append(StageReport(
            stage=stage,
            personal_layers=depth,
            rounds=stage_spec.rounds,
            shared_parameters=shared_size,
            personal_parameters=personal,
            dense_personal_parameters=dense_personal,
            reduction_fraction=0.0 if dense_personal == 0 else 1.0 - personal / dense_personal,
            transmitted=sum(r.transmitted for r in reports),
            transmitted_fraction=shared_size / full_size if full_size else 0.0,
            mean_beta=float(np.mean(betas)),
            mean_epsilon=float(np.mean(epsilons)),
            client_train_error=errors,
        ))
        logger.info(f"Stage {stage} done: mean beta {np.mean(betas):.4f}, mean train error {np.mean(errors):.4f}")

    return PPFEResult(ensembles, stage_reports, round_reports, fedavg_model)


def save_ensemble(directory: Union[str, Path], ensemble: Ensemble) -> None:
    """stage_<t>.ppfe checkpoints plus betas.csv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, member in enumerate(ensemble.members, start=1):
        save_model(directory / f"stage_{t}.ppfe", member.model())
    with open(directory / "betas.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["stage", "beta"])
        for t, beta in enumerate(ensemble.betas, start=1):
            writer.writerow([t, repr(float(beta))])


def load_ensemble(directory: Union[str, Path], client_id: int = 0) -> Ensemble:
    directory = Path(directory)
    with open(directory / "betas.csv", newline="") as handle:
        rows = list(csv.DictReader(handle))
    ensemble = Ensemble(client_id=client_id)
    for row in rows:
        model = load_model(directory / f"stage_{int(row['stage'])}.ppfe")
        ensemble.members.append(EnsembleMember(model.shared_layers, model.personal_layers, float(row["beta"])))
    return ensemble
