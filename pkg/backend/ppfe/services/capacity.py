"""Per-stage parameter counts and the terms of the generalization bound."""

import logging
import math
from typing import List, Optional, Sequence, Tuple

from ..models.config_models import LowRankReduction, MaskReduction, StagePlan, StageSpec
from ..models.report_models import CapacityRow
from ..utils.helpers import harmonic_mean

logger = logging.getLogger(__name__)


def layer_size(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out + fan_out


def dense_capacity(dims: Sequence[int], personal_depth: int) -> Tuple[int, int]:
    """(D, D') for an MLP with widths dims[0] -> ... -> dims[-1]"""
    sizes = [layer_size(a, b) for a, b in zip(dims[:-1], dims[1:])]
    if not 0 <= personal_depth <= len(sizes):
        raise ValueError(f"personal depth {personal_depth} outside [0, {len(sizes)}]")
    cut = len(sizes) - personal_depth
    return sum(sizes[cut:]), sum(sizes[:cut])


def width_schedule(width_base: int, alpha: float, stages: int) -> List[int]:
    """ceil(W_b * t^-alpha) for t = 1..T"""
    if width_base < 1 or alpha < 0:
        raise ValueError("width_base must be positive and alpha non-negative")
    return [max(1, math.ceil(width_base * t ** (-alpha) - 1e-12)) for t in range(1, stages + 1)]


def plan_from_width_schedule(rounds: Sequence[int], width_base: int, alpha: float, **kwargs) -> StagePlan:
    """Progressive plan whose stage-t head ranks follow the width schedule"""
    widths = width_schedule(width_base, alpha, len(rounds))
    stages = [StageSpec(personal_layers=0, rounds=rounds[0])]
    for t in range(1, len(rounds)):
        stages.append(StageSpec(
            personal_layers=t,
            rounds=rounds[t],
            reduction=LowRankReduction(ranks=[widths[t]]),
        ))
    return StagePlan(stages=stages, **kwargs)


def _reduced_size(fan_in: int, fan_out: int, reduction, from_output: int, first_personalization: bool) -> int:
    if isinstance(reduction, LowRankReduction):
        rank = reduction.ranks[min(from_output, len(reduction.ranks) - 1)]
        if rank > min(fan_in, fan_out):
            raise ValueError(f"rank {rank} exceeds min({fan_in}, {fan_out})")
        return rank * (fan_in + fan_out) + fan_out
    if isinstance(reduction, MaskReduction):
        fraction = reduction.initial_fraction if first_personalization else reduction.increment_fraction
        return fan_in * fan_out - int(round(fraction * fan_in * fan_out)) + fan_out
    return layer_size(fan_in, fan_out)


def stage_counts(dims: Sequence[int], plan: StagePlan) -> List[Tuple[int, int]]:
    """(D_t, D'_t) per stage, following the same reduction rules as the stage transition"""
    pairs = list(zip(dims[:-1], dims[1:]))
    num_layers = len(pairs)
    personal_sizes = {}
    previous_depth = 0
    out = []
    for spec in plan.stages:
        depth = spec.personal_layers
        if depth > num_layers:
            raise ValueError(f"personal depth {depth} exceeds {num_layers} layers")
        for layer in range(num_layers - depth, num_layers - previous_depth):
            fan_in, fan_out = pairs[layer]
            personal_sizes[layer] = _reduced_size(
                fan_in, fan_out, spec.reduction, num_layers - 1 - layer, previous_depth == 0
            )
        shared = sum(layer_size(*pairs[l]) for l in range(num_layers - depth))
        out.append((sum(personal_sizes.values()), shared))
        previous_depth = depth
    return out


def capacity_report(
    dims: Sequence[int],
    plan: StagePlan,
    sample_sizes: Sequence[int],
    width_base: Optional[int] = None,
    alpha: float = 0.0,
) -> List[CapacityRow]:
    """
    Stage-wise D_t and D'_t plus the bound terms
    sqrt(sum D'_u / (K n_harm)), sqrt(sum D_u / n_harm), sqrt(t / n_harm)
    and their root-sum-of-squares.
    """
    num_clients = len(sample_sizes)
    n_harm = harmonic_mean(sample_sizes)
    widths = width_schedule(width_base, alpha, plan.num_stages) if width_base else None
    rows = []
    cum_personal = cum_shared = 0
    for t, (personal, shared) in enumerate(stage_counts(dims, plan), start=1):
        cum_personal += personal
        cum_shared += shared
        shared_term = math.sqrt(cum_shared / (num_clients * n_harm))
        personal_term = math.sqrt(cum_personal / n_harm)
        boosting_term = math.sqrt(t / n_harm)
        rows.append(CapacityRow(
            stage=t,
            personal_layers=plan.stages[t - 1].personal_layers,
            width=widths[t - 1] if widths else dims[-2] if len(dims) > 2 else dims[0],
            shared_parameters=shared,
            personal_parameters=personal,
            cumulative_shared=cum_shared,
            cumulative_personal=cum_personal,
            shared_term=shared_term,
            personal_term=personal_term,
            boosting_term=boosting_term,
            bound=math.sqrt(shared_term ** 2 + personal_term ** 2 + boosting_term ** 2),
        ))
    logger.debug(f"Capacity report over {plan.num_stages} stages, n_harm={n_harm:.3f}")
    return rows
