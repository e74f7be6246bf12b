"""
Comparison methods on the same round engine: local-only training, FedAvg,
FedAvg with local fine-tuning, fixed-depth decoupled heads (joint or
alternating updates) and the progression/reweighting ablations.

Every method returns one single-member Ensemble per client so evaluation is
shared with PPFE.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

from .datagen import ClientDataset
from .fedcore import ClientState, FederatedTrainer, local_train, run_fedavg
from .network import Model, split_for_personal_depth
from .ppfe import Ensemble, EnsembleMember, run_ppfe
from .tensor_core import Rng
from ..models.config_models import (
    AblationMethod,
    FedAvgFTMethod,
    FedAvgMethod,
    FedConfig,
    FixedHeadMethod,
    LocalOnlyMethod,
    PPFEMethod,
    TrainMode,
)
from ..models.report_models import RoundReport, StageReport

logger = logging.getLogger(__name__)


@dataclass
class MethodResult:
    ensembles: List[Ensemble]
    round_reports: List[RoundReport] = field(default_factory=list)
    stage_reports: List[StageReport] = field(default_factory=list)


def _single(client_id: int, model: Model) -> Ensemble:
    return Ensemble(client_id, [EnsembleMember(model.shared_layers, model.personal_layers, 1.0)])


def train_local_only(dataset: ClientDataset, model: Model, config: FedConfig, rng: Rng, epochs: Optional[int] = None) -> Model:
    """One client alone; the whole model is trained with the head learning rate"""
    state = ClientState(dataset.client_id, dataset)
    epochs = config.rounds * config.local_epochs if epochs is None else epochs
    update = local_train(state, model.layers, [], config, None, rng, lr_shared=config.lr, epochs=epochs)
    return Model(update.shared)


def run_local_only(clients: Sequence[ClientDataset], model: Model, config: FedConfig, seed: int) -> MethodResult:
    root = Rng(seed)
    ensembles = [
        _single(k, train_local_only(dataset, model, config, root.child("local", k)))
        for k, dataset in enumerate(clients)
    ]
    return MethodResult(ensembles)


def run_fedavg_baseline(clients: Sequence[ClientDataset], model: Model, config: FedConfig, seed: int, threads: int = 1) -> MethodResult:
    states = [ClientState(k, dataset) for k, dataset in enumerate(clients)]
    global_model, reports = run_fedavg(states, model, config, seed, threads=threads)
    return MethodResult([_single(k, global_model) for k in range(len(states))], reports)


def run_fedavg_ft(
    clients: Sequence[ClientDataset], model: Model, config: FedConfig, seed: int, ft_epochs: int, threads: int = 1
) -> MethodResult:
    """FedAvg, then ``ft_epochs`` of local fine-tuning of the whole model per client"""
    result = run_fedavg_baseline(clients, model, config, seed, threads)
    global_model = result.ensembles[0].members[0].model()
    root = Rng(seed)
    ensembles = []
    for k, dataset in enumerate(clients):
        state = ClientState(k, dataset)
        update = local_train(state, global_model.layers, [], config, None, root.child("finetune", k),
                             lr_shared=config.lr, epochs=ft_epochs)
        ensembles.append(_single(k, Model(update.shared)))
    return MethodResult(ensembles, result.round_reports)


def run_fixed_head(
    clients: Sequence[ClientDataset],
    model: Model,
    config: FedConfig,
    seed: int,
    method: FixedHeadMethod,
    threads: int = 1,
    on_round: Optional[Callable[[RoundReport], None]] = None,
) -> MethodResult:
    """
    Body shared, trailing ``personal_depth`` layers personal. Optional FedAvg
    warm-up rounds come out of the same round budget; the body then switches
    to the later-stage learning rate.
    """
    if method.warmup_rounds >= config.rounds and method.warmup_rounds > 0:
        raise ValueError(f"warmup_rounds {method.warmup_rounds} leaves no rounds of a {config.rounds}-round budget")
    states = [ClientState(k, dataset) for k, dataset in enumerate(clients)]
    trainer = FederatedTrainer(states, config, seed, threads)
    for state in states:
        state.head = []
    layers = [layer.clone() for layer in model.layers]
    reports: List[RoundReport] = []
    stage = 1
    if method.warmup_rounds:
        layers, warm = trainer.run_rounds(layers, method.warmup_rounds, stage=1, lr_shared=config.lr, on_round=on_round)
        reports.extend(warm)
        stage = 2

    split = split_for_personal_depth(layers, method.personal_depth)
    shared = layers[:split]
    for state in states:
        state.head = [layer.clone() for layer in layers[split:]]
    lr_body = config.lr_body if method.warmup_rounds else config.lr
    alternate = None
    if method.mode is TrainMode.ALTERNATING:
        head_epochs = config.local_epochs if method.head_epochs is None else method.head_epochs
        alternate = (head_epochs, method.body_epochs)
    shared, rest = trainer.run_rounds(
        shared,
        config.rounds - method.warmup_rounds,
        stage=stage,
        lr_shared=lr_body,
        lr_personal=config.lr,
        alternate=alternate,
        on_round=on_round,
    )
    reports.extend(rest)
    ensembles = [
        Ensemble(state.client_id, [EnsembleMember(shared, state.head, 1.0)])
        for state in states
    ]
    logger.info(f"Fixed head depth {method.personal_depth} ({method.mode.value}) finished {len(reports)} rounds")
    return MethodResult(ensembles, reports)


def run_baseline(
    clients: Sequence[ClientDataset],
    model: Model,
    method,
    config: FedConfig,
    seed: int,
    threads: int = 1,
    on_round: Optional[Callable[[RoundReport], None]] = None,
) -> MethodResult:
    """Dispatch on the method spec; PPFE itself is accepted too"""
    if isinstance(method, LocalOnlyMethod):
        return run_local_only(clients, model, config, seed)
    if isinstance(method, FedAvgMethod):
        return run_fedavg_baseline(clients, model, config, seed, threads)
    if isinstance(method, FedAvgFTMethod):
        return run_fedavg_ft(clients, model, config, seed, method.ft_epochs, threads)
    if isinstance(method, FixedHeadMethod):
        return run_fixed_head(clients, model, config, seed, method, threads, on_round)
    if isinstance(method, (PPFEMethod, AblationMethod)):
        progressive = None
        reweighting = None
        if isinstance(method, AblationMethod):
            progressive = False
            reweighting = method.variant == "WP"
        result = run_ppfe(clients, model, method.plan, config, seed, threads,
                          progressive=progressive, reweighting=reweighting, on_round=on_round)
        return MethodResult(result.ensembles, result.round_reports, result.stage_reports)
    raise ValueError(f"unknown method {method!r}")
