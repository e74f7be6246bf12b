"""
Federated round engine: participation sampling, weighted local SGD, FedAvg
aggregation of the shared body, and communication accounting.

Determinism contract: every random draw comes from a stream keyed by
(seed, global round, client id), and aggregation always reduces in ascending
client-id order, so results do not depend on the worker-thread count.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datagen import ClientDataset
from .network import (
    Layer,
    LossKind,
    Model,
    Partition,
    SgdMomentum,
    backward,
    count_layers,
    forward,
    loss_gradient,
    sgd_step,
    weighted_loss,
)
from .tensor_core import Rng, Vector
from ..models.config_models import FedConfig
from ..models.report_models import RoundReport
from ..utils.errors import AggregationError, DimensionMismatchError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class ClientState:
    """Everything a client keeps between rounds"""

    client_id: int
    dataset: ClientDataset
    weights: Optional[Vector] = None
    head: List[Layer] = field(default_factory=list)
    stage_heads: List[List[Layer]] = field(default_factory=list)
    betas: List[float] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)

    def __post_init__(self):
        n = self.dataset.n
        if self.weights is None:
            self.weights = np.ones(n)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.shape[0] != n:
            raise DimensionMismatchError("client weights", (n,), self.weights.shape)
        if np.any(self.weights < 0):
            raise ValueError(f"client {self.client_id} has negative sample weights")
        if abs(self.weights.sum() - n) > 1e-9 * max(n, 1):
            raise ValueError(f"client {self.client_id} weights must sum to n_k={n}")

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.CROSS_ENTROPY if self.dataset.is_classification else LossKind.MSE


@dataclass
class LocalUpdate:
    client_id: int
    shared: List[Layer]
    head: List[Layer]
    loss: float


def participation_count(num_clients: int, rho: float) -> int:
    """ceil(rho*K) clamped to [1, K]; rho*K is rounded first so 0.1*30 gives 3"""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"participation ratio must lie in (0, 1], got {rho}")
    return max(1, min(num_clients, math.ceil(round(rho * num_clients, 9))))


def sample_clients(num_clients: int, rho: float, rng: Rng, full: bool = False) -> List[int]:
    """Sorted ids of a uniform subset of size ceil(rho*K), or every id when full"""
    size = participation_count(num_clients, rho)
    if full or size == num_clients:
        return list(range(num_clients))
    return sorted(int(k) for k in rng.choice(num_clients, size, replace=False))


def local_train(
    client: ClientState,
    shared: Sequence[Layer],
    head: Sequence[Layer],
    config: FedConfig,
    weights: Optional[Vector],
    rng: Rng,
    lr_shared: Optional[float] = None,
    lr_personal: Optional[float] = None,
    epochs: Optional[int] = None,
    train_shared: bool = True,
    train_personal: bool = True,
    round_index: int = 0,
) -> LocalUpdate:
    """
    Weighted mini-batch SGD with momentum over the client's data.

    Works on clones of ``shared`` and ``head``; the caller decides what to keep.
    Batches whose weights sum to zero are skipped.
    """
    model = Model.compose(shared, head)
    data = client.dataset
    w = client.weights if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != data.n:
        raise DimensionMismatchError("local_train weights", (data.n,), w.shape)
    opt_shared = SgdMomentum(config.lr if lr_shared is None else lr_shared, config.momentum)
    opt_personal = SgdMomentum(config.lr if lr_personal is None else lr_personal, config.momentum)
    epochs = config.local_epochs if epochs is None else epochs
    kind = client.loss_kind

    last_loss = float("nan")
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).permutation(data.n)
        loss_sum, weight_sum = 0.0, 0.0
        for start in range(0, data.n, config.batch_size):
            rows = order[start:start + config.batch_size]
            batch_w = w[rows]
            total = float(batch_w.sum())
            if total <= 0:
                continue
            output, cache = forward(model, data.features[rows])
            targets = data.targets[rows]
            loss = weighted_loss(output, targets, batch_w, kind)
            if not math.isfinite(loss):
                raise TrainingDivergedError(client.client_id, round_index, epoch, loss)
            grads = backward(model, cache, loss_gradient(output, targets, batch_w, kind))
            if train_shared:
                sgd_step(opt_shared, model, grads, Partition.SHARED)
            if train_personal:
                sgd_step(opt_personal, model, grads, Partition.PERSONAL)
            loss_sum += loss * total
            weight_sum += total
        if weight_sum > 0:
            last_loss = loss_sum / weight_sum

    return LocalUpdate(client.client_id, model.shared_layers, model.personal_layers, last_loss)


def _congruent(reference: Sequence[Layer], other: Sequence[Layer]) -> bool:
    if len(reference) != len(other):
        return False
    for a, b in zip(reference, other):
        if a.kind is not b.kind:
            return False
        pa, pb = a.parameters(), b.parameters()
        if pa.keys() != pb.keys() or any(pa[k].shape != pb[k].shape for k in pa):
            return False
    return True


def aggregate_shared(updates: Mapping[int, Sequence[Layer]]) -> List[Layer]:
    """Unweighted elementwise mean, summed in ascending client-id order"""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ids = sorted(updates)
    reference = updates[ids[0]]
    for client_id in ids[1:]:
        if not _congruent(reference, updates[client_id]):
            raise AggregationError(f"update from client {client_id} is not congruent with client {ids[0]}")
    result = [layer.clone() for layer in reference]
    count = float(len(ids))
    for index, layer in enumerate(result):
        for name, param in layer.parameters().items():
            total = np.zeros_like(param)
            for client_id in ids:
                total += updates[client_id][index].parameters()[name]
            param[...] = total / count
        layer.project()
    return result


class FederatedTrainer:
    """Runs rounds of sample -> local_train -> aggregate over a client registry"""

    def __init__(self, clients: Sequence[ClientState], config: FedConfig, seed: int, threads: int = 1):
        self.clients: Dict[int, ClientState] = {c.client_id: c for c in clients}
        self.num_clients = len(self.clients)
        if sorted(self.clients) != list(range(self.num_clients)):
            raise ValueError("client ids must be 0..K-1")
        self.config = config
        self.root = Rng(seed)
        self.threads = max(1, int(threads))
        self.global_round = 0

    def _train_one(self, client_id: int, shared: Sequence[Layer], kwargs) -> LocalUpdate:
        client = self.clients[client_id]
        rng = self.root.child("round", self.global_round, "client", client_id)
        kwargs = dict(kwargs)
        alternate = kwargs.pop("alternate", None)
        if alternate is None:
            return local_train(client, shared, client.head, self.config, client.weights, rng,
                               round_index=self.global_round, **kwargs)
        head_epochs, body_epochs = alternate
        head_pass = local_train(client, shared, client.head, self.config, client.weights, rng.child("head"),
                                epochs=head_epochs, train_shared=False, round_index=self.global_round, **kwargs)
        body_pass = local_train(client, head_pass.shared, head_pass.head, self.config, client.weights, rng.child("body"),
                                epochs=body_epochs, train_personal=False, round_index=self.global_round, **kwargs)
        loss = body_pass.loss if math.isfinite(body_pass.loss) else head_pass.loss
        return LocalUpdate(client_id, body_pass.shared, body_pass.head, loss)

    def _train_all(self, ids: List[int], shared: Sequence[Layer], kwargs) -> Dict[int, LocalUpdate]:
        if self.threads == 1 or len(ids) == 1:
            return {k: self._train_one(k, shared, kwargs) for k in ids}
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            futures = {k: pool.submit(self._train_one, k, shared, kwargs) for k in ids}
            return {k: futures[k].result() for k in ids}

    def run_rounds(
        self,
        shared: Sequence[Layer],
        rounds: int,
        stage: int = 1,
        lr_shared: Optional[float] = None,
        lr_personal: Optional[float] = None,
        alternate: Optional[Tuple[int, int]] = None,
        on_round: Optional[Callable[[RoundReport], None]] = None,
    ) -> Tuple[List[Layer], List[RoundReport]]:
        """
        Run ``rounds`` global rounds starting from ``shared``.

        Participants keep their trained head; non-participants keep their
        previous head untouched. The last round uses every client when
        ``full_final_round`` is set. ``alternate=(head_epochs, body_epochs)``
        trains the head with the body frozen, then the body with the head frozen.
        """
        shared = [layer.clone() for layer in shared]
        shared_size = count_layers(shared)
        kwargs = dict(lr_shared=lr_shared, lr_personal=lr_personal)
        reports: List[RoundReport] = []
        for r in range(rounds):
            started = time.perf_counter()
            final = self.config.full_final_round and r == rounds - 1
            ids = sample_clients(self.num_clients, self.config.participation,
                                 self.root.child("sample", self.global_round), full=final)
            updates = self._train_all(ids, shared, dict(kwargs, alternate=alternate))
            for k in ids:
                self.clients[k].head = updates[k].head
            if shared:
                shared = aggregate_shared({k: updates[k].shared for k in ids})
            report = RoundReport(
                stage=stage,
                round_index=self.global_round,
                participants=ids,
                mean_loss=float(np.mean([updates[k].loss for k in ids])),
                transmitted=2 * shared_size * len(ids),
                wall_time=time.perf_counter() - started,
            )
            reports.append(report)
            if on_round is not None:
                on_round(report)
            logger.info(
                f"Stage {stage} round {self.global_round}: {len(ids)} clients, "
                f"loss {report.mean_loss:.4f}, {report.wall_time:.3f}s"
            )
            self.global_round += 1
        return shared, reports


def run_fedavg(
    clients: Sequence[ClientState],
    model: Model,
    config: FedConfig,
    seed: int,
    rounds: Optional[int] = None,
    threads: int = 1,
    trainer: Optional[FederatedTrainer] = None,
) -> Tuple[Model, List[RoundReport]]:
    """Every parameter shared; returns the global model and one report per round"""
    trainer = trainer or FederatedTrainer(clients, config, seed, threads)
    for client in trainer.clients.values():
        client.head = []
    rounds = config.rounds if rounds is None else rounds
    shared, reports = trainer.run_rounds(model.layers, rounds, stage=1, lr_shared=config.lr)
    logger.info(f"FedAvg finished {rounds} rounds, final mean loss {reports[-1].mean_loss:.4f}" if reports else "FedAvg ran 0 rounds")
    return Model(shared), reports


def comm_account(
    shared_counts: Sequence[int],
    rounds_per_stage: Sequence[int],
    num_clients: int,
    rho: float,
    full_final_round: bool = True,
) -> List[int]:
    """Parameters transmitted per stage: 2*|psi_t| per participant per round"""
    if len(shared_counts) != len(rounds_per_stage):
        raise ValueError("one shared count per stage is required")
    per_round = participation_count(num_clients, rho)
    totals = []
    for size, rounds in zip(shared_counts, rounds_per_stage):
        participants = per_round * rounds
        if full_final_round and rounds > 0:
            participants += num_clients - per_round
        totals.append(2 * int(size) * participants)
    return totals
