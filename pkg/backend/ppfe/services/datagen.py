"""
Synthetic regression and classification data, non-IID partitioners and
dataset file I/O.
"""

import csv
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import decode_dataset, encode_dataset
from .tensor_core import Matrix, Rng, Vector, as_matrix, gaussian
from ..models.config_models import (
    ClassRestrictionPartition,
    CovarianceMode,
    DirichletPartition,
    IIDPartition,
    SyntheticRegressionSpec,
)
from ..utils.errors import DatasetError, EmptyDatasetError, PartitionError
from ..utils.helpers import label_entropy

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
MAX_DIRICHLET_RESAMPLES = 100


@dataclass
class ClientDataset:
    """One client's rows plus optional train/val/test split indices"""

    features: Matrix
    targets: np.ndarray
    num_classes: Optional[int] = None
    client_id: int = 0
    indices: Optional[np.ndarray] = None
    train_idx: Optional[np.ndarray] = None
    val_idx: Optional[np.ndarray] = None
    test_idx: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = as_matrix(self.features)
        if self.num_classes is None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            self.targets = np.asarray(self.targets).reshape(-1).astype(np.int64)
            if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.num_classes):
                raise DatasetError(f"class labels must lie in [0, {self.num_classes})")
        if self.targets.shape[0] != self.features.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.targets.shape[0]} targets"
            )

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def is_classification(self) -> bool:
        return self.num_classes is not None

    @property
    def label_set(self) -> List[int]:
        if not self.is_classification:
            return []
        return sorted(set(int(c) for c in self.targets))

    def subset(self, rows: Sequence[int]) -> "ClientDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return ClientDataset(
            features=self.features[rows].copy(),
            targets=self.targets[rows].copy(),
            num_classes=self.num_classes,
            client_id=self.client_id,
            indices=None if self.indices is None else self.indices[rows].copy(),
        )

    def train_part(self) -> "ClientDataset":
        return self if self.train_idx is None else self.subset(self.train_idx)

    def test_part(self) -> "ClientDataset":
        if self.test_idx is None:
            raise DatasetError(f"client {self.client_id} has no test split")
        return self.subset(self.test_idx)

    def with_split(self, train: Sequence[int], test: Sequence[int], val: Optional[Sequence[int]] = None) -> "ClientDataset":
        return replace(
            self,
            train_idx=np.asarray(train, dtype=np.int64),
            test_idx=np.asarray(test, dtype=np.int64),
            val_idx=None if val is None else np.asarray(val, dtype=np.int64),
        )

    def split_holdout(self, fraction: float, rng: Rng) -> Tuple["ClientDataset", "ClientDataset"]:
        """Random (fit, holdout) split; holdout gets round(fraction*n) rows, at least one"""
        if self.n < 2:
            raise DatasetError(f"client {self.client_id} needs at least 2 rows for a holdout split")
        size = min(self.n - 1, max(1, int(round(fraction * self.n))))
        order = rng.permutation(self.n)
        return self.subset(np.sort(order[size:])), self.subset(np.sort(order[:size]))


@dataclass
class RegressionTruth:
    """Ground-truth weights of the synthetic regression clients"""

    w_global: Vector
    w_local: Matrix
    w_client: Matrix
    personalization: Vector
    covariances: List[Matrix] = field(default_factory=list)


@dataclass
class LabeledPool:
    features: Matrix
    labels: np.ndarray
    num_classes: int

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


# Synthetic regression

def random_spd(dim: int, rng: Rng, ridge: float = 0.1) -> Matrix:
    """Wishart-style G G^T / d + ridge*I, rescaled to unit average variance"""
    g = rng.standard_normal((dim, dim))
    sigma = g @ g.T / dim + ridge * np.eye(dim)
    return sigma * (dim / np.trace(sigma))


def _covariance(spec: SyntheticRegressionSpec, rng: Rng) -> Matrix:
    if spec.covariance is CovarianceMode.RANDOM_SPD:
        return random_spd(spec.dim, rng)
    return np.eye(spec.dim)


def sample_client_data(w: Vector, covariance: Matrix, n: int, noise_variance: float, rng: Rng) -> Tuple[Matrix, Vector]:
    """x ~ N(0, covariance), y = w^T x + eps"""
    chol = np.linalg.cholesky(covariance)
    x = rng.standard_normal((n, covariance.shape[0])) @ chol.T
    noise = gaussian(rng, n, 1, std=float(np.sqrt(noise_variance))).reshape(-1)
    return x, x @ w + noise


def _personalization(spec: SyntheticRegressionSpec, rng: Rng) -> Vector:
    if spec.personalization_ratio == "uniform-random":
        return rng.child("personalization").uniform(0.0, 1.0, spec.num_clients)
    return np.full(spec.num_clients, float(spec.personalization_ratio))


def gen_synthetic_regression(spec: SyntheticRegressionSpec, rng: Rng) -> Tuple[List[ClientDataset], RegressionTruth]:
    """
    Clients with W_k = (1 - r_p) W_g + r_p W_l^(k).

    Every client holds n_k training rows followed by ``spec.n_test`` fresh
    test rows drawn from the same distribution; split indices mark them.
    """
    k_clients, d = spec.num_clients, spec.dim
    sigma_g = float(np.sqrt(spec.global_variance))
    coefs = spec.local_variance_coefs or [1.0] * k_clients

    w_global = gaussian(rng.child("global"), d, 1, std=sigma_g).reshape(-1)
    r_p = _personalization(spec, rng)

    clients: List[ClientDataset] = []
    w_local = np.zeros((k_clients, d))
    w_client = np.zeros((k_clients, d))
    covariances: List[Matrix] = []
    n_train, n_test = spec.samples_per_client, spec.n_test
    for k in range(k_clients):
        client_rng = rng.child("client", k)
        w_local[k] = gaussian(client_rng.child("local"), d, 1, std=float(np.sqrt(coefs[k])) * sigma_g).reshape(-1)
        w_client[k] = (1.0 - r_p[k]) * w_global + r_p[k] * w_local[k]
        covariance = _covariance(spec, client_rng.child("covariance"))
        covariances.append(covariance)
        x, y = sample_client_data(w_client[k], covariance, n_train + n_test, spec.noise_variance, client_rng.child("samples"))
        dataset = ClientDataset(features=x, targets=y, client_id=k)
        clients.append(dataset.with_split(np.arange(n_train), np.arange(n_train, n_train + n_test)))

    logger.info(f"Generated {k_clients} regression clients (d={d}, n_k={n_train}, r_p={spec.personalization_ratio})")
    return clients, RegressionTruth(w_global, w_local, w_client, r_p, covariances)


# Synthetic classification

def _class_means(num_classes: int, dim: int, class_sep: float, rng: Rng) -> Matrix:
    """Class centres with pairwise distance class_sep when dim allows a simplex"""
    if class_sep == 0:
        return np.zeros((num_classes, dim))
    if dim >= num_classes:
        simplex = np.eye(num_classes) - 1.0 / num_classes
        simplex *= class_sep / np.sqrt(2.0)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return simplex @ q[:num_classes]
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * class_sep / np.sqrt(2.0)


def gen_synthetic_classification(
    num_clients: int,
    samples_per_client: int,
    dim: int,
    num_classes: int,
    class_sep: float,
    rng: Rng,
    oversample: float = 1.0,
) -> LabeledPool:
    """Balanced pool of isotropic Gaussian blobs, K * n_k * oversample rows"""
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    if num_clients < 1 or samples_per_client < 1 or dim < 1:
        raise ValueError("client count, samples per client and dimension must be positive")
    total = int(np.ceil(num_clients * samples_per_client * oversample))
    means = _class_means(num_classes, dim, class_sep, rng.child("means"))
    labels = np.arange(total, dtype=np.int64) % num_classes
    labels = labels[rng.child("labels").permutation(total)]
    features = means[labels] + rng.child("noise").standard_normal((total, dim))
    return LabeledPool(features=features, labels=labels, num_classes=num_classes)


# Partitioners

class Partitioner(ABC):
    """Splits a labeled pool into client datasets of disjoint pool rows"""

    @abstractmethod
    def __call__(self, pool: LabeledPool, num_clients: int, samples_per_client: int, rng: Rng) -> List[ClientDataset]:
        pass

    @staticmethod
    def _client(pool: LabeledPool, client_id: int, rows: np.ndarray) -> ClientDataset:
        rows = np.asarray(rows, dtype=np.int64)
        return ClientDataset(
            features=pool.features[rows].copy(),
            targets=pool.labels[rows].copy(),
            num_classes=pool.num_classes,
            client_id=client_id,
            indices=rows,
        )


class IIDPartitioner(Partitioner):
    def __call__(self, pool, num_clients, samples_per_client, rng):
        needed = num_clients * samples_per_client
        if needed > pool.size:
            raise PartitionError(f"pool has {pool.size} samples, {needed} requested")
        order = rng.permutation(pool.size)
        return [
            self._client(pool, k, order[k * samples_per_client:(k + 1) * samples_per_client])
            for k in range(num_clients)
        ]


class ClassRestrictionPartitioner(Partitioner):
    """Each client sees exactly S classes drawn uniformly; subsets may overlap"""

    def __init__(self, classes_per_client: int):
        self.classes_per_client = classes_per_client

    def _per_class_counts(self, samples_per_client: int) -> List[int]:
        s = self.classes_per_client
        return [samples_per_client // s + (1 if i < samples_per_client % s else 0) for i in range(s)]

    def __call__(self, pool, num_clients, samples_per_client, rng):
        s = self.classes_per_client
        if not 1 <= s <= pool.num_classes:
            raise PartitionError(f"classes_per_client {s} outside [1, {pool.num_classes}]")
        if samples_per_client < s:
            raise PartitionError(f"{samples_per_client} samples cannot cover {s} classes")
        queues = {
            c: list(rng.child("class", c).generator.permutation(np.flatnonzero(pool.labels == c)))
            for c in range(pool.num_classes)
        }
        counts = self._per_class_counts(samples_per_client)
        clients = []
        for k in range(num_clients):
            classes = np.sort(rng.child("classes", k).choice(pool.num_classes, s, replace=False))
            rows = []
            for c, count in zip(classes, counts):
                queue = queues[int(c)]
                if len(queue) < count:
                    raise PartitionError(f"class {int(c)} ran out of samples at client {k}")
                rows.extend(queue[:count])
                del queue[:count]
            clients.append(self._client(pool, k, np.asarray(rows)))
        return clients


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer allocation of total proportional to p, summing to total exactly"""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


class DirichletPartitioner(Partitioner):
    """
    Per-class client proportions drawn from Dir(alpha).

    Uses the gamma construction: G[k, c] ~ Gamma(alpha), and client k gets
    share G[k, c] / sum_j G[j, c] of class c. A client whose allocation would
    be empty has its gamma row redrawn. The whole pool is distributed, so
    ``samples_per_client`` is ignored.
    """

    def __init__(self, alpha: float):
        if alpha <= 0:
            raise PartitionError(f"alpha must be positive, got {alpha}")
        self.alpha = alpha

    def _allocate(self, gammas: np.ndarray, class_sizes: np.ndarray) -> np.ndarray:
        counts = np.zeros_like(gammas, dtype=np.int64)
        for c, size in enumerate(class_sizes):
            column = gammas[:, c]
            total = column.sum()
            p = column / total if total > 0 else np.full(column.shape, 1.0 / column.shape[0])
            counts[:, c] = _largest_remainder(int(size), p)
        return counts

    def __call__(self, pool, num_clients, samples_per_client, rng):
        if num_clients == 1:
            return [self._client(pool, 0, np.arange(pool.size))]
        if pool.size < num_clients:
            raise PartitionError(f"pool of {pool.size} samples cannot fill {num_clients} clients")
        class_sizes = np.bincount(pool.labels, minlength=pool.num_classes)
        gammas = rng.child("gamma").gamma(self.alpha, (num_clients, pool.num_classes))
        counts = self._allocate(gammas, class_sizes)
        attempt = 0
        while np.any(counts.sum(axis=1) == 0):
            attempt += 1
            if attempt > MAX_DIRICHLET_RESAMPLES:
                raise PartitionError("Dirichlet partition left a client empty after repeated resampling")
            logger.warning(f"Dirichlet draw left {int(np.sum(counts.sum(axis=1) == 0))} client(s) empty, resampling")
            for k in np.flatnonzero(counts.sum(axis=1) == 0):
                gammas[k] = rng.child("resample", attempt, int(k)).gamma(self.alpha, pool.num_classes)
            counts = self._allocate(gammas, class_sizes)

        rows_per_client: List[List[int]] = [[] for _ in range(num_clients)]
        for c in range(pool.num_classes):
            members = rng.child("class", c).generator.permutation(np.flatnonzero(pool.labels == c))
            offsets = np.concatenate([[0], np.cumsum(counts[:, c])])
            for k in range(num_clients):
                rows_per_client[k].extend(members[offsets[k]:offsets[k + 1]].tolist())
        return [self._client(pool, k, np.sort(np.asarray(rows))) for k, rows in enumerate(rows_per_client)]


def make_partitioner(spec: Union[ClassRestrictionPartition, DirichletPartition, IIDPartition]) -> Partitioner:
    if isinstance(spec, ClassRestrictionPartition):
        return ClassRestrictionPartitioner(spec.classes_per_client)
    if isinstance(spec, DirichletPartition):
        return DirichletPartitioner(spec.alpha)
    return IIDPartitioner()


def partition_class_restriction(pool: LabeledPool, classes_per_client: int, num_clients: int, samples_per_client: int, rng: Rng) -> List[ClientDataset]:
    return ClassRestrictionPartitioner(classes_per_client)(pool, num_clients, samples_per_client, rng)


def partition_dirichlet(pool: LabeledPool, alpha: float, num_clients: int, rng: Rng) -> List[ClientDataset]:
    return DirichletPartitioner(alpha)(pool, num_clients, 0, rng)


def split_train_test(clients: Sequence[ClientDataset], test_fraction: float, rng: Rng) -> List[ClientDataset]:
    """Per-client random split; each side keeps at least one row when n >= 2"""
    out = []
    for client in clients:
        n = client.n
        n_test = int(round(test_fraction * n))
        if n >= 2:
            n_test = min(max(n_test, 1), n - 1)
        order = rng.child("split", client.client_id).permutation(n)
        out.append(client.with_split(np.sort(order[n_test:]), np.sort(order[:n_test])))
    return out


def partition_stats(clients: Sequence[ClientDataset]) -> pd.DataFrame:
    """Per-client sample count, distinct labels and label entropy"""
    records = []
    for client in clients:
        num_classes = client.num_classes or 0
        records.append({
            "client_id": client.client_id,
            "num_samples": client.n,
            "num_labels": len(client.label_set),
            "entropy": label_entropy(client.targets, num_classes) if client.is_classification else 0.0,
        })
    return pd.DataFrame.from_records(records, columns=["client_id", "num_samples", "num_labels", "entropy"])


# File I/O

def _parse_label_column(values: List[str]) -> Tuple[np.ndarray, Optional[int]]:
    if any(("." in v) or ("e" in v.lower()) for v in values):
        return np.asarray([float(v) for v in values]), None
    labels = np.asarray([int(v) for v in values], dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise DatasetError("negative class label")
    return labels, int(labels.max()) + 1 if labels.size else 0


def _load_csv(path: Path) -> ClientDataset:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or all(not cell.strip() for cell in header):
            raise EmptyDatasetError(str(path))
        if header[-1].strip() != LABEL_COLUMN:
            raise DatasetError(f"last header column must be '{LABEL_COLUMN}'", line=1)
        width = len(header)
        rows: List[List[float]] = []
        labels: List[str] = []
        for record in reader:
            if not record:
                continue
            if len(record) != width:
                raise DatasetError(f"expected {width} columns, found {len(record)}", line=reader.line_num)
            try:
                rows.append([float(cell) for cell in record[:-1]])
            except ValueError as e:
                raise DatasetError(f"non-numeric feature ({e})", line=reader.line_num)
            labels.append(record[-1].strip())
    if not rows:
        raise EmptyDatasetError(str(path))
    try:
        targets, num_classes = _parse_label_column(labels)
    except ValueError as e:
        raise DatasetError(f"bad label column: {e}")
    return ClientDataset(features=np.asarray(rows, dtype=np.float64).reshape(len(rows), width - 1), targets=targets, num_classes=num_classes)


def load_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> ClientDataset:
    """
    CSV when the suffix is .csv, otherwise the binary fixture format.

    ``num_classes`` overrides the count inferred from the largest label, for
    files where the top classes happen to be absent.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        dataset = _load_csv(path)
    else:
        data = path.read_bytes()
        if not data:
            raise EmptyDatasetError(str(path))
        features, targets, inferred = decode_dataset(data)
        dataset = ClientDataset(features=features, targets=targets, num_classes=inferred)
    if num_classes is not None:
        if not dataset.is_classification:
            raise DatasetError(f"num_classes {num_classes} given for a file with real-valued labels")
        if num_classes < dataset.num_classes:
            raise DatasetError(f"num_classes {num_classes} is below the largest label + 1 ({dataset.num_classes})")
        dataset = ClientDataset(features=dataset.features, targets=dataset.targets, num_classes=num_classes)
    logger.info(f"Loaded {dataset.n} rows x {dataset.dim} features from {path}")
    return dataset


def save_dataset(path: Union[str, Path], dataset: ClientDataset) -> None:
    path = Path(path)
    if path.suffix.lower() != ".csv":
        path.write_bytes(encode_dataset(dataset.features, dataset.targets, dataset.num_classes))
        return
    frame = pd.DataFrame(dataset.features, columns=[f"x{j}" for j in range(dataset.dim)])
    if dataset.is_classification:
        frame[LABEL_COLUMN] = dataset.targets.astype(np.int64)
    else:
        frame[LABEL_COLUMN] = [repr(float(v)) for v in dataset.targets.reshape(-1)]
    frame.to_csv(path, index=False, float_format="%.17g")


def pool_from_dataset(dataset: ClientDataset) -> LabeledPool:
    if not dataset.is_classification:
        raise DatasetError("partitioning needs integer class labels")
    return LabeledPool(features=dataset.features, labels=dataset.targets, num_classes=int(dataset.num_classes))
