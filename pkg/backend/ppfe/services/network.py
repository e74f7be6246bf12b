"""
Minimal neural-network core: dense, low-rank and masked layers, activations,
weighted losses, backpropagation and SGD with momentum.

A Model is an ordered layer list with a split index: ``layers[:split]`` is the
shared body, ``layers[split:]`` the personalized head.
"""

import copy
import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import Matrix, Rng, Vector, as_matrix
from ..utils.errors import DimensionMismatchError, RankError, StaleCacheError

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-12


class Activation(str, Enum):
    """Activation function tag"""
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class LayerKind(str, Enum):
    """Layer type enumeration"""
    DENSE = "dense"
    LOW_RANK_DENSE = "low_rank_dense"
    MASKED_DENSE = "masked_dense"
    ACTIVATION = "activation"


class Partition(str, Enum):
    """Which side of the body/head split a parameter belongs to"""
    SHARED = "shared"
    PERSONAL = "personal"
    ALL = "all"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class Layer(ABC):
    kind: LayerKind

    @property
    @abstractmethod
    def in_dim(self) -> Optional[int]:
        """Input width, None for shape-preserving layers"""

    @property
    @abstractmethod
    def out_dim(self) -> Optional[int]:
        """Output width, None for shape-preserving layers"""

    @abstractmethod
    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name (live references)"""

    @abstractmethod
    def forward(self, x: Matrix) -> Tuple[Matrix, Any]:
        pass

    @abstractmethod
    def backward(self, cache: Any, grad_out: Matrix) -> Tuple[Matrix, Dict[str, np.ndarray]]:
        pass

    @abstractmethod
    def parameter_count(self) -> int:
        pass

    @property
    def trainable(self) -> bool:
        return bool(self.parameters())

    def project(self) -> None:
        """Restore structural constraints after an update"""

    def clone(self) -> "Layer":
        return copy.deepcopy(self)


class Dense(Layer):
    """y = x W^T + b with W of shape (out, in)"""

    kind = LayerKind.DENSE

    def __init__(self, weight: Matrix, bias: Vector):
        self.weight = as_matrix(weight).copy()
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1).copy()
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionMismatchError("Dense bias", self.weight.shape, self.bias.shape)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Matrix) -> Tuple[Matrix, Any]:
        return x @ self.weight.T + self.bias, x

    def backward(self, cache: Any, grad_out: Matrix) -> Tuple[Matrix, Dict[str, np.ndarray]]:
        x = cache
        grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.weight, grads

    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size


class LowRankDense(Layer):
    """y = x (A B)^T + b with A (out, r) and B (r, in), trained as factors"""

    kind = LayerKind.LOW_RANK_DENSE

    def __init__(self, a: Matrix, b: Matrix, bias: Vector):
        self.a = as_matrix(a).copy()
        self.b = as_matrix(b).copy()
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1).copy()
        if self.a.shape[1] != self.b.shape[0]:
            raise DimensionMismatchError("LowRankDense factors", self.a.shape, self.b.shape)
        if self.rank > min(self.a.shape[0], self.b.shape[1]):
            raise RankError(f"rank {self.rank} exceeds min({self.a.shape[0]}, {self.b.shape[1]})")
        if self.bias.shape[0] != self.a.shape[0]:
            raise DimensionMismatchError("LowRankDense bias", self.a.shape, self.bias.shape)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def in_dim(self) -> int:
        return self.b.shape[1]

    @property
    def out_dim(self) -> int:
        return self.a.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b, "bias": self.bias}

    def forward(self, x: Matrix) -> Tuple[Matrix, Any]:
        hidden = x @ self.b.T
        return hidden @ self.a.T + self.bias, (x, hidden)

    def backward(self, cache: Any, grad_out: Matrix) -> Tuple[Matrix, Dict[str, np.ndarray]]:
        x, hidden = cache
        grad_hidden = grad_out @ self.a
        grads = {
            "a": grad_out.T @ hidden,
            "b": grad_hidden.T @ x,
            "bias": grad_out.sum(axis=0),
        }
        return grad_hidden @ self.b, grads

    def parameter_count(self) -> int:
        return self.rank * (self.in_dim + self.out_dim) + self.bias.size

    def dense_weight(self) -> Matrix:
        return self.a @ self.b


class MaskedDense(Layer):
    """Dense layer whose weight entries are pinned to zero where mask == 0"""

    kind = LayerKind.MASKED_DENSE

    def __init__(self, weight: Matrix, bias: Vector, mask: Matrix):
        self.mask = (as_matrix(mask) != 0).astype(np.float64)
        self.weight = as_matrix(weight) * self.mask
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1).copy()
        if self.mask.shape != self.weight.shape:
            raise DimensionMismatchError("MaskedDense mask", self.weight.shape, self.mask.shape)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionMismatchError("MaskedDense bias", self.weight.shape, self.bias.shape)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Matrix) -> Tuple[Matrix, Any]:
        return x @ self.weight.T + self.bias, x

    def backward(self, cache: Any, grad_out: Matrix) -> Tuple[Matrix, Dict[str, np.ndarray]]:
        x = cache
        grads = {"weight": (grad_out.T @ x) * self.mask, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.weight, grads

    def parameter_count(self) -> int:
        return int(np.count_nonzero(self.mask)) + self.bias.size

    def project(self) -> None:
        self.weight *= self.mask


class ActivationLayer(Layer):
    kind = LayerKind.ACTIVATION

    def __init__(self, function: Activation = Activation.RELU):
        self.function = Activation(function)

    @property
    def in_dim(self) -> None:
        return None

    @property
    def out_dim(self) -> None:
        return None

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Matrix) -> Tuple[Matrix, Any]:
        if self.function is Activation.RELU:
            return np.maximum(x, 0.0), x
        if self.function is Activation.TANH:
            y = np.tanh(x)
            return y, y
        return x.copy(), None

    def backward(self, cache: Any, grad_out: Matrix) -> Tuple[Matrix, Dict[str, np.ndarray]]:
        if self.function is Activation.RELU:
            return grad_out * (cache > 0), {}
        if self.function is Activation.TANH:
            return grad_out * (1.0 - cache * cache), {}
        return grad_out.copy(), {}

    def parameter_count(self) -> int:
        return 0


_model_ids = itertools.count()


class Model:
    """Ordered layers with a body/head split index"""

    def __init__(self, layers: Sequence[Layer], split: Optional[int] = None):
        self.layers: List[Layer] = list(layers)
        self.split = len(self.layers) if split is None else int(split)
        if not 0 <= self.split <= len(self.layers):
            raise ValueError(f"split {self.split} outside [0, {len(self.layers)}]")
        self._check_composition()
        self._id = next(_model_ids)
        self._version = 0

    def _check_composition(self) -> None:
        width = None
        for index, layer in enumerate(self.layers):
            if layer.in_dim is None:
                continue
            if width is not None and layer.in_dim != width:
                raise DimensionMismatchError(f"layer {index} input", (width,), (layer.in_dim,))
            width = layer.out_dim

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if layer.in_dim is not None:
                return layer.in_dim
        raise ValueError("model has no parametric layer")

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if layer.out_dim is not None:
                return layer.out_dim
        raise ValueError("model has no parametric layer")

    @property
    def shared_layers(self) -> List[Layer]:
        return self.layers[: self.split]

    @property
    def personal_layers(self) -> List[Layer]:
        return self.layers[self.split:]

    @property
    def version(self) -> int:
        return self._version

    def touch(self) -> None:
        """Mark parameters as modified, invalidating outstanding caches"""
        self._version += 1

    def partition_of(self, index: int) -> Partition:
        return Partition.SHARED if index < self.split else Partition.PERSONAL

    def in_partition(self, index: int, partition: Partition) -> bool:
        return partition is Partition.ALL or self.partition_of(index) is partition

    def clone(self) -> "Model":
        return Model([layer.clone() for layer in self.layers], self.split)

    @classmethod
    def compose(cls, shared: Sequence[Layer], personal: Sequence[Layer]) -> "Model":
        """Fresh model from cloned body and head layers"""
        return cls([layer.clone() for layer in shared] + [layer.clone() for layer in personal], len(shared))

    def __repr__(self) -> str:
        kinds = ",".join(layer.kind.value for layer in self.layers)
        return f"Model(split={self.split}, layers=[{kinds}])"


@dataclass
class ForwardCache:
    model_id: int
    version: int
    layer_caches: List[Any]


@dataclass
class Gradients:
    """Per-layer gradient dicts, shape-congruent with the model parameters"""

    per_layer: List[Dict[str, np.ndarray]]

    def __getitem__(self, index: int) -> Dict[str, np.ndarray]:
        return self.per_layer[index]

    def __len__(self) -> int:
        return len(self.per_layer)


@dataclass
class SgdMomentum:
    lr: float
    momentum: float = 0.0
    velocity: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be a non-negative finite number, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def forward(model: Model, x: Matrix) -> Tuple[Matrix, ForwardCache]:
    x = as_matrix(x)
    if x.shape[1] != model.input_dim:
        raise DimensionMismatchError("forward", x.shape, (x.shape[0], model.input_dim))
    caches = []
    out = x
    for layer in model.layers:
        out, cache = layer.forward(out)
        caches.append(cache)
    return out, ForwardCache(model._id, model.version, caches)


def predict(model: Model, x: Matrix) -> Matrix:
    return forward(model, x)[0]


def _softmax(scores: Matrix) -> Matrix:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_weights(weights: Vector, batch: int) -> Vector:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != batch:
        raise DimensionMismatchError("loss weights", (batch,), w.shape)
    if np.any(w < 0):
        raise ValueError("sample weights must be non-negative")
    return w


def _class_labels(targets, output: Matrix) -> np.ndarray:
    labels = np.asarray(targets).reshape(-1).astype(np.int64)
    if labels.shape[0] != output.shape[0]:
        raise DimensionMismatchError("class targets", (output.shape[0],), labels.shape)
    if np.any(labels < 0) or np.any(labels >= output.shape[1]):
        raise ValueError(f"class label out of range [0, {output.shape[1]})")
    return labels


def _regression_targets(targets, output: Matrix) -> Matrix:
    t = np.asarray(targets, dtype=np.float64).reshape(output.shape[0], -1)
    if t.shape != output.shape:
        raise DimensionMismatchError("regression targets", output.shape, t.shape)
    return t


def per_sample_losses(output: Matrix, targets, kind: LossKind) -> Vector:
    """Unweighted loss of every row"""
    output = as_matrix(output)
    if LossKind(kind) is LossKind.MSE:
        diff = output - _regression_targets(targets, output)
        return np.mean(diff * diff, axis=1)
    labels = _class_labels(targets, output)
    probs = np.clip(_softmax(output), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return -np.log(probs[np.arange(output.shape[0]), labels])


def weighted_loss(output: Matrix, targets, weights: Vector, kind: LossKind) -> float:
    """(1 / sum(w)) * sum_i w_i * loss_i"""
    losses = per_sample_losses(output, targets, kind)
    w = _check_weights(weights, losses.shape[0])
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights sum to zero")
    return float(np.dot(w, losses) / total)


def loss_gradient(output: Matrix, targets, weights: Vector, kind: LossKind) -> Matrix:
    """Gradient of weighted_loss with respect to the model output"""
    output = as_matrix(output)
    w = _check_weights(weights, output.shape[0])
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights sum to zero")
    scale = (w / total)[:, None]
    if LossKind(kind) is LossKind.MSE:
        diff = output - _regression_targets(targets, output)
        return 2.0 * diff / output.shape[1] * scale
    labels = _class_labels(targets, output)
    grad = _softmax(output)
    grad[np.arange(output.shape[0]), labels] -= 1.0
    return grad * scale


def backward(model: Model, cache: ForwardCache, loss_grad: Matrix) -> Gradients:
    if cache.model_id != model._id or cache.version != model.version:
        raise StaleCacheError("forward cache does not match the current model parameters")
    grads: List[Dict[str, np.ndarray]] = [dict() for _ in model.layers]
    grad = as_matrix(loss_grad)
    for index in range(len(model.layers) - 1, -1, -1):
        grad, layer_grads = model.layers[index].backward(cache.layer_caches[index], grad)
        grads[index] = layer_grads
    return Gradients(grads)


def sgd_step(opt: SgdMomentum, model: Model, grads: Gradients, param_filter: Partition = Partition.ALL) -> None:
    """v <- momentum*v + g; p <- p - lr*v on the filtered partition only"""
    if len(grads) != len(model.layers):
        raise DimensionMismatchError("sgd_step", (len(model.layers),), (len(grads),))
    for index, layer in enumerate(model.layers):
        if not model.in_partition(index, param_filter):
            continue
        params = layer.parameters()
        if not params:
            continue
        for name, param in params.items():
            g = grads[index][name]
            if g.shape != param.shape:
                raise DimensionMismatchError(f"sgd_step layer {index} {name}", param.shape, g.shape)
            key = (index, name)
            velocity = opt.velocity.get(key)
            if velocity is None:
                velocity = np.zeros_like(param)
            velocity = opt.momentum * velocity + g
            opt.velocity[key] = velocity
            param -= opt.lr * velocity
        layer.project()
    model.touch()


def parameter_count(model: Model, partition: Partition = Partition.ALL) -> int:
    return sum(
        layer.parameter_count()
        for index, layer in enumerate(model.layers)
        if model.in_partition(index, partition)
    )


def count_layers(layers: Sequence[Layer]) -> int:
    return sum(layer.parameter_count() for layer in layers)


def dense_layer(in_dim: int, out_dim: int, rng: Rng) -> Dense:
    """Fan-in scaled uniform init (bound sqrt(6 / fan_in)), zero bias"""
    bound = math.sqrt(6.0 / in_dim)
    weight = rng.uniform(-bound, bound, (out_dim, in_dim))
    return Dense(weight, np.zeros(out_dim))


def build_mlp(
    dims: Sequence[int],
    rng: Rng,
    activation: Activation = Activation.RELU,
    split: Optional[int] = None,
) -> Model:
    """d -> h1 -> ... -> out with an activation after every hidden layer"""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    layers: List[Layer] = []
    for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(dense_layer(fan_in, fan_out, rng.child("layer", index)))
        if index < len(dims) - 2:
            layers.append(ActivationLayer(activation))
    return Model(layers, split)


def parametric_indices(layers: Sequence[Layer]) -> List[int]:
    return [index for index, layer in enumerate(layers) if layer.trainable]


def split_for_personal_depth(layers: Sequence[Layer], depth: int) -> int:
    """Split index that leaves the last `depth` parametric layers in the head"""
    indices = parametric_indices(layers)
    if depth < 0 or depth > len(indices):
        raise ValueError(f"personal depth {depth} outside [0, {len(indices)}]")
    if depth == 0:
        return len(layers)
    return indices[-depth]
