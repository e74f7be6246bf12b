"""
Versioned little-endian binary format for models, server messages and datasets.

Layout: b"PPFE" | u16 format version | u8 payload kind | payload.
Floating payloads are raw IEEE-754 float64 in row-major order.
"""

import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .network import (
    Activation,
    ActivationLayer,
    Dense,
    Layer,
    LayerKind,
    LowRankDense,
    MaskedDense,
    Model,
)
from ..utils.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"PPFE"
FORMAT_VERSION = 1

PAYLOAD_MODEL = 1
PAYLOAD_DATASET = 2
PAYLOAD_SHARED_MESSAGE = 3

_LAYER_CODES = {
    LayerKind.DENSE: 1,
    LayerKind.LOW_RANK_DENSE: 2,
    LayerKind.MASKED_DENSE: 3,
    LayerKind.ACTIVATION: 4,
}
_LAYER_KINDS = {code: kind for kind, code in _LAYER_CODES.items()}
_ACTIVATION_CODES = {Activation.RELU: 1, Activation.TANH: 2, Activation.IDENTITY: 3}
_ACTIVATIONS = {code: fn for fn, code in _ACTIVATION_CODES.items()}


class _Writer:
    def __init__(self, payload_kind: int):
        self.parts: List[bytes] = [MAGIC, struct.pack("<HB", FORMAT_VERSION, payload_kind)]

    def u8(self, value: int) -> None:
        self.parts.append(struct.pack("<B", value))

    def u32(self, value: int) -> None:
        self.parts.append(struct.pack("<I", value))

    def f64(self, array: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def i64(self, array: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(array, dtype="<i8").tobytes())

    def raw_u8(self, array: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(array, dtype="<u1").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, expected_kind: int):
        self.data = memoryview(data)
        self.offset = 0
        if bytes(self._take(4)) != MAGIC:
            raise CheckpointError("bad magic bytes, not a PPFE file")
        version, kind = struct.unpack("<HB", self._take(3))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        if kind != expected_kind:
            raise CheckpointError(f"payload kind {kind}, expected {expected_kind}")

    def _take(self, size: int) -> memoryview:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"truncated file at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def i64(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<i8").astype(np.int64)

    def raw_u8(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self._take(count), dtype="<u1").reshape(shape)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise CheckpointError(f"{len(self.data) - self.offset} trailing bytes")


def _write_layer(writer: _Writer, layer: Layer) -> None:
    writer.u8(_LAYER_CODES[layer.kind])
    if isinstance(layer, ActivationLayer):
        writer.u8(_ACTIVATION_CODES[layer.function])
    elif isinstance(layer, LowRankDense):
        writer.u32(layer.out_dim)
        writer.u32(layer.in_dim)
        writer.u32(layer.rank)
        writer.f64(layer.a)
        writer.f64(layer.b)
        writer.f64(layer.bias)
    elif isinstance(layer, MaskedDense):
        writer.u32(layer.out_dim)
        writer.u32(layer.in_dim)
        writer.f64(layer.weight)
        writer.f64(layer.bias)
        writer.raw_u8(layer.mask.astype(np.uint8))
    elif isinstance(layer, Dense):
        writer.u32(layer.out_dim)
        writer.u32(layer.in_dim)
        writer.f64(layer.weight)
        writer.f64(layer.bias)
    else:
        raise CheckpointError(f"cannot serialize layer {type(layer).__name__}")


def _read_layer(reader: _Reader) -> Layer:
    code = reader.u8()
    kind = _LAYER_KINDS.get(code)
    if kind is None:
        raise CheckpointError(f"unknown layer code {code}")
    if kind is LayerKind.ACTIVATION:
        fn = _ACTIVATIONS.get(reader.u8())
        if fn is None:
            raise CheckpointError("unknown activation code")
        return ActivationLayer(fn)
    out_dim = reader.u32()
    in_dim = reader.u32()
    if kind is LayerKind.LOW_RANK_DENSE:
        rank = reader.u32()
        a = reader.f64(out_dim, rank)
        b = reader.f64(rank, in_dim)
        return LowRankDense(a, b, reader.f64(out_dim))
    weight = reader.f64(out_dim, in_dim)
    bias = reader.f64(out_dim)
    if kind is LayerKind.MASKED_DENSE:
        mask = reader.raw_u8(out_dim, in_dim).astype(np.float64)
        return MaskedDense(weight, bias, mask)
    return Dense(weight, bias)


def encode_model(model: Model) -> bytes:
    writer = _Writer(PAYLOAD_MODEL)
    writer.u32(model.split)
    writer.u32(len(model.layers))
    for layer in model.layers:
        _write_layer(writer, layer)
    return writer.getvalue()


def decode_model(data: bytes) -> Model:
    reader = _Reader(data, PAYLOAD_MODEL)
    split = reader.u32()
    layers = [_read_layer(reader) for _ in range(reader.u32())]
    reader.finish()
    return Model(layers, split)


def encode_shared_message(layers: Sequence[Layer]) -> bytes:
    """Server <-> client message: the shared body only"""
    writer = _Writer(PAYLOAD_SHARED_MESSAGE)
    writer.u32(len(layers))
    for layer in layers:
        _write_layer(writer, layer)
    return writer.getvalue()


def decode_shared_message(data: bytes) -> List[Layer]:
    reader = _Reader(data, PAYLOAD_SHARED_MESSAGE)
    layers = [_read_layer(reader) for _ in range(reader.u32())]
    reader.finish()
    return layers


def encode_dataset(features: np.ndarray, targets: np.ndarray, num_classes: Optional[int]) -> bytes:
    writer = _Writer(PAYLOAD_DATASET)
    n, d = features.shape
    writer.u32(n)
    writer.u32(d)
    if num_classes is None:
        t = np.asarray(targets, dtype=np.float64).reshape(n, -1)
        writer.u8(0)
        writer.u32(t.shape[1])
        writer.f64(features)
        writer.f64(t)
    else:
        writer.u8(1)
        writer.u32(num_classes)
        writer.f64(features)
        writer.i64(np.asarray(targets, dtype=np.int64))
    return writer.getvalue()


def decode_dataset(data: bytes) -> Tuple[np.ndarray, np.ndarray, Optional[int]]:
    reader = _Reader(data, PAYLOAD_DATASET)
    n = reader.u32()
    d = reader.u32()
    target_kind = reader.u8()
    if target_kind == 0:
        columns = reader.u32()
        features = reader.f64(n, d)
        targets = reader.f64(n, columns)
        if columns == 1:
            targets = targets.reshape(n)
        num_classes = None
    elif target_kind == 1:
        num_classes = reader.u32()
        features = reader.f64(n, d)
        targets = reader.i64(n)
    else:
        raise CheckpointError(f"unknown target kind {target_kind}")
    reader.finish()
    return features, targets, num_classes


def save_model(path: Union[str, Path], model: Model) -> None:
    Path(path).write_bytes(encode_model(model))
    logger.debug(f"Saved model checkpoint to {path}")


def load_model(path: Union[str, Path]) -> Model:
    return decode_model(Path(path).read_bytes())
