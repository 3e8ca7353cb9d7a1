"""Dense numeric kernels with hand-written gradients.

Activations are stored column-major in the modelling sense: a matrix of
proposal features has one column per proposal. All arithmetic is float64;
checkpoints store float32.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

INIT_STD = 0.01
CKPT_MAGIC = b"OICRCKPT"
CKPT_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    weights_velocity: np.ndarray = None
    bias_velocity: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        assert self.weights.ndim == 2 and self.bias.shape == (self.weights.shape[0],)
        if self.weights_velocity is None:
            self.weights_velocity = np.zeros_like(self.weights)
        if self.bias_velocity is None:
            self.bias_velocity = np.zeros_like(self.bias)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(),
                          self.weights_velocity.copy(), self.bias_velocity.copy())


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    hidden: int
    num_classes: int
    refinements: int

    def __post_init__(self):
        if min(self.feature_dim, self.hidden) < 1 or self.num_classes < 2 or self.refinements < 0:
            raise ValueError(f"invalid model dims {self}")


@dataclass
class ModelParams:
    trunk1: DenseLayer
    trunk2: DenseLayer
    stream_c: DenseLayer
    stream_d: DenseLayer
    refine: list[DenseLayer] = field(default_factory=list)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.trunk1.shape[1], self.trunk1.shape[0],
                         self.stream_c.shape[0], len(self.refine))

    def named_layers(self) -> Iterator[tuple[str, DenseLayer]]:
        """Layers in the fixed order used by checkpoints and the optimizer."""
        yield "trunk1", self.trunk1
        yield "trunk2", self.trunk2
        yield "stream_c", self.stream_c
        yield "stream_d", self.stream_d
        for k, layer in enumerate(self.refine, start=1):
            yield f"refine{k}", layer

    def copy(self) -> "ModelParams":
        return ModelParams(self.trunk1.copy(), self.trunk2.copy(), self.stream_c.copy(),
                           self.stream_d.copy(), [r.copy() for r in self.refine])


# gradients mirror the layer names: {"trunk1": (dW, db), ...}
Grads = dict[str, tuple[np.ndarray, np.ndarray]]


def zero_grads(params: ModelParams) -> Grads:
    return {name: (np.zeros_like(l.weights), np.zeros_like(l.bias))
            for name, l in params.named_layers()}


def init_model(dims: ModelDims, seed: int) -> ModelParams:
    """Zero biases; head weights ~ N(0, 0.01^2); trunk weights He-scaled.

    The trunk plays the role of a pretrained feature extractor, so it gets
    N(0, 2/fan_in) rather than the small head initialisation. Draws come
    from PCG64 in checkpoint layer order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))

    def layer(n_out, n_in, std=INIT_STD):
        return DenseLayer(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))

    d, h, c = dims.feature_dim, dims.hidden, dims.num_classes
    return ModelParams(
        trunk1=layer(h, d, np.sqrt(2.0 / d)),
        trunk2=layer(h, h, np.sqrt(2.0 / h)),
        stream_c=layer(c, h),
        stream_d=layer(c, h),
        refine=[layer(c + 1, h) for _ in range(dims.refinements)],
    )


def dense_apply(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    assert x.shape[0] == layer.weights.shape[1], (x.shape, layer.weights.shape)
    return layer.weights @ x + layer.bias[:, None]


def dense_grad(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """Returns ``(grad_weights, grad_bias, grad_input)`` for ``out = W x + b``."""
    assert upstream.shape == (layer.weights.shape[0], x.shape[1])
    return upstream @ x.T, upstream.sum(axis=1), layer.weights.T @ upstream


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_columns(x: np.ndarray) -> np.ndarray:
    """Normalise each column (over classes)."""
    return _softmax(x, axis=0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Normalise each row (over proposals)."""
    return _softmax(x, axis=1)


def softmax_columns_grad(s: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return s * (upstream - (upstream * s).sum(axis=0, keepdims=True))


def softmax_rows_grad(s: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return s * (upstream - (upstream * s).sum(axis=1, keepdims=True))


@dataclass
class OptimConfig:
    learning_rate_schedule: list[tuple[int, float]]
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    total_iterations: int = 3500

    def __post_init__(self):
        covered = sum(n for n, _ in self.learning_rate_schedule)
        if covered < self.total_iterations:
            raise ValueError(f"schedule covers {covered} < {self.total_iterations} iterations")
        if self.batch_size < 1 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 0-based iteration index."""
        edge = 0
        for count, lr in self.learning_rate_schedule:
            edge += count
            if iteration < edge:
                return lr
        raise IndexError(f"iteration {iteration} outside schedule")


def sgd_update(params: ModelParams, grads: Grads, lr: float, momentum: float,
               weight_decay: float) -> ModelParams:
    """Classic momentum with weight decay folded into the gradient, in place."""
    for name, layer in params.named_layers():
        gw, gb = grads[name]
        layer.weights_velocity = momentum * layer.weights_velocity + gw + weight_decay * layer.weights
        layer.bias_velocity = momentum * layer.bias_velocity + gb + weight_decay * layer.bias
        layer.weights = layer.weights - lr * layer.weights_velocity
        layer.bias = layer.bias - lr * layer.bias_velocity
    return params


# -- checkpoints ---------------------------------------------------------------

class CheckpointError(Exception):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    d = params.dims
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B4I", CKPT_VERSION, d.feature_dim, d.hidden, d.num_classes, d.refinements))
    for _, layer in params.named_layers():
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: ModelParams, path) -> None:
    from .synthdata import atomic_write_bytes
    atomic_write_bytes(Path(path), checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    header = len(CKPT_MAGIC) + struct.calcsize("<B4I")
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(data) < header + 4:
        raise CheckpointError(f"{path}: truncated header")
    version, d, h, c, k = struct.unpack_from("<B4I", data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset {len(CKPT_MAGIC)}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch at offset {len(data) - 4}")

    offset = header
    shapes = [(h, d), (h, h), (c, h), (c, h)] + [(c + 1, h)] * k
    layers = []
    for n_out, n_in in shapes:
        need = (n_out * n_in + n_out) * 4
        if offset + need > len(data) - 4:
            raise CheckpointError(f"{path}: truncated tensor payload at offset {offset}")
        w = np.frombuffer(data, "<f4", n_out * n_in, offset).reshape(n_out, n_in)
        offset += n_out * n_in * 4
        b = np.frombuffer(data, "<f4", n_out, offset)
        offset += n_out * 4
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64)))
    if offset != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - offset} unexpected bytes at offset {offset}")
    return ModelParams(layers[0], layers[1], layers[2], layers[3], layers[4:])
