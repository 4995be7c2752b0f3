"""Desk-scale models, data and local SGD."""

import logging
import math
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import NumericalError, ParameterError, ShapeError
from app.dictpfl import rng
from app.dictpfl.depe import (
    WeightDecomposition,
    apply_table_update,
    init_depe,
    reconstruct,
    table_gradient,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DS"
DATASET_VERSION = 1
# magic, version, reserved, d, C
_DATASET_HEADER = struct.Struct("<2sBBHH")


class TrainMode(str, Enum):
    TABLE = "table"
    WEIGHT = "weight"
    FROZEN = "frozen"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class DataShard:
    features: np.ndarray
    labels: np.ndarray
    owner: int

    def __len__(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class DenseLayer:
    weight: Optional[np.ndarray]
    bias: np.ndarray
    decomposition: Optional[WeightDecomposition] = None
    mode: TrainMode = TrainMode.WEIGHT

    def effective_weight(self) -> np.ndarray:
        if self.decomposition is not None:
            return reconstruct(self.decomposition)
        return self.weight

    @property
    def shape(self) -> Tuple[int, int]:
        return self.effective_weight().shape

    def matrix_size(self) -> int:
        """Trainable matrix entries: table for TABLE, full weight for WEIGHT"""
        if self.mode == TrainMode.TABLE:
            return self.decomposition.table.size
        if self.mode == TrainMode.WEIGHT:
            return self.weight.size
        return 0

    def bias_size(self) -> int:
        return 0 if self.mode == TrainMode.FROZEN else self.bias.size


@dataclass(frozen=True)
class LayerGradient:
    weight: Optional[np.ndarray]
    bias: Optional[np.ndarray]


class ToyModel:
    """Dense ReLU network with softmax cross-entropy; hidden layers use ReLU"""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def weights(self) -> List[np.ndarray]:
        return [layer.effective_weight() for layer in self.layers]

    def forward(self, x: np.ndarray, weights: Optional[List[np.ndarray]] = None) -> np.ndarray:
        weights = weights or self.weights()
        h = x
        for i, (w, layer) in enumerate(zip(weights, self.layers)):
            h = h @ w + layer.bias
            if i < self.depth - 1:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grads(
        self,
        x: np.ndarray,
        y: np.ndarray,
        weights: Optional[List[np.ndarray]] = None,
        biases: Optional[List[np.ndarray]] = None,
    ) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
        """Mean cross-entropy and its gradients w.r.t. every effective weight and bias"""
        weights = weights or self.weights()
        biases = biases or [layer.bias for layer in self.layers]
        activations = [x]
        h = x
        for i, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w + b
            if i < self.depth - 1:
                h = np.maximum(h, 0.0)
            activations.append(h)

        logits = activations[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        batch = x.shape[0]
        loss = float(-log_probs[np.arange(batch), y].mean())

        delta = np.exp(log_probs)
        delta[np.arange(batch), y] -= 1.0
        delta /= batch

        grad_w: List[np.ndarray] = [None] * self.depth
        grad_b: List[np.ndarray] = [None] * self.depth
        for i in range(self.depth - 1, -1, -1):
            grad_w[i] = activations[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ weights[i].T) * (activations[i] > 0)
        return loss, grad_w, grad_b

    def trainable_size(self) -> Tuple[int, int]:
        """(matrix entries, bias entries) in the flat layout"""
        return (
            sum(layer.matrix_size() for layer in self.layers),
            sum(layer.bias_size() for layer in self.layers),
        )

    def flatten(self, grads: Sequence[LayerGradient]) -> np.ndarray:
        """Flat upload vector: every trainable matrix, then every trainable bias.

        Weight-space gradients of TABLE layers are mapped to table space.
        """
        if len(grads) != self.depth:
            raise ShapeError("one gradient per layer expected")
        matrices, biases = [], []
        for layer, grad in zip(self.layers, grads):
            if layer.mode == TrainMode.FROZEN:
                continue
            if layer.mode == TrainMode.TABLE:
                matrices.append(table_gradient(layer.decomposition, grad.weight).ravel())
            else:
                matrices.append(grad.weight.ravel())
            biases.append(grad.bias.ravel())
        return np.concatenate(matrices + biases) if matrices else np.zeros(0)

    def apply_flat_update(self, update: np.ndarray, lr: float) -> "ToyModel":
        """Descend along a flat vector in the ``flatten`` layout"""
        matrix_total, bias_total = self.trainable_size()
        if update.size != matrix_total + bias_total:
            raise ShapeError(f"update length {update.size} != {matrix_total + bias_total}")
        m_off, b_off = 0, matrix_total
        layers = []
        for layer in self.layers:
            if layer.mode == TrainMode.FROZEN:
                layers.append(layer)
                continue
            size = layer.matrix_size()
            part = update[m_off:m_off + size]
            m_off += size
            bias_part = update[b_off:b_off + layer.bias.size]
            b_off += layer.bias.size
            bias = layer.bias - lr * bias_part
            if layer.mode == TrainMode.TABLE:
                delta_t = part.reshape(layer.decomposition.table.shape)
                layers.append(replace(layer, decomposition=apply_table_update(layer.decomposition, delta_t, lr), bias=bias))
            else:
                layers.append(replace(layer, weight=layer.weight - lr * part.reshape(layer.weight.shape), bias=bias))
        return ToyModel(layers)

    def trainable_vector(self) -> np.ndarray:
        """Current trainable parameters in the ``flatten`` layout"""
        matrices, biases = [], []
        for layer in self.layers:
            if layer.mode == TrainMode.FROZEN:
                continue
            source = layer.decomposition.table if layer.mode == TrainMode.TABLE else layer.weight
            matrices.append(source.ravel())
            biases.append(layer.bias.ravel())
        return np.concatenate(matrices + biases) if matrices else np.zeros(0)


def build_model(dims: Sequence[int], seed: int) -> ToyModel:
    """Shared initial ("pre-trained") dense model; every client builds the same one"""
    if len(dims) < 2:
        raise ParameterError("model needs an input and an output dimension")
    gen = rng.stream(seed, rng.MODEL_INIT)
    layers = []
    for n, m in zip(dims[:-1], dims[1:]):
        w = gen.normal(0.0, math.sqrt(2.0 / n), size=(n, m))
        layers.append(DenseLayer(weight=w, bias=np.zeros(m)))
    return ToyModel(layers)


def factorize(model: ToyModel, rank: int, method: str = "lapack") -> ToyModel:
    """Replace every dense weight by its DePE form; only tables and biases train"""
    layers = []
    for index, layer in enumerate(model.layers):
        n, m = layer.shape
        r = min(rank, n, m)
        if r < rank:
            logger.warning("layer %d (%dx%d): rank clamped from %d to %d", index, n, m, rank, r)
        decomposition = init_depe(layer.effective_weight(), r, method=method)
        layers.append(DenseLayer(weight=None, bias=layer.bias.copy(), decomposition=decomposition, mode=TrainMode.TABLE))
    return ToyModel(layers)


def freeze_all_but_last(model: ToyModel, k: int) -> ToyModel:
    """Only the last k layers keep training their full weights"""
    if not 0 <= k <= model.depth:
        raise ParameterError(f"cannot train last {k} of {model.depth} layers")
    layers = []
    for index, layer in enumerate(model.layers):
        mode = TrainMode.WEIGHT if index >= model.depth - k else TrainMode.FROZEN
        layers.append(replace(layer, mode=mode))
    return ToyModel(layers)


def local_train(
    model: ToyModel,
    shard: DataShard,
    epochs: int,
    lr: float,
    batch_size: Optional[int] = None,
) -> Tuple[List[LayerGradient], float]:
    """Local SGD on the effective weights; returns difference-form gradients and the last loss.

    The local copy moves every non-frozen weight matrix freely; the result
    (W_before - W_after) / lr is mapped to table space by the caller.
    """
    if shard.features.shape[1] != model.layers[0].shape[0]:
        raise ShapeError(f"shard dim {shard.features.shape[1]} != model input {model.layers[0].shape[0]}")
    weights = [w.copy() for w in model.weights()]
    biases = [layer.bias.copy() for layer in model.layers]
    start_w = [w.copy() for w in weights]
    start_b = [b.copy() for b in biases]
    trainable = [layer.mode != TrainMode.FROZEN for layer in model.layers]

    size = len(shard)
    step = batch_size or size
    loss = float("nan")
    for epoch in range(epochs):
        for begin in range(0, size, step):
            x = shard.features[begin:begin + step]
            y = shard.labels[begin:begin + step]
            loss, grad_w, grad_b = model.loss_and_grads(x, y, weights, biases)
            if not math.isfinite(loss):
                raise NumericalError(
                    "non-finite training loss",
                    diagnostics={"client": shard.owner, "epoch": epoch, "batch_start": begin, "loss": loss},
                )
            for i in range(model.depth):
                if trainable[i]:
                    weights[i] -= lr * grad_w[i]
                    biases[i] -= lr * grad_b[i]

    grads = []
    for i, layer in enumerate(model.layers):
        if not trainable[i]:
            grads.append(LayerGradient(weight=None, bias=None))
        elif lr == 0:
            grads.append(LayerGradient(weight=np.zeros_like(weights[i]), bias=np.zeros_like(biases[i])))
        else:
            grads.append(LayerGradient(
                weight=(start_w[i] - weights[i]) / lr,
                bias=(start_b[i] - biases[i]) / lr,
            ))
    return grads, loss


def evaluate(model: ToyModel, features: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy)"""
    loss, _, _ = model.loss_and_grads(features, labels)
    predictions = model.forward(features).argmax(axis=1)
    return loss, float((predictions == labels).mean())


def synth_task(classes: int, dim: int, per_class: int, seed: int, margin: float = 3.0) -> Dataset:
    """Gaussian blobs: unit-variance clusters around class means ``margin`` apart in scale"""
    if classes < 2 or dim < 1 or per_class < 1:
        raise ParameterError("need >= 2 classes, dim >= 1 and >= 1 sample per class")
    gen = rng.stream(seed, rng.SYNTH)
    means = gen.normal(0.0, 1.0, size=(classes, dim))
    means *= margin / np.linalg.norm(means, axis=1, keepdims=True)
    features = np.concatenate([means[c] + gen.normal(0.0, 1.0, size=(per_class, dim)) for c in range(classes)])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    order = gen.permutation(labels.size)
    return Dataset(features=features[order], labels=labels[order], num_classes=classes)


def dirichlet_partition(dataset: Dataset, clients: int, alpha: float, seed: int, max_attempts: int = 100) -> List[DataShard]:
    """Split samples into equal-size shards with Dirichlet(alpha) label ratios.

    alpha = inf gives a stratified homogeneous split.
    """
    if clients < 1:
        raise ParameterError("need at least one client")
    if clients > len(dataset):
        raise ParameterError(f"{clients} clients but only {len(dataset)} samples")
    if not alpha > 0:
        raise ParameterError(f"concentration {alpha} must be > 0")
    gen = rng.stream(seed, rng.PARTITION)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]

    for attempt in range(max_attempts):
        assigned: List[List[np.ndarray]] = [[] for _ in range(clients)]
        for c, idx in enumerate(by_class):
            idx = gen.permutation(idx)
            if math.isinf(alpha):
                parts = np.array_split(idx, clients)
                for k in range(clients):
                    assigned[(k + c) % clients].append(parts[k])
            else:
                proportions = gen.dirichlet(np.full(clients, alpha))
                cuts = (np.cumsum(proportions) * idx.size).astype(int)[:-1]
                for k, part in enumerate(np.split(idx, cuts)):
                    assigned[k].append(part)
        shards = [np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64) for parts in assigned]
        smallest = min(s.size for s in shards)
        if smallest > 0:
            break
        logger.debug("partition attempt %d left an empty shard, redrawing", attempt + 1)
    else:
        raise ParameterError(f"could not give every client a sample with alpha={alpha}")

    result = []
    for owner, idx in enumerate(shards):
        keep = np.sort(gen.permutation(idx)[:smallest])
        result.append(DataShard(features=dataset.features[keep], labels=dataset.labels[keep], owner=owner))
    return result


def dataset_to_bytes(dataset: Dataset) -> bytes:
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, 0, dataset.dim, dataset.num_classes)
    return (
        header
        + dataset.features.astype("<f8").tobytes()
        + dataset.labels.astype("<u4").tobytes()
    )


def dataset_from_bytes(data: bytes) -> Dataset:
    if len(data) < _DATASET_HEADER.size:
        raise ParameterError("dataset file too short")
    magic, version, _, dim, classes = _DATASET_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise ParameterError("not a dataset file of a supported version")
    body = len(data) - _DATASET_HEADER.size
    record = dim * 8 + 4
    if dim == 0 or body % record:
        raise ParameterError("dataset body does not match its header")
    count = body // record
    offset = _DATASET_HEADER.size
    features = np.frombuffer(data, dtype="<f8", count=count * dim, offset=offset).reshape(count, dim)
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=offset + count * dim * 8)
    if count and int(labels.max()) >= classes:
        raise ParameterError(f"label {int(labels.max())} out of range for {classes} classes")
    return Dataset(features=features.astype(np.float64), labels=labels.astype(np.int64), num_classes=classes)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
