"""Compilation, shape propagation and training of decoded layer chains.

Plain-numpy networks in double precision: direct (im2col) convolution with
same padding, valid max pooling, batch normalisation, inverted dropout and
fully-connected layers, trained with minibatch SGD with momentum on softmax
cross-entropy.  Everything is deterministic given the training seed; the
per-epoch RNG streams are derived from (seed, epoch index) so that warm
starting a model produces bit-identical results to uninterrupted training.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .genome import (
    ArchitectureDescriptor,
    BATCHNORM,
    CONV,
    DENSE,
    DROPOUT,
    LayerOp,
    MAXPOOL,
    TensorShape,
)

PROVENANCE_FULL = "FULL"
PROVENANCE_PARTIAL = "PARTIAL"
PROVENANCE_SURROGATE = "SURROGATE"

CHECKPOINT_MAGIC = b"NLGP"
CHECKPOINT_VERSION = 1

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9

# Width of a Dense layer resolved against its flattened input.
DENSE_WIDTH_MIN = 16
DENSE_WIDTH_MAX = 128
DENSE_WIDTH_DIVISOR = 8


class ShapeExhausted(ValueError):
    """A pooling layer would act on a spatial dimension smaller than its pool size."""


class NumericalDivergence(RuntimeError):
    """Training loss became non-finite. Carries the last finite model state."""

    def __init__(self, message: str, model: "TrainedModel | None" = None):
        super().__init__(message)
        self.model = model


def dense_width(flat_in: int) -> int:
    return min(DENSE_WIDTH_MAX, max(DENSE_WIDTH_MIN, flat_in // DENSE_WIDTH_DIVISOR))


def _layer_output_shape(op: LayerOp, shape: TensorShape) -> TensorShape:
    if op.kind == CONV:
        return TensorShape(shape.height, shape.width, op.filters)
    if op.kind == MAXPOOL:
        if shape.height < op.pool or shape.width < op.pool:
            raise ShapeExhausted(
                f"pool {op.pool} cannot act on {shape.height}x{shape.width}"
            )
        return TensorShape(shape.height // op.pool, shape.width // op.pool, shape.channels)
    if op.kind in (BATCHNORM, DROPOUT):
        return shape
    if op.kind == DENSE:
        return TensorShape(1, 1, dense_width(shape.flat))
    raise ValueError(f"unknown layer kind {op.kind!r}")


def propagate_shape(arch: ArchitectureDescriptor) -> list[TensorShape]:
    """Per-layer output shapes. Conv uses same padding / stride 1, pooling is
    valid with stride = pool size, Dense flattens its input."""
    shapes = []
    cur = arch.input_shape
    for op in arch.layers:
        cur = _layer_output_shape(op, cur)
        shapes.append(cur)
    return shapes


def param_count(arch: ArchitectureDescriptor) -> int:
    """Trainable parameter count, output head included."""
    total = 0
    cur = arch.input_shape
    for op in arch.layers:
        nxt = _layer_output_shape(op, cur)
        if op.kind == CONV:
            total += op.filters * (op.kernel * op.kernel * cur.channels + 1)
        elif op.kind == DENSE:
            total += nxt.channels * (cur.flat + 1)
        elif op.kind == BATCHNORM:
            total += 2 * cur.channels
        cur = nxt
    total += arch.num_classes * (cur.flat + 1)
    return total


# --------------------------------------------------------------------------
# layers


class _ConvLayer:
    """k x k convolution, same padding, stride 1, ReLU."""

    def __init__(self, in_shape: TensorShape, filters: int, kernel: int):
        self.in_shape = in_shape
        self.filters = filters
        self.kernel = kernel
        self.pad = kernel // 2
        self.weights: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator):
        fan_in = self.kernel * self.kernel * self.in_shape.channels
        limit = math.sqrt(6.0 / fan_in)
        self.weights = {
            "w": rng.uniform(-limit, limit, size=(fan_in, self.filters)),
            "b": np.zeros(self.filters),
        }

    def _cols(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        k = self.kernel
        xp = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
        return np.ascontiguousarray(win).reshape(n * h * w, c * k * k)

    def forward(self, x, training, rng):
        if x.ndim == 2:  # flat input from an upstream dense layer: treat as 1x1xD
            x = x.reshape(len(x), 1, 1, -1)
            self._flat_input = True
        else:
            self._flat_input = False
        n, h, w, _ = x.shape
        cols = self._cols(x)
        z = cols @ self.weights["w"] + self.weights["b"]
        y = np.maximum(z, 0.0)
        self._cache = (cols, z > 0.0, x.shape)
        return y.reshape(n, h, w, self.filters)

    def backward(self, dy, need_dx: bool = True):
        cols, mask, x_shape = self._cache
        n, h, w, c = x_shape
        k, pad = self.kernel, self.pad
        dz = dy.reshape(n * h * w, self.filters) * mask
        self.grads = {"w": cols.T @ dz, "b": dz.sum(axis=0)}
        if not need_dx:
            return None
        dcols = (dz @ self.weights["w"].T).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        for di in range(k):
            for dj in range(k):
                dxp[:, di : di + h, dj : dj + w, :] += dcols[:, :, :, :, di, dj]
        dx = dxp[:, pad : pad + h, pad : pad + w, :]
        return dx.reshape(n, -1) if self._flat_input else dx


class _MaxPoolLayer:
    """Valid max pooling with stride = pool size (trailing rows/cols cropped)."""

    def __init__(self, in_shape: TensorShape, pool: int):
        self.in_shape = in_shape
        self.pool = pool
        self.weights = {}

    def init_params(self, rng):
        pass

    def forward(self, x, training, rng):
        p = self.pool
        n, h, w, c = x.shape
        ho, wo = h // p, w // p
        xc = x[:, : ho * p, : wo * p, :]
        win = (
            xc.reshape(n, ho, p, wo, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, ho, wo, p * p, c)
        )
        idx = win.argmax(axis=3)
        y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        idx, x_shape = self._cache
        p = self.pool
        n, h, w, c = x_shape
        ho, wo = h // p, w // p
        dwin = np.zeros((n, ho, wo, p * p, c))
        np.put_along_axis(dwin, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        dx = np.zeros(x_shape)
        dx[:, : ho * p, : wo * p, :] = (
            dwin.reshape(n, ho, wo, p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, ho * p, wo * p, c)
        )
        return dx


class _BatchNormLayer:
    """Normalises over all axes but the last; running statistics at inference."""

    def __init__(self, in_shape: TensorShape):
        self.in_shape = in_shape
        self.channels = in_shape.channels
        self.weights = {}
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)

    def init_params(self, rng):
        self.weights = {"gamma": np.ones(self.channels), "beta": np.zeros(self.channels)}

    def forward(self, x, training, rng):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = _BN_MOMENTUM * self.running_mean + (1 - _BN_MOMENTUM) * mean
            self.running_var = _BN_MOMENTUM * self.running_var + (1 - _BN_MOMENTUM) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, axes, x.size // self.channels, training)
        return self.weights["gamma"] * xhat + self.weights["beta"]

    def backward(self, dy):
        xhat, inv_std, axes, m, training = self._cache
        self.grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * self.weights["gamma"]
        if not training:
            return dxhat * inv_std
        return (
            inv_std
            / m
            * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        )


class _DropoutLayer:
    """Inverted dropout; identity at inference."""

    def __init__(self, in_shape: TensorShape, rate: float):
        self.in_shape = in_shape
        self.rate = rate
        self.weights = {}

    def init_params(self, rng):
        pass

    def forward(self, x, training, rng):
        if not training:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) >= self.rate) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class _DenseLayer:
    """Flatten + fully-connected; ReLU unless this is the output head."""

    def __init__(self, in_shape: TensorShape, width: int, relu: bool = True):
        self.in_shape = in_shape
        self.width = width
        self.relu = relu
        self.weights = {}

    def init_params(self, rng):
        fan_in = self.in_shape.flat
        limit = math.sqrt(6.0 / fan_in)
        self.weights = {
            "w": rng.uniform(-limit, limit, size=(fan_in, self.width)),
            "b": np.zeros(self.width),
        }

    def forward(self, x, training, rng):
        flat = x.reshape(x.shape[0], -1)
        z = flat @ self.weights["w"] + self.weights["b"]
        if self.relu:
            y = np.maximum(z, 0.0)
            self._cache = (flat, z > 0.0, x.shape)
            return y
        self._cache = (flat, None, x.shape)
        return z

    def backward(self, dy):
        flat, mask, x_shape = self._cache
        dz = dy * mask if mask is not None else dy
        self.grads = {"w": flat.T @ dz, "b": dz.sum(axis=0)}
        return (dz @ self.weights["w"].T).reshape(x_shape)


def _build_layer(op: LayerOp, in_shape: TensorShape):
    if op.kind == CONV:
        return _ConvLayer(in_shape, op.filters, op.kernel)
    if op.kind == MAXPOOL:
        return _MaxPoolLayer(in_shape, op.pool)
    if op.kind == BATCHNORM:
        return _BatchNormLayer(in_shape)
    if op.kind == DROPOUT:
        return _DropoutLayer(in_shape, op.rate)
    if op.kind == DENSE:
        return _DenseLayer(in_shape, dense_width(in_shape.flat))
    raise ValueError(f"unknown layer kind {op.kind!r}")


class Network:
    """A compiled chain plus the softmax output head. Weights are allocated
    lazily by ``init_params`` so compilation stays cheap."""

    def __init__(self, arch: ArchitectureDescriptor):
        self.arch = arch
        shapes = propagate_shape(arch)  # validates the chain
        self.layers = []
        cur = arch.input_shape
        for op, out in zip(arch.layers, shapes):
            self.layers.append(_build_layer(op, cur))
            cur = out
        self.layers.append(_DenseLayer(cur, arch.num_classes, relu=False))
        self.param_count = param_count(arch)
        self.initialized = False
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def init_params(self, rng: np.random.Generator):
        for layer in self.layers:
            layer.init_params(rng)
        self._velocity = {
            (i, k): np.zeros_like(v)
            for i, layer in enumerate(self.layers)
            for k, v in layer.weights.items()
        }
        self.initialized = True

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator | None = None):
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        return x

    def backward(self, dlogits: np.ndarray):
        d = dlogits
        for i in range(len(self.layers) - 1, 0, -1):
            d = self.layers[i].backward(d)
        first = self.layers[0]
        if isinstance(first, _ConvLayer):
            return first.backward(d, need_dx=False)  # nothing upstream consumes dx
        return first.backward(d)

    def sgd_step(self, lr: float, momentum: float):
        for i, layer in enumerate(self.layers):
            for k, w in layer.weights.items():
                v = self._velocity[(i, k)]
                v *= momentum
                v -= lr * layer.grads[k]
                w += v

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x, training=False))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(logits: np.ndarray, y: np.ndarray):
    n = logits.shape[0]
    p = softmax(logits)
    loss = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def compile_network(arch: ArchitectureDescriptor) -> Network:
    """Build the network structure (validates shape propagation; no weights)."""
    return Network(arch)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class TrainedModel:
    network: Network
    seed: int
    epochs_trained: int
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class EvalResult:
    fitness: float
    phenotype: np.ndarray
    epochs_trained: int
    param_count: int
    cost_units: int
    provenance: str


def _seed_words(seed) -> tuple[int, ...]:
    return tuple(int(s) for s in seed) if isinstance(seed, (list, tuple)) else (int(seed),)


def _epoch_rng(seed, epoch: int) -> np.random.Generator:
    return np.random.default_rng([*_seed_words(seed), 7919, epoch])


def train(
    arch: ArchitectureDescriptor,
    dataset,
    epochs: int,
    seed: int,
    cfg: TrainConfig = TrainConfig(),
    start: TrainedModel | None = None,
) -> TrainedModel:
    """Train for ``epochs`` additional epochs.  With ``start`` the model is
    warm-continued; (a epochs, then b) is bit-identical to (a + b) under the
    same seed.  Raises NumericalDivergence when the loss goes non-finite."""
    if start is None:
        net = compile_network(arch)
        net.init_params(np.random.default_rng([*_seed_words(seed), 104729]))
        model = TrainedModel(net, seed, 0, [])
    else:
        model = start
        net = model.network
    x_train, y_train = dataset.train_balanced()
    x_val, y_val = dataset.split_arrays("validation")
    for _ in range(epochs):
        epoch = model.epochs_trained
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(len(x_train))
        correct = 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            logits = net.forward(x_train[sel], training=True, rng=rng)
            loss, dlogits = cross_entropy_and_grad(logits, y_train[sel])
            if not np.isfinite(loss):
                raise NumericalDivergence(f"loss non-finite at epoch {epoch}", model)
            correct += int((logits.argmax(axis=1) == y_train[sel]).sum())
            net.backward(dlogits)
            net.sgd_step(cfg.lr, cfg.momentum)
        model.epochs_trained += 1
        # train accuracy is accumulated over the epoch's minibatches
        model.history.append(
            {
                "epoch": model.epochs_trained,
                "train_acc": correct / len(order),
                "val_acc": accuracy(net, x_val, y_val),
            }
        )
    return model


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    pred = net.predict_proba(x).argmax(axis=1)
    return float((pred == y).mean())


def phenotype_of(model: TrainedModel, dataset) -> np.ndarray:
    """Softmax outputs over the validation split, flattened row-major over
    (instance, class).  Length n_validation * n_classes."""
    x_val, _ = dataset.split_arrays("validation")
    return model.network.predict_proba(x_val).ravel()


def evaluate(
    model: TrainedModel,
    dataset,
    split: str = "test1",
    provenance: str = PROVENANCE_FULL,
) -> EvalResult:
    """Fitness = classification accuracy on ``split``; the phenotype is always
    extracted on the validation split."""
    x, y = dataset.split_arrays(split)
    return EvalResult(
        fitness=accuracy(model.network, x, y),
        phenotype=phenotype_of(model, dataset),
        epochs_trained=model.epochs_trained,
        param_count=model.network.param_count,
        cost_units=model.epochs_trained,
        provenance=provenance,
    )


# --------------------------------------------------------------------------
# proxy fitness (no training; for fast experiments and CI)


def proxy_fitness(arch: ArchitectureDescriptor) -> float:
    """Smooth deterministic stand-in for trained accuracy.

    Sees only the decoded chain: peaked in depth around six layers, rewards a
    convolutional mix, and penalises oversized models.  Identical
    architectures always score identically.
    """
    kinds = [op.kind for op in arch.layers]
    depth = math.exp(-(((len(kinds) - 6) / 4.0) ** 2))
    mix = (
        0.12 * min(kinds.count(CONV), 4) / 4.0
        + 0.06 * (MAXPOOL in kinds)
        + 0.04 * (BATCHNORM in kinds)
        + 0.02 * (DROPOUT in kinds)
    )
    size_penalty = 0.08 * max(0.0, math.log10(param_count(arch)) - 5.0)
    return float(np.clip(0.35 + 0.45 * depth + mix - size_penalty, 0.0, 1.0))


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: TrainedModel, path) -> None:
    """Versioned binary checkpoint: magic, version, json shape table, then the
    flat float64 arrays (weights, momentum buffers, batch-norm statistics)."""
    arrays: list[np.ndarray] = []
    table = []
    net = model.network
    for i, layer in enumerate(net.layers):
        for k in sorted(layer.weights):
            table.append({"layer": i, "name": k, "shape": list(layer.weights[k].shape)})
            arrays.append(layer.weights[k])
            table.append({"layer": i, "name": f"vel:{k}", "shape": list(layer.weights[k].shape)})
            arrays.append(net._velocity[(i, k)])
        if isinstance(layer, _BatchNormLayer):
            for k, arr in (("run_mean", layer.running_mean), ("run_var", layer.running_var)):
                table.append({"layer": i, "name": k, "shape": list(arr.shape)})
                arrays.append(arr)
    header = {
        "arch": {
            "layers": [op.name for op in net.arch.layers],
            "input_shape": [
                net.arch.input_shape.height,
                net.arch.input_shape.width,
                net.arch.input_shape.channels,
            ],
            "num_classes": net.arch.num_classes,
        },
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "history": model.history,
        "table": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_model(path, catalogue=None) -> TrainedModel:
    from .genome import DEFAULT_CATALOGUE

    catalogue = catalogue or DEFAULT_CATALOGUE
    by_name = {op.name: op for op in catalogue}
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len))
        arch = ArchitectureDescriptor(
            layers=tuple(by_name[n] for n in header["arch"]["layers"]),
            input_shape=TensorShape(*header["arch"]["input_shape"]),
            num_classes=header["arch"]["num_classes"],
        )
        net = Network(arch)
        net.init_params(np.random.default_rng(0))  # overwritten below
        for entry in header["table"]:
            shape = tuple(entry["shape"])
            arr = np.frombuffer(
                f.read(8 * int(np.prod(shape, dtype=int))), dtype=np.float64
            ).reshape(shape)
            layer = net.layers[entry["layer"]]
            name = entry["name"]
            if name.startswith("vel:"):
                net._velocity[(entry["layer"], name[4:])] = arr.copy()
            elif name == "run_mean":
                layer.running_mean = arr.copy()
            elif name == "run_var":
                layer.running_var = arr.copy()
            else:
                layer.weights[name] = arr.copy()
    return TrainedModel(net, header["seed"], header["epochs_trained"], header["history"])
