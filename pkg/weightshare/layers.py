"""Layers, the two shared trunk architectures and per-data-set networks.

Signals are laid out channels-last: a batch of spectra of length ``p`` enters the
trunk as ``(batch, p, 1)``.  Trunk parameters live in a :class:`ParameterRegistry`
under architecture-scoped ids, so every network built from the same registry and
architecture reuses the identical convolution filters whatever its input length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field

from weightshare import autodiff as ad
from weightshare.autodiff import Parameter, ParameterRegistry, Tensor
from weightshare.errors import ConfigError, ShapeError, WeightShareError

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

MIN_INPUT_LENGTH = 64
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
P_KEEP = 0.95

# (filters, filter length) per convolution block
ARCHITECTURES: dict[int, tuple[tuple[int, int], ...]] = {
    1: ((8, 11), (8, 11), (16, 11), (16, 11), (24, 6), (24, 6)),
    2: ((8, 11), (8, 11), (16, 8), (16, 8), (24, 6), (24, 6)),
}
# what follows each conv + max-pool pair
_BLOCK_TAILS = (("bn",), ("dropout", "bn"), ("bn",), ("dropout", "bn"), ("bn",), ("dropout",))


def he_normal(fan_in: int):
    std = np.sqrt(2.0 / fan_in)
    return lambda rng, shape: rng.normal(0.0, std, size=shape)


def zeros(rng, shape):
    return np.zeros(shape)


def ones(rng, shape):
    return np.ones(shape)


class Layer(Protocol):
    def forward(self, x: Tensor, mode: Mode = "eval", rng: np.random.Generator | None = None) -> Tensor: ...

    def parameters(self) -> list[Parameter]: ...


# -- convolution ------------------------------------------------------------------


@dataclass(eq=False)
class Conv1DLayer:
    """Stride-1 convolution; ``weight`` is (out_channels, in_channels, filter_length)."""

    weight: Parameter
    bias: Parameter
    activation: Literal["relu"] | None = None
    padding_mode: Literal["same", "valid"] = "same"
    allow_short: bool = False
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def filter_length(self) -> int:
        return self.weight.shape[2]

    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        return conv1d_forward(x, self)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def same_padding(filter_length: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the length; even filters pad one more on the right."""
    left = (filter_length - 1) // 2
    return left, filter_length - 1 - left


def conv1d_forward(x, layer: Conv1DLayer) -> Tensor:
    """out[i] = sum_j x[i + right - j] * theta[j] + bias, zero padded at both ends."""
    x = ad.as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (batch, length, channels), got {x.shape}")
    batch, length, channels = x.shape
    k = layer.filter_length
    if channels != layer.in_channels:
        raise ShapeError(f"conv1d: input has {channels} channels, filter bank expects {layer.in_channels}")
    short_ok = layer.allow_short and layer.padding_mode == "same"
    if length < k and not short_ok:
        raise ShapeError(f"conv1d: input length {length} is shorter than filter length {k}")

    if layer.padding_mode == "same":
        left, right = same_padding(k)
        x = ad.pad(x, ((0, 0), (left, right), (0, 0)))
    windows = ad.unfold1d(x, k)
    n_out = windows.shape[1]
    columns = ad.reshape(windows, (batch * n_out, k * channels))
    flipped = ad.slice_(layer.weight.tensor, (slice(None), slice(None), slice(None, None, -1)))
    kernel = ad.reshape(ad.transpose(flipped, (2, 1, 0)), (k * channels, layer.out_channels))
    out = ad.add(ad.matmul(columns, kernel), layer.bias.tensor)
    out = ad.reshape(out, (batch, n_out, layer.out_channels))
    return ad.relu(out) if layer.activation == "relu" else out


# -- pooling ------------------------------------------------------------------------


@dataclass(eq=False)
class MaxPool1DLayer:
    pool_size: int = 2
    stride: int = 2

    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        return maxpool1d_forward(x, self.pool_size)

    def parameters(self) -> list[Parameter]:
        return []


def maxpool1d_forward(x, pool_size: int = 2) -> Tensor:
    """Non-overlapping max pooling along axis 1; a trailing remainder is dropped."""
    x = ad.as_tensor(x)
    batch, length, channels = x.shape
    if length < pool_size:
        raise ShapeError(f"maxpool1d: length {length} is shorter than pool size {pool_size}")
    n_out = length // pool_size
    if n_out * pool_size != length:
        x = ad.slice_(x, (slice(None), slice(0, n_out * pool_size), slice(None)))
    grouped = ad.reshape(x, (batch, n_out, pool_size, channels))
    return ad.max_(grouped, axis=2)


# -- normalization / regularization ------------------------------------------------


@dataclass(eq=False)
class BatchNormLayer:
    """Per-channel batch normalization; running statistics are registry buffers."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        return batchnorm_forward(x, self, mode)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def batchnorm_forward(x, layer: BatchNormLayer, mode: Mode = "eval") -> Tensor:
    x = ad.as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if x.shape[-1] != layer.gamma.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[-1]} channels, layer has {layer.gamma.shape[0]}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2 samples")
        mu = ad.mean(x, axis=axes, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.mean(ad.mul(centered, centered), axis=axes, keepdims=True)
        normalized = ad.div(centered, ad.sqrt(ad.add(var, layer.epsilon)))
        keep = layer.momentum
        layer.running_mean[...] = keep * layer.running_mean + (1 - keep) * mu.values.reshape(-1)
        layer.running_var[...] = keep * layer.running_var + (1 - keep) * var.values.reshape(-1)
    else:
        scale = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        normalized = ad.mul(ad.sub(x, layer.running_mean), scale)
    return ad.add(ad.mul(normalized, layer.gamma.tensor), layer.beta.tensor)


@dataclass(eq=False)
class SpatialDropoutLayer:
    """Drops whole channels in train mode and rescales survivors by 1/p_keep."""

    p_keep: float = P_KEEP

    def forward(self, x, mode: Mode = "eval", rng: np.random.Generator | None = None) -> Tensor:
        x = ad.as_tensor(x)
        if mode != "train" or self.p_keep >= 1.0:
            return x
        if rng is None:
            raise WeightShareError("train-mode dropout needs a random generator")
        mask_shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
        mask = (rng.random(mask_shape) < self.p_keep) / self.p_keep
        return ad.mul(x, mask)

    def parameters(self) -> list[Parameter]:
        return []


# -- dense head ---------------------------------------------------------------------


@dataclass(eq=False)
class DenseLayer:
    """output = input @ weight + bias, ``weight`` is (in_units, out_units)."""

    weight: Parameter
    bias: Parameter

    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"dense: input {x.shape} does not match weight {self.weight.shape}")
        return ad.add(ad.matmul(x, self.weight.tensor), self.bias.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass(eq=False)
class ReLULayer:
    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        return ad.relu(x)

    def parameters(self) -> list[Parameter]:
        return []


@dataclass(eq=False)
class FlattenLayer:
    def forward(self, x, mode: Mode = "eval", rng=None) -> Tensor:
        x = ad.as_tensor(x)
        return ad.reshape(x, (x.shape[0], -1))

    def parameters(self) -> list[Parameter]:
        return []


# -- construction -------------------------------------------------------------------


def make_conv(registry: ParameterRegistry, prefix: str, in_channels: int, filters: int, length: int, **kw) -> Conv1DLayer:
    fan_in = in_channels * length
    weight = registry.get_or_create(f"{prefix}.weight", (filters, in_channels, length), he_normal(fan_in))
    bias = registry.get_or_create(f"{prefix}.bias", (filters,), zeros)
    return Conv1DLayer(weight, bias, **kw)


def make_batchnorm(registry: ParameterRegistry, prefix: str, units: int, create: bool = False) -> BatchNormLayer:
    make = registry.create if create else registry.get_or_create
    gamma = make(f"{prefix}.gamma", (units,), ones)
    beta = make(f"{prefix}.beta", (units,), zeros)
    running_mean = registry.buffer(f"{prefix}.running_mean", np.zeros(units))
    running_var = registry.buffer(f"{prefix}.running_var", np.ones(units))
    return BatchNormLayer(gamma, beta, running_mean, running_var)


def make_dense(registry: ParameterRegistry, prefix: str, in_units: int, out_units: int) -> DenseLayer:
    weight = registry.create(f"{prefix}.weight", (in_units, out_units), he_normal(in_units))
    bias = registry.create(f"{prefix}.bias", (out_units,), zeros)
    return DenseLayer(weight, bias)


def trunk_prefix(architecture_id: int) -> str:
    return f"trunk{architecture_id}."


def build_trunk(architecture_id: int, registry: ParameterRegistry) -> list[Layer]:
    """Shared convolutional stack up to and including Flatten."""
    if architecture_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture id {architecture_id}; expected one of {sorted(ARCHITECTURES)}")
    prefix = trunk_prefix(architecture_id)
    layers: list[Layer] = []
    in_channels = 1
    for block, ((filters, length), tail) in enumerate(zip(ARCHITECTURES[architecture_id], _BLOCK_TAILS)):
        layers.append(
            make_conv(registry, f"{prefix}conv{block}", in_channels, filters, length, activation="relu", allow_short=True)
        )
        layers.append(MaxPool1DLayer())
        for kind in tail:
            if kind == "bn":
                layers.append(make_batchnorm(registry, f"{prefix}bn{block}", filters))
            else:
                layers.append(SpatialDropoutLayer())
        in_channels = filters
    layers.append(FlattenLayer())
    return layers


def pooled_length(p: int, halvings: int = 6) -> int:
    for _ in range(halvings):
        p //= 2
    return p


def flatten_length(p: int, architecture_id: int = 1) -> int:
    blocks = ARCHITECTURES[architecture_id]
    return blocks[-1][0] * pooled_length(p, len(blocks))


class NetworkSpec(BaseModel):
    """Static description of one per-data-set network."""

    name: str
    architecture_id: Literal[1, 2] = 1
    input_length: int = Field(gt=0)
    fc1: int = Field(10, gt=0)
    fc2: int = Field(1, gt=0)
    cost: Literal["rmse", "wrmse"] = "rmse"
    decouple_lambda: float = Field(0.0, ge=0.0)
    decouple_diagonal: bool = True

    @property
    def head_prefix(self) -> str:
        return f"head.{self.name}."


@dataclass(eq=False)
class Network:
    spec: NetworkSpec
    registry: ParameterRegistry
    trunk: list[Layer]
    head: list[Layer]
    trunk_frozen: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def input_length(self) -> int:
        return self.spec.input_length

    @property
    def architecture_id(self) -> int:
        return self.spec.architecture_id

    @property
    def flatten_length(self) -> int:
        return self.head[0].gamma.shape[0]

    def trunk_parameters(self) -> list[Parameter]:
        return [p for layer in self.trunk for p in layer.parameters()]

    def head_parameters(self) -> list[Parameter]:
        return [p for layer in self.head for p in layer.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.trunk_parameters() + self.head_parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    @property
    def decouple_weight(self) -> Parameter:
        """FC1 weight matrix, the layer whose outputs the decoupling penalty targets."""
        return self.head[1].weight

    def forward(self, batch, mode: Mode = "eval", rng: np.random.Generator | None = None) -> Tensor:
        return network_forward(self, batch, mode, rng)


def build_network(spec: NetworkSpec, registry: ParameterRegistry) -> Network:
    if spec.input_length < MIN_INPUT_LENGTH:
        raise ShapeError(
            f"network {spec.name!r}: input length {spec.input_length} is below the minimum {MIN_INPUT_LENGTH}"
        )
    trunk = build_trunk(spec.architecture_id, registry)
    flat = flatten_length(spec.input_length, spec.architecture_id)
    prefix = spec.head_prefix
    head: list[Layer] = [
        make_batchnorm(registry, f"{prefix}bn0", flat, create=True),
        make_dense(registry, f"{prefix}fc1", flat, spec.fc1),
        ReLULayer(),
        make_batchnorm(registry, f"{prefix}bn1", spec.fc1, create=True),
        make_dense(registry, f"{prefix}fc2", spec.fc1, spec.fc2),
    ]
    logger.debug("built network %s: p=%d arch=%d flatten=%d", spec.name, spec.input_length, spec.architecture_id, flat)
    return Network(spec, registry, trunk, head)


def network_forward(net: Network, batch, mode: Mode = "eval", rng: np.random.Generator | None = None) -> Tensor:
    x = ad.as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != net.input_length:
        raise ShapeError(
            f"network {net.name!r}: expected input length {net.input_length}, got shape {x.shape}"
        )
    x = ad.reshape(x, (x.shape[0], x.shape[1], 1))
    trunk_mode: Mode = "eval" if net.trunk_frozen else mode
    for layer in net.trunk:
        x = layer.forward(x, trunk_mode, rng)
    for layer in net.head:
        x = layer.forward(x, mode, rng)
    return x


def predict(net: Network, spectra: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode predictions computed in chunks."""
    if len(spectra) == 0:
        return np.zeros((0, net.spec.fc2))
    chunks = [network_forward(net, spectra[i : i + batch_size], "eval").values for i in range(0, len(spectra), batch_size)]
    return np.concatenate(chunks, axis=0)
