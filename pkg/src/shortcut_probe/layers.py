"""Parameterized layers used to build trunks and heads."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Layer:
    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def parameters(self) -> list:
        """(name, Tensor) pairs, in a fixed order."""
        return []


class DenseLayer(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.weight = Tensor(np.zeros((self.n_out, self.n_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(self.n_out), requires_grad=True)

    @property
    def fans(self):
        return self.n_in, self.n_out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense layer expects [N, {self.n_in}], got {x.shape}")
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __repr__(self):
        return f"DenseLayer({self.n_in} -> {self.n_out})"


class ConvBlock(Layer):
    """3x3 conv -> relu -> 2x2 average pool."""

    def __init__(self, c_in: int, n_filters: int):
        self.c_in, self.n_filters = int(c_in), int(n_filters)
        self.kernels = Tensor(np.zeros((self.n_filters, self.c_in, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(self.n_filters), requires_grad=True)

    @property
    def fans(self):
        return self.c_in * 9, self.n_filters * 9

    def forward(self, x):
        return T.avgpool2(T.relu(T.conv2d(x, self.kernels, self.bias)))

    def parameters(self):
        return [("kernels", self.kernels), ("bias", self.bias)]

    def __repr__(self):
        return f"ConvBlock({self.c_in} -> {self.n_filters})"


class ReLU(Layer):
    def forward(self, x):
        return T.relu(x)

    def __repr__(self):
        return "ReLU()"


class Flatten(Layer):
    def forward(self, x):
        return T.flatten(x)

    def __repr__(self):
        return "Flatten()"


STOCHASTIC = "stochastic"
DISABLED = "disabled"


class DropoutLayer(Layer):
    """Inverted dropout.

    In ``stochastic`` mode every unit is zeroed with probability ``rate`` and
    survivors are scaled by ``1 / (1 - rate)``; a fresh mask is drawn per
    call. In ``disabled`` mode the layer is the identity.
    """

    def __init__(self, rate: float = 0.2, seed: int = 0, mode: str = STOCHASTIC):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        if mode not in (STOCHASTIC, DISABLED):
            raise ConfigError(f"unknown dropout mode {mode!r}")
        self.rate = float(rate)
        self.mode = mode
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        if self.mode == DISABLED or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = keep * (1.0 / (1.0 - self.rate))
        return T.mul(x, Tensor(mask))

    def __repr__(self):
        return f"DropoutLayer(rate={self.rate}, mode={self.mode!r})"


def forward_dropout(x: Tensor, layer: DropoutLayer) -> Tensor:
    return layer.forward(x)


def init_params(layer: Layer, seed) -> Layer:
    """Glorot-uniform weights with bound sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    if isinstance(layer, DenseLayer):
        w = layer.weight
    elif isinstance(layer, ConvBlock):
        w = layer.kernels
    else:
        return layer
    fan_in, fan_out = layer.fans
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w.data = rng.uniform(-bound, bound, size=w.shape)
    layer.bias.data = np.zeros(layer.bias.shape)
    return layer


def stack_forward(layers, x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        try:
            x = layer(x)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer!r}): {e}") from e
    return x


def stack_parameters(layers, prefix: str = "") -> list:
    out = []
    for i, layer in enumerate(layers):
        for name, p in layer.parameters():
            out.append((f"{prefix}{i}.{name}", p))
    return out


def dropout_layers(layers) -> list:
    return [layer for layer in layers if isinstance(layer, DropoutLayer)]


def set_dropout_mode(layers, mode: Optional[str]):
    for layer in dropout_layers(layers):
        layer.mode = mode
