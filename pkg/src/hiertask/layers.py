"""Parameterised layers: dense, 2-d convolution, single-head attention, dropout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class DenseLayer:
    weight: Tensor  # in_dim x out_dim
    bias: Tensor  # out_dim

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        return cls(glorot_uniform((in_dim, out_dim), in_dim, out_dim, rng), _zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """``x @ W + b`` applied over the last axis of ``x``."""
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(
            f"dense layer expects trailing extent {layer.in_dim}, got input shape {x.shape}"
        )
    return ad.add(ad.matmul(x, layer.weight), layer.bias)


@dataclass
class Conv2dLayer:
    kernels: Tensor  # out_ch x in_ch x kh x kw
    bias: Tensor
    stride: int = 1
    padding: int = 1

    @classmethod
    def init(cls, in_ch: int, out_ch: int, rng: np.random.Generator, kernel_size: int = 3,
             stride: int = 1, padding: int = 1) -> "Conv2dLayer":
        area = kernel_size * kernel_size
        kernels = glorot_uniform(
            (out_ch, in_ch, kernel_size, kernel_size), in_ch * area, out_ch * area, rng
        )
        return cls(kernels, _zeros(out_ch), stride, padding)

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]

    def output_extent(self, extent: int, axis: int = 0) -> int:
        k = self.kernel_size[axis]
        return (extent + 2 * self.padding - k) // self.stride + 1

    @property
    def parameter_count(self) -> int:
        return self.kernels.size + self.bias.size

    def parameters(self) -> list[Tensor]:
        return [self.kernels, self.bias]


def conv2d_forward(layer: Conv2dLayer, x: Tensor) -> Tensor:
    return ad.conv2d(x, layer.kernels, layer.bias, stride=layer.stride, padding=layer.padding)


@dataclass
class AttentionBlock:
    """Pre-norm single-head self-attention with a residual connection."""

    query: DenseLayer
    key: DenseLayer
    value: DenseLayer
    output: DenseLayer
    ln_scale: Tensor
    ln_shift: Tensor

    @classmethod
    def init(cls, model_dim: int, rng: np.random.Generator) -> "AttentionBlock":
        proj = [DenseLayer.init(model_dim, model_dim, rng) for _ in range(4)]
        return cls(*proj, Tensor(np.ones(model_dim), requires_grad=True), _zeros(model_dim))

    @property
    def model_dim(self) -> int:
        return self.query.in_dim

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in (self.query, self.key, self.value, self.output):
            params.extend(layer.parameters())
        return params + [self.ln_scale, self.ln_shift]


def attention_forward(block: AttentionBlock, x: Tensor, return_weights: bool = False):
    """Attend over the token axis of ``x`` (n, t, d).

    With ``return_weights`` the (n, t, t) attention matrix is returned as well.
    """
    if x.ndim != 3 or x.shape[-1] != block.model_dim:
        raise DimensionError(
            f"attention block of width {block.model_dim} got input shape {x.shape}"
        )
    h = ad.layer_norm(x, block.ln_scale, block.ln_shift)
    q = dense_forward(block.query, h)
    k = dense_forward(block.key, h)
    v = dense_forward(block.value, h)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(block.model_dim))
    weights = ad.softmax(scores, axis=-1)
    out = ad.add(x, dense_forward(block.output, ad.matmul(weights, v)))
    return (out, weights) if return_weights else out


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    mode: str = field(default="train")

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")

    def with_mode(self, mode: str) -> "DropoutSpec":
        return DropoutSpec(self.rate, mode)


def dropout_forward(spec: DropoutSpec, x: Tensor, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if spec.mode == "eval" or spec.rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= spec.rate
    return ad.mul(x, keep / (1.0 - spec.rate))
