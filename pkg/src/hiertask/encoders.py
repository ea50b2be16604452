"""Feature extractors standing in for the CNN / transformer backbone families.

Every family maps an input batch to an ``n x feature_dim`` feature matrix on the
tape; the heads in :mod:`hiertask.mtl` never look past that seam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .layers import (
    AttentionBlock,
    Conv2dLayer,
    DenseLayer,
    attention_forward,
    conv2d_forward,
    dense_forward,
)

FAMILIES = ("mlp", "tiny_cnn", "tiny_attention")

_DEFAULT_HIDDEN = {"mlp": (), "tiny_cnn": (8, 16), "tiny_attention": (16,)}


@dataclass(frozen=True)
class EncoderSpec:
    """Declarative encoder description.

    ``hidden`` means hidden layer widths for ``mlp``, conv block channel counts
    for ``tiny_cnn`` and ``(model_dim,)`` for ``tiny_attention``.  ``None``
    selects the family default.
    """

    family: str
    input_shape: tuple[int, ...]
    feature_dim: int = 64
    hidden: tuple[int, ...] | None = None
    patch_size: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown encoder family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.hidden is None:
            object.__setattr__(self, "hidden", _DEFAULT_HIDDEN[self.family])
        else:
            object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.feature_dim < 1 or any(v < 1 for v in self.input_shape + self.hidden):
            raise ConfigurationError(f"encoder extents must be positive: {self}")
        if self.family == "mlp":
            return
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"{self.family} needs a (channels, height, width) input shape")
        _, h, w = self.input_shape
        if self.family == "tiny_cnn":
            if not self.hidden:
                raise ConfigurationError("tiny_cnn needs at least one conv block")
            div = 2 ** len(self.hidden)
            if h % div or w % div:
                raise ConfigurationError(
                    f"tiny_cnn with {len(self.hidden)} pooling blocks needs spatial extents divisible by {div}"
                )
        else:
            if len(self.hidden) != 1:
                raise ConfigurationError("tiny_attention takes hidden=(model_dim,)")
            if h % self.patch_size or w % self.patch_size:
                raise ConfigurationError(f"patch size {self.patch_size} does not tile {h}x{w}")

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    @property
    def num_tokens(self) -> int:
        _, h, w = self.input_shape
        return (h // self.patch_size) * (w // self.patch_size)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "feature_dim": self.feature_dim,
            "hidden": list(self.hidden),
            "patch_size": self.patch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            feature_dim=int(d.get("feature_dim", 64)),
            hidden=tuple(d["hidden"]) if d.get("hidden") is not None else None,
            patch_size=int(d.get("patch_size", 4)),
        )


@dataclass
class Encoder:
    spec: EncoderSpec
    dense: list[DenseLayer] = field(default_factory=list)
    convs: list[Conv2dLayer] = field(default_factory=list)
    attention: AttentionBlock | None = None
    token_bias: Tensor | None = None

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in declaration order."""
        params: list[Tensor] = []
        for conv in self.convs:
            params += conv.parameters()
        if self.spec.family == "tiny_attention":
            params += self.dense[0].parameters()
            params.append(self.token_bias)
            params += self.attention.parameters()
            params += self.dense[1].parameters()
        else:
            for layer in self.dense:
                params += layer.parameters()
        return params

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def __call__(self, x: Tensor) -> Tensor:
        return encode(self, x)


def build_encoder(spec: EncoderSpec, rng: np.random.Generator) -> Encoder:
    enc = Encoder(spec)
    d = spec.feature_dim
    if spec.family == "mlp":
        widths = [spec.input_size, *spec.hidden, d]
        enc.dense = [DenseLayer.init(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
    elif spec.family == "tiny_cnn":
        channels = [spec.input_shape[0], *spec.hidden]
        enc.convs = [Conv2dLayer.init(a, b, rng) for a, b in zip(channels[:-1], channels[1:])]
        enc.dense = [DenseLayer.init(channels[-1], d, rng)]
    else:
        (model_dim,) = spec.hidden
        patch_dim = spec.input_shape[0] * spec.patch_size**2
        embed = DenseLayer.init(patch_dim, model_dim, rng)
        enc.token_bias = Tensor(np.zeros((spec.num_tokens, model_dim)), requires_grad=True)
        enc.attention = AttentionBlock.init(model_dim, rng)
        enc.dense = [embed, DenseLayer.init(model_dim, d, rng)]
    return enc


def _as_input(spec: EncoderSpec, x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"encoder input needs a batch axis, got shape {x.shape}")
    n = x.shape[0]
    if tuple(x.shape[1:]) == spec.input_shape:
        return x if spec.family != "mlp" else ad.reshape(x, (n, spec.input_size))
    if x.ndim == 2 and x.shape[1] == spec.input_size:
        return x if spec.family == "mlp" else ad.reshape(x, (n, *spec.input_shape))
    raise DimensionError(f"encoder expects samples of shape {spec.input_shape}, got batch {x.shape}")


def _mean_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ad.mean(ad.reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


def encode(encoder: Encoder, x: Tensor) -> Tensor:
    """Map a batch to its ``n x feature_dim`` features."""
    spec = encoder.spec
    h = _as_input(spec, x)
    if spec.family == "mlp":
        for layer in encoder.dense[:-1]:
            h = ad.relu(dense_forward(layer, h))
        return dense_forward(encoder.dense[-1], h)
    if spec.family == "tiny_cnn":
        for conv in encoder.convs:
            h = _mean_pool2(ad.relu(conv2d_forward(conv, h)))
        return dense_forward(encoder.dense[0], ad.mean(h, axis=(2, 3)))

    n, c, height, width = h.shape
    p = spec.patch_size
    h = ad.reshape(h, (n, c, height // p, p, width // p, p))
    h = ad.transpose(h, (0, 2, 4, 1, 3, 5))
    h = ad.reshape(h, (n, spec.num_tokens, c * p * p))
    tokens = ad.add(dense_forward(encoder.dense[0], h), encoder.token_bias)
    tokens = attention_forward(encoder.attention, tokens)
    return dense_forward(encoder.dense[1], ad.mean(tokens, axis=1))


def parameter_count(spec: EncoderSpec) -> int:
    """Closed-form count of trainable scalars for ``spec``."""
    d = spec.feature_dim
    if spec.family == "mlp":
        widths = [spec.input_size, *spec.hidden, d]
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if spec.family == "tiny_cnn":
        channels = [spec.input_shape[0], *spec.hidden]
        convs = sum(a * b * 9 + b for a, b in zip(channels[:-1], channels[1:]))
        return convs + channels[-1] * d + d
    (m,) = spec.hidden
    patch_dim = spec.input_shape[0] * spec.patch_size**2
    return (patch_dim * m + m) + spec.num_tokens * m + (4 * (m * m + m) + 2 * m) + (m * d + d)


def flop_count(spec: EncoderSpec) -> int:
    """Multiply-accumulates for one sample; biases and activations are not counted."""
    d = spec.feature_dim
    if spec.family == "mlp":
        widths = [spec.input_size, *spec.hidden, d]
        return sum(a * b for a, b in zip(widths[:-1], widths[1:]))
    if spec.family == "tiny_cnn":
        c_prev, h, w = spec.input_shape
        total = 0
        for c in spec.hidden:
            total += h * w * c * c_prev * 9
            c_prev, h, w = c, h // 2, w // 2
        return total + c_prev * d
    (m,) = spec.hidden
    t = spec.num_tokens
    patch_dim = spec.input_shape[0] * spec.patch_size**2
    # includes the two activation products QK^T and AV
    return t * patch_dim * m + 4 * t * m * m + 2 * t * t * m + m * d
