"""Single-task, parallel and cascaded head wiring on top of a shared encoder.

* ``single_task``: one model head on the (dropped-out) encoder features.
* ``parallel``: make and model heads read the same features independently.
* ``cascaded``: the make head runs first; its raw logits are concatenated to
  the features and the widened vector feeds the model head.  Nothing is
  detached, so the model loss also trains the make head.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Taxonomy
from .encoders import Encoder, EncoderSpec, build_encoder, encode, flop_count, parameter_count
from .errors import ConfigurationError, DataError, TaxonomyError
from .layers import DenseLayer, DropoutSpec, dense_forward, dropout_forward

CHECKPOINT_MAGIC = b"HTMT1"

# fixed sub-stream ids, so adding a make head never perturbs encoder/model-head init
STREAM_ENCODER, STREAM_MODEL_HEAD, STREAM_MAKE_HEAD, STREAM_DROPOUT, STREAM_SHUFFLE = range(5)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), which])


class ArchitectureMode(str, enum.Enum):
    SINGLE_TASK = "single_task"
    PARALLEL = "parallel"
    CASCADED = "cascaded"

    @property
    def has_make_head(self) -> bool:
        return self is not ArchitectureMode.SINGLE_TASK


@dataclass
class ForwardOutput:
    model_logits: Tensor
    make_logits: Tensor | None = None
    features: Tensor | None = None
    model_head_input: Tensor | None = None


@dataclass
class MtlNetwork:
    encoder: Encoder
    model_head: DenseLayer
    mode: ArchitectureMode
    taxonomy: Taxonomy | None
    make_head: DenseLayer | None = None
    dropout: DropoutSpec = DropoutSpec(0.0)
    # alternatives to the default wiring, kept for experimentation
    dropout_make_logits: bool = False
    dropout_model_head_only: bool = False

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in declaration order: encoder, make head, model head."""
        params = list(self.encoder.parameters())
        if self.make_head is not None:
            params += self.make_head.parameters()
        return params + self.model_head.parameters()

    def head_parameters(self) -> list[Tensor]:
        return self.model_head.parameters()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_network(spec: EncoderSpec, taxonomy: Taxonomy, mode, dropout: float = 0.0,
                  seed: int = 0, **flags) -> MtlNetwork:
    mode = ArchitectureMode(mode)
    d, k, m = spec.feature_dim, taxonomy.num_makes, taxonomy.num_models
    encoder = build_encoder(spec, stream(seed, STREAM_ENCODER))
    model_in = d + k if mode is ArchitectureMode.CASCADED else d
    model_head = DenseLayer.init(model_in, m, stream(seed, STREAM_MODEL_HEAD))
    make_head = DenseLayer.init(d, k, stream(seed, STREAM_MAKE_HEAD)) if mode.has_make_head else None
    return MtlNetwork(encoder, model_head, mode, taxonomy, make_head, DropoutSpec(dropout), **flags)


def forward(net: MtlNetwork, x, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardOutput:
    """Run encoder and heads; ``mode`` selects train- or eval-time dropout."""
    if net.taxonomy is None:
        raise ConfigurationError("network has no taxonomy bound")
    x = x if isinstance(x, Tensor) else Tensor(x)
    drop = net.dropout.with_mode(mode)
    features = encode(net.encoder, x)
    dropped = dropout_forward(drop, features, rng)

    if net.mode is ArchitectureMode.SINGLE_TASK:
        return ForwardOutput(dense_forward(net.model_head, dropped), None, features, dropped)

    make_in = features if net.dropout_model_head_only else dropped
    make_logits = dense_forward(net.make_head, make_in)
    if net.mode is ArchitectureMode.PARALLEL:
        return ForwardOutput(dense_forward(net.model_head, dropped), make_logits, features, dropped)

    carried = dropout_forward(drop, make_logits, rng) if net.dropout_make_logits else make_logits
    widened = ad.concat([dropped, carried], axis=1)
    return ForwardOutput(dense_forward(net.model_head, widened), make_logits, features, widened)


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class HeadCounts:
    base: int
    parallel_delta: int
    cascaded_extra_delta: int


@dataclass(frozen=True)
class HeadFlops:
    parallel_delta: int
    cascaded_extra_delta: int


def head_parameter_deltas(d: int, k: int, m: int) -> tuple[int, int]:
    """(make head size, extra model-head weights in cascaded mode)."""
    return k * (d + 1), m * k


def head_flop_deltas(d: int, k: int, m: int) -> tuple[int, int]:
    """Weight-matrix MACs at batch size 1; biases excluded."""
    return k * d, m * k


def head_parameter_counts(net: MtlNetwork) -> HeadCounts:
    if net.taxonomy is None:
        raise ConfigurationError("network has no taxonomy bound")
    d, k, m = net.feature_dim, net.taxonomy.num_makes, net.taxonomy.num_models
    base = parameter_count(net.encoder.spec) + m * (d + 1)
    return HeadCounts(base, *head_parameter_deltas(d, k, m))


def head_flop_counts(net: MtlNetwork) -> HeadFlops:
    if net.taxonomy is None:
        raise ConfigurationError("network has no taxonomy bound")
    return HeadFlops(*head_flop_deltas(net.feature_dim, net.taxonomy.num_makes, net.taxonomy.num_models))


def network_flops(net: MtlNetwork) -> int:
    d, k, m = net.feature_dim, net.taxonomy.num_makes, net.taxonomy.num_models
    total = flop_count(net.encoder.spec) + d * m
    par, extra = head_flop_deltas(d, k, m)
    if net.mode is ArchitectureMode.PARALLEL:
        total += par
    elif net.mode is ArchitectureMode.CASCADED:
        total += par + extra
    return total


# ---------------------------------------------------------------------------
# checkpoints


def _manifest(net: MtlNetwork) -> dict:
    return {
        "mode": net.mode.value,
        "encoder": net.encoder.spec.to_dict(),
        "taxonomy_sha256": net.taxonomy.digest(),
        "num_makes": net.taxonomy.num_makes,
        "num_models": net.taxonomy.num_models,
        "dropout": net.dropout.rate,
        "dropout_make_logits": net.dropout_make_logits,
        "dropout_model_head_only": net.dropout_model_head_only,
        "tensors": [list(p.shape) for p in net.parameters()],
    }


def checkpoint_bytes(net: MtlNetwork) -> bytes:
    manifest = json.dumps(_manifest(net), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in net.parameters())
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(manifest)) + manifest + body


def save_checkpoint(net: MtlNetwork, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a hiertask checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    manifest = json.loads(raw[offset:offset + length].decode("utf-8"))
    values = np.frombuffer(raw[offset + length:], dtype="<f8")
    return manifest, values


def load_checkpoint(path, taxonomy: Taxonomy) -> MtlNetwork:
    manifest, values = read_checkpoint(path)
    if manifest["taxonomy_sha256"] != taxonomy.digest():
        raise TaxonomyError(f"{path}: checkpoint was trained on a different taxonomy")
    net = build_network(
        EncoderSpec.from_dict(manifest["encoder"]), taxonomy, manifest["mode"],
        dropout=manifest["dropout"],
        dropout_make_logits=manifest.get("dropout_make_logits", False),
        dropout_model_head_only=manifest.get("dropout_model_head_only", False),
    )
    params = net.parameters()
    if [list(p.shape) for p in params] != manifest["tensors"]:
        raise DataError(f"{path}: tensor layout does not match the declared architecture")
    if values.size != sum(p.size for p in params):
        raise DataError(f"{path}: expected {sum(p.size for p in params)} values, found {values.size}")
    offset = 0
    for p in params:
        p.data = values[offset:offset + p.size].reshape(p.shape).astype(np.float64)
        offset += p.size
    return net
