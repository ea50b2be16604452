"""Weighted joint loss, Adam, the one-cycle schedule and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ExperimentConfig
from .data import DatasetSplit, as_arrays, check_samples
from .errors import ContractError, DataError, DivergenceError, NumericError
from .metrics import derived_make_accuracy, make_accuracy, model_accuracy
from .mtl import (
    STREAM_DROPOUT,
    STREAM_SHUFFLE,
    ForwardOutput,
    MtlNetwork,
    forward,
    stream,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    model: float = 1.0
    make: float = 0.0

    def __post_init__(self):
        if self.model < 0 or self.make < 0:
            raise ContractError(f"loss weights must be non-negative: {self}")
        if self.model == 0 and self.make == 0:
            raise ContractError("loss weights cannot both be zero")


def joint_loss(out: ForwardOutput, model_labels, make_labels, w: LossWeights) -> Tensor:
    """``w.model * CE(model) + w.make * CE(make)``; the make term is skipped without a make head."""
    if model_labels is None:
        raise ContractError("model labels are required")
    model_term = ad.mul(ad.cross_entropy(out.model_logits, model_labels), w.model)
    if out.make_logits is None:
        return model_term
    if make_labels is None:
        raise ContractError("multi-task output needs make labels")
    make_term = ad.mul(ad.cross_entropy(out.make_logits, make_labels), w.make)
    return ad.add(model_term, make_term)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warm-up from ``max_lr/div_factor`` to ``max_lr``, then cosine decay
    to ``max_lr/(div_factor*final_div_factor)``."""

    max_lr: float
    total_steps: int
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_up: float = 0.3

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("one-cycle schedule needs at least one step")
        if not 0 < self.pct_up < 1:
            raise ContractError(f"pct_up must lie in (0, 1), got {self.pct_up}")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / (self.div_factor * self.final_div_factor)

    @property
    def peak_step(self) -> int:
        return min(self.total_steps, math.ceil(self.pct_up * self.total_steps))


def _cosine(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def lr_at(schedule: OneCycleSchedule, step: int) -> float:
    t, peak = schedule.total_steps, schedule.peak_step
    if not 0 <= step <= t:
        raise ContractError(f"step {step} outside [0, {t}]")
    if step == 0:
        return schedule.initial_lr
    if step == peak:
        return schedule.max_lr
    if step == t:
        return schedule.final_lr
    if step < peak:
        return _cosine(schedule.initial_lr, schedule.max_lr, step / peak)
    return _cosine(schedule.max_lr, schedule.final_lr, (step - peak) / (t - peak))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ContractError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.first)} moment buffers"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.first[i].shape != p.shape:
            raise ContractError(f"gradient {g.shape} / moment {state.first[i].shape} vs parameter {p.shape}")
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g
        m_hat = state.first[i] / c1
        v_hat = state.second[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_model_acc: float
    val_make_acc: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainedRun:
    network: MtlNetwork
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_state: list[np.ndarray] = field(default_factory=list)


def predict_logits(net: MtlNetwork, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode logits for a whole array, computed off-tape in batches."""
    model_parts, make_parts = [], []
    for start in range(0, x.shape[0], batch_size):
        out = forward(net, Tensor(x[start:start + batch_size]), mode="eval")
        model_parts.append(out.model_logits.data)
        if out.make_logits is not None:
            make_parts.append(out.make_logits.data)
    return np.concatenate(model_parts), (np.concatenate(make_parts) if make_parts else None)


def _snapshot(net: MtlNetwork) -> list[np.ndarray]:
    return [p.data.copy() for p in net.parameters()]


def _restore(net: MtlNetwork, state: list[np.ndarray]) -> None:
    for p, v in zip(net.parameters(), state):
        p.data = v.copy()


def train(net: MtlNetwork, data: DatasetSplit, cfg: ExperimentConfig,
          on_epoch_end: Callable[[EpochRecord, MtlNetwork], None] | None = None) -> TrainedRun:
    """Train ``net`` in place; returns the run with the best-validation parameters restored.

    Shuffle order, dropout masks and (via :func:`build_network`) initialisation
    are all derived from ``cfg.seed``, so two calls with equal inputs agree bitwise.
    """
    if not data.train:
        raise DataError("training split is empty")
    if not data.val:
        raise DataError("validation split is empty")
    check_samples(net.taxonomy, [*data.train, *data.val, *data.test])

    run = TrainedRun(net, best_state=_snapshot(net))
    if cfg.epochs == 0:
        return run

    x_tr, ym_tr, yk_tr = as_arrays(data.train)
    x_va, ym_va, yk_va = as_arrays(data.val)
    n = x_tr.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = OneCycleSchedule(cfg.max_lr, cfg.epochs * steps_per_epoch, cfg.div_factor,
                                cfg.final_div_factor, cfg.pct_up)
    weights = LossWeights(cfg.lambda1, cfg.lambda2)
    params = net.parameters()
    adam = AdamState.for_params(params)
    drop_rng = stream(cfg.seed, STREAM_DROPOUT)
    shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE)
    best_acc = -1.0
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        lr = schedule.initial_lr
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            net.zero_grad()
            try:
                with Tape() as tape:
                    out = forward(net, Tensor(x_tr[idx]), mode="train", rng=drop_rng)
                    loss = joint_loss(out, ym_tr[idx], yk_tr[idx], weights)
            except NumericError as exc:
                raise DivergenceError(epoch) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch)
            tape.backward(loss)
            lr = lr_at(schedule, step)
            adam_step(adam, params, [p.grad for p in params], lr)
            loss_sum += value * len(idx)
            step += 1

        model_logits, make_logits = predict_logits(net, x_va)
        val_model = model_accuracy(model_logits, ym_va)
        if make_logits is not None:
            val_make = make_accuracy(make_logits, yk_va)
        else:
            val_make = derived_make_accuracy(model_logits, yk_va, net.taxonomy)
        record = EpochRecord(epoch, loss_sum / n, val_model, val_make, lr)
        run.history.append(record)
        logger.info(record.to_json())
        if val_model > best_acc:
            best_acc = val_model
            run.best_epoch = epoch
            run.best_state = _snapshot(net)
        if on_epoch_end is not None:
            on_epoch_end(record, net)

    _restore(net, run.best_state)
    return run
