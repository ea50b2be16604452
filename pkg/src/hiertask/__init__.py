"""Hierarchical (make -> model) multi-task classification on a small autodiff engine."""

from .autodiff import Tape, Tensor, backward
from .config import ExperimentConfig, SweepSpec
from .data import (
    DatasetSplit,
    Sample,
    SyntheticSpec,
    Taxonomy,
    as_arrays,
    generate_synthetic,
    load_manifest,
    split,
)
from .encoders import EncoderSpec, build_encoder, encode
from .metrics import MetricsReport, evaluate
from .mtl import ArchitectureMode, ForwardOutput, MtlNetwork, build_network, forward
from .training import LossWeights, OneCycleSchedule, joint_loss, lr_at, predict_logits, train

__version__ = "0.1.0"
