"""Experiment configuration: one sweep point, and the sweep grid that expands into them."""

from __future__ import annotations

import itertools
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import DEFAULT_RATIOS, SyntheticSpec
from .encoders import FAMILIES
from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MODES = ("single_task", "parallel", "cascaded")
LR_READINGS = ("max", "initial")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSpec | str = field(default_factory=SyntheticSpec)
    encoder: str = "mlp"
    mode: str = "parallel"
    lambda1: float = 0.9
    lambda2: float = 0.1
    dropout: float = 0.0
    epochs: int = 25
    batch_size: int = 32
    base_lr: float = 3e-4
    lr_reading: str = "max"
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_up: float = 0.3
    seed: int = 0
    split_seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    feature_dim: int = 64
    hidden: tuple[int, ...] | None = None
    input_shape: tuple[int, ...] | None = None
    patch_size: int = 4
    dropout_make_logits: bool = False
    dropout_model_head_only: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.encoder not in FAMILIES:
            raise ConfigurationError(f"encoder must be one of {FAMILIES}, got {self.encoder!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ConfigurationError(
                f"loss weights must be non-negative and not both zero: ({self.lambda1}, {self.lambda2})"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_reading not in LR_READINGS:
            raise ConfigurationError(f"lr_reading must be one of {LR_READINGS}")
        if self.base_lr <= 0 or self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ConfigurationError("base_lr must be > 0, div factors > 1")
        if not 0 < self.pct_up < 1:
            raise ConfigurationError(f"pct_up must lie in (0, 1), got {self.pct_up}")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.hidden is not None:
            object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(h) for h in self.input_shape))

    @property
    def max_lr(self) -> float:
        return self.base_lr if self.lr_reading == "max" else self.base_lr * self.div_factor

    @property
    def run_id(self) -> str:
        return (
            f"{self.encoder}-{self.mode}-l{self.lambda1:g}_{self.lambda2:g}"
            f"-p{self.dropout:g}-s{self.seed}"
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.dataset, SyntheticSpec):
            d["dataset"] = {"synthetic": self.dataset.to_dict()}
        else:
            d["dataset"] = {"manifest": str(self.dataset)}
        return d


def _dataset_from(table, base_dir: Path | None):
    if isinstance(table, (SyntheticSpec, str)):
        return table
    if "manifest" in table:
        path = Path(table["manifest"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return str(path)
    synth = table.get("synthetic", table)
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(synth) - known
    if unknown:
        raise ConfigurationError(f"unknown synthetic keys: {sorted(unknown)}")
    return SyntheticSpec(**synth)


_SCALARS = {f.name for f in fields(ExperimentConfig)} - {"dataset"}


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    d = dict(d)
    unknown = set(d) - _SCALARS - {"dataset", "weights"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "weights" in d:
        d["lambda1"], d["lambda2"] = d.pop("weights")
    dataset = _dataset_from(d.pop("dataset", {}), base_dir)
    return ExperimentConfig(dataset=dataset, **d)


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian grid over modes x weight pairs x dropouts x encoders x seeds."""

    base: ExperimentConfig
    modes: tuple[str, ...] = MODES
    weights: tuple[tuple[float, float], ...] = ((0.9, 0.1),)
    dropouts: tuple[float, ...] = (0.0,)
    encoders: tuple[str, ...] = ("mlp",)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        axes = (self.modes, self.weights, self.dropouts, self.encoders, self.seeds)
        if any(len(a) == 0 for a in axes):
            raise ConfigurationError("every sweep axis needs at least one value")

    def points(self) -> list[ExperimentConfig]:
        out = []
        for enc, mode, (l1, l2), p, seed in itertools.product(
            self.encoders, self.modes, self.weights, self.dropouts, self.seeds
        ):
            out.append(replace(self.base, encoder=enc, mode=mode, lambda1=float(l1),
                               lambda2=float(l2), dropout=float(p), seed=int(seed)))
        return out

    def __len__(self) -> int:
        return (len(self.modes) * len(self.weights) * len(self.dropouts)
                * len(self.encoders) * len(self.seeds))


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    table = load_toml(path)
    table.pop("sweep", None)
    return config_from_dict(table, path.parent)


def load_sweep(path) -> SweepSpec:
    """Read a TOML sweep file: top-level keys form the base config, ``[sweep]`` the axes."""
    path = Path(path)
    table = load_toml(path)
    axes = table.pop("sweep", {})
    base = config_from_dict(table, path.parent)
    kwargs = {}
    for key in ("modes", "dropouts", "encoders", "seeds"):
        if key in axes:
            kwargs[key] = tuple(axes.pop(key))
    if "weights" in axes:
        kwargs["weights"] = tuple(tuple(float(v) for v in pair) for pair in axes.pop("weights"))
    if axes:
        raise ConfigurationError(f"unknown sweep axes: {sorted(axes)}")
    return SweepSpec(base, **kwargs)
