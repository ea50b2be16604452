"""Two-level make/model taxonomy, manifest ingestion, stratified splits, synthetic data."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, GenerationError, TaxonomyError

DEFAULT_RATIOS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class Taxonomy:
    """Coarse classes (makes), fine classes (models) and the fine -> coarse map."""

    makes: tuple[str, ...]
    models: tuple[str, ...]
    parent: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "makes", tuple(self.makes))
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        if not self.makes or not self.models:
            raise TaxonomyError("taxonomy needs at least one make and one model")
        if len(self.parent) != len(self.models):
            raise TaxonomyError(
                f"parent map covers {len(self.parent)} models, taxonomy has {len(self.models)}"
            )
        if len(set(self.makes)) != len(self.makes) or len(set(self.models)) != len(self.models):
            raise TaxonomyError("duplicate make or model names")
        for model, p in zip(self.models, self.parent):
            if not 0 <= p < len(self.makes):
                raise TaxonomyError(f"model {model!r} points at missing make index {p}")
        empty = sorted(set(range(len(self.makes))) - set(self.parent))
        if empty:
            names = ", ".join(self.makes[i] for i in empty)
            raise TaxonomyError(f"makes without any model: {names}")

    @property
    def num_makes(self) -> int:
        return len(self.makes)

    @property
    def num_models(self) -> int:
        return len(self.models)

    @property
    def parent_array(self) -> np.ndarray:
        return np.asarray(self.parent, dtype=np.int64)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Taxonomy":
        """Induce a taxonomy from (make, model) pairs; labels are ordered lexicographically."""
        owner: dict[str, str] = {}
        for make, model in pairs:
            seen = owner.setdefault(model, make)
            if seen != make:
                a, b = sorted((seen, make))
                raise TaxonomyError(f"model {model!r} listed under two makes: {a!r} and {b!r}")
        makes = sorted(set(owner.values()))
        models = sorted(owner)
        index = {m: i for i, m in enumerate(makes)}
        return cls(tuple(makes), tuple(models), tuple(index[owner[m]] for m in models))

    def export_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "make"])
        for model, p in zip(self.models, self.parent):
            writer.writerow([model, self.makes[p]])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.export_csv().encode("utf-8")).hexdigest()


def write_taxonomy(path, taxonomy: Taxonomy) -> None:
    Path(path).write_text(taxonomy.export_csv(), encoding="utf-8")


def read_taxonomy(path) -> Taxonomy:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return Taxonomy.from_pairs((r["make"], r["model"]) for r in rows)


@dataclass
class Sample:
    features: np.ndarray
    model_label: int
    make_label: int
    id: str = ""


def check_samples(taxonomy: Taxonomy, samples: Sequence[Sample]) -> None:
    """Hard check that every sample's make is the parent of its model."""
    for s in samples:
        if not 0 <= s.model_label < taxonomy.num_models:
            raise TaxonomyError(f"sample {s.id!r}: model label {s.model_label} out of range")
        if taxonomy.parent[s.model_label] != s.make_label:
            raise TaxonomyError(
                f"sample {s.id!r}: make {s.make_label} is not the parent of model {s.model_label}"
            )


def as_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not samples:
        raise DataError("no samples")
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    models = np.array([s.model_label for s in samples], dtype=np.int64)
    makes = np.array([s.make_label for s in samples], dtype=np.int64)
    return x, models, makes


# ---------------------------------------------------------------------------
# manifests

_BASE_COLUMNS = ("id", "make", "model")


def _fine_label(row: dict) -> str:
    year = (row.get("year") or "").strip()
    return f"{row['model']}|{year}" if year else row["model"]


def load_manifest(path) -> tuple[Taxonomy, list[Sample]]:
    """Read an ``id,make,model,feature_path`` (or inline ``f0..f{d-1}``) manifest.

    Relative feature paths resolve against the manifest's directory.  An
    optional ``year`` column splits one model into per-year fine classes.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    missing = [c for c in _BASE_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: manifest header lacks {', '.join(missing)}")
    inline = [c for c in header if c.startswith("f") and c[1:].isdigit()]
    inline.sort(key=lambda c: int(c[1:]))
    if "feature_path" not in header and not inline:
        raise DataError(f"{path}: manifest has neither feature_path nor f0.. columns")
    if inline and [int(c[1:]) for c in inline] != list(range(len(inline))):
        raise DataError(f"{path}: inline feature columns are not contiguous from f0")

    taxonomy = Taxonomy.from_pairs((r["make"], _fine_label(r)) for r in rows)
    model_index = {m: i for i, m in enumerate(taxonomy.models)}
    samples = []
    for r in rows:
        if "feature_path" in header and r.get("feature_path"):
            fpath = Path(r["feature_path"])
            if not fpath.is_absolute():
                fpath = path.parent / fpath
            if not fpath.is_file():
                raise FileNotFoundError(f"feature file for sample {r['id']!r} not found: {fpath}")
            feats = np.fromfile(fpath, dtype="<f8")
        else:
            feats = np.array([float(r[c]) for c in inline], dtype=np.float64)
        mi = model_index[_fine_label(r)]
        samples.append(Sample(feats, mi, taxonomy.parent[mi], r["id"]))
    widths = {s.features.size for s in samples}
    if len(widths) > 1:
        raise DataError(f"{path}: samples have differing feature widths {sorted(widths)}")
    check_samples(taxonomy, samples)
    return taxonomy, samples


def write_manifest(path, taxonomy: Taxonomy, samples: Sequence[Sample], inline: bool = True) -> None:
    """Write samples as a manifest; without ``inline`` one ``<id>.f64`` file per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if inline:
            width = samples[0].features.size if samples else 0
            writer.writerow([*_BASE_COLUMNS, *(f"f{i}" for i in range(width))])
        else:
            writer.writerow([*_BASE_COLUMNS, "feature_path"])
            feat_dir = path.parent / (path.stem + "_features")
            feat_dir.mkdir(exist_ok=True)
        for s in samples:
            make, model = taxonomy.makes[s.make_label], taxonomy.models[s.model_label]
            if inline:
                writer.writerow([s.id, make, model, *(repr(float(v)) for v in s.features)])
            else:
                rel = f"{feat_dir.name}/{s.id}.f64"
                np.asarray(s.features, dtype="<f8").tofile(path.parent / rel)
                writer.writerow([s.id, make, model, rel])


# ---------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    seed: int = 0
    flagged: list[int] = field(default_factory=list)

    @property
    def parts(self) -> tuple[list[Sample], list[Sample], list[Sample]]:
        return self.train, self.val, self.test


def stratified_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to earlier parts."""
    targets = [r * n for r in ratios]
    base = [int(math.floor(t + 1e-9)) for t in targets]
    remaining = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(targets[i] - base[i]), i))
    for i in order[:remaining]:
        base[i] += 1
    return base


def split(samples: Sequence[Sample], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> DatasetSplit:
    """Stratified (per model class) train/val/test split, deterministic under ``seed``.

    Classes with fewer samples than there are non-empty parts are recorded
    in ``flagged``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"expected three non-negative split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)!r}")

    by_class: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_class[s.model_label].append(i)
    rng = np.random.default_rng(seed)
    needed = sum(1 for r in ratios if r > 0)
    assignment = [[], [], []]
    flagged = []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < needed:
            flagged.append(label)
        order = [members[j] for j in rng.permutation(len(members))]
        start = 0
        for part, count in enumerate(stratified_counts(len(members), ratios)):
            assignment[part].extend(order[start:start + count])
            start += count
    parts = [[samples[i] for i in sorted(idx)] for idx in assignment]
    return DatasetSplit(*parts, ratios=ratios, seed=seed, flagged=flagged)


# ---------------------------------------------------------------------------
# synthetic hierarchy


@dataclass(frozen=True)
class SyntheticSpec:
    """Nested Gaussian clusters: models orbit their make's centre.

    ``noise_sigma`` is the RMS norm of the noise vector (per-coordinate standard
    deviation ``noise_sigma / sqrt(dim)``), and both separations are measured in
    units of it.
    """

    num_makes: int = 8
    models_per_make: int = 4
    dim: int = 64
    n_per_model: int = 30
    make_separation: float = 6.0
    model_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_makes, self.models_per_make, self.dim, self.n_per_model)
        if any(int(c) != c or c < 1 for c in counts):
            raise ConfigurationError(f"synthetic counts must be positive integers: {self}")
        if self.make_separation < 0 or self.model_separation < 0 or self.noise_sigma <= 0:
            raise ConfigurationError(f"separations must be >= 0 and noise_sigma > 0: {self}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_MAX_ATTEMPTS = 1000


def _draw_separated(rng, count, sample, min_dist, what) -> np.ndarray:
    points: list[np.ndarray] = []
    for i in range(count):
        for _ in range(_MAX_ATTEMPTS):
            candidate = sample()
            if all(np.linalg.norm(candidate - p) >= min_dist for p in points):
                points.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place {what} {i} at distance >= {min_dist:g} after {_MAX_ATTEMPTS} attempts"
            )
    return np.array(points)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Taxonomy, list[Sample]]:
    rng = np.random.default_rng(spec.seed)
    sigma, dim = spec.noise_sigma, spec.dim
    coord = 1.0 / math.sqrt(dim)
    make_radius = spec.make_separation * sigma
    model_radius = spec.model_separation * sigma

    # centres have RMS norm make_radius, so typical spacing is ~1.4 * make_radius
    make_centers = _draw_separated(
        rng, spec.num_makes, lambda: rng.normal(0.0, make_radius * coord, dim),
        make_radius, "make centre",
    )

    def offset():
        u = rng.normal(size=dim)
        return u / np.linalg.norm(u) * model_radius

    model_centers = []
    for c in make_centers:
        offsets = _draw_separated(rng, spec.models_per_make, offset, model_radius, "model centre")
        model_centers.extend(c + offsets)

    kw = len(str(spec.num_makes - 1))
    mw = len(str(spec.num_makes * spec.models_per_make - 1))
    makes = tuple(f"make_{i:0{kw}d}" for i in range(spec.num_makes))
    models = tuple(f"model_{j:0{mw}d}" for j in range(len(model_centers)))
    parent = tuple(j // spec.models_per_make for j in range(len(model_centers)))
    taxonomy = Taxonomy(makes, models, parent)

    n = spec.n_per_model
    sw = len(str(len(models) * n - 1))
    samples = []
    for j, center in enumerate(model_centers):
        noise = rng.normal(0.0, sigma * coord, size=(n, dim))
        for row in center + noise:
            samples.append(Sample(row, j, parent[j], f"s{len(samples):0{sw}d}"))
    return taxonomy, samples
