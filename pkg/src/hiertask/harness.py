"""Sweep execution, results persistence, SVG bar charts and head accounting reports."""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from xml.sax.saxutils import quoteattr

from .config import MODES, ExperimentConfig, SweepSpec
from .data import SyntheticSpec, Taxonomy, as_arrays, generate_synthetic, load_manifest, split
from .encoders import EncoderSpec
from .errors import ConfigurationError, DataError, SchemaError
from .metrics import evaluate
from .mtl import (
    build_network,
    head_flop_deltas,
    head_parameter_deltas,
    network_flops,
    save_checkpoint,
)
from .training import predict_logits, train

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "run_id", "encoder", "mode", "lambda1", "lambda2", "dropout", "seed",
    "model_acc", "make_acc_direct", "make_acc_derived", "top3", "top5", "consistency",
    "params", "flops", "epochs", "wall_ms",
)


@functools.lru_cache(maxsize=8)
def _synthetic(spec: SyntheticSpec):
    return generate_synthetic(spec)


def load_dataset(source) -> tuple[Taxonomy, list]:
    if isinstance(source, SyntheticSpec):
        return _synthetic(source)
    return load_manifest(source)


def encoder_spec_for(cfg: ExperimentConfig, feature_width: int) -> EncoderSpec:
    shape = cfg.input_shape
    if shape is None:
        if cfg.encoder == "mlp":
            shape = (feature_width,)
        else:
            side = math.isqrt(feature_width // 3)
            if 3 * side * side != feature_width:
                raise ConfigurationError(
                    f"{cfg.encoder} needs input_shape; {feature_width} features are not 3 x s x s"
                )
            shape = (3, side, side)
    if math.prod(shape) != feature_width:
        raise ConfigurationError(f"input_shape {shape} does not hold {feature_width} features")
    return EncoderSpec(cfg.encoder, shape, cfg.feature_dim, cfg.hidden, cfg.patch_size)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_point(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train and test one configuration; returns its results row (string values)."""
    started = time.perf_counter()
    taxonomy, samples = load_dataset(cfg.dataset)
    parts = split(samples, cfg.ratios, cfg.split_seed)
    if not parts.test:
        raise DataError("test split is empty")
    spec = encoder_spec_for(cfg, samples[0].features.size)
    net = build_network(spec, taxonomy, cfg.mode, cfg.dropout, cfg.seed,
                        dropout_make_logits=cfg.dropout_make_logits,
                        dropout_model_head_only=cfg.dropout_model_head_only)
    run = train(net, parts, cfg)

    x, y_model, y_make = as_arrays(parts.test)
    model_logits, make_logits = predict_logits(net, x)
    report = evaluate(model_logits, y_model, y_make, taxonomy, make_logits)

    if out_dir is not None:
        runs = Path(out_dir) / "runs"
        runs.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, runs / f"{cfg.run_id}.htmt")
        (runs / f"{cfg.run_id}.jsonl").write_text(
            "".join(r.to_json() + "\n" for r in run.history), encoding="utf-8"
        )

    row = {
        "run_id": cfg.run_id,
        "encoder": cfg.encoder,
        "mode": cfg.mode,
        "lambda1": cfg.lambda1,
        "lambda2": cfg.lambda2,
        "dropout": cfg.dropout,
        "seed": cfg.seed,
        "model_acc": report.model_acc,
        "make_acc_direct": report.make_acc_direct,
        "make_acc_derived": report.make_acc_derived,
        "top3": report.top_k_acc[3],
        "top5": report.top_k_acc[5],
        "consistency": report.consistency_rate,
        "params": net.parameter_count(),
        "flops": network_flops(net),
        "epochs": cfg.epochs,
        "wall_ms": int(round((time.perf_counter() - started) * 1000)),
    }
    return {k: _fmt(v) for k, v in row.items()}


def _guarded(cfg: ExperimentConfig, out_dir):
    try:
        return cfg.run_id, run_point(cfg, out_dir), None
    except Exception as exc:  # recorded, the sweep carries on
        logger.exception("run %s failed", cfg.run_id)
        return cfg.run_id, None, f"{type(exc).__name__}: {exc}"


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in sorted(rows, key=lambda r: r["run_id"]):
        writer.writerow(row)
    return buf.getvalue()


@dataclass
class SweepResult:
    rows: list[dict]
    failures: list[tuple[str, str]] = field(default_factory=list)
    results_csv: Path | None = None
    summary_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(spec: SweepSpec | list[ExperimentConfig], out_dir, jobs: int = 1) -> SweepResult:
    """Run every point, then write ``results.csv``, ``summary.md`` and, on errors, ``failures.csv``.

    Points are independent; with ``jobs > 1`` they run in worker processes and
    results are only assembled after all have finished.
    """
    points = spec.points() if isinstance(spec, SweepSpec) else list(spec)
    if not points:
        raise ConfigurationError("sweep has no points")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_guarded, points, [out_dir] * len(points)))
    else:
        outcomes = [_guarded(p, out_dir) for p in points]

    rows = [row for _, row, err in outcomes if err is None]
    failures = sorted((rid, err) for rid, _, err in outcomes if err is not None)
    result = SweepResult(rows, failures)
    result.results_csv = out_dir / "results.csv"
    result.results_csv.write_text(rows_to_csv(rows), encoding="utf-8")
    result.summary_path = out_dir / "summary.md"
    result.summary_path.write_text(summary_table(rows), encoding="utf-8")
    fail_path = out_dir / "failures.csv"
    if failures:
        with open(fail_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["run_id", "error"])
            writer.writerows(failures)
    elif fail_path.exists():
        fail_path.unlink()
    return result


def _mode_rank(mode: str) -> int:
    return MODES.index(mode) if mode in MODES else len(MODES)


def _mean(values) -> str:
    vals = [float(v) for v in values if v not in ("", None)]
    return f"{fmean(vals):.3f}" if vals else "-"


def summary_table(rows) -> str:
    """Markdown table: one line per (encoder, mode, weights, dropout), averaged over seeds."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["encoder"], r["lambda1"], r["lambda2"], r["dropout"], r["mode"])].append(r)
    lines = [
        "| Encoder | MTL | Loss weights | Dropout | Model acc. | Make acc. (direct) | Make acc. (derived) | Top-3 | Top-5 | Seeds |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for key in sorted(groups, key=lambda k: (k[0], float(k[1]), float(k[2]), float(k[3]), _mode_rank(k[4]))):
        enc, l1, l2, p, mode = key
        g = groups[key]
        lines.append(
            f"| {enc} | {mode} | [{l1}, {l2}] | {p} | {_mean(r['model_acc'] for r in g)} "
            f"| {_mean(r['make_acc_direct'] for r in g)} | {_mean(r['make_acc_derived'] for r in g)} "
            f"| {_mean(r['top3'] for r in g)} | {_mean(r['top5'] for r in g)} | {len(g)} |"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(missing)
        return list(reader)


_MODE_COLOURS = {"single_task": "#4c72b0", "parallel": "#dd8452", "cascaded": "#55a868"}
_MODE_LABELS = {"single_task": "ST", "parallel": "Parallel", "cascaded": "Cascaded"}

PLOT_HEIGHT = 300.0
_TOP, _LEFT, _BAR, _GAP = 40.0, 60.0, 24.0, 28.0


def render_bar_chart(groups: dict[tuple, dict[str, float]], title: str) -> str:
    """Grouped bars on a 0..1 axis; bar height is ``value * PLOT_HEIGHT``."""
    n_bars = sum(len(bars) for bars in groups.values())
    width = _LEFT + max(1, len(groups)) * _GAP + n_bars * _BAR + 40.0
    height = _TOP + PLOT_HEIGHT + 90.0
    base = _TOP + PLOT_HEIGHT
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<text x="{_LEFT:.0f}" y="20" font-family="sans-serif" font-size="13">{_esc(title)}</text>',
        f'<g class="axes" stroke="#000" stroke-width="1">',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{base}"/>',
        f'<line x1="{_LEFT}" y1="{base}" x2="{width - 20:.1f}" y2="{base}"/>',
        "</g>",
    ]
    for tick in range(0, 11, 2):
        y = base - tick / 10 * PLOT_HEIGHT
        out.append(
            f'<text x="{_LEFT - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="10">{tick / 10:.1f}</text>'
        )
    x = _LEFT + _GAP / 2
    for key, bars in groups.items():
        encoder, l1, l2 = key
        group_start = x
        for mode in sorted(bars, key=_mode_rank):
            value = bars[mode]
            h = value * PLOT_HEIGHT
            out.append(
                f'<rect class="bar" x="{x:.4f}" y="{base - h:.6f}" width="{_BAR:.4f}" height="{h:.6f}" '
                f'fill="{_MODE_COLOURS.get(mode, "#888")}" data-encoder={quoteattr(encoder)} '
                f'data-weights="{l1},{l2}" data-mode={quoteattr(mode)} data-value="{value!r}"/>'
            )
            x += _BAR
        centre = (group_start + x) / 2
        out.append(
            f'<text x="{centre:.1f}" y="{base + 16:.1f}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="10">{_esc(encoder)} [{l1}, {l2}]</text>'
        )
        x += _GAP
    legend_y = base + 40
    for i, mode in enumerate(MODES):
        lx = _LEFT + i * 110
        out.append(f'<rect x="{lx}" y="{legend_y}" width="12" height="12" fill="{_MODE_COLOURS[mode]}"/>')
        out.append(
            f'<text x="{lx + 16}" y="{legend_y + 10}" font-family="sans-serif" font-size="11">'
            f'{_MODE_LABELS[mode]}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plots(results_csv, out_dir, metric: str = "model_acc") -> list[Path]:
    """One SVG per dropout value; groups are (encoder, weights), bars are ST / parallel / cascaded.

    Bars show the seed-mean of ``metric``.
    """
    rows = read_results(results_csv)
    if metric not in CSV_COLUMNS:
        raise SchemaError([metric])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        path = out_dir / f"plot_{metric}.svg"
        path.write_text(render_bar_chart({}, f"{metric}: no results"), encoding="utf-8")
        return [path]

    by_dropout = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for r in rows:
        if r[metric] == "":
            continue
        key = (r["encoder"], r["lambda1"], r["lambda2"])
        by_dropout[r["dropout"]][key][r["mode"]].append(float(r[metric]))
    paths = []
    for p in sorted(by_dropout, key=float):
        groups = {
            key: {mode: fmean(vals) for mode, vals in modes.items()}
            for key, modes in sorted(
                by_dropout[p].items(), key=lambda kv: (kv[0][0], float(kv[0][1]), float(kv[0][2]))
            )
        }
        path = out_dir / f"plot_{metric}_dropout{p}.svg"
        path.write_text(render_bar_chart(groups, f"{metric}, dropout {p}"), encoding="utf-8")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# accounting


@dataclass
class AccountingReport:
    d: int
    k: int
    m: int
    lines: list[tuple[str, int, int | None]]

    @property
    def ok(self) -> bool:
        return all(exp is None or exp == val for _, val, exp in self.lines)

    def value(self, name: str) -> int:
        return next(val for n, val, _ in self.lines if n == name)

    def render(self) -> str:
        out = [f"head accounting for d={self.d}, K={self.k}, M={self.m}",
               f"{'quantity':<32}{'value':>16}{'expected':>16}  status"]
        for name, val, exp in self.lines:
            status = "" if exp is None else ("PASS" if exp == val else "FAIL")
            exp_s = "" if exp is None else f"{exp:,}"
            out.append(f"{name:<32}{val:>16,}{exp_s:>16}  {status}".rstrip())
        return "\n".join(out) + "\n"


def report_accounting(d: int, k: int, m: int, expect_parallel: int | None = None,
                      expect_cascaded: int | None = None, expect_parallel_flops: int | None = None,
                      expect_cascaded_flops: int | None = None) -> AccountingReport:
    if min(d, k, m) < 1:
        raise ConfigurationError(f"d, K and M must be positive integers, got {d}, {k}, {m}")
    par_p, cas_p = head_parameter_deltas(d, k, m)
    par_f, cas_f = head_flop_deltas(d, k, m)
    lines = [
        ("model head params", m * (d + 1), None),
        ("parallel params delta", par_p, expect_parallel),
        ("cascaded extra params delta", cas_p, expect_cascaded),
        ("model head FLOPs", d * m, None),
        ("parallel FLOPs delta", par_f, expect_parallel_flops),
        ("cascaded extra FLOPs delta", cas_f, expect_cascaded_flops),
    ]
    return AccountingReport(d, k, m, lines)
