"""Evaluation records, their CSV forms and forgetting-matrix views."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable

HEADER = ("seed", "method", "phase", "step", "eval_dataset", "acc_mean", "acc_ci", "loss", "wall_ms")


@dataclass(frozen=True)
class MetricRecord:
    seed: int
    method: str
    phase: int
    step: int
    eval_dataset: int
    acc_mean: float
    acc_ci: float
    loss: float
    wall_ms: float

    def key(self):
        return (self.seed, self.phase, self.step, self.eval_dataset)


_CASTS = [f.type for f in fields(MetricRecord)]
_PARSE = {"int": int, "str": str, "float": float}


def _fmt(v) -> str:
    # repr round-trips doubles exactly
    return repr(v) if isinstance(v, float) else str(v)


def metrics_text(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in sorted(records, key=MetricRecord.key):
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def emit_metrics(records: Iterable[MetricRecord], path) -> Path:
    path = Path(path)
    path.write_text(metrics_text(records))
    return path


def parse_metrics(text: str) -> list[MetricRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HEADER:
        raise ValueError("missing or wrong metrics header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(HEADER):
            raise ValueError(f"line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
        out.append(MetricRecord(*(_PARSE[t](v) for t, v in zip(_CASTS, row))))
    return out


def read_metrics(path) -> list[MetricRecord]:
    return parse_metrics(Path(path).read_text())


# ----------------------------------------------------------- forgetting view

FORGETTING_HEADER = ("seed", "phase", "eval_dataset", "step", "acc_mean", "acc_ci")


def forgetting_text(records: Iterable[MetricRecord]) -> str:
    """Every (phase, eval dataset, checkpoint) cell in long form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FORGETTING_HEADER)
    for r in sorted(records, key=lambda r: (r.seed, r.phase, r.eval_dataset, r.step)):
        w.writerow([r.seed, r.phase, r.eval_dataset, r.step, repr(r.acc_mean), repr(r.acc_ci)])
    return buf.getvalue()


def end_of_phase(records: Iterable[MetricRecord]) -> dict[tuple[int, int, int], MetricRecord]:
    """``(seed, phase, eval_dataset) -> last record of that phase``."""
    out: dict = {}
    for r in sorted(records, key=MetricRecord.key):
        out[(r.seed, r.phase, r.eval_dataset)] = r
    return out


def matrix(records: Iterable[MetricRecord], seed: int) -> list[list[float]]:
    """End-of-phase accuracy grid, rows = phase, columns = eval dataset."""
    last = {k: v for k, v in end_of_phase(records).items() if k[0] == seed}
    if not last:
        return []
    phases = sorted({k[1] for k in last})
    dsets = sorted({k[2] for k in last})
    return [[last[(seed, p, d)].acc_mean if (seed, p, d) in last else float("nan") for d in dsets] for p in phases]


# ----------------------------------------------------------------- svg plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lines(
    series: dict[str, list[tuple[float, float]]],
    title: str,
    x_label: str = "iteration",
    y_label: str = "accuracy",
    vlines: Iterable[float] = (),
    y_range: tuple[float, float] = (0.0, 1.0),
    size: tuple[int, int] = (560, 340),
) -> str:
    """Minimal line chart: one polyline per series, axes, ticks, legend."""
    width, height = size
    left, right, top, bottom = 56, 120, 30, 44
    pw, ph = width - left - right, height - top - bottom
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = y_range

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (min(max(y, y0), y1) - y0) / (y1 - y0)) * ph

    el = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        y = y0 + (y1 - y0) * i / 5
        el.append(f'<line x1="{left - 4}" y1="{py(y):.1f}" x2="{left}" y2="{py(y):.1f}" stroke="black"/>')
        el.append(f'<text x="{left - 7}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.1f}</text>')
    for i in range(5):
        x = x0 + (x1 - x0) * i / 4
        el.append(f'<text x="{px(x):.1f}" y="{top + ph + 16}" text-anchor="middle">{x:g}</text>')
    for v in vlines:
        el.append(
            f'<line x1="{px(v):.1f}" y1="{top}" x2="{px(v):.1f}" y2="{top + ph}" stroke="#999" stroke-dasharray="4,3"/>'
        )
    el.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(x_label)}</text>')
    el.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(y_label)}</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        if pts:
            el.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * i + 8
        el.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 26}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        el.append(f'<text x="{left + pw + 30}" y="{ly + 4}">{_esc(name)}</text>')
    el.append("</svg>")
    return "\n".join(el) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
