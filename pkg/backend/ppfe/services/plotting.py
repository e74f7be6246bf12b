"""
Standalone SVG 1.1 line charts with error bars.

Data coordinates map to pixels through one affine transform per axis; a
degenerate range is widened by 0.5 on each side.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape, quoteattr

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


@dataclass
class Series:
    label: str
    xs: List[float]
    means: List[float]
    stds: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.stds:
            self.stds = [0.0] * len(self.means)
        if not (len(self.xs) == len(self.means) == len(self.stds)):
            raise ValueError(f"series {self.label!r} has mismatched lengths")
        if not self.xs:
            raise ValueError(f"series {self.label!r} is empty")


@dataclass
class AxesMeta:
    title: str = ""
    x_label: str = ""
    y_label: str = ""
    width: int = 640
    height: int = 420
    margin_left: int = 70
    margin_right: int = 150
    margin_top: int = 40
    margin_bottom: int = 55
    x_ticks: Optional[List[Tuple[float, str]]] = None

    @property
    def plot_box(self) -> Tuple[float, float, float, float]:
        """(left, top, right, bottom) in pixels"""
        return (
            float(self.margin_left),
            float(self.margin_top),
            float(self.width - self.margin_right),
            float(self.height - self.margin_bottom),
        )


def affine(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    """Map [lo, hi] onto [out_lo, out_hi]"""
    return out_lo + (value - lo) * (out_hi - out_lo) / (hi - lo)


def data_range(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = float(min(values)), float(max(values))
    if hi - lo <= 0:
        return lo - 0.5, hi + 0.5
    return lo, hi


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


class SvgBuilder:
    def __init__(self, width: int, height: int):
        self.parts: List[str] = [
            '<?xml version="1.0" standalone="no"?>\n',
            '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" "http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">\n',
            f'<svg version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" '
            'xmlns="http://www.w3.org/2000/svg">\n',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n',
        ]

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0, css_class: Optional[str] = None) -> None:
        cls = f' class="{css_class}"' if css_class else ""
        self.parts.append(
            f'<line{cls} x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{width}"/>\n'
        )

    def path(self, points: Sequence[Tuple[float, float]], stroke: str, label: str) -> None:
        d = " ".join(("M" if i == 0 else "L") + f"{_fmt(x)},{_fmt(y)}" for i, (x, y) in enumerate(points))
        self.parts.append(
            f'<path class="series" data-label={quoteattr(label)} d="{d}" fill="none" stroke="{stroke}" stroke-width="2"/>\n'
        )

    def circle(self, x, y, fill: str, r: float = 3.0) -> None:
        self.parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{r}" fill="{fill}"/>\n')

    def text(self, x, y, content: str, anchor: str = "middle", size: int = 12, rotate: Optional[float] = None) -> None:
        transform = f' transform="rotate({rotate} {_fmt(x)} {_fmt(y)})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{transform}>{escape(content)}</text>\n'
        )

    def getvalue(self) -> str:
        return "".join(self.parts) + "</svg>\n"


def render_svg(series: Sequence[Series], meta: AxesMeta) -> str:
    if not series:
        raise ValueError("at least one series is required")
    left, top, right, bottom = meta.plot_box
    xs = [x for s in series for x in s.xs]
    ys = [m + sign * sd for s in series for m, sd in zip(s.means, s.stds) for sign in (-1.0, 1.0)]
    if not all(math.isfinite(v) for v in xs + ys):
        raise ValueError("series contain non-finite values")
    x_lo, x_hi = data_range(xs)
    y_lo, y_hi = data_range(ys)

    def px(x: float) -> float:
        return affine(x, x_lo, x_hi, left, right)

    def py(y: float) -> float:
        return affine(y, y_lo, y_hi, bottom, top)

    svg = SvgBuilder(meta.width, meta.height)
    svg.line(left, bottom, right, bottom, css_class="axis")
    svg.line(left, bottom, left, top, css_class="axis")

    x_ticks = meta.x_ticks or [(v, _tick_label(v)) for v in np.linspace(x_lo, x_hi, 5)]
    for value, label in x_ticks:
        svg.line(px(value), bottom, px(value), bottom + 5, css_class="tick")
        svg.text(px(value), bottom + 18, label)
    for value in np.linspace(y_lo, y_hi, 5):
        svg.line(left - 5, py(value), left, py(value), css_class="tick")
        svg.text(left - 8, py(value) + 4, _tick_label(value), anchor="end")

    for index, s in enumerate(series):
        color = PALETTE[index % len(PALETTE)]
        points = [(px(x), py(m)) for x, m in zip(s.xs, s.means)]
        svg.path(points, color, s.label)
        for (x, m, sd), (cx, cy) in zip(zip(s.xs, s.means, s.stds), points):
            svg.line(cx, py(m - sd), cx, py(m + sd), stroke=color, css_class="errorbar")
            svg.circle(cx, cy, color)
        legend_y = top + 18 * index + 6
        svg.line(right + 12, legend_y, right + 32, legend_y, stroke=color, width=2.0, css_class="legend")
        svg.text(right + 38, legend_y + 4, s.label, anchor="start")

    if meta.title:
        svg.text((left + right) / 2, top - 15, meta.title, size=14)
    if meta.x_label:
        svg.text((left + right) / 2, meta.height - 12, meta.x_label)
    if meta.y_label:
        svg.text(18, (top + bottom) / 2, meta.y_label, rotate=-90)
    return svg.getvalue()


def plot_svg(series: Sequence[Series], meta: AxesMeta, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(series, meta), encoding="utf-8")
    logger.info(f"Wrote chart {path}")
    return path


def series_from_metrics(frame: pd.DataFrame, value_column: str = "weighted_mean") -> Tuple[List[Series], Optional[List[Tuple[float, str]]]]:
    """
    One series per method: mean and population std over seeds at each sweep
    value. Non-numeric sweep values are plotted at positions 0..n-1.
    """
    if frame.empty:
        raise ValueError("metrics table is empty")
    frame = frame.copy()
    frame["sweep_value"] = frame["sweep_value"].fillna("").astype(str)
    values = list(dict.fromkeys(frame["sweep_value"]))
    try:
        positions: Dict[str, float] = {v: float(v) for v in values}
        ticks = None
    except ValueError:
        positions = {v: float(i) for i, v in enumerate(values)}
        ticks = [(float(i), v) for i, v in enumerate(values)]
    series = []
    for method, group in frame.groupby("method", sort=False):
        grouped = group.groupby("sweep_value", sort=False)[value_column]
        means, stds = grouped.mean(), grouped.std(ddof=0)
        order = sorted(means.index, key=lambda v: positions[v])
        series.append(Series(
            label=str(method),
            xs=[positions[v] for v in order],
            means=[float(means[v]) for v in order],
            stds=[float(stds[v]) if math.isfinite(stds[v]) else 0.0 for v in order],
        ))
    return series, ticks
