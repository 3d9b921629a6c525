"""Deterministic SVG line charts, no plotting dependencies.

The output is a plain string assembled from fixed-precision coordinates, so
the same series always produce byte-identical files. One <polyline> per
series; axes, ticks, and legend use other primitives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

from .errors import EmptySeriesError, ValidationError

# color-blind-friendly fixed palette, cycled per series
PALETTE = (
    "#4477aa", "#ee6677", "#228833", "#ccbb44",
    "#66ccee", "#aa3377", "#bbbbbb", "#222222",
)

_WIDTH = 720
_HEIGHT = 420
_MARGIN_LEFT = 64
_MARGIN_RIGHT = 168
_MARGIN_TOP = 42
_MARGIN_BOTTOM = 52


@dataclass
class Series:
    label: str
    xs: List[float]
    ys: List[float]


@dataclass
class AxesSpec:
    title: str = ""
    x_label: str = ""
    y_label: str = ""
    log_x: bool = False


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def emit_svg_linechart(series: Sequence[Series], axes: AxesSpec) -> str:
    """Render one or more line series to an SVG document string.

    Every series needs at least two finite points (plot a single run over
    at least two epochs, or drop it before calling). With log_x all x
    values must be positive.
    """
    if not series:
        raise EmptySeriesError("no series to plot")
    for s in series:
        if len(s.xs) != len(s.ys):
            raise ValidationError(f"series {s.label!r} has mismatched x/y lengths")
        if len(s.xs) < 2:
            raise EmptySeriesError(f"series {s.label!r} has fewer than two points")
        if not all(math.isfinite(v) for v in s.xs) or not all(math.isfinite(v) for v in s.ys):
            raise ValidationError(f"series {s.label!r} contains non-finite values")
        if axes.log_x and any(v <= 0 for v in s.xs):
            raise ValidationError(f"series {s.label!r} has non-positive x on a log axis")

    def tx(v: float) -> float:
        return math.log10(v) if axes.log_x else v

    all_x = [tx(v) for s in series for v in s.xs]
    all_y = [v for s in series for v in s.ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    # five percent padding on the value axis so lines stay off the frame
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    plot_w = _WIDTH - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = _HEIGHT - _MARGIN_TOP - _MARGIN_BOTTOM

    def px(v: float) -> float:
        return _MARGIN_LEFT + (tx(v) - x_lo) / (x_hi - x_lo) * plot_w

    def py(v: float) -> float:
        return _MARGIN_TOP + (y_hi - v) / (y_hi - y_lo) * plot_h

    out: List[str] = []
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">'
    )
    out.append(f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="#ffffff"/>')
    if axes.title:
        out.append(
            f'<text x="{_WIDTH // 2}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{_escape(axes.title)}</text>'
        )

    # frame
    x0, y0 = _MARGIN_LEFT, _MARGIN_TOP
    x1, y1 = _MARGIN_LEFT + plot_w, _MARGIN_TOP + plot_h
    out.append(
        f'<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333333" stroke-width="1"/>'
    )

    # ticks: five per axis, equally spaced in plot coordinates
    n_ticks = 5
    for k in range(n_ticks):
        frac = k / (n_ticks - 1)
        gx = x_lo + frac * (x_hi - x_lo)
        x_pix = _MARGIN_LEFT + frac * plot_w
        value = 10.0 ** gx if axes.log_x else gx
        out.append(
            f'<line x1="{_fmt(x_pix)}" y1="{y1}" x2="{_fmt(x_pix)}" y2="{y1 + 5}" '
            f'stroke="#333333" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_fmt(x_pix)}" y="{y1 + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_tick_label(value)}</text>'
        )
        gy = y_lo + frac * (y_hi - y_lo)
        y_pix = y1 - frac * plot_h
        out.append(
            f'<line x1="{x0 - 5}" y1="{_fmt(y_pix)}" x2="{x0}" y2="{_fmt(y_pix)}" '
            f'stroke="#333333" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{x0 - 8}" y="{_fmt(y_pix + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_tick_label(gy)}</text>'
        )

    if axes.x_label:
        out.append(
            f'<text x="{_MARGIN_LEFT + plot_w // 2}" y="{_HEIGHT - 14}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{_escape(axes.x_label)}</text>'
        )
    if axes.y_label:
        out.append(
            f'<text x="16" y="{_MARGIN_TOP + plot_h // 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {_MARGIN_TOP + plot_h // 2})">{_escape(axes.y_label)}</text>'
        )

    # data series
    for si, s in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.ys))
        out.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )

    # legend, to the right of the plot
    legend_x = x1 + 14
    for si, s in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        ly = _MARGIN_TOP + 12 + si * 18
        out.append(
            f'<line x1="{legend_x}" y1="{ly}" x2="{legend_x + 18}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{legend_x + 24}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{_escape(s.label)}</text>'
        )

    out.append("</svg>")
    return "\n".join(out) + "\n"


def history_chart(histories, title: str) -> str:
    """Training-loss-per-epoch chart, one series per optimizer run.

    Runs with fewer than two recorded epochs are left out; raises if that
    leaves nothing to plot.
    """
    series = [
        Series(label=h.optimizer, xs=[float(e) for e in h.epochs],
               ys=[float(v) for v in h.train_loss])
        for h in histories
        if len(h.train_loss) >= 2
    ]
    if not series:
        raise EmptySeriesError("no run recorded two or more epochs")
    return emit_svg_linechart(series, AxesSpec(title=title, x_label="epoch", y_label="train loss"))


def lr_chart(probes, title: str) -> str:
    """Final-loss-versus-learning-rate chart on a log x axis.

    Diverged probes are excluded; needs at least two surviving points.
    """
    xs = [p.learning_rate for p in probes if not p.diverged]
    ys = [p.final_loss for p in probes if not p.diverged]
    if len(xs) < 2:
        raise EmptySeriesError("fewer than two non-diverged probes to plot")
    return emit_svg_linechart(
        [Series(label="final train loss", xs=xs, ys=ys)],
        AxesSpec(title=title, x_label="learning rate", y_label="final train loss", log_x=True),
    )
