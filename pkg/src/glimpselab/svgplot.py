"""Minimal self-contained SVG charts (line curves with bands, grouped bars).

The plotted numbers are embedded as an XML comment so a figure can be
checked against its CSV without re-running anything.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H = 640, 400
M_LEFT, M_RIGHT, M_TOP, M_BOTTOM = 60, 150, 40, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def _fmt(v: float) -> str:
    return f"{v:g}"


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1

    def sx(self, x):
        return M_LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - M_LEFT - M_RIGHT)

    def sy(self, y):
        return H - M_BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - M_TOP - M_BOTTOM)


def _axes(f: _Frame, title: str, xlabel: str, ylabel: str, xticks=True) -> list[str]:
    out = [f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']
    bx, by = f.sx(f.x0), f.sy(f.y0)
    out.append(f'<line x1="{bx}" y1="{by}" x2="{f.sx(f.x1)}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx}" y2="{f.sy(f.y1)}" stroke="black"/>')
    for v in _ticks(f.y0, f.y1):
        y = f.sy(v)
        out.append(f'<line x1="{bx - 4}" y1="{y:.2f}" x2="{bx}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{bx - 7}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{_fmt(v)}</text>')
    if xticks:
        for v in _ticks(f.x0, f.x1):
            x = f.sx(v)
            out.append(f'<line x1="{x:.2f}" y1="{by}" x2="{x:.2f}" y2="{by + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.2f}" y="{by + 17}" text-anchor="middle" font-size="11">{_fmt(v)}</text>')
    out.append(f'<text x="{(bx + f.sx(f.x1)) / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{(by + f.sy(f.y1)) / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 15 {(by + f.sy(f.y1)) / 2})">{escape(ylabel)}</text>')
    return out


def _data_comment(cols: Mapping[str, Sequence]) -> str:
    lines = [",".join(cols)]
    rows = zip(*[list(v) for v in cols.values()])
    lines += [",".join(_fmt(float(v)) if v is not None else "" for v in r) for r in rows]
    body = "\n".join(lines).replace("--", "- -")
    return f"<!-- data\n{body}\n-->"


def _finite(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[np.isfinite(a)]


def line_chart(x: Sequence[float], series: Mapping[str, Sequence[float]], *, title: str = "",
               xlabel: str = "", ylabel: str = "",
               bands: Optional[Mapping[str, tuple[Sequence[float], Sequence[float]]]] = None,
               ylim: Optional[tuple[float, float]] = None) -> str:
    """Line chart; ``bands`` maps a series name to (low, high) envelopes."""
    x = np.asarray(x, dtype=np.float64)
    bands = bands or {}
    if ylim is None:
        vals = np.concatenate([_finite(v) for v in series.values()] +
                              [_finite(b) for lh in bands.values() for b in lh] + [np.zeros(1)])
        ylim = (min(0.0, float(vals.min())), max(1.0, float(vals.max())))
    f = _Frame((float(x.min()), float(x.max())), ylim)
    out = _axes(f, title, xlabel, ylabel)
    for i, (name, ys) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        ys = np.asarray(ys, dtype=np.float64)
        if name in bands:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in bands[name])
            ok = np.isfinite(lo) & np.isfinite(hi)
            if ok.any():
                pts = [f"{f.sx(a):.2f},{f.sy(b):.2f}" for a, b in zip(x[ok], hi[ok])]
                pts += [f"{f.sx(a):.2f},{f.sy(b):.2f}" for a, b in zip(x[ok][::-1], lo[ok][::-1])]
                out.append(f'<polygon points="{" ".join(pts)}" fill="{col}" fill-opacity="0.2" stroke="none"/>')
        # break the polyline at missing values
        seg: list[str] = []
        for a, b in zip(x, ys):
            if np.isfinite(b):
                seg.append(f"{f.sx(a):.2f},{f.sy(b):.2f}")
            elif seg:
                out.append(f'<polyline points="{" ".join(seg)}" fill="none" stroke="{col}" stroke-width="1.5"/>')
                seg = []
        if seg:
            out.append(f'<polyline points="{" ".join(seg)}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        ly = M_TOP + 18 * i + 10
        out.append(f'<line x1="{W - M_RIGHT + 10}" y1="{ly}" x2="{W - M_RIGHT + 30}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{W - M_RIGHT + 35}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    cols = {xlabel or "x": x, **{k: np.asarray(v, dtype=np.float64) for k, v in series.items()}}
    return _wrap(out, _data_comment(cols))


def bar_chart(groups: Sequence[str], series: Mapping[str, Sequence[float]], *, title: str = "",
              ylabel: str = "", errors: Optional[Mapping[str, tuple[Sequence[float], Sequence[float]]]] = None,
              ylim: tuple[float, float] = (0.0, 1.0)) -> str:
    """Grouped bars, one group per entry of ``groups``; ``errors`` gives (low, high) whiskers."""
    errors = errors or {}
    n_g, n_s = len(groups), max(1, len(series))
    f = _Frame((0.0, float(n_g)), ylim)
    out = _axes(f, title, "", ylabel, xticks=False)
    slot = 1.0 / (n_s + 1)
    for j, (name, ys) in enumerate(series.items()):
        col = PALETTE[j % len(PALETTE)]
        for g, v in enumerate(ys):
            if not np.isfinite(v):
                continue
            x0 = f.sx(g + slot * (j + 0.5))
            x1 = f.sx(g + slot * (j + 1.5))
            y = f.sy(max(ylim[0], min(ylim[1], v)))
            out.append(f'<rect x="{x0:.2f}" y="{y:.2f}" width="{x1 - x0:.2f}" height="{f.sy(ylim[0]) - y:.2f}" fill="{col}"/>')
            if name in errors:
                lo, hi = errors[name][0][g], errors[name][1][g]
                if np.isfinite(lo) and np.isfinite(hi):
                    xm = (x0 + x1) / 2
                    out.append(f'<line x1="{xm:.2f}" y1="{f.sy(lo):.2f}" x2="{xm:.2f}" y2="{f.sy(hi):.2f}" stroke="black"/>')
        ly = M_TOP + 18 * j + 10
        out.append(f'<rect x="{W - M_RIGHT + 10}" y="{ly - 6}" width="14" height="10" fill="{col}"/>')
        out.append(f'<text x="{W - M_RIGHT + 30}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    for g, name in enumerate(groups):
        out.append(f'<text x="{f.sx(g + 0.5):.2f}" y="{H - M_BOTTOM + 17}" text-anchor="middle" font-size="11">{escape(str(name))}</text>')
    cols = {"group": list(range(n_g)), **{k: np.asarray(v, dtype=np.float64) for k, v in series.items()}}
    return _wrap(out, _data_comment(cols))


def _wrap(body: list[str], comment: str) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">'
    return "\n".join([head, comment, *body, "</svg>"]) + "\n"


def save(path, svg: str) -> None:
    with open(path, "w") as fh:
        fh.write(svg)
