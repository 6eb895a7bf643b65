"""CSV and SVG writers. Output depends only on the inputs (no timestamps),
so re-emitting identical data yields identical bytes."""
from __future__ import annotations

import csv
import io
import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 600
_MARGIN = dict(left=80, right=170, top=40, bottom=60)
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def _num(v) -> str:
    return repr(float(v))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def trace_csv(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "mode", "seed"])
    for tr in ([traces] if hasattr(traces, "values") else traces):
        for i, v in enumerate(tr.values):
            w.writerow([i, _num(v), tr.mode, tr.seed])
    return buf.getvalue()


def emit_csv(traces, path) -> None:
    """Loss trace(s) as ``iteration,loss,mode,seed`` rows."""
    _write_text(path, trace_csv(traces))


def read_trace_csv(path):
    """Inverse of :func:`emit_csv` for a single trace: ``(values, mode, seed)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["iteration", "loss", "mode", "seed"]:
        raise OSError(f"{path}: not a loss-trace CSV")
    body = rows[1:]
    mode = body[0][2] if body else ""
    seed = int(body[0][3]) if body else 0
    return [float(r[1]) for r in body], mode, seed


def emit_table_csv(header, rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    _write_text(path, buf.getvalue())


def emit_matrix_csv(matrix, path) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    _write_text(path, "".join(",".join(_num(v) for v in row) + "\n" for row in m))


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _fmt_tick(v) -> str:
    return f"{v:.4g}"


def emit_svg(traces, path, labels=None, title: str = "", x_label: str = "iteration",
             y_label: str = "loss") -> None:
    """Line plot, one polyline per trace, linear x; log y when all values
    are positive. Axis labels, ticks and a legend are text elements."""
    traces = [traces] if hasattr(traces, "values") else list(traces)
    labels = labels or [f"{t.mode} seed {t.seed}" for t in traces]
    series = [np.asarray(t.values, dtype=np.float64) for t in traces]
    allv = np.concatenate(series) if series and any(s.size for s in series) else np.zeros(0)
    log_y = allv.size > 0 and bool(np.all(allv > 0))
    yv = np.log10(allv) if log_y else allv
    ylo, yhi = (float(yv.min()), float(yv.max())) if yv.size else (0.0, 1.0)
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    xmax = max((s.size - 1 for s in series), default=1)
    xmax = max(xmax, 1)
    left, right, top, bottom = _MARGIN["left"], WIDTH - _MARGIN["right"], _MARGIN["top"], HEIGHT - _MARGIN["bottom"]

    def px(i):
        return left + (right - left) * i / xmax

    def py(v):
        return bottom - (bottom - top) * (v - ylo) / (yhi - ylo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>']
    if title:
        out.append(f'<text x="{(left + right) / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-size="16">{escape(title)}</text>')
    for xt in _ticks(0, xmax):
        out.append(f'<text x="{px(xt):.2f}" y="{bottom + 18}" text-anchor="middle" '
                   f'font-size="11">{int(round(xt))}</text>')
    for yt in _ticks(ylo, yhi):
        shown = 10 ** yt if log_y else yt
        out.append(f'<text x="{left - 6}" y="{py(yt) + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{_fmt_tick(shown)}</text>')
    out.append(f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 18}" text-anchor="middle" '
               f'font-size="13">{escape(x_label)}</text>')
    ylab = f"{y_label} (log scale)" if log_y else y_label
    out.append(f'<text x="20" y="{(top + bottom) / 2:.1f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 20 {(top + bottom) / 2:.1f})">{escape(ylab)}</text>')
    for k, (s, label) in enumerate(zip(series, labels)):
        colour = _PALETTE[k % len(_PALETTE)]
        vals = np.log10(s) if log_y else s
        if s.size:
            pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(vals))
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1" points="{pts}"/>')
        ly = top + 10 + 18 * k
        out.append(f'<line x1="{right + 12}" y1="{ly}" x2="{right + 36}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{right + 42}" y="{ly + 4}" font-size="12">{escape(label)}</text>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")


def emit_image_svg(matrix, path, title: str = "") -> None:
    """Grayscale raster of a 2-D array (black = min, white = max)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = m.shape
    lo, hi = float(m.min()), float(m.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    cell = max(1, min(560 // max(rows, cols), 64))
    top = 40
    w, h = cols * cell, rows * cell + top + 24
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>']
    if title:
        out.append(f'<text x="{w / 2:.1f}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for i in range(rows):
        for j in range(cols):
            g = int(math.floor((m[i, j] - lo) * scale + 0.5))
            out.append(f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({g},{g},{g})"/>')
    out.append(f'<text x="2" y="{h - 6}" font-size="11">min {_fmt_tick(lo)}  max {_fmt_tick(hi)}</text>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")
