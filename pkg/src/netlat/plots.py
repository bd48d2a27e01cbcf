"""Bare SVG charts for reports (CSV stays the authoritative output)."""
from __future__ import annotations

from xml.sax.saxutils import escape

W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 70, 150, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _scale(lo: float, hi: float, a: float, b: float):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, y_lo: float, y_hi: float, body: list[str]) -> str:
    fy = _scale(y_lo, y_hi, H - PAD_B, PAD_T)
    ticks = []
    for i in range(5):
        v = y_lo + (y_hi - y_lo) * i / 4
        y = fy(v)
        ticks.append(f'<line x1="{PAD_L - 4}" y1="{y:.1f}" x2="{PAD_L}" y2="{y:.1f}" stroke="#000"/>'
                     f'<text x="{PAD_L - 8}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{v:.3g}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="#fff"/>',
        f'<text x="{W / 2:.0f}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="#000"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="#000"/>',
        f'<text x="{(PAD_L + W - PAD_R) / 2:.0f}" y="{H - 10}" font-size="12" text-anchor="middle">'
        f'{escape(xlabel)}</text>',
        f'<text x="16" y="{H / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {H / 2:.0f})">{escape(ylabel)}</text>',
        *ticks, *body, "</svg>", ""])


def _bounds(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values + [0.0]), max(values + [0.0])
    return lo, hi * 1.05 if hi > 0 else 1.0


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str) -> str:
    points = [p for s in series.values() for p in s]
    xs, ys = [p[0] for p in points] or [0.0, 1.0], [p[1] for p in points]
    fx = _scale(min(xs), max(xs), PAD_L + 10, W - PAD_R - 10)
    y_lo, y_hi = _bounds(ys)
    fy = _scale(y_lo, y_hi, H - PAD_B, PAD_T)
    body = []
    for x in sorted(set(xs)):
        body.append(f'<text x="{fx(x):.1f}" y="{H - PAD_B + 16}" font-size="11" text-anchor="middle">{x:g}</text>')
    for i, (name, pts) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        pts = sorted(pts)
        path = " ".join(f"{fx(x):.1f},{fy(y):.1f}" for x, y in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>')
        body += [f'<circle cx="{fx(x):.1f}" cy="{fy(y):.1f}" r="3" fill="{c}"/>' for x, y in pts]
        ly = PAD_T + 18 * i
        body.append(f'<text x="{W - PAD_R + 10}" y="{ly + 4}" font-size="12" fill="{c}">{escape(name)}</text>')
    return _frame(title, xlabel, ylabel, y_lo, y_hi, body)


def strip_chart(groups: dict[str, list[float]], title: str, ylabel: str) -> str:
    """One column of points per group plus a bar at the group mean."""
    ys = [v for vals in groups.values() for v in vals]
    y_lo, y_hi = _bounds(ys)
    fy = _scale(y_lo, y_hi, H - PAD_B, PAD_T)
    n = max(len(groups), 1)
    step = (W - PAD_L - PAD_R) / n
    body = []
    for i, (name, vals) in enumerate(groups.items()):
        c = COLORS[i % len(COLORS)]
        cx = PAD_L + step * (i + 0.5)
        body += [f'<circle cx="{cx:.1f}" cy="{fy(v):.1f}" r="4" fill="{c}" fill-opacity="0.7"/>' for v in vals]
        if vals:
            m = sum(vals) / len(vals)
            body.append(f'<line x1="{cx - 20:.1f}" y1="{fy(m):.1f}" x2="{cx + 20:.1f}" y2="{fy(m):.1f}" '
                        f'stroke="{c}" stroke-width="2"/>')
        body.append(f'<text x="{cx:.1f}" y="{H - PAD_B + 16}" font-size="12" text-anchor="middle">'
                    f'{escape(name)}</text>')
    return _frame(title, "", ylabel, y_lo, y_hi, body)
