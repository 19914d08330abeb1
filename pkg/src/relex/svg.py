"""Bare-bones SVG line chart for cumulative regret curves."""

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def line_chart(series, log_x=False, width=720, height=420, title="cumulative regret",
               x_label="episode", y_label="cumulative regret"):
    """Render ``{label: (xs, ys)}`` as an SVG string.

    With ``log_x`` the x axis is log10-scaled; x values must be positive.
    """
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def tx(x):
        return math.log10(x) if log_x else float(x)

    xs_all = [tx(x) for xs, _ in series.values() for x in xs]
    ys_all = [float(y) for _, ys in series.values() for y in ys]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y0, y1 = 0.0, max(ys_all + [0.0])
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return left + (tx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (float(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        label = 10**fx if log_x else fx
        xpos = left + pw * i / 4
        out.append(f'<line x1="{xpos:.1f}" y1="{top + ph}" x2="{xpos:.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{xpos:.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">{label:.4g}</text>')
        fy = y0 + (y1 - y0) * i / 4
        ypos = top + ph - ph * i / 4
        out.append(f'<line x1="{left - 5}" y1="{ypos:.1f}" x2="{left}" y2="{ypos:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{ypos + 4:.1f}" text-anchor="end" font-size="11">{fy:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">'
               f'{escape(x_label)}{" (log)" if log_x else ""}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(y_label)}</text>')
    for j, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 18 * j
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def thin(xs, ys, max_points=2000):
    """Keep at most ``max_points`` evenly spaced samples, always the last one."""
    n = len(xs)
    if n <= max_points:
        return list(xs), list(ys)
    step = math.ceil(n / max_points)
    idx = list(range(0, n, step))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return [xs[i] for i in idx], [ys[i] for i in idx]
