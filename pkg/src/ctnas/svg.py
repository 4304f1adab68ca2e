"""Minimal native SVG bar and line charts."""

from __future__ import annotations

from typing import Dict, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#000000")


def _frame(width, height, title, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>\n'
            + "".join(body) + "</svg>\n")


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str = "", width: int = 640,
              height: int = 360) -> str:
    left, right, top, bottom = 50, 10, 30, 90
    plot_w, plot_h = width - left - right, height - top - bottom
    top_val = max([float(v) for v in values] + [1e-12])
    n = max(len(values), 1)
    slot = plot_w / n
    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>\n',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>\n',
            f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{top_val:g}</text>\n',
            f'<text x="{left - 4}" y="{top + plot_h}" text-anchor="end">0</text>\n']
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = plot_h * float(v) / top_val
        x = left + i * slot + slot * 0.15
        body.append(f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{slot * 0.7:.1f}" height="{h:.1f}" '
                    f'fill="{PALETTE[i % len(PALETTE)]}"><title>{escape(str(lab))}: {v:g}</title></rect>\n')
        cx, cy = x + slot * 0.35, top + plot_h + 8
        body.append(f'<text x="{cx:.1f}" y="{cy:.1f}" transform="rotate(45 {cx:.1f} {cy:.1f})">'
                    f'{escape(str(lab))}</text>\n')
    return _frame(width, height, title, body)


def line_chart(series: Dict[str, Sequence[float]], xs: Sequence[float], title: str = "", width: int = 640,
               height: int = 360, y_range=(0.0, 1.0)) -> str:
    left, right, top, bottom = 50, 150, 30, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    span = (x1 - x0) or 1.0
    y0, y1 = y_range

    def px(x):
        return left + plot_w * (x - x0) / span

    def py(y):
        return top + plot_h * (1 - (y - y0) / ((y1 - y0) or 1.0))

    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>\n',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>\n',
            f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{y1:g}</text>\n',
            f'<text x="{left - 4}" y="{top + plot_h}" text-anchor="end">{y0:g}</text>\n',
            f'<text x="{left}" y="{height - 10}">{x0:g}</text>\n',
            f'<text x="{left + plot_w}" y="{height - 10}" text-anchor="end">{x1:g}</text>\n']
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>\n')
        ly = top + 12 * i + 6
        body.append(f'<line x1="{left + plot_w + 10}" y1="{ly}" x2="{left + plot_w + 24}" y2="{ly}" '
                    f'stroke="{color}" stroke-width="2"/>\n')
        body.append(f'<text x="{left + plot_w + 28}" y="{ly + 4}">{escape(name)}</text>\n')
    return _frame(width, height, title, body)
