"""CSV and SVG emitters for FROC/ROC curves."""

from __future__ import annotations

from html import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def froc_csv(curve) -> str:
    rows = ["threshold,sensitivity,fp_per_volume"]
    rows += [f"{p.threshold!r},{p.sensitivity!r},{p.fp_per_volume!r}" for p in curve]
    return "\n".join(rows) + "\n"


def roc_csv(points) -> str:
    rows = ["threshold,fpr,tpr"]
    rows += [f"{t!r},{f!r},{s!r}" for t, f, s in points]
    return "\n".join(rows) + "\n"


def _step_points(curve):
    """FROC as a staircase starting at the origin."""
    pts = [(0.0, 0.0)]
    for p in curve:
        pts.append((p.fp_per_volume, pts[-1][1]))
        pts.append((p.fp_per_volume, p.sensitivity))
    return pts


def froc_svg(curves: dict[str, list], title: str = "FROC", x_max: float | None = None,
             width: int = 480, height: int = 360) -> str:
    """Step plots of sensitivity vs FP/volume, one polyline per labelled curve."""
    left, right, top, bottom = 56, 16, 32, 48
    pw, ph = width - left - right, height - top - bottom
    if x_max is None:
        x_max = max((p.fp_per_volume for c in curves.values() for p in c), default=1.0) or 1.0

    def sx(v):
        return left + pw * min(v, x_max) / x_max

    def sy(v):
        return top + ph * (1.0 - v)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        v = i / 5
        y = sy(v)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.1f}</text>')
        xv = x_max * i / 5
        x = sx(xv)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">FP per volume</text>')
    out.append(f'<text transform="translate(14,{top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">sensitivity</text>')
    for k, (label, curve) in enumerate(curves.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in _step_points(curve))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + ph - 12 - 14 * k
        out.append(f'<line x1="{left + pw - 90}" y1="{ly}" x2="{left + pw - 70}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 66}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
