"""Training-curve SVG charts and the epoch summary table.

Charts are hand-written SVG with fixed float formatting, so identical inputs
produce identical bytes (the idempotence tests diff them directly).
"""

from __future__ import annotations

from pathlib import Path

from .training import MetricRow

_W, _H = 640, 400
_MARGIN = 52


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _polyline(xs: list[float], ys: list[float]) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts}"/>'


def svg_line_chart(title: str, xs: list[float], ys: list[float],
                   y_label: str) -> str:
    if not xs:
        raise ValueError("chart needs at least one point")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    span_x = _W - 2 * _MARGIN
    span_y = _H - 2 * _MARGIN
    px = [_MARGIN + (x - x_lo) / (x_hi - x_lo) * span_x for x in xs]
    py = [_H - _MARGIN - (y - y_lo) / (y_hi - y_lo) * span_y for y in ys]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_H - _MARGIN}" '
        f'stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        xp = _MARGIN + frac * span_x
        yp = _H - _MARGIN - frac * span_y
        parts.append(
            f'<text x="{_fmt(xp)}" y="{_H - _MARGIN + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{xv:g}</text>'
        )
        parts.append(
            f'<text x="{_MARGIN - 6}" y="{_fmt(yp + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{yv:.4g}</text>'
        )
    parts.append(
        f'<text x="16" y="{_H // 2}" font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {_H // 2})" text-anchor="middle">{y_label}</text>'
    )
    parts.append(
        f'<text x="{_W // 2}" y="{_H - 10}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">epoch</text>'
    )
    parts.append(_polyline(px, py))
    if len(px) == 1:
        parts.append(f'<circle cx="{_fmt(px[0])}" cy="{_fmt(py[0])}" r="4" fill="#1f77b4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_bar_chart(title: str, labels: list[str], values: list[float]) -> str:
    if not labels:
        raise ValueError("bar chart needs at least one bar")
    v_hi = max(max(values), 1e-9)
    span_x = _W - 2 * _MARGIN
    span_y = _H - 2 * _MARGIN
    bar_w = span_x / len(labels) * 0.7
    gap = span_x / len(labels)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
    ]
    for i, (label, value) in enumerate(zip(labels, values)):
        h = value / v_hi * span_y
        x = _MARGIN + i * gap + (gap - bar_w) / 2
        y = _H - _MARGIN - h
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" '
            f'height="{_fmt(h)}" fill="#1f77b4"/>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{_fmt(y - 4)}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{value:.3f}</text>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{_H - _MARGIN + 14}" '
            f'text-anchor="middle" font-size="10" font-family="sans-serif">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


CHART_SPECS = (
    ("loss.svg", "Training loss", "loss", lambda r: r.loss),
    ("map.svg", "Validation mAP@0.5", "mAP", lambda r: r.map),
    ("class_acc.svg", "Class accuracy", "percent", lambda r: r.class_acc),
    ("obj_acc.svg", "Objectness accuracy", "percent", lambda r: r.obj_acc),
    ("noobj_acc.svg", "No-object accuracy", "percent", lambda r: r.noobj_acc),
)


def write_charts(rows: list[MetricRow], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = [float(r.epoch) for r in rows]
    written = []
    for filename, title, y_label, pick in CHART_SPECS:
        path = out_dir / filename
        path.write_text(svg_line_chart(title, xs, [pick(r) for r in rows], y_label))
        written.append(path)
    return written


def summary_table(rows: list[MetricRow], epochs: list[int]) -> str:
    """Metric-by-epoch text table (metrics as rows, chosen epochs as columns)."""
    by_epoch = {r.epoch: r for r in rows}
    missing = [e for e in epochs if e not in by_epoch]
    if missing:
        raise ValueError(f"epochs not present in the metric log: {missing}")
    metrics = (
        ("mAP", lambda r: f"{r.map:.2f}"),
        ("LOSS", lambda r: f"{r.loss:.2f}"),
        ("Class Acc.", lambda r: f"{r.class_acc:.2f}"),
        ("Obj. Acc.", lambda r: f"{r.obj_acc:.2f}"),
        ("No Obj. Acc.", lambda r: f"{r.noobj_acc:.2f}"),
    )
    header = ["Metric"] + [f"{e} EPOCH" for e in epochs]
    lines = [" | ".join(f"{cell:>12}" for cell in header)]
    lines.append("-+-".join("-" * 12 for _ in header))
    for name, fmt in metrics:
        cells = [name] + [fmt(by_epoch[e]) for e in epochs]
        lines.append(" | ".join(f"{cell:>12}" for cell in cells))
    return "\n".join(lines) + "\n"


def default_summary_epochs(rows: list[MetricRow], count: int = 6) -> list[int]:
    epochs = [r.epoch for r in rows]
    if len(epochs) <= count:
        return epochs
    step = (len(epochs) - 1) / (count - 1)
    picks = sorted({epochs[round(i * step)] for i in range(count)})
    return picks
