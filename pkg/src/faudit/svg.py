"""Tiny deterministic SVG line charts (no plotting dependency, byte-stable)."""

from __future__ import annotations

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
)

_MARGIN_LEFT = 56
_MARGIN_RIGHT = 16
_MARGIN_TOP = 34
_MARGIN_BOTTOM = 42


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def line_chart(
    series: list[tuple[str, list[float], list[float]]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 640,
    height: int = 400,
    y_range: tuple[float, float] = (0.0, 1.0),
    x_range: tuple[float, float] = (0.0, 1.0),
) -> str:
    """Render (label, xs, ys) series as an SVG document string.

    Output is a pure function of the arguments (fixed 2-decimal coordinates,
    fixed palette) so report reruns stay byte-identical.
    """
    x0, x1 = x_range
    y0, y1 = y_range
    plot_w = width - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = height - _MARGIN_TOP - _MARGIN_BOTTOM

    def px(x: float) -> float:
        return _MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w

    def py(y: float) -> float:
        return _MARGIN_TOP + (y1 - y) / (y1 - y0) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    # axes box and quarter grid
    parts.append(
        f'<rect x="{_fmt(px(x0))}" y="{_fmt(py(y1))}" '
        f'width="{_fmt(plot_w)}" height="{_fmt(plot_h)}" '
        f'fill="none" stroke="#444444" stroke-width="1"/>'
    )
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        parts.append(
            f'<line x1="{_fmt(px(fx))}" y1="{_fmt(py(y0))}" '
            f'x2="{_fmt(px(fx))}" y2="{_fmt(py(y1))}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<line x1="{_fmt(px(x0))}" y1="{_fmt(py(fy))}" '
            f'x2="{_fmt(px(x1))}" y2="{_fmt(py(fy))}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(px(fx))}" y="{height - _MARGIN_BOTTOM + 16}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="10">'
            f"{fx:.2f}</text>"
        )
        parts.append(
            f'<text x="{_MARGIN_LEFT - 6}" y="{_fmt(py(fy) + 3)}" '
            f'text-anchor="end" font-family="sans-serif" font-size="10">'
            f"{fy:.2f}</text>"
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{x_label}</text>'
    )
    parts.append(
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {height / 2:.0f})">{y_label}</text>'
    )
    for idx, (label, xs, ys) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>'
        )
        ly = _MARGIN_TOP + 14 + 14 * idx
        lx = width - _MARGIN_RIGHT - 170
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 22}" y="{ly}" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_line_chart(path, *args, **kwargs) -> None:
    with open(path, "w") as fh:
        fh.write(line_chart(*args, **kwargs))
