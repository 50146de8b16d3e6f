"""Dependency-free deterministic SVG charts from the CSV artifacts.

Same CSV in, same bytes out: no timestamps, fixed palette, fixed layout.
Two chart kinds cover the paper-style figures: grouped polylines (epoch /
layer / lambda curves) and scatters (H vs TC).
"""

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#e377c2", "#7f7f7f", "#bcbd22"]

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 150, 36, 48


class PlotError(ValueError):
    pass


def _fnum(x):
    return f"{x:.6g}"


def _scale(vals, lo_px, hi_px):
    vmin, vmax = min(vals), max(vals)
    if vmin == vmax:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    span = vmax - vmin

    def to_px(v):
        return lo_px + (v - vmin) / span * (hi_px - lo_px)

    return to_px, vmin, vmax


def _axis_ticks(vmin, vmax, n=5):
    return [vmin + i * (vmax - vmin) / (n - 1) for i in range(n)]


def _svg_header(title):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="14">{title}</text>')
    return parts


def _axes(parts, x_to, y_to, xmin, xmax, ymin, ymax, x_label, y_label):
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" '
                 'stroke="black"/>')
    for tx in _axis_ticks(xmin, xmax):
        px = x_to(tx)
        parts.append(f'<line x1="{_fnum(px)}" y1="{y0}" x2="{_fnum(px)}" '
                     f'y2="{y0 + 4}" stroke="black"/>')
        parts.append(f'<text x="{_fnum(px)}" y="{y0 + 18}" '
                     'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{_fnum(tx)}</text>')
    for ty in _axis_ticks(ymin, ymax):
        py = y_to(ty)
        parts.append(f'<line x1="{x0 - 4}" y1="{_fnum(py)}" x2="{x0}" '
                     f'y2="{_fnum(py)}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{_fnum(py + 4)}" '
                     'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{_fnum(ty)}</text>')
    parts.append(f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 10}" '
                 'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{x_label}</text>')
    parts.append(f'<text x="16" y="{(y0 + y1) // 2}" text-anchor="middle" '
                 'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {(y0 + y1) // 2})">{y_label}</text>')


def _legend(parts, names):
    lx = WIDTH - MARGIN_R + 12
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        ly = MARGIN_T + 16 * i
        parts.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{lx + 14}" y="{ly + 9}" '
                     'font-family="sans-serif" font-size="11">'
                     f'{name}</text>')


def _filter_rows(rows, flt):
    out = []
    for row in rows:
        if all(str(row.get(k, "")) == str(v) for k, v in (flt or {}).items()):
            out.append(row)
    return out


def _group_key(row, group):
    return str(row.get(group, "")) if group else ""


def render_lines(rows, x, y, group=None, filter=None, title="", x_label=None,
                 y_label=None):
    """Grouped polylines; one series (and legend entry) per group value."""
    rows = _filter_rows(rows, filter)
    rows = [r for r in rows if r.get(x) not in ("", None)
            and r.get(y) not in ("", None)]
    if not rows:
        raise PlotError("no rows to plot after filtering")
    series = {}
    for row in rows:
        series.setdefault(_group_key(row, group), []).append(
            (float(row[x]), float(row[y])))
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x_to, xmin, xmax = _scale(xs, MARGIN_L, WIDTH - MARGIN_R)
    y_to_raw, ymin, ymax = _scale(ys, HEIGHT - MARGIN_B, MARGIN_T)
    parts = _svg_header(title)
    _axes(parts, x_to, y_to_raw, xmin, xmax, ymin, ymax, x_label or x,
          y_label or y)
    names = sorted(series)
    for i, name in enumerate(names):
        pts = sorted(series[name])
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fnum(x_to(px))},{_fnum(y_to_raw(py))}"
                          for px, py in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
    if group:
        _legend(parts, names)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_scatter(rows, x, y, filter=None, title="", x_label=None,
                   y_label=None):
    rows = _filter_rows(rows, filter)
    pts = [(float(r[x]), float(r[y])) for r in rows
           if r.get(x) not in ("", None) and r.get(y) not in ("", None)]
    if not pts:
        raise PlotError("no rows to plot after filtering")
    x_to, xmin, xmax = _scale([p[0] for p in pts], MARGIN_L, WIDTH - MARGIN_R)
    y_to, ymin, ymax = _scale([p[1] for p in pts], HEIGHT - MARGIN_B, MARGIN_T)
    parts = _svg_header(title)
    _axes(parts, x_to, y_to, xmin, xmax, ymin, ymax, x_label or x, y_label or y)
    for px, py in sorted(pts):
        parts.append(f'<circle cx="{_fnum(x_to(px))}" cy="{_fnum(y_to(py))}" '
                     f'r="4" fill="{PALETTE[0]}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def pivot_metrics(rows, x_metric, y_metric, estimator=None):
    """Join metric rows on (run_id, epoch, layer_id) for metric scatters."""
    key_of = lambda r: (r.get("run_id"), r.get("epoch"), r.get("layer_id"))
    xs, ys = {}, {}
    for row in rows:
        if estimator and row.get("estimator") != estimator:
            continue
        if row.get("metric") == x_metric:
            xs[key_of(row)] = row["value_nats"]
        elif row.get("metric") == y_metric:
            ys[key_of(row)] = row["value_nats"]
    joined = [{x_metric: xs[k], y_metric: ys[k]} for k in sorted(
        xs.keys() & ys.keys(), key=lambda k: tuple(str(p) for p in k))]
    return joined


PLOT_SPECS = {
    # training-dynamics curves: one polyline per layer
    "epoch-curves": lambda rows, estimator: render_lines(
        rows, x="epoch", y="value_nats", group="layer_id",
        filter={"metric": "H", "estimator": estimator},
        title="gate entropy during training", x_label="epoch",
        y_label="H (nats)"),
    # layerwise decrease: suffix joint entropy vs layer
    "layer-curves": lambda rows, estimator: render_lines(
        rows, x="layer_id", y="value_nats", group="epoch",
        filter={"metric": "suffix_H", "estimator": estimator},
        title="suffix gate entropy by layer", x_label="gating layer",
        y_label="H(suffix) (nats)"),
    # disentanglement: H vs TC scatter
    "h-tc-scatter": lambda rows, estimator: render_scatter(
        pivot_metrics(rows, "H", "TC", estimator), x="H", y="TC",
        title="entropy vs total correlation", x_label="H (nats)",
        y_label="TC (nats)"),
    # sweep: final H vs lambda
    "lambda-curves": lambda rows, estimator: render_lines(
        rows, x="lambda", y="final_H", group="seed",
        filter={"regularizer": "complexity"},
        title="final gate entropy vs lambda", x_label="lambda",
        y_label="H (nats)"),
    "gap-curves": lambda rows, estimator: render_lines(
        rows, x="lambda", y="gap", group="seed",
        filter={"regularizer": "complexity"},
        title="generalization gap vs lambda", x_label="lambda",
        y_label="test - train loss"),
}


def emit_svg(rows, plot_name, estimator="kde"):
    if plot_name not in PLOT_SPECS:
        raise PlotError(f"unknown plot {plot_name!r}; have "
                        f"{sorted(PLOT_SPECS)}")
    return PLOT_SPECS[plot_name](rows, estimator)
