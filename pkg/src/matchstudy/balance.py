"""Standardized differences before and after matching, and Love plots."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

WEIGHTING = "controls weighted by n_treated / n_control within each matched set"
REFERENCE_LINES = (-0.1, 0.0, 0.1)


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    std_diff_before: float
    std_diff_after: float = math.nan
    degenerate: bool = False

    def to_dict(self):
        return {"covariate": self.covariate, "std_diff_before": _num(self.std_diff_before),
                "std_diff_after": _num(self.std_diff_after), "degenerate": self.degenerate}


def _num(x):
    return None if x is None or not math.isfinite(x) else float(x)


def set_weights(sets, ids):
    """Matching weights for ``ids``: 1 for treated, ``t/c`` for controls in a t:c set.

    Subjects outside every set get weight 0.
    """
    pos = {s: k for k, s in enumerate(ids)}
    w = np.zeros(len(ids))
    for ms in sets:
        nt, nc = len(ms.treated_ids), len(ms.control_ids)
        for s in ms.treated_ids:
            w[pos[s]] = 1.0
        for s in ms.control_ids:
            w[pos[s]] = nt / nc
    return w


def _pooled_sd(x, z):
    vt = np.var(x[z], ddof=1) if z.sum() > 1 else 0.0
    vc = np.var(x[~z], ddof=1) if (~z).sum() > 1 else 0.0
    return math.sqrt((vt + vc) / 2.0)


def std_diff(x, z, weights=None, scale=None):
    """Weighted mean difference over the pooled pre-match standard deviation.

    ``z`` marks treated rows. Returns ``(d, degenerate)``; a zero scale with
    equal means gives ``d = 0``, with unequal means ``(nan, True)``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=bool)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    s = _pooled_sd(x, z) if scale is None else scale
    mt = np.average(x[z], weights=w[z])
    mc = np.average(x[~z], weights=w[~z])
    diff = mt - mc
    if s <= 1e-12 * max(1.0, abs(mt), abs(mc)):
        if abs(diff) <= 1e-12 * max(1.0, abs(mt), abs(mc)):
            return 0.0, False
        return math.nan, True
    return float(diff / s), False


def standardized_differences(X, names, treated, sets=None, ids=None):
    """Balance table for the rows of ``X`` (treated rows flagged by ``treated``).

    Without ``sets`` only the before values are filled. With ``sets`` (an
    iterable of matched sets over ``ids``) the after value uses matching
    weights and the same pre-match denominator.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(treated, dtype=bool)
    if z.all() or not z.any():
        raise ValueError("both arms must be present to compute standardized differences")
    w = None
    if sets is not None:
        w = set_weights(list(sets), list(ids))
        if not (w[z] > 0).any() or not (w[~z] > 0).any():
            raise ValueError("the matching covers no subject of one arm")
    rows = []
    for k, name in enumerate(names):
        s = _pooled_sd(X[:, k], z)
        before, deg = std_diff(X[:, k], z, scale=s)
        after = math.nan
        if w is not None:
            after, deg_after = std_diff(X[:, k], z, weights=w, scale=s)
            deg = deg or deg_after
        rows.append(BalanceRow(name, before, after, deg))
    return rows


def study_balance(study, treated_arm, control_arms, matchings=None, names=None):
    """Balance of a treated arm against one or more control arms of a StudyData."""
    if isinstance(control_arms, str):
        control_arms = (control_arms,)
    ids = study.arm_ids(treated_arm, *control_arms)
    rows = study.rows(ids)
    z = study.arms[rows] == str(getattr(treated_arm, "value", treated_arm))
    cols = list(range(len(study.covariate_names)))
    if names is not None:
        cols = [study.covariate_names.index(n) for n in names]
    sets = None if matchings is None else [ms for m in matchings for ms in m.sets]
    return standardized_differences(study.X[rows][:, cols],
                                    [study.covariate_names[c] for c in cols], z, sets, ids)


def format_balance_table(rows, delimiter="\t"):
    lines = [delimiter.join(["covariate", "std_diff_before", "std_diff_after"])]
    for r in rows:
        after = "" if not math.isfinite(r.std_diff_after) else f"{r.std_diff_after:.4f}"
        before = "degenerate" if r.degenerate else f"{r.std_diff_before:.4f}"
        lines.append(delimiter.join([r.covariate, before, after]))
    return "\n".join(lines) + "\n"


def love_plot_svg(rows, title="Standardized differences"):
    """Render a Love plot as SVG text.

    Covariates run down the y-axis in order of decreasing |before|; filled
    circles are before matching, open diamonds after.
    """
    rows = [r for r in rows if not r.degenerate]
    if not rows:
        raise ValueError("a Love plot needs at least one covariate")
    rows = sorted(rows, key=lambda r: (-abs(r.std_diff_before), r.covariate))
    has_after = any(math.isfinite(r.std_diff_after) for r in rows)
    values = [abs(r.std_diff_before) for r in rows]
    values += [abs(r.std_diff_after) for r in rows if math.isfinite(r.std_diff_after)]
    half = max(0.2, math.ceil(max(values) * 10 + 1e-9) / 10)

    left, right, top, row_h = 150, 30, 50, 18
    plot_w = 400
    height = top + row_h * len(rows) + 50
    width = left + plot_w + right

    def xpos(v):
        return left + (v + half) / (2 * half) * plot_w

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    bottom = top + row_h * len(rows)
    for v in REFERENCE_LINES:
        dash = "" if v == 0 else ' stroke-dasharray="4,3"'
        out.append(f'<line class="ref" x1="{xpos(v):.2f}" y1="{top - 5}" x2="{xpos(v):.2f}" '
                   f'y2="{bottom}" stroke="#888"{dash}/>')
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + plot_w}" y2="{bottom}" stroke="#000"/>')
    ticks = np.linspace(-half, half, 5)
    for v in ticks:
        out.append(f'<text x="{xpos(v):.2f}" y="{bottom + 15}" text-anchor="middle">{v:.2f}</text>')
    out.append(f'<text x="{left + plot_w / 2:.1f}" y="{bottom + 35}" text-anchor="middle">'
               'standardized difference</text>')
    for k, r in enumerate(rows):
        y = top + row_h * k + row_h / 2
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{escape(r.covariate)}</text>')
        out.append(f'<circle class="before" cx="{xpos(r.std_diff_before):.2f}" cy="{y:.1f}" r="4" '
                   'fill="#1f4e9c"/>')
        if math.isfinite(r.std_diff_after):
            x = xpos(r.std_diff_after)
            out.append(f'<path class="after" d="M{x:.2f},{y - 5:.1f} L{x + 5:.2f},{y:.1f} '
                       f'L{x:.2f},{y + 5:.1f} L{x - 5:.2f},{y:.1f} Z" fill="none" stroke="#c0392b"/>')
    legend_y = top - 22
    out.append(f'<circle cx="{left + 10}" cy="{legend_y}" r="4" fill="#1f4e9c"/>')
    out.append(f'<text x="{left + 18}" y="{legend_y + 4}">before</text>')
    if has_after:
        lx = left + 80
        out.append(f'<path d="M{lx},{legend_y - 5} L{lx + 5},{legend_y} L{lx},{legend_y + 5} '
                   f'L{lx - 5},{legend_y} Z" fill="none" stroke="#c0392b"/>')
        out.append(f'<text x="{lx + 9}" y="{legend_y + 4}">after</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_love_plot(rows, path, title="Standardized differences"):
    svg = love_plot_svg(rows, title)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return path
