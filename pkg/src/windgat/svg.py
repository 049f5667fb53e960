"""Static SVG panels of attention weights over a farm layout.

One panel per (site, head) for the ``edge``, ``e2v`` and ``node`` sites.
The target turbine is red and the turbines it attends to are blue.  Arrow
width follows the edge and e2v weights, circle radius the node weights.
Global sites have no spatial target and are left to the JSON export.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .train import AttentionOverlay

PANEL_SITES = ("e2v", "edge", "node")
PANEL = 320
MARGIN = 30
LABEL_MIN = 0.01


def pick_target(overlay: AttentionOverlay) -> int:
    """The turbine with the most upstream senders (lowest index on ties)."""
    n = len(overlay.positions)
    counts = np.bincount(overlay.receivers, minlength=n) if len(overlay.receivers) else np.zeros(n, int)
    return int(np.argmax(counts))


def _edge_target(overlay: AttentionOverlay, target: int) -> tuple[int, int] | None:
    """Incoming edge of ``target`` whose sender has the most incoming edges itself."""
    inc = [(int(s), target) for s, r in zip(overlay.senders, overlay.receivers) if r == target]
    if not inc:
        return None
    fan_in = {s: int(np.sum(overlay.receivers == s)) for s, _ in inc}
    return max(inc, key=lambda e: (fan_in[e[0]], -e[0]))


class _Frame:
    def __init__(self, positions: np.ndarray, x0: float, y0: float):
        lo, hi = positions.min(0), positions.max(0)
        span = max(float((hi - lo).max()), 1.0)
        self.lo, self.scale = lo, (PANEL - 2 * MARGIN) / span
        self.x0, self.y0 = x0, y0

    def __call__(self, p) -> tuple[float, float]:
        x = self.x0 + MARGIN + (p[0] - self.lo[0]) * self.scale
        y = self.y0 + PANEL - MARGIN - (p[1] - self.lo[1]) * self.scale  # north is up
        return round(x, 2), round(y, 2)


def _arrow(a, b, w: float, label: bool) -> list[str]:
    out = [
        f'<line x1="{a[0]}" y1="{a[1]}" x2="{b[0]}" y2="{b[1]}" stroke="#1f5fbf" '
        f'stroke-width="{0.5 + 6 * w:.3f}" marker-end="url(#head)"/>'
    ]
    if label:
        mx, my = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
        out.append(f'<text x="{mx:.2f}" y="{my - 3:.2f}" font-size="9">{w:.2f}</text>')
    return out


def panel(overlay: AttentionOverlay, site: str, head: int, target: int, x0: float = 0.0, y0: float = 0.0) -> str:
    pos = overlay.positions
    fr = _Frame(pos, x0, y0)
    items = overlay.arrows(site, head)
    body = [f'<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="white" stroke="#999"/>']
    body.append(f'<text x="{x0 + 6}" y="{y0 + 14}" font-size="11">{escape(site)} head {head}</text>')
    radius = {k: 3.0 for k in range(len(pos))}
    colour = {k: "#bbbbbb" for k in range(len(pos))}
    colour[target] = "#d62728"
    if site == "e2v":
        for it in items:
            if it["target"] == target:
                s, r = it["source_edge"]
                colour[s] = "#1f77b4"
                body += _arrow(fr(pos[s]), fr(pos[r]), it["weight"], it["weight"] >= LABEL_MIN)
    elif site == "edge":
        tgt = _edge_target(overlay, target)
        if tgt is not None:
            body.append(
                f'<line x1="{fr(pos[tgt[0]])[0]}" y1="{fr(pos[tgt[0]])[1]}" x2="{fr(pos[tgt[1]])[0]}" '
                f'y2="{fr(pos[tgt[1]])[1]}" stroke="#d62728" stroke-width="2" stroke-dasharray="4 2"/>'
            )
            for it in items:
                if tuple(it["target_edge"]) == tgt:
                    s, r = it["source_edge"]
                    colour[s] = "#1f77b4"
                    body += _arrow(fr(pos[s]), fr(pos[r]), it["weight"], it["weight"] >= LABEL_MIN)
    elif site == "node":
        for it in items:
            if it["target"] == target:
                s = it["source"]
                colour[s] = "#1f77b4"
                radius[s] = 3.0 + 12.0 * it["weight"]
                if it["weight"] >= LABEL_MIN:
                    x, y = fr(pos[s])
                    body.append(f'<text x="{x + radius[s] + 2:.2f}" y="{y:.2f}" font-size="9">{it["weight"]:.2f}</text>')
    else:
        raise ValueError(f"site {site!r} has no spatial panel")
    for k in range(len(pos)):
        x, y = fr(pos[k])
        body.append(f'<circle cx="{x}" cy="{y}" r="{radius[k]:.3f}" fill="{colour[k]}" stroke="black" stroke-width="0.5"/>')
    return f'<g class="panel" id="{site}-head{head}">' + "".join(body) + "</g>"


def attention_svg(overlay: AttentionOverlay, target: int | None = None, note: str = "") -> tuple[str, int]:
    """All panels in a grid (rows are sites, columns heads); returns (svg, panel count)."""
    target = pick_target(overlay) if target is None else target
    if not 0 <= target < len(overlay.positions):
        raise ValueError(f"target turbine {target} out of range")
    sites = [s for s in PANEL_SITES if s in overlay.weights.weights]
    n_heads = max((len(overlay.weights.weights[s]) for s in sites), default=0)
    width, height = max(n_heads, 1) * PANEL, max(len(sites), 1) * PANEL
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<defs><marker id=\"head\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"5\" "
        "markerHeight=\"5\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#1f5fbf\"/></marker></defs>",
    ]
    if note:
        parts.append(f"<!-- {escape(note)} -->")
    count = 0
    for row, site in enumerate(sites):
        for h in range(len(overlay.weights.weights[site])):
            parts.append(panel(overlay, site, h, target, h * PANEL, row * PANEL))
            count += 1
    parts.append("</svg>")
    return "\n".join(parts) + "\n", count
