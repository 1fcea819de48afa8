"""Dependency-free SVG rendering of run directories.

A run directory written by ``simulate`` holds ``geometry.json`` with the
ordered polygon and the exit segment, next to one CSV per trajectory.
After ``invariant`` it also holds the cell grid ``invariant.csv``.  Each
noise level becomes one SVG with the polygon in red and the trajectories in
blue; the exit face is highlighted and the invariant set is drawn as a
green closed outline.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import MissingData

TRAJ_PATTERN = re.compile(r"traj_s(?P<sigma>[^_]+)_x(?P<x0>\d+)_r(?P<run>\d+)\.csv$")
WIDTH = 480.0
MARGIN = 20.0


def ordered_polygon(vertices) -> np.ndarray:
    """Vertices of a convex polygon in counter-clockwise order."""
    V = np.asarray(vertices, dtype=float)
    c = V.mean(axis=0)
    ang = np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0])
    return V[np.argsort(ang)]


def read_positions(path) -> np.ndarray:
    """Planar positions from a trajectory CSV (``x0, x2`` for four states, else ``x0, x1``)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise MissingData(f"{path} has no samples")
    header = rows[0]
    nx = sum(1 for h in header if re.fullmatch(r"x\d+", h))
    cols = ("x0", "x2") if nx == 4 else ("x0", "x1")
    idx = [header.index(c) for c in cols]
    return np.array([[float(r[i]) for i in idx] for r in rows[1:]])


def read_invariant(path):
    """``(xs, ys, member)`` grid from an invariant-set CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xs = sorted({float(r["x"]) for r in rows})
    ys = sorted({float(r["y"]) for r in rows})
    xi = {v: i for i, v in enumerate(xs)}
    yi = {v: j for j, v in enumerate(ys)}
    member = np.zeros((len(ys), len(xs)), dtype=bool)
    for r in rows:
        member[yi[float(r["y"])], xi[float(r["x"])]] = r["member"] == "1"
    return np.array(xs), np.array(ys), member


def cell_outline(member: np.ndarray) -> list[list[tuple[int, int]]]:
    """Boundary of a union of grid cells as closed loops of corner indices.

    Cell ``(j, i)`` spans corners ``(i, j)`` to ``(i+1, j+1)``.  Every cell
    edge not shared with another member cell is a boundary edge; edges are
    oriented with the region on their left and chained into loops.
    """
    ny, nx = member.shape
    nxt: dict = {}

    def on(j, i):
        return 0 <= j < ny and 0 <= i < nx and member[j, i]

    for j in range(ny):
        for i in range(nx):
            if not member[j, i]:
                continue
            if not on(j - 1, i):
                nxt.setdefault((i, j), []).append((i + 1, j))
            if not on(j, i + 1):
                nxt.setdefault((i + 1, j), []).append((i + 1, j + 1))
            if not on(j + 1, i):
                nxt.setdefault((i + 1, j + 1), []).append((i, j + 1))
            if not on(j, i - 1):
                nxt.setdefault((i, j + 1), []).append((i, j))
    loops = []
    while nxt:
        start = next(iter(nxt))
        loop = [start]
        cur = start
        while True:
            outs = nxt[cur]
            step = outs.pop()
            if not outs:
                del nxt[cur]
            if step == start:
                break
            loop.append(step)
            cur = step
        loops.append(_drop_collinear(loop))
    return loops


def _drop_collinear(loop):
    out = []
    n = len(loop)
    for k in range(n):
        a, b, c = loop[k - 1], loop[k], loop[(k + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) != (b[1] - a[1]) * (c[0] - b[0]):
            out.append(b)
    return out or loop


class _Frame:
    """Affine map from world coordinates to SVG pixels (y pointing up)."""

    def __init__(self, points: np.ndarray):
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        self.scale = (WIDTH - 2 * MARGIN) / span.max()
        self.lo = lo
        self.height = span[1] * self.scale + 2 * MARGIN
        self.width = span[0] * self.scale + 2 * MARGIN

    def __call__(self, p) -> tuple[float, float]:
        x = MARGIN + (p[0] - self.lo[0]) * self.scale
        y = self.height - MARGIN - (p[1] - self.lo[1]) * self.scale
        return round(float(x), 3), round(float(y), 3)

    def points(self, pts: Iterable) -> str:
        return " ".join(f"{x},{y}" for x, y in (self(p) for p in pts))


def render_svg(
    polygon,
    trajectories: Iterable[np.ndarray] = (),
    exit_segment: Optional[np.ndarray] = None,
    invariant=None,
    title: str = "",
) -> str:
    """SVG document for one panel; ``invariant`` is ``(xs, ys, member)``."""
    poly = ordered_polygon(polygon)
    trajectories = [np.asarray(t, dtype=float) for t in trajectories]
    frame = _Frame(np.vstack([poly] + trajectories))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width:.0f}" '
        f'height="{frame.height:.0f}" viewBox="0 0 {frame.width:.3f} {frame.height:.3f}">',
        f"<title>{title}</title>",
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    if invariant is not None:
        xs, ys, member = invariant
        dx, dy = xs[1] - xs[0], ys[1] - ys[0]
        x_edges = np.append(xs - dx / 2, xs[-1] + dx / 2)
        y_edges = np.append(ys - dy / 2, ys[-1] + dy / 2)
        d = " ".join(
            "M " + " L ".join("{},{}".format(*frame((x_edges[i], y_edges[j]))) for i, j in loop) + " Z"
            for loop in cell_outline(member)
        )
        if d:
            parts.append(f'<path class="invariant" d="{d}" fill="green" fill-opacity="0.25" '
                         'fill-rule="evenodd" stroke="green" stroke-width="1.5"/>')
    parts.append(f'<polygon class="boundary" points="{frame.points(poly)}" fill="none" '
                 'stroke="red" stroke-width="2"/>')
    if exit_segment is not None:
        (x1, y1), (x2, y2) = frame(exit_segment[0]), frame(exit_segment[1])
        parts.append(f'<line class="exit" x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" '
                     'stroke="orange" stroke-width="5"/>')
    for t in trajectories:
        parts.append(f'<polyline class="trajectory" points="{frame.points(t)}" fill="none" '
                     'stroke="blue" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_run_dir(out_dir) -> list[Path]:
    """Write one ``plot_s{sigma}.svg`` per noise level found in ``out_dir``."""
    out_dir = Path(out_dir)
    geo_path = out_dir / "geometry.json"
    groups: dict = {}
    for p in sorted(out_dir.glob("traj_*.csv")):
        m = TRAJ_PATTERN.search(p.name)
        if m:
            groups.setdefault(m["sigma"], []).append(p)
    if not geo_path.exists() or not groups:
        raise MissingData(f"{out_dir} has no trajectory CSVs with geometry.json")
    geo = json.loads(geo_path.read_text())
    exit_seg = np.asarray(geo["exit_segment"]) if geo.get("exit_segment") else None
    inv_path = out_dir / "invariant.csv"
    invariant = read_invariant(inv_path) if inv_path.exists() else None
    written = []
    for sigma, paths in sorted(groups.items(), key=lambda kv: float(kv[0])):
        svg = render_svg(
            geo["polygon"],
            [read_positions(p) for p in paths],
            exit_segment=exit_seg,
            invariant=invariant,
            title=f"{geo.get('task', '')} sigma={sigma}",
        )
        target = out_dir / f"plot_s{sigma}.svg"
        target.write_text(svg)
        written.append(target)
    return written
