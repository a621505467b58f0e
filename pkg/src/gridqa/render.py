"""Top-down maps of episodes as ASCII text and SVG.

Walls, rooms, objects, the target (star), one or more trajectories, and
the spawn / stop marks.  Several trajectories can share one map so that a
standard and a calibrated run of the same question can be compared.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .grid_env import GridEnvironment

ROOM_FILLS = ("#f3e9d2", "#dbe9f4", "#e3f1df", "#f4dde4", "#ece3f4", "#f6f1c7", "#dff2f1", "#f2e0cc")
TRACE_COLORS = ("#e0b000", "#d62728", "#1f77b4", "#2ca02c")
CSS_COLORS = {"white": "#f8f8f8", "yellow": "#e6c800"}
HEADING_GLYPH = "^>v<"


def render_ascii(env: GridEnvironment, trajectories=(), target_id: int | None = None) -> str:
    """Characters: ``#`` wall, ``.`` free, ``o`` object, ``m`` marker, ``*`` target,
    ``1``..``9`` visited cells of trajectory i, ``S`` spawn, ``E`` stop and ``@``
    where spawn and stop coincide."""
    grid = [["." if f else "#" for f in row] for row in env.free.tolist()]
    for i, traj in enumerate(trajectories):
        mark = str(i + 1)[-1]
        for s in traj.states:
            grid[s.y][s.x] = mark
    for o in env.objects:
        x, y = o.position
        grid[y][x] = "m" if o.is_marker else "o"
    if target_id is not None:
        x, y = env.object_by_id(target_id).position
        grid[y][x] = "*"
    for traj in trajectories:
        a, b = traj.spawn.pos, traj.final_state.pos
        if a == b:
            grid[a[1]][a[0]] = "@"
        else:
            grid[a[1]][a[0]] = "S"
            grid[b[1]][b[0]] = "E"
    lines = ["".join(row) for row in grid]
    for i, traj in enumerate(trajectories):
        s, e = traj.spawn, traj.final_state
        lines.append(
            f"[{i + 1}] spawn ({s.x},{s.y}){HEADING_GLYPH[s.heading]} stop ({e.x},{e.y}){HEADING_GLYPH[e.heading]} "
            f"steps {len(traj.steps)} ({traj.terminated_by})"
        )
    return "\n".join(lines) + "\n"


def _star(cx, cy, r):
    pts = []
    for i in range(10):
        ang = -math.pi / 2 + i * math.pi / 5
        rad = r if i % 2 == 0 else r * 0.45
        pts.append(f"{cx + rad * math.cos(ang):.2f},{cy + rad * math.sin(ang):.2f}")
    return " ".join(pts)


def render_svg(env: GridEnvironment, trajectories=(), target_id: int | None = None, labels=None,
               cell: int = 20, title: str | None = None) -> str:
    w, h = env.width * cell, env.height * cell
    top = 24 if title else 0
    legend = 18 * len(trajectories)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + top + legend}" '
           f'viewBox="0 0 {w} {h + top + legend}" font-family="monospace" font-size="12">']
    if title:
        out.append(f'<text x="4" y="16">{escape(title)}</text>')
    out.append(f'<g transform="translate(0,{top})">')
    free = env.free.tolist()
    rooms = env.room_map.tolist()
    for y in range(env.height):
        for x in range(env.width):
            fill = "#333333" if not free[y][x] else ROOM_FILLS[rooms[y][x] % len(ROOM_FILLS)]
            out.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
    for rid, label in env.rooms:
        cells = [(x, y) for y in range(env.height) for x in range(env.width) if rooms[y][x] == rid]
        if cells:
            cx = sum(c[0] for c in cells) / len(cells)
            cy = sum(c[1] for c in cells) / len(cells)
            out.append(f'<text x="{(cx + 0.5) * cell:.1f}" y="{(cy + 0.5) * cell:.1f}" fill="#888888" '
                       f'text-anchor="middle">{escape(label)}</text>')
    r = cell * 0.35
    for o in env.objects:
        x, y = o.position
        color = CSS_COLORS.get(o.color_token, o.color_token)
        cx, cy = (x + 0.5) * cell, (y + 0.5) * cell
        out.append(f'<g><title>{escape(o.color_token)} {escape(o.type_token)}</title>')
        if o.object_id == target_id:
            out.append(f'<polygon points="{_star(cx, cy, cell * 0.5)}" fill="{color}" stroke="black"/>')
        elif o.is_marker:
            out.append(f'<rect x="{cx - r:.1f}" y="{cy - r:.1f}" width="{2 * r:.1f}" height="{2 * r:.1f}" '
                       f'fill="{color}" stroke="black"/>')
        else:
            out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{r:.1f}" fill="{color}" stroke="black"/>')
        out.append("</g>")
    for i, traj in enumerate(trajectories):
        color = TRACE_COLORS[i % len(TRACE_COLORS)]
        pts = " ".join(f"{(s.x + 0.5) * cell:.1f},{(s.y + 0.5) * cell:.1f}" for s in traj.states)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="3" '
                   f'stroke-linejoin="round" opacity="0.85"/>')
        sx, sy = (traj.spawn.x + 0.5) * cell, (traj.spawn.y + 0.5) * cell
        ex, ey = (traj.final_state.x + 0.5) * cell, (traj.final_state.y + 0.5) * cell
        out.append(f'<circle class="spawn" cx="{sx:.1f}" cy="{sy:.1f}" r="{cell * 0.25:.1f}" fill="{color}" '
                   f'stroke="black"/>')
        d = cell * 0.25
        out.append(f'<path class="stop" d="M{ex - d:.1f},{ey - d:.1f} L{ex + d:.1f},{ey + d:.1f} '
                   f'M{ex - d:.1f},{ey + d:.1f} L{ex + d:.1f},{ey - d:.1f}" stroke="black" stroke-width="3"/>')
    out.append("</g>")
    for i, traj in enumerate(trajectories):
        color = TRACE_COLORS[i % len(TRACE_COLORS)]
        name = labels[i] if labels else f"trajectory {i + 1}"
        y = top + h + 14 + 18 * i
        out.append(f'<line x1="4" y1="{y - 4}" x2="24" y2="{y - 4}" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="30" y="{y}">{escape(name)}: {len(traj.steps)} steps, {traj.terminated_by}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
