"""Constant-speed walks along the waypoint graph, sampled at integer-second ticks."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

from poltwin.facility import FacilityLayout


@dataclass(frozen=True)
class Walk:
    """A polyline walk started at ``start_time``.

    ``nodes[i]`` is the waypoint at ``points[i]``; the first node may be
    ``None`` when a walk starts mid-edge (rerouting).
    """

    points: tuple[tuple[float, float], ...]
    nodes: tuple[str | None, ...]
    cum: tuple[float, ...]
    start_time: int
    speed: float

    @property
    def length(self) -> float:
        return self.cum[-1]

    @property
    def arrival(self) -> int:
        return self.start_time + ticks_for(self.length, self.speed)

    @property
    def destination(self) -> str:
        return self.nodes[-1]

    def distance_at(self, t: float) -> float:
        return min(max(t - self.start_time, 0) * self.speed, self.length)

    def position(self, t: float) -> tuple[float, float]:
        d = self.distance_at(t)
        if d >= self.length:
            return self.points[-1]
        i = bisect.bisect_right(self.cum, d) - 1
        seg = self.cum[i + 1] - self.cum[i]
        f = (d - self.cum[i]) / seg if seg > 0 else 0.0
        (x0, y0), (x1, y1) = self.points[i], self.points[i + 1]
        return x0 + f * (x1 - x0), y0 + f * (y1 - y0)


def ticks_for(length: float, speed: float) -> int:
    return int(math.ceil(length / speed - 1e-9)) if length > 0 else 0


def walk_between(layout: FacilityLayout, src_wp: str, dst_wp: str, start_time: int) -> Walk:
    path = layout.waypoint_path(src_wp, dst_wp)
    return _walk_from_nodes(layout, path.waypoints, start_time)


def _walk_from_nodes(layout, nodes, start_time, head=None) -> Walk:
    points = []
    cum = []
    all_nodes: list[str | None] = []
    total = 0.0
    if head is not None:
        (pos, partial) = head
        points.append(pos)
        cum.append(0.0)
        all_nodes.append(None)
        total = partial
    prev = None
    for n in nodes:
        wp = layout.waypoint(n)
        if prev is not None:
            total += layout.edge_length(prev, n)
        points.append((wp.x, wp.y))
        cum.append(total)
        all_nodes.append(n)
        prev = n
    return Walk(tuple(points), tuple(all_nodes), tuple(cum), start_time, layout.walk_speed)


def reroute(layout: FacilityLayout, walk: Walk, now: int, dst_wp: str) -> Walk:
    """New walk from wherever ``walk`` has reached at ``now`` to ``dst_wp``.

    The walker may turn back along its current edge; both directions are
    costed and the shorter chosen (ties go forward).
    """
    d = walk.distance_at(now)
    if d >= walk.length:
        return walk_between(layout, walk.destination, dst_wp, now)
    i = bisect.bisect_right(walk.cum, d) - 1
    back, ahead = walk.nodes[i], walk.nodes[i + 1]
    pos = walk.position(now)
    if d == walk.cum[i] and back is not None:
        return walk_between(layout, back, dst_wp, now)
    to_ahead = walk.cum[i + 1] - d
    forward = layout.waypoint_path(ahead, dst_wp)
    options = [(to_ahead + forward.total_length, 0, forward.waypoints, to_ahead)]
    if back is not None:
        to_back = d - walk.cum[i]
        backward = layout.waypoint_path(back, dst_wp)
        options.append((to_back + backward.total_length, 1, backward.waypoints, to_back))
    _, _, nodes, partial = min(options)
    return _walk_from_nodes(layout, nodes, now, head=(pos, partial))
