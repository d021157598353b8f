"""Facility geometry: typed locations, entrances and the waypoint walk graph.

Layouts are loaded from a JSON document::

    {
      "schema_version": 1,
      "walk_speed": 1.4,
      "bounds": {"x_min": 0, "x_max": 60, "y_min": 0, "y_max": 30},
      "waypoints": [{"id": "c1", "x": 5, "y": 10}, ...],
      "edges": [{"a": "c1", "b": "c2", "length": 10.0}, ...],
      "locations": [{"id": "O1", "category": "OFFICE", "x": 5, "y": 26,
                     "waypoint": "o1"}, ...]
    }

Edge ``length`` is optional and defaults to the Euclidean distance between
the two waypoints.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath

SCHEMA_VERSION = 1
DEFAULT_WALK_SPEED = 1.4


class LayoutError(ValueError):
    """Raised when a layout config is malformed or violates an invariant."""


class SpaceCategory(enum.Enum):
    OFFICE = "OFFICE"
    LAB = "LAB"
    STORAGE = "STORAGE"
    MAINTENANCE = "MAINTENANCE"
    BREAK_ROOM = "BREAK_ROOM"
    ENTRANCE = "ENTRANCE"


WORK_CATEGORIES = (
    SpaceCategory.OFFICE,
    SpaceCategory.LAB,
    SpaceCategory.STORAGE,
    SpaceCategory.MAINTENANCE,
)


@dataclass(frozen=True)
class Location:
    id: str
    category: SpaceCategory
    position: tuple[float, float]
    attached_waypoint: str


@dataclass(frozen=True)
class Waypoint:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class Path:
    waypoints: tuple[str, ...]
    total_length: float


@dataclass(eq=False)
class FacilityLayout:
    locations: list[Location]
    waypoints: list[Waypoint]
    edges: list[tuple[str, str, float]]
    bounds: tuple[float, float, float, float]
    walk_speed: float = DEFAULT_WALK_SPEED
    _loc_index: dict[str, Location] = field(init=False, repr=False)
    _wp_index: dict[str, Waypoint] = field(init=False, repr=False)
    _adj: dict[str, list[tuple[str, float]]] = field(init=False, repr=False)
    _edge_len: dict[tuple[str, str], float] = field(init=False, repr=False)
    _path_cache: dict[tuple[str, str], Path] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._loc_index = {}
        for loc in self.locations:
            if loc.id in self._loc_index:
                raise LayoutError(f"duplicate location id {loc.id!r}")
            self._loc_index[loc.id] = loc
        self._wp_index = {}
        for wp in self.waypoints:
            if wp.id in self._wp_index:
                raise LayoutError(f"duplicate waypoint id {wp.id!r}")
            self._wp_index[wp.id] = wp
        self._adj = {wp.id: [] for wp in self.waypoints}
        self._edge_len = {}
        for a, b, length in self.edges:
            for end in (a, b):
                if end not in self._wp_index:
                    raise LayoutError(f"edge references unknown waypoint {end!r}")
            if not length > 0 or not math.isfinite(length):
                raise LayoutError(f"edge {a}-{b} must have positive length, got {length}")
            if a == b:
                raise LayoutError(f"self-loop edge at {a!r}")
            self._adj[a].append((b, length))
            self._adj[b].append((a, length))
            # parallel edges: keep the shortest
            key = (a, b) if a < b else (b, a)
            self._edge_len[key] = min(length, self._edge_len.get(key, math.inf))
        for nbrs in self._adj.values():
            nbrs.sort()
        self._path_cache = {}
        self._validate()

    def _validate(self) -> None:
        x_min, x_max, y_min, y_max = self.bounds
        if not (x_min < x_max and y_min < y_max):
            raise LayoutError("bounds must be strictly ordered (x_min < x_max, y_min < y_max)")
        if not self.walk_speed > 0:
            raise LayoutError("walk_speed must be positive")
        counts = {c: 0 for c in SpaceCategory}
        for loc in self.locations:
            counts[loc.category] += 1
            x, y = loc.position
            if not (x_min <= x <= x_max and y_min <= y <= y_max):
                raise LayoutError(f"location {loc.id!r} lies outside layout bounds")
            if loc.attached_waypoint not in self._wp_index:
                raise LayoutError(
                    f"location {loc.id!r} attached to unknown waypoint {loc.attached_waypoint!r}"
                )
        if counts[SpaceCategory.ENTRANCE] < 2:
            raise LayoutError("layout requires ≥2 entrances")
        for cat in SpaceCategory:
            if cat is not SpaceCategory.ENTRANCE and counts[cat] < 1:
                raise LayoutError(f"layout requires ≥1 location of category {cat.value}")
        for wp in self.waypoints:
            if not (x_min <= wp.x <= x_max and y_min <= wp.y <= y_max):
                raise LayoutError(f"waypoint {wp.id!r} lies outside layout bounds")
        # connectivity from the first entrance covers "every entrance reaches every location"
        start = self.entrances()[0].attached_waypoint
        seen = {start}
        stack = [start]
        while stack:
            node = stack.pop()
            for nbr, _ in self._adj[node]:
                if nbr not in seen:
                    seen.add(nbr)
                    stack.append(nbr)
        unreachable = sorted(
            loc.id for loc in self.locations if loc.attached_waypoint not in seen
        )
        if unreachable:
            raise LayoutError(f"walk graph disconnected: cannot reach {', '.join(unreachable)}")

    def location(self, loc_id: str) -> Location:
        try:
            return self._loc_index[loc_id]
        except KeyError:
            raise KeyError(f"unknown location id {loc_id!r}") from None

    def waypoint(self, wp_id: str) -> Waypoint:
        try:
            return self._wp_index[wp_id]
        except KeyError:
            raise KeyError(f"unknown waypoint id {wp_id!r}") from None

    def edge_length(self, a: str, b: str) -> float:
        return self._edge_len[(a, b) if a < b else (b, a)]

    def neighbors(self, wp_id: str) -> list[tuple[str, float]]:
        return self._adj[wp_id]

    def by_category(self, category: SpaceCategory) -> list[Location]:
        return [loc for loc in self.locations if loc.category is category]

    def entrances(self) -> list[Location]:
        return self.by_category(SpaceCategory.ENTRANCE)

    def normalize(self, x: float, y: float) -> tuple[float, float]:
        x_min, x_max, y_min, y_max = self.bounds
        return (x - x_min) / (x_max - x_min), (y - y_min) / (y_max - y_min)

    def waypoint_path(self, src: str, dst: str) -> Path:
        """Shortest path between two waypoints (cached)."""
        key = (src, dst)
        cached = self._path_cache.get(key)
        if cached is None:
            cached = _dijkstra(self, src, dst)
            self._path_cache[key] = cached
        return cached

    def nearest(self, from_loc: str, candidates: list[Location]) -> Location:
        """Closest candidate by walking distance, ties broken by id."""
        origin = self.location(from_loc).attached_waypoint
        return min(
            candidates,
            key=lambda c: (self.waypoint_path(origin, c.attached_waypoint).total_length, c.id),
        )


def _dijkstra(layout: FacilityLayout, src: str, dst: str) -> Path:
    if src not in layout._wp_index:
        raise KeyError(f"unknown waypoint id {src!r}")
    if dst not in layout._wp_index:
        raise KeyError(f"unknown waypoint id {dst!r}")
    # labels are (distance, waypoint sequence); tuple order gives the
    # lexicographic tie-break among equal-length paths
    best: dict[str, tuple[float, tuple[str, ...]]] = {src: (0.0, (src,))}
    heap: list[tuple[float, tuple[str, ...]]] = [(0.0, (src,))]
    done: set[str] = set()
    while heap:
        dist, seq = heapq.heappop(heap)
        node = seq[-1]
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return Path(seq, dist)
        for nbr, length in layout._adj[node]:
            if nbr in done:
                continue
            cand = (dist + length, seq + (nbr,))
            if nbr not in best or cand < best[nbr]:
                best[nbr] = cand
                heapq.heappush(heap, cand)
    raise LayoutError(f"no path from {src!r} to {dst!r}")


def shortest_path(layout: FacilityLayout, src: str, dst: str) -> Path:
    """Minimum-length walk between two locations over the waypoint graph."""
    a = layout.location(src).attached_waypoint
    b = layout.location(dst).attached_waypoint
    return layout.waypoint_path(a, b)


def _require(doc: dict, key: str):
    if key not in doc:
        raise LayoutError(f"layout config missing field {key!r}")
    return doc[key]


def layout_from_dict(doc: dict) -> FacilityLayout:
    if not isinstance(doc, dict):
        raise LayoutError("layout config must be a JSON object")
    version = _require(doc, "schema_version")
    if version != SCHEMA_VERSION:
        raise LayoutError(f"unsupported layout schema_version {version!r}")
    try:
        waypoints = [
            Waypoint(str(w["id"]), float(w["x"]), float(w["y"]))
            for w in _require(doc, "waypoints")
        ]
        wp_pos = {w.id: (w.x, w.y) for w in waypoints}
        edges = []
        for e in _require(doc, "edges"):
            a, b = str(e["a"]), str(e["b"])
            if "length" in e:
                length = float(e["length"])
            else:
                if a not in wp_pos or b not in wp_pos:
                    raise LayoutError(f"edge references unknown waypoint in {a}-{b}")
                length = math.dist(wp_pos[a], wp_pos[b])
            edges.append((a, b, length))
        locations = [
            Location(
                id=str(loc["id"]),
                category=SpaceCategory(loc["category"]),
                position=(float(loc["x"]), float(loc["y"])),
                attached_waypoint=str(loc["waypoint"]),
            )
            for loc in _require(doc, "locations")
        ]
        b = _require(doc, "bounds")
        bounds = (float(b["x_min"]), float(b["x_max"]), float(b["y_min"]), float(b["y_max"]))
        walk_speed = float(doc.get("walk_speed", DEFAULT_WALK_SPEED))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, LayoutError):
            raise
        raise LayoutError(f"malformed layout config: {exc}") from exc
    return FacilityLayout(locations, waypoints, edges, bounds, walk_speed)


def load_layout(config_text: str) -> FacilityLayout:
    """Parse and validate a JSON layout document."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"layout config parse error: {exc}") from exc
    return layout_from_dict(doc)


def load_layout_file(path: str | FsPath) -> FacilityLayout:
    return load_layout(FsPath(path).read_text())


def default_layout() -> FacilityLayout:
    """The bundled ``default_facility`` fixture (20 locations)."""
    text = resources.files("poltwin.data").joinpath("default_facility.json").read_text()
    return load_layout(text)


def default_layout_text() -> str:
    return resources.files("poltwin.data").joinpath("default_facility.json").read_text()
