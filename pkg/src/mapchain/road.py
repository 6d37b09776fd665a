"""Ground-truth road network: directed segments with geometry and attributes.

One RoadSegment per travel direction; the adjacency map answers "which
segments can be entered when leaving segment s at its end node". All
coordinates are planar, in meters.
"""

from __future__ import annotations

import math
import random
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

Point = tuple[float, float]

LENGTH_REL_TOL = 1e-6


class NetworkError(ValueError):
    """Raised when a set of segments cannot form a valid network."""


class UnknownSegmentError(KeyError):
    """Raised when a segment id is not part of the network."""


class RouteType(IntEnum):
    MOTORWAY = 0
    TRUNK = 1
    URBAN = 2
    LOCAL = 3


def polyline_length(points: Iterable[Point]) -> float:
    pts = list(points)
    return sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))


@dataclass(frozen=True)
class RoadSegment:
    """A directed road segment with polyline geometry and attributes."""

    seg_id: int
    from_node: int
    to_node: int
    length: float
    speed_limit: int
    lane_count: int
    route_type: RouteType
    is_tunnel: bool
    is_bridge: bool
    is_emergency_lane: bool
    geometry: tuple[Point, ...]

    def __post_init__(self) -> None:
        if self.from_node == self.to_node:
            raise ValueError(f"segment {self.seg_id}: from_node equals to_node")
        if self.lane_count < 1:
            raise ValueError(f"segment {self.seg_id}: lane_count must be >= 1")
        if self.speed_limit <= 0:
            raise ValueError(f"segment {self.seg_id}: speed_limit must be > 0")
        if self.length <= 0:
            raise ValueError(f"segment {self.seg_id}: length must be > 0")
        if len(self.geometry) < 2:
            raise ValueError(f"segment {self.seg_id}: geometry needs >= 2 points")
        arc = polyline_length(self.geometry)
        if abs(arc - self.length) > LENGTH_REL_TOL * max(self.length, 1.0):
            raise ValueError(
                f"segment {self.seg_id}: polyline arc length {arc!r} does not "
                f"match declared length {self.length!r}"
            )

    def entry_heading(self) -> float:
        """Heading (radians) of the first geometry edge."""
        (x0, y0), (x1, y1) = self.geometry[0], self.geometry[1]
        return math.atan2(y1 - y0, x1 - x0)

    def exit_heading(self) -> float:
        """Heading (radians) of the last geometry edge."""
        (x0, y0), (x1, y1) = self.geometry[-2], self.geometry[-1]
        return math.atan2(y1 - y0, x1 - x0)


@dataclass(frozen=True)
class RoadNetwork:
    """Immutable directed-segment graph.

    adjacency maps (node, incoming segment id) to the ascending tuple of
    segment ids leaving that node.
    """

    segments: dict[int, RoadSegment]
    adjacency: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)

    def segment(self, seg_id: int) -> RoadSegment:
        try:
            return self.segments[seg_id]
        except KeyError:
            raise UnknownSegmentError(seg_id) from None

    def nodes(self) -> set[int]:
        out: set[int] = set()
        for seg in self.segments.values():
            out.add(seg.from_node)
            out.add(seg.to_node)
        return out


def build_network(segments: Iterable[RoadSegment]) -> RoadNetwork:
    """Assemble a RoadNetwork, deriving adjacency from segment endpoints."""
    seg_list = list(segments)
    if not seg_list:
        raise NetworkError("cannot build an empty network")

    seg_map: dict[int, RoadSegment] = {}
    for seg in seg_list:
        if seg.seg_id in seg_map:
            raise NetworkError(f"duplicate segment id {seg.seg_id}")
        seg_map[seg.seg_id] = seg

    outgoing: dict[int, list[int]] = {}
    for seg in seg_list:
        outgoing.setdefault(seg.from_node, []).append(seg.seg_id)
    for ids in outgoing.values():
        ids.sort()

    adjacency = {
        (seg.to_node, seg.seg_id): tuple(outgoing.get(seg.to_node, ()))
        for seg in seg_list
    }

    _check_connected(seg_map)
    return RoadNetwork(segments=seg_map, adjacency=adjacency)


def _check_connected(seg_map: dict[int, RoadSegment]) -> None:
    # Connectivity in the undirected sense: no unreachable island of nodes.
    neighbors: dict[int, set[int]] = {}
    for seg in seg_map.values():
        neighbors.setdefault(seg.from_node, set()).add(seg.to_node)
        neighbors.setdefault(seg.to_node, set()).add(seg.from_node)
    start = next(iter(neighbors))
    seen = {start}
    stack = [start]
    while stack:
        for nxt in neighbors[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if len(seen) != len(neighbors):
        missing = sorted(set(neighbors) - seen)
        raise NetworkError(f"network is not connected; unreachable nodes {missing}")


def successors(net: RoadNetwork, seg_id: int) -> list[int]:
    """Segment ids that can be entered at the end of seg_id, ascending."""
    seg = net.segment(seg_id)
    return list(net.adjacency[(seg.to_node, seg_id)])


def curvature_at(seg: RoadSegment, offset: float) -> float:
    """Signed discrete curvature (1/m) at an offset along the segment.

    Uses the circumscribed circle of the three polyline vertices bracketing
    the offset; positive for left turns, 0 for collinear geometry.
    """
    if offset < 0 or offset > seg.length * (1 + LENGTH_REL_TOL):
        raise ValueError(f"offset {offset} outside [0, {seg.length}]")
    pts = seg.geometry
    if len(pts) < 3:
        return 0.0
    cum = [0.0]
    for a, b in zip(pts, pts[1:]):
        cum.append(cum[-1] + math.dist(a, b))
    j = min(bisect_right(cum, offset) - 1, len(pts) - 2)
    j = max(j, 0)
    # Middle vertex: whichever end of the containing edge is closer.
    mid = j if offset - cum[j] <= cum[j + 1] - offset else j + 1
    mid = min(max(mid, 1), len(pts) - 2)
    return circumcircle_curvature(pts[mid - 1], pts[mid], pts[mid + 1])


def polyline_curvature(pts: list[Point], cum: list[float], offset: float) -> float:
    """Signed curvature on an arbitrary polyline with precomputed arc coords."""
    if len(pts) < 3:
        return 0.0
    j = min(bisect_right(cum, offset) - 1, len(pts) - 2)
    j = max(j, 0)
    mid = j if offset - cum[j] <= cum[j + 1] - offset else j + 1
    mid = min(max(mid, 1), len(pts) - 2)
    return circumcircle_curvature(pts[mid - 1], pts[mid], pts[mid + 1])


def circumcircle_curvature(p1: Point, p2: Point, p3: Point) -> float:
    a = math.dist(p2, p3)
    b = math.dist(p1, p3)
    c = math.dist(p1, p2)
    if a == 0 or b == 0 or c == 0:
        return 0.0
    cross = (p2[0] - p1[0]) * (p3[1] - p2[1]) - (p2[1] - p1[1]) * (p3[0] - p2[0])
    return 2.0 * cross / (a * b * c)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

_SPEED_BY_TYPE = {
    RouteType.MOTORWAY: (100, 120, 130),
    RouteType.TRUNK: (80, 90, 100),
    RouteType.URBAN: (50, 60),
    RouteType.LOCAL: (30, 40, 50),
}
_LANES_BY_TYPE = {
    RouteType.MOTORWAY: (2, 3),
    RouteType.TRUNK: (1, 2),
    RouteType.URBAN: (1, 2),
    RouteType.LOCAL: (1,),
}
_TYPE_WEIGHTS = [
    (RouteType.MOTORWAY, 1),
    (RouteType.TRUNK, 2),
    (RouteType.URBAN, 4),
    (RouteType.LOCAL, 3),
]


def generate_synthetic(seed: int, n_segments: int) -> RoadNetwork:
    """Deterministic random connected network; pure function of (seed, n)."""
    if n_segments < 2:
        raise ValueError("n_segments must be >= 2")
    rng = random.Random(seed)

    n_nodes = max(2, (n_segments * 3) // 5)
    side = math.ceil(math.sqrt(n_nodes))
    spacing = 250.0
    nodes: list[Point] = []
    for i in range(n_nodes):
        gx, gy = i % side, i // side
        nodes.append((
            gx * spacing + rng.uniform(-60.0, 60.0),
            gy * spacing + rng.uniform(-60.0, 60.0),
        ))

    # Spanning tree first so the network is always connected.
    edges: list[tuple[int, int]] = []
    order = list(range(n_nodes))
    rng.shuffle(order)
    placed = [order[0]]
    for node in order[1:]:
        pool = sorted(
            placed, key=lambda p: math.dist(nodes[p], nodes[node])
        )[: min(3, len(placed))]
        anchor = rng.choice(pool)
        if rng.random() < 0.5:
            edges.append((anchor, node))
        else:
            edges.append((node, anchor))
        placed.append(node)

    while len(edges) < n_segments:
        a = rng.randrange(n_nodes)
        candidates = sorted(
            (p for p in range(n_nodes) if p != a),
            key=lambda p: math.dist(nodes[a], nodes[p]),
        )[:4]
        b = rng.choice(candidates)
        edges.append((a, b))
    edges = edges[:n_segments]

    segments = []
    for seg_id, (a, b) in enumerate(edges):
        segments.append(_make_segment(rng, seg_id, a, b, nodes[a], nodes[b]))
    return build_network(segments)


def _make_segment(
    rng: random.Random, seg_id: int, a: int, b: int, pa: Point, pb: Point
) -> RoadSegment:
    route_type = rng.choices(
        [t for t, _ in _TYPE_WEIGHTS], weights=[w for _, w in _TYPE_WEIGHTS]
    )[0]
    geometry = _bowed_polyline(rng, pa, pb)
    return RoadSegment(
        seg_id=seg_id,
        from_node=a,
        to_node=b,
        length=polyline_length(geometry),
        speed_limit=rng.choice(_SPEED_BY_TYPE[route_type]),
        lane_count=rng.choice(_LANES_BY_TYPE[route_type]),
        route_type=route_type,
        is_tunnel=rng.random() < 0.05,
        is_bridge=rng.random() < 0.05,
        is_emergency_lane=rng.random() < 0.05,
        geometry=geometry,
    )


def _bowed_polyline(rng: random.Random, pa: Point, pb: Point) -> tuple[Point, ...]:
    # Straight chord with a perpendicular quadratic bow makes gentle curves.
    n_inner = rng.randint(3, 6)
    bow = rng.uniform(-0.15, 0.15)
    dx, dy = pb[0] - pa[0], pb[1] - pa[1]
    chord = math.hypot(dx, dy)
    if chord == 0:
        chord = 1.0
    nx, ny = -dy / chord, dx / chord
    pts = [pa]
    for k in range(1, n_inner + 1):
        t = k / (n_inner + 1)
        amp = bow * chord * 4 * t * (1 - t)
        pts.append((pa[0] + dx * t + nx * amp, pa[1] + dy * t + ny * amp))
    pts.append(pb)
    return tuple(pts)


def generate_chain(
    n_segments: int,
    segment_length: float = 100.0,
    speed_limit: int = 50,
    lane_count: int = 1,
    route_type: RouteType = RouteType.URBAN,
) -> RoadNetwork:
    """Straight chain of segments along the x axis (test and golden scenarios)."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    segments = []
    for i in range(n_segments):
        x0 = i * segment_length
        segments.append(
            RoadSegment(
                seg_id=i,
                from_node=i,
                to_node=i + 1,
                length=segment_length,
                speed_limit=speed_limit,
                lane_count=lane_count,
                route_type=route_type,
                is_tunnel=False,
                is_bridge=False,
                is_emergency_lane=False,
                geometry=((x0, 0.0), (x0 + segment_length, 0.0)),
            )
        )
    return build_network(segments)


# ---------------------------------------------------------------------------
# Serialization (binary records and one-line-per-segment text form)
# ---------------------------------------------------------------------------

_NET_MAGIC = b"RNET"
_REC_FIXED = struct.Struct("<IIIdHBBBH")  # id, from, to, length, speed, lanes, type, flags, n_points


def network_to_bytes(net: RoadNetwork) -> bytes:
    out = [_NET_MAGIC, struct.pack("<I", len(net.segments))]
    for seg_id in sorted(net.segments):
        seg = net.segments[seg_id]
        flags = seg.is_tunnel | seg.is_bridge << 1 | seg.is_emergency_lane << 2
        body = _REC_FIXED.pack(
            seg.seg_id, seg.from_node, seg.to_node, seg.length,
            seg.speed_limit, seg.lane_count, int(seg.route_type), flags,
            len(seg.geometry),
        )
        body += b"".join(struct.pack("<dd", x, y) for x, y in seg.geometry)
        out.append(struct.pack("<I", len(body)))
        out.append(body)
    return b"".join(out)


def network_from_bytes(data: bytes) -> RoadNetwork:
    if data[:4] != _NET_MAGIC:
        raise NetworkError("bad network magic")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    segments = []
    for _ in range(count):
        (rec_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        body = data[pos:pos + rec_len]
        pos += rec_len
        seg_id, from_n, to_n, length, speed, lanes, rtype, flags, n_pts = (
            _REC_FIXED.unpack_from(body, 0)
        )
        geom = []
        off = _REC_FIXED.size
        for _ in range(n_pts):
            x, y = struct.unpack_from("<dd", body, off)
            geom.append((x, y))
            off += 16
        segments.append(
            RoadSegment(
                seg_id=seg_id, from_node=from_n, to_node=to_n, length=length,
                speed_limit=speed, lane_count=lanes, route_type=RouteType(rtype),
                is_tunnel=bool(flags & 1), is_bridge=bool(flags & 2),
                is_emergency_lane=bool(flags & 4), geometry=tuple(geom),
            )
        )
    return build_network(segments)


def network_to_text(net: RoadNetwork) -> str:
    """One segment per line: id from to length speed lanes type flags points."""
    lines = []
    for seg_id in sorted(net.segments):
        seg = net.segments[seg_id]
        pts = " ".join(f"{x!r},{y!r}" for x, y in seg.geometry)
        lines.append(
            f"{seg.seg_id} {seg.from_node} {seg.to_node} {seg.length!r} "
            f"{seg.speed_limit} {seg.lane_count} {seg.route_type.name.lower()} "
            f"{int(seg.is_tunnel)} {int(seg.is_bridge)} "
            f"{int(seg.is_emergency_lane)} {pts}"
        )
    return "\n".join(lines) + "\n"


def network_from_text(text: str) -> RoadNetwork:
    segments = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 12:
            raise NetworkError(f"short segment line: {line!r}")
        geom = tuple(
            (float(p.split(",")[0]), float(p.split(",")[1])) for p in parts[10:]
        )
        segments.append(
            RoadSegment(
                seg_id=int(parts[0]), from_node=int(parts[1]),
                to_node=int(parts[2]), length=float(parts[3]),
                speed_limit=int(parts[4]), lane_count=int(parts[5]),
                route_type=RouteType[parts[6].upper()],
                is_tunnel=parts[7] == "1", is_bridge=parts[8] == "1",
                is_emergency_lane=parts[9] == "1", geometry=geom,
            )
        )
    return build_network(segments)
