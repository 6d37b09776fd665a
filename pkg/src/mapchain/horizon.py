"""Electronic horizon extraction around a vehicle position.

Builds the most probable path plus optional branch paths, junction stubs,
piecewise-linear curvature profiles and attribute attachments. Topology and
geometry come from the road network; attribute values (speed limits, lane
counts, descriptors) come from the map store the vehicle carries.

Path offsets are vehicle-relative: offset 0 on path 1 is the vehicle
position, offset 0 on a branch path is its branch point. Everything behind
the vehicle is dropped at extraction time, so every path fits within the
configured horizon length and all offsets share that scale on the wire.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

from .road import RoadNetwork, polyline_curvature, successors
from .store import BuildingBlock, MapStore

PROFILE_SAMPLE_STEP = 10.0  # meters between curvature samples


class InvalidPositionError(ValueError):
    pass


class UncoveredRegionError(LookupError):
    """The store lacks attribute records for a segment under the horizon."""


class HorizonMode(IntEnum):
    SINGLE_PATH = 0
    MULTI_PATH = 1


class Interpolation(IntEnum):
    DISCRETE = 0
    LINEAR = 1


class AttachmentType(IntEnum):
    SPEED_LIMIT_SIGN = 0
    PATH_METADATA = 1  # wire value "other": path end offset + entity counts


@dataclass(frozen=True)
class VehiclePosition:
    segment: int
    offset: float
    speed: float
    gps_timestamp: int
    current_lane: int = 1
    probability: float = 1.0
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidPositionError("probability outside [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidPositionError("confidence outside [0, 1]")
        if self.current_lane < 1:
            raise InvalidPositionError("current_lane must be >= 1")


@dataclass(frozen=True)
class Path:
    path_index: int
    segments: tuple[int, ...]
    total_length: float


@dataclass(frozen=True)
class Stub:
    parent_path: int
    offset: float
    branch_path: int | None
    turn_angle: float  # degrees in (-180, 180], positive = left
    lane_count: int
    branch_probability: float


@dataclass(frozen=True)
class ProfileSpan:
    path_index: int
    offset: float
    value0: float
    distance1: float
    value1: float
    interpolation: Interpolation


@dataclass(frozen=True)
class Attachment:
    path_index: int
    offset: float
    attribute_type: AttachmentType
    value: int


@dataclass(frozen=True)
class SegmentDescriptor:
    """Store-read attributes of one included segment, keyed by path offset."""

    path_index: int
    offset: float
    speed_limit: int
    lane_count: int
    route_type: int
    is_tunnel: bool
    is_bridge: bool
    is_emergency_lane: bool


@dataclass(frozen=True)
class PathPosition:
    path_index: int
    offset: float
    speed: float
    gps_timestamp: int
    current_lane: int
    probability: float
    confidence: float


@dataclass(frozen=True)
class HorizonConfig:
    horizon_length: float = 1000.0
    mode: HorizonMode = HorizonMode.MULTI_PATH
    max_branch_depth: int = 1
    profile_tolerance: float = 1e-3

    def __post_init__(self) -> None:
        if self.horizon_length <= 0:
            raise ValueError("horizon_length must be > 0")


@dataclass(frozen=True)
class Horizon:
    paths: tuple[Path, ...]
    stubs: tuple[Stub, ...]
    profiles: tuple[ProfileSpan, ...]
    attachments: tuple[Attachment, ...]
    descriptors: tuple[SegmentDescriptor, ...]
    position: PathPosition
    reference_length: float  # offset quantization scale, = config horizon_length


# ---------------------------------------------------------------------------
# Transition probabilities and the most probable path
# ---------------------------------------------------------------------------


def turn_angle(net: RoadNetwork, from_seg: int, to_seg: int) -> float:
    """Signed turn angle in degrees in (-180, 180] from one segment into the next."""
    a = net.segment(from_seg).exit_heading()
    b = net.segment(to_seg).entry_heading()
    deg = math.degrees(b - a)
    while deg <= -180.0:
        deg += 360.0
    while deg > 180.0:
        deg -= 360.0
    return deg


def transition_weights(net: RoadNetwork, from_seg: int) -> dict[int, float]:
    """Unnormalized heuristic weight for each successor of from_seg."""
    from_type = net.segment(from_seg).route_type
    weights: dict[int, float] = {}
    for succ in successors(net, from_seg):
        w_class = 2.0 if net.segment(succ).route_type == from_type else 1.0
        angle = turn_angle(net, from_seg, succ)
        w_angle = max(0.1, math.cos(math.radians(angle) / 2.0))
        weights[succ] = w_class * w_angle
    return weights


def transition_probability(net: RoadNetwork, from_seg: int, to_seg: int) -> float:
    """Probability of continuing into to_seg, normalized over all successors."""
    weights = transition_weights(net, from_seg)
    if to_seg not in weights:
        raise ValueError(f"{to_seg} is not a successor of {from_seg}")
    return weights[to_seg] / sum(weights.values())


def mpp_next_segment(net: RoadNetwork, from_seg: int) -> int | None:
    """Most probable continuation after from_seg, or None at a dead end."""
    weights = transition_weights(net, from_seg)
    best = None
    best_w = -math.inf
    for succ in sorted(weights):  # ascending id; strict > keeps lowest on ties
        if weights[succ] > best_w:
            best, best_w = succ, weights[succ]
    return best



def _normalize_entry(
    net: RoadNetwork, seg_id: int, offset: float
) -> tuple[int, float]:
    # Entry exactly at the segment end: hop to the junction choice so no
    # zero-extent segment leads the chain.
    if offset >= net.segment(seg_id).length:
        nxt = mpp_next_segment(net, seg_id)
        if nxt is not None:
            return nxt, 0.0
    return seg_id, offset


def _greedy_chain(
    net: RoadNetwork, start_seg: int, entry_offset: float, budget: float
) -> tuple[list[int], float]:
    """Follow per-junction argmax until the budget is covered or the road ends.

    Returns (segment ids, distance from entry point to the end of the last
    segment). Stops rather than revisiting a segment already on the chain.
    """
    chain = [start_seg]
    visited = {start_seg}
    accumulated = net.segment(start_seg).length - entry_offset
    current = start_seg
    while accumulated < budget:
        nxt = mpp_next_segment(net, current)
        if nxt is None or nxt in visited:
            break
        chain.append(nxt)
        visited.add(nxt)
        accumulated += net.segment(nxt).length
        current = nxt
    return chain, accumulated


def compute_mpp(
    net: RoadNetwork, pos: VehiclePosition, horizon_length: float
) -> Path:
    """Most probable path from the vehicle position, greedy per junction."""
    if horizon_length <= 0:
        raise InvalidPositionError("horizon_length must be > 0")
    seg = net.segment(pos.segment)
    if not 0.0 <= pos.offset <= seg.length:
        raise InvalidPositionError(
            f"offset {pos.offset} outside segment {pos.segment} [0, {seg.length}]"
        )
    start_seg, entry = _normalize_entry(net, pos.segment, pos.offset)
    chain, accumulated = _greedy_chain(net, start_seg, entry, horizon_length)
    return Path(path_index=1, segments=tuple(chain), total_length=accumulated)


# ---------------------------------------------------------------------------
# Horizon extraction
# ---------------------------------------------------------------------------


@dataclass
class _JunctionBranch:
    parent_path: int
    offset: float
    branch_seg: int
    angle: float
    probability: float
    branch_index: int | None = None


@dataclass
class _BuildPath:
    index: int
    segments: list[int]
    entry_offset: float
    total_length: float
    start_distance: float  # along the horizon tree, vehicle to path start
    depth: int
    boundaries: list[float] = field(default_factory=list)


def _read_descriptor(
    store: MapStore, seg_id: int, path_index: int, offset: float
) -> SegmentDescriptor:
    values = {}
    for attribute in ("speed_limit", "lane_count", "route_type",
                      "is_tunnel", "is_bridge", "is_emergency_lane"):
        layer = (BuildingBlock.TRAFFIC_INFO if attribute == "speed_limit"
                 else BuildingBlock.ROUTING)
        value = store.get(layer, seg_id, attribute)
        if value is None:
            raise UncoveredRegionError(
                f"segment {seg_id} has no {attribute!r} record in the store"
            )
        values[attribute] = value
    return SegmentDescriptor(
        path_index=path_index, offset=offset,
        speed_limit=int(values["speed_limit"]),
        lane_count=int(values["lane_count"]),
        route_type=int(values["route_type"]),
        is_tunnel=bool(values["is_tunnel"]),
        is_bridge=bool(values["is_bridge"]),
        is_emergency_lane=bool(values["is_emergency_lane"]),
    )


def extract_horizon(
    net: RoadNetwork, store: MapStore, pos: VehiclePosition, config: HorizonConfig
) -> Horizon:
    """Extract the horizon: path 1 is the MPP, branches breadth-first."""
    if store.get(BuildingBlock.ROUTING, pos.segment, "route_type") is None:
        raise UncoveredRegionError(
            f"vehicle segment {pos.segment} not covered by the store"
        )
    mpp = compute_mpp(net, pos, config.horizon_length)

    built: list[_BuildPath] = []
    junctions: list[_JunctionBranch] = []
    next_index = 1
    queue: deque[tuple[int, float, float, int, _JunctionBranch | None]] = deque()
    queue.append((*_normalize_entry(net, pos.segment, pos.offset), 0.0, 0, None))

    while queue:
        start_seg, entry_offset, start_distance, depth, origin = queue.popleft()
        budget = config.horizon_length - start_distance
        chain, accumulated = _greedy_chain(net, start_seg, entry_offset, budget)
        path = _BuildPath(
            index=next_index, segments=chain, entry_offset=entry_offset,
            total_length=min(accumulated, budget),
            start_distance=start_distance, depth=depth,
        )
        next_index += 1
        built.append(path)
        if origin is not None:
            origin.branch_index = path.index

        cum = -entry_offset
        for k, seg_id in enumerate(chain[:-1]):
            cum += net.segment(seg_id).length
            if not 0.0 < cum < path.total_length:
                continue
            path.boundaries.append(cum)
            succs = successors(net, seg_id)
            if len(succs) < 2:
                continue
            chosen = chain[k + 1]
            for alt in succs:
                if alt == chosen:
                    continue
                branch = _JunctionBranch(
                    parent_path=path.index, offset=cum, branch_seg=alt,
                    angle=turn_angle(net, seg_id, alt),
                    probability=transition_probability(net, seg_id, alt),
                )
                junctions.append(branch)
                if (config.mode is HorizonMode.MULTI_PATH
                        and depth + 1 <= config.max_branch_depth):
                    queue.append(
                        (alt, 0.0, start_distance + cum, depth + 1, branch)
                    )

    paths = tuple(
        Path(p.index, tuple(p.segments), p.total_length) for p in built
    )

    descriptors: list[SegmentDescriptor] = []
    attachments: list[Attachment] = []
    for p in built:
        starts = [0.0] + p.boundaries
        for seg_id, start in zip(p.segments, starts):
            desc = _read_descriptor(store, seg_id, p.index, start)
            descriptors.append(desc)
            attachments.append(
                Attachment(p.index, start, AttachmentType.SPEED_LIMIT_SIGN,
                           desc.speed_limit)
            )

    stub_list = []
    for j in junctions:
        lane = store.get(BuildingBlock.ROUTING, j.branch_seg, "lane_count")
        if lane is None:
            raise UncoveredRegionError(
                f"branch segment {j.branch_seg} not covered by the store"
            )
        stub_list.append(
            Stub(
                parent_path=j.parent_path, offset=j.offset,
                branch_path=j.branch_index, turn_angle=j.angle,
                lane_count=int(lane), branch_probability=j.probability,
            )
        )
    stubs = tuple(stub_list)
    stub_counts: dict[int, int] = {}
    for s in stubs:
        stub_counts[s.parent_path] = stub_counts.get(s.parent_path, 0) + 1

    # Per-path inventory rides as a metadata attachment at the path end so the
    # reconstructor can prove completeness under loss.
    for p in built:
        attachments.append(
            Attachment(
                p.index, p.total_length, AttachmentType.PATH_METADATA,
                (len(p.segments) << 8) | stub_counts.get(p.index, 0),
            )
        )

    profiles: list[ProfileSpan] = []
    for p in built:
        profiles.extend(
            fit_profiles(
                net,
                Path(p.index, tuple(p.segments), p.total_length),
                config.profile_tolerance,
                entry_offset=p.entry_offset,
            )
        )

    attachments.sort(key=lambda a: (a.path_index, a.offset, int(a.attribute_type)))
    position = PathPosition(
        path_index=1, offset=0.0, speed=pos.speed,
        gps_timestamp=pos.gps_timestamp, current_lane=pos.current_lane,
        probability=pos.probability, confidence=pos.confidence,
    )
    return Horizon(
        paths=paths, stubs=stubs, profiles=tuple(profiles),
        attachments=tuple(attachments), descriptors=tuple(descriptors),
        position=position, reference_length=config.horizon_length,
    )


# ---------------------------------------------------------------------------
# Curvature profiles
# ---------------------------------------------------------------------------


def _path_polyline(
    net: RoadNetwork, path: Path, entry_offset: float
) -> tuple[list[tuple[float, float]], list[float]]:
    """Concatenated geometry with arc coordinates relative to the entry point."""
    pts: list[tuple[float, float]] = []
    for seg_id in path.segments:
        geom = net.segment(seg_id).geometry
        start = 1 if pts and math.dist(pts[-1], geom[0]) < 1e-9 else 0
        pts.extend(geom[start:])
    cum = [0.0]
    for a, b in zip(pts, pts[1:]):
        cum.append(cum[-1] + math.dist(a, b))
    cum = [c - entry_offset for c in cum]
    return pts, cum


def fit_profiles(
    net: RoadNetwork, path: Path, tolerance: float, entry_offset: float = 0.0
) -> list[ProfileSpan]:
    """Greedy piecewise-linear fit of the curvature profile along a path.

    Curvature is sampled every PROFILE_SAMPLE_STEP meters; a span is extended
    while every interior sample stays within tolerance of the chord. Spans
    tile [0, total_length] exactly and share endpoint values.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    if path.total_length <= 0:
        return []
    pts, cum = _path_polyline(net, path, entry_offset)
    offsets = []
    s = 0.0
    while s < path.total_length:
        offsets.append(s)
        s += PROFILE_SAMPLE_STEP
    offsets.append(path.total_length)
    values = [polyline_curvature(pts, cum, off) for off in offsets]

    spans: list[ProfileSpan] = []
    i = 0
    while i < len(offsets) - 1:
        j = i + 1
        while j + 1 < len(offsets) and _chord_fits(offsets, values, i, j + 1, tolerance):
            j += 1
        spans.append(
            ProfileSpan(
                path_index=path.path_index, offset=offsets[i],
                value0=values[i], distance1=offsets[j] - offsets[i],
                value1=values[j], interpolation=Interpolation.LINEAR,
            )
        )
        i = j
    return spans


def _chord_fits(
    offsets: list[float], values: list[float], i: int, j: int, tolerance: float
) -> bool:
    run = offsets[j] - offsets[i]
    if run <= 0:
        return False
    for m in range(i + 1, j):
        t = (offsets[m] - offsets[i]) / run
        chord = values[i] + (values[j] - values[i]) * t
        if abs(values[m] - chord) > tolerance:
            return False
    return True
