"""Rebuilds a horizon from the decoded message stream.

Assembly is keyed by quantized offsets, so retransmitted duplicates overwrite
idempotently. A PositionMsg with a newer GPS timestamp starts a new horizon
epoch and clears the previous assembly; equal timestamps accumulate, which is
what retransmission rounds within one extraction rely on.

Completeness is content-based: each path's metadata attachment declares its
end offset, segment count and stub count, profiles must tile the path, and
every segment start must carry its speed attachment (and vice versa). Gap
events therefore count as unresolved exactly until the declared inventory of
every known path has been received in full.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .codec import (
    AdasisMessage,
    AttachmentMsg,
    PositionMsg,
    ProfileMsg,
    SegmentMsg,
    StreamEvent,
    StubMsg,
    dequantize_angle,
    dequantize_curvature,
    dequantize_fraction,
    dequantize_offset,
    dequantize_speed,
    quantize_angle,
    quantize_curvature,
    quantize_fraction,
    quantize_offset,
    quantize_speed,
)
from .horizon import AttachmentType, Horizon, Interpolation

PENDING_BUFFER_LIMIT = 1024
_TILE_SLACK_Q = 2  # quantization steps of slack when checking span contiguity


@dataclass
class _PathAssembly:
    segments: dict[int, SegmentMsg] = field(default_factory=dict)
    stubs: set[StubMsg] = field(default_factory=set)
    profiles: dict[int, ProfileMsg] = field(default_factory=dict)
    attachments: dict[tuple[int, int], AttachmentMsg] = field(default_factory=dict)

    def metadata(self) -> AttachmentMsg | None:
        for (offset_q, a_type), msg in self.attachments.items():
            if a_type == int(AttachmentType.PATH_METADATA):
                return msg
        return None

    def entity_count(self) -> int:
        return (len(self.segments) + len(self.stubs) + len(self.profiles)
                + len(self.attachments))


@dataclass
class CompletenessReport:
    complete: bool
    missing: list[str]
    unresolved_gaps: int


class HorizonReconstructor:
    """Per-consumer assembly state; mutate from one thread at a time."""

    def __init__(self, reference_length: float) -> None:
        if reference_length <= 0:
            raise ValueError("reference_length must be > 0")
        self.reference_length = reference_length
        self.position: PositionMsg | None = None
        self.epoch_timestamp: int | None = None
        self.paths: dict[int, _PathAssembly] = {}
        self.gap_events: list[StreamEvent] = []
        self.pending: deque[AdasisMessage] = deque()
        self.overflow_count = 0

    # -- ingestion -----------------------------------------------------------

    def ingest(
        self, messages: list[AdasisMessage], events: list[StreamEvent] = ()
    ) -> None:
        """Fold messages into the assembly; later entries overwrite earlier."""
        self.gap_events.extend(events)
        for msg in messages:
            self._ingest_one(msg)

    def _ingest_one(self, msg: AdasisMessage) -> None:
        if isinstance(msg, PositionMsg):
            if self.epoch_timestamp is None:
                self.epoch_timestamp = msg.gps_timestamp
            elif msg.gps_timestamp > self.epoch_timestamp:
                self._reset_epoch(msg.gps_timestamp)
            elif msg.gps_timestamp < self.epoch_timestamp:
                return  # stale horizon
            self.position = msg
            return
        if isinstance(msg, SegmentMsg):
            assembly = self.paths.setdefault(msg.path_index, _PathAssembly())
            assembly.segments[msg.offset_q] = msg
            self._drain_pending(msg.path_index)
            return
        path_index = msg.path_index
        if path_index not in self.paths:
            self._buffer(msg)
            return
        self._store(self.paths[path_index], msg)

    def _store(self, assembly: _PathAssembly, msg: AdasisMessage) -> None:
        if isinstance(msg, StubMsg):
            assembly.stubs.add(msg)
        elif isinstance(msg, ProfileMsg):
            assembly.profiles[msg.offset_q] = msg
        elif isinstance(msg, AttachmentMsg):
            assembly.attachments[(msg.offset_q, int(msg.attribute_type))] = msg

    def _buffer(self, msg: AdasisMessage) -> None:
        if len(self.pending) >= PENDING_BUFFER_LIMIT:
            self.pending.popleft()
            self.overflow_count += 1
        self.pending.append(msg)

    def _drain_pending(self, path_index: int) -> None:
        if not self.pending:
            return
        keep: deque[AdasisMessage] = deque()
        for msg in self.pending:
            if msg.path_index == path_index:
                self._store(self.paths[path_index], msg)
            else:
                keep.append(msg)
        self.pending = keep

    def _reset_epoch(self, timestamp: int) -> None:
        self.epoch_timestamp = timestamp
        self.position = None
        self.paths.clear()
        self.pending.clear()
        self.gap_events.clear()

    def entity_count(self) -> int:
        """Resolved entities; never decreases within an epoch."""
        total = 1 if self.position is not None else 0
        return total + sum(a.entity_count() for a in self.paths.values())

    # -- completeness ----------------------------------------------------------

    def completeness(self) -> CompletenessReport:
        missing: list[str] = []
        if self.position is None:
            missing.append("position")
        referenced: set[int] = set(self.paths)
        if self.position is not None and self.position.path_index > 0:
            referenced.add(self.position.path_index)
        for assembly in self.paths.values():
            for stub in assembly.stubs:
                if stub.branch_path_index:
                    referenced.add(stub.branch_path_index)
        for msg in self.pending:
            referenced.add(msg.path_index)

        for index in sorted(referenced):
            assembly = self.paths.get(index)
            if assembly is None or not assembly.segments:
                missing.append(f"path {index}: no segments")
                continue
            missing.extend(self._path_gaps(index, assembly))

        complete = not missing
        return CompletenessReport(
            complete=complete,
            missing=missing,
            unresolved_gaps=0 if complete else len(self.gap_events),
        )

    def _path_gaps(self, index: int, assembly: _PathAssembly) -> list[str]:
        gaps: list[str] = []
        meta = assembly.metadata()
        if meta is None:
            gaps.append(f"path {index}: descriptor")
            return gaps
        end_q = meta.offset_q
        want_segments = meta.attribute_value >> 8
        want_stubs = meta.attribute_value & 0xFF

        if len(assembly.segments) != want_segments:
            gaps.append(
                f"path {index}: segments {len(assembly.segments)}/{want_segments}"
            )
        if len(assembly.stubs) != want_stubs:
            gaps.append(f"path {index}: stubs {len(assembly.stubs)}/{want_stubs}")

        sign_offsets = {
            off for (off, a_type) in assembly.attachments
            if a_type == int(AttachmentType.SPEED_LIMIT_SIGN)
        }
        for off in sorted(set(assembly.segments) - sign_offsets):
            gaps.append(f"path {index}: speed attachment at q{off}")
        for off in sorted(sign_offsets - set(assembly.segments)):
            gaps.append(f"path {index}: segment at q{off}")

        gaps.extend(self._profile_gaps(index, assembly, end_q))
        return gaps

    def _profile_gaps(
        self, index: int, assembly: _PathAssembly, end_q: int
    ) -> list[str]:
        spans = sorted(assembly.profiles.values(), key=lambda s: s.offset_q)
        if not spans:
            return [f"path {index}: profile coverage [q0, q{end_q}]"]
        gaps = []
        if spans[0].offset_q > _TILE_SLACK_Q:
            gaps.append(f"path {index}: profile coverage [q0, q{spans[0].offset_q}]")
        covered = spans[0].offset_q + spans[0].distance1_q
        for span in spans[1:]:
            if abs(span.offset_q - covered) > _TILE_SLACK_Q:
                gaps.append(
                    f"path {index}: profile coverage [q{covered}, q{span.offset_q}]"
                )
            covered = span.offset_q + span.distance1_q
        if abs(covered - end_q) > _TILE_SLACK_Q:
            gaps.append(f"path {index}: profile coverage [q{covered}, q{end_q}]")
        return gaps


def ingest(
    state: HorizonReconstructor,
    messages: list[AdasisMessage],
    gaps: list[StreamEvent] = (),
) -> HorizonReconstructor:
    state.ingest(messages, gaps)
    return state


def completeness(state: HorizonReconstructor) -> CompletenessReport:
    return state.completeness()


# ---------------------------------------------------------------------------
# Dequantized view and comparison against the provider horizon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReconSegment:
    offset: float
    speed_limit: int
    lane_count: int
    route_type: int
    is_tunnel: bool
    is_bridge: bool
    is_emergency_lane: bool


@dataclass(frozen=True)
class ReconStub:
    offset: float
    branch_path: int | None
    turn_angle: float
    lane_count: int
    branch_probability: float


@dataclass(frozen=True)
class ReconSpan:
    offset: float
    value0: float
    distance1: float
    value1: float
    interpolation: Interpolation


@dataclass(frozen=True)
class ReconAttachment:
    offset: float
    attribute_type: AttachmentType
    value: int


@dataclass(frozen=True)
class ReconPath:
    path_index: int
    total_length: float | None
    segments: tuple[ReconSegment, ...]
    stubs: tuple[ReconStub, ...]
    profiles: tuple[ReconSpan, ...]
    attachments: tuple[ReconAttachment, ...]


@dataclass(frozen=True)
class ReconPosition:
    path_index: int
    offset: float
    speed: float
    gps_timestamp: int
    current_lane: int
    probability: float
    confidence: float


@dataclass(frozen=True)
class ReconstructedHorizon:
    paths: tuple[ReconPath, ...]
    position: ReconPosition | None
    reference_length: float


def build_horizon(state: HorizonReconstructor) -> ReconstructedHorizon:
    """Dequantized application-side view of the current assembly."""
    scale = state.reference_length
    paths = []
    for index in sorted(state.paths):
        assembly = state.paths[index]
        meta = assembly.metadata()
        segments = tuple(
            ReconSegment(
                offset=dequantize_offset(q, scale), speed_limit=m.speed_limit,
                lane_count=m.lane_count, route_type=m.route_type,
                is_tunnel=m.is_tunnel, is_bridge=m.is_bridge,
                is_emergency_lane=m.is_emergency_lane,
            )
            for q, m in sorted(assembly.segments.items())
        )
        stubs = tuple(
            ReconStub(
                offset=dequantize_offset(m.offset_q, scale),
                branch_path=m.branch_path_index or None,
                turn_angle=dequantize_angle(m.turn_angle_q),
                lane_count=m.lane_count,
                branch_probability=dequantize_fraction(m.branch_probability_q),
            )
            for m in sorted(
                assembly.stubs,
                key=lambda s: (s.offset_q, s.branch_path_index, s.turn_angle_q),
            )
        )
        profiles = tuple(
            ReconSpan(
                offset=dequantize_offset(q, scale),
                value0=dequantize_curvature(m.value0_q),
                distance1=dequantize_offset(m.distance1_q, scale),
                value1=dequantize_curvature(m.value1_q),
                interpolation=m.interpolation,
            )
            for q, m in sorted(assembly.profiles.items())
        )
        attachments = tuple(
            ReconAttachment(
                offset=dequantize_offset(q, scale),
                attribute_type=AttachmentType(a_type), value=m.attribute_value,
            )
            for (q, a_type), m in sorted(assembly.attachments.items())
        )
        paths.append(
            ReconPath(
                path_index=index,
                total_length=(
                    dequantize_offset(meta.offset_q, scale) if meta else None
                ),
                segments=segments, stubs=stubs, profiles=profiles,
                attachments=attachments,
            )
        )
    position = None
    if state.position is not None:
        p = state.position
        position = ReconPosition(
            path_index=p.path_index,
            offset=dequantize_offset(p.offset_q, scale),
            speed=dequantize_speed(p.speed_q),
            gps_timestamp=p.gps_timestamp,
            current_lane=p.current_lane,
            probability=dequantize_fraction(p.probability_q),
            confidence=dequantize_fraction(p.confidence_q),
        )
    return ReconstructedHorizon(
        paths=tuple(paths), position=position, reference_length=scale
    )


def messages_to_horizon(
    messages: list[AdasisMessage], reference_length: float
) -> ReconstructedHorizon:
    """Assemble a lossless message list straight into a dequantized horizon."""
    state = HorizonReconstructor(reference_length)
    state.ingest(messages)
    return build_horizon(state)


def compare_horizons(
    provided: Horizon, recon: ReconstructedHorizon
) -> list[str]:
    """Mismatch descriptions between a provider horizon and a reconstruction.

    Empty means structurally equal with every offset inside the quantization
    bound (reference_length / 16382). Serves as the lossless-path oracle.
    """
    scale = provided.reference_length
    tol = scale / 16382 + 1e-9
    out: list[str] = []

    if recon.position is None:
        out.append("position missing")
    else:
        p, r = provided.position, recon.position
        if r.path_index != p.path_index or r.current_lane != p.current_lane \
                or r.gps_timestamp != p.gps_timestamp:
            out.append("position fields differ")
        if abs(r.offset - p.offset) > tol:
            out.append("position offset outside bound")
        if abs(r.speed - p.speed) > 0.25 + 1e-9:
            out.append("position speed outside bound")
        if abs(r.probability - p.probability) > 0.5 / 63 + 1e-9 \
                or abs(r.confidence - p.confidence) > 0.5 / 63 + 1e-9:
            out.append("position probability/confidence outside bound")

    recon_by_index = {p.path_index: p for p in recon.paths}
    if set(recon_by_index) != {p.path_index for p in provided.paths}:
        out.append(
            f"path set differs: provided "
            f"{sorted(p.path_index for p in provided.paths)} vs "
            f"reconstructed {sorted(recon_by_index)}"
        )
        return out

    for path in provided.paths:
        idx = path.path_index
        rp = recon_by_index[idx]
        out.extend(_compare_path(provided, path, rp, scale, tol))
    return out


def _compare_path(h: Horizon, path, rp: ReconPath, scale: float, tol: float) -> list[str]:
    idx = path.path_index
    out: list[str] = []
    if rp.total_length is None or abs(rp.total_length - path.total_length) > tol:
        out.append(f"path {idx}: total length differs")

    provided_segments = sorted(
        (d for d in h.descriptors if d.path_index == idx), key=lambda d: d.offset
    )
    if len(provided_segments) != len(rp.segments):
        out.append(
            f"path {idx}: segment count {len(rp.segments)} != "
            f"{len(provided_segments)}"
        )
    else:
        for d, r in zip(provided_segments, rp.segments):
            if abs(d.offset - r.offset) > tol:
                out.append(f"path {idx}: segment offset outside bound")
            if (d.speed_limit, d.lane_count, d.route_type, d.is_tunnel,
                    d.is_bridge, d.is_emergency_lane) != (
                    r.speed_limit, r.lane_count, r.route_type, r.is_tunnel,
                    r.is_bridge, r.is_emergency_lane):
                out.append(f"path {idx}: segment attributes differ at {d.offset:.1f}")

    provided_stubs = sorted(
        (
            (quantize_offset(s.offset, scale), s.branch_path or 0,
             quantize_angle(s.turn_angle), s.lane_count,
             quantize_fraction(s.branch_probability), s)
            for s in h.stubs if s.parent_path == idx
        ),
    )
    # Wire identity collapses stubs identical in every quantized field.
    dedup = []
    for item in provided_stubs:
        if not dedup or dedup[-1][:5] != item[:5]:
            dedup.append(item)
    if len(dedup) != len(rp.stubs):
        out.append(f"path {idx}: stub count {len(rp.stubs)} != {len(dedup)}")
    else:
        for (q_off, branch, q_angle, lane, q_prob, s), r in zip(dedup, rp.stubs):
            if abs(s.offset - r.offset) > tol:
                out.append(f"path {idx}: stub offset outside bound")
            if (r.branch_path or 0) != branch or r.lane_count != lane:
                out.append(f"path {idx}: stub fields differ at {s.offset:.1f}")
            if abs(r.turn_angle - s.turn_angle) > 1.5 + 1e-9:
                out.append(f"path {idx}: stub angle outside bound")
            if abs(r.branch_probability - s.branch_probability) > 0.5 / 63 + 1e-9:
                out.append(f"path {idx}: stub probability outside bound")

    provided_spans = sorted(
        (p for p in h.profiles if p.path_index == idx), key=lambda p: p.offset
    )
    if len(provided_spans) != len(rp.profiles):
        out.append(
            f"path {idx}: span count {len(rp.profiles)} != {len(provided_spans)}"
        )
    else:
        for p, r in zip(provided_spans, rp.profiles):
            if abs(p.offset - r.offset) > tol or abs(p.distance1 - r.distance1) > tol:
                out.append(f"path {idx}: span extent outside bound")
            if abs(p.value0 - r.value0) > 0.5e-5 + 1e-12 \
                    or abs(p.value1 - r.value1) > 0.5e-5 + 1e-12:
                out.append(f"path {idx}: span value outside bound")
            if p.interpolation != r.interpolation:
                out.append(f"path {idx}: span interpolation differs")

    provided_att = sorted(
        (a for a in h.attachments if a.path_index == idx),
        key=lambda a: (a.offset, int(a.attribute_type), a.value),
    )
    if len(provided_att) != len(rp.attachments):
        out.append(
            f"path {idx}: attachment count {len(rp.attachments)} != "
            f"{len(provided_att)}"
        )
    else:
        for a, r in zip(provided_att, rp.attachments):
            if abs(a.offset - r.offset) > tol:
                out.append(f"path {idx}: attachment offset outside bound")
            if a.attribute_type != r.attribute_type or a.value != r.value:
                out.append(f"path {idx}: attachment fields differ at {a.offset:.1f}")
    return out
