"""Wire codec: five message types packed into fixed 8-byte frames.

Frame layout (8 bytes):

    byte 0   bits 7..5  counter       3-bit cyclic sequence, mod 8 per frame
             bits 4..2  msg_type      1 segment, 2 profile, 3 attachment,
                                      4 stub, 5 position
             bit  1     continuation  set on every frame but the last of a message
             bit  0     reserved      always 0
    bytes 1..7          payload       56 bits, big-endian bit packing

Messages span 1 or 2 frames depending on type. Payload field tables:

    segment     path_index:6 offset_q:13 speed_limit:8 lane_count:3
                route_type:2 is_tunnel:1 is_bridge:1 is_emergency_lane:1
    profile     path_index:6 offset_q:13 value0_q:16s distance1_q:13
                value1_q:16s interpolation:1
    attachment  path_index:6 offset_q:13 attribute_type:2 attribute_value:16
    stub        path_index:6 offset_q:13 branch_path_index:6 turn_angle_q:7
                lane_count:3 branch_probability_q:6
    position    path_index:6 offset_q:13 probability_q:6 confidence_q:6
                gps_timestamp:32 speed_q:8 current_lane:3

Offsets are 13-bit fractions of the reference length (the horizon length both
ends share); curvatures are signed 1e-5 1/m steps; angles 3-degree steps from
-180; probabilities 6-bit fractions; speeds 0.5 m/s steps.

Receivers detect missing frames through skips of the cyclic counter. A skip
that is a multiple of 8 frames is invisible to the counter; that limitation
is inherent to a 3-bit sequence and is asserted by tests rather than papered
over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

from .horizon import AttachmentType, Horizon, Interpolation

FRAME_SIZE = 8
PAYLOAD_BITS = 56
OFFSET_MAX = 8191          # 13-bit full scale
FRACTION_MAX = 63          # 6-bit fractions
PATH_INDEX_MAX = 63
CURVATURE_SCALE = 1e5      # stored curvature = 1e-5 1/m steps, 16-bit signed
CURVATURE_Q_MAX = 32767
ANGLE_STEP_DEG = 3.0
SPEED_STEP = 0.5           # m/s per quantization step
SPEED_Q_MAX = 255


class FieldOverflowError(ValueError):
    """A message field does not fit its wire width."""


class MsgType(IntEnum):
    SEGMENT = 1
    PROFILE = 2
    ATTACHMENT = 3
    STUB = 4
    POSITION = 5


@dataclass(frozen=True)
class SegmentMsg:
    path_index: int
    offset_q: int
    speed_limit: int
    lane_count: int
    route_type: int
    is_tunnel: bool
    is_bridge: bool
    is_emergency_lane: bool


@dataclass(frozen=True)
class ProfileMsg:
    path_index: int
    offset_q: int
    value0_q: int      # signed, CURVATURE_SCALE steps
    distance1_q: int
    value1_q: int
    interpolation: Interpolation


@dataclass(frozen=True)
class AttachmentMsg:
    path_index: int
    offset_q: int
    attribute_type: AttachmentType
    attribute_value: int


@dataclass(frozen=True)
class StubMsg:
    path_index: int
    offset_q: int
    branch_path_index: int  # 0 = branch path not transmitted
    turn_angle_q: int
    lane_count: int
    branch_probability_q: int


@dataclass(frozen=True)
class PositionMsg:
    path_index: int
    offset_q: int
    probability_q: int
    confidence_q: int
    gps_timestamp: int
    speed_q: int
    current_lane: int


AdasisMessage = Union[SegmentMsg, ProfileMsg, AttachmentMsg, StubMsg, PositionMsg]

# (field name, bit width, signed)
_LAYOUTS: dict[MsgType, tuple[tuple[str, int, bool], ...]] = {
    MsgType.SEGMENT: (
        ("path_index", 6, False), ("offset_q", 13, False),
        ("speed_limit", 8, False), ("lane_count", 3, False),
        ("route_type", 2, False), ("is_tunnel", 1, False),
        ("is_bridge", 1, False), ("is_emergency_lane", 1, False),
    ),
    MsgType.PROFILE: (
        ("path_index", 6, False), ("offset_q", 13, False),
        ("value0_q", 16, True), ("distance1_q", 13, False),
        ("value1_q", 16, True), ("interpolation", 1, False),
    ),
    MsgType.ATTACHMENT: (
        ("path_index", 6, False), ("offset_q", 13, False),
        ("attribute_type", 2, False), ("attribute_value", 16, False),
    ),
    MsgType.STUB: (
        ("path_index", 6, False), ("offset_q", 13, False),
        ("branch_path_index", 6, False), ("turn_angle_q", 7, False),
        ("lane_count", 3, False), ("branch_probability_q", 6, False),
    ),
    MsgType.POSITION: (
        ("path_index", 6, False), ("offset_q", 13, False),
        ("probability_q", 6, False), ("confidence_q", 6, False),
        ("gps_timestamp", 32, False), ("speed_q", 8, False),
        ("current_lane", 3, False),
    ),
}

_MSG_CLASSES: dict[MsgType, type] = {
    MsgType.SEGMENT: SegmentMsg,
    MsgType.PROFILE: ProfileMsg,
    MsgType.ATTACHMENT: AttachmentMsg,
    MsgType.STUB: StubMsg,
    MsgType.POSITION: PositionMsg,
}

_TYPE_OF_CLASS = {cls: mtype for mtype, cls in _MSG_CLASSES.items()}

FRAMES_PER_TYPE: dict[MsgType, int] = {
    mtype: math.ceil(sum(w for _, w, _ in layout) / PAYLOAD_BITS)
    for mtype, layout in _LAYOUTS.items()
}


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def quantize_offset(offset: float, path_length: float) -> int:
    """Map a meter offset to the 13-bit fraction of path_length."""
    if path_length <= 0:
        raise ValueError("path_length must be > 0")
    if offset < 0 or offset > path_length * (1 + 1e-9):
        raise ValueError(f"offset {offset} outside [0, {path_length}]")
    q = math.floor(offset / path_length * OFFSET_MAX + 0.5)
    return min(max(q, 0), OFFSET_MAX)


def dequantize_offset(q: int, path_length: float) -> float:
    """Inverse of quantize_offset; error is at most path_length / 16382."""
    if not 0 <= q <= OFFSET_MAX:
        raise ValueError(f"quantized offset {q} outside [0, {OFFSET_MAX}]")
    return q / OFFSET_MAX * path_length


def quantize_fraction(p: float) -> int:
    return min(max(math.floor(p * FRACTION_MAX + 0.5), 0), FRACTION_MAX)


def dequantize_fraction(q: int) -> float:
    return q / FRACTION_MAX


def quantize_curvature(value: float) -> int:
    q = math.floor(value * CURVATURE_SCALE + 0.5)
    return min(max(q, -CURVATURE_Q_MAX), CURVATURE_Q_MAX)


def dequantize_curvature(q: int) -> float:
    return q / CURVATURE_SCALE


def quantize_angle(deg: float) -> int:
    q = math.floor((deg + 180.0) / ANGLE_STEP_DEG + 0.5)
    return min(max(q, 0), 120)


def dequantize_angle(q: int) -> float:
    return q * ANGLE_STEP_DEG - 180.0


def quantize_speed(speed: float) -> int:
    return min(max(math.floor(speed / SPEED_STEP + 0.5), 0), SPEED_Q_MAX)


def dequantize_speed(q: int) -> float:
    return q * SPEED_STEP


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    counter: int
    msg_type: int
    continuation: bool
    payload: bytes  # exactly 7 bytes

    def to_bytes(self) -> bytes:
        header = (self.counter & 0x7) << 5 | (self.msg_type & 0x7) << 2
        header |= int(self.continuation) << 1
        return bytes([header]) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Frame":
        if len(raw) != FRAME_SIZE:
            raise ValueError(f"frame must be {FRAME_SIZE} bytes, got {len(raw)}")
        header = raw[0]
        return cls(
            counter=header >> 5,
            msg_type=(header >> 2) & 0x7,
            continuation=bool(header & 0x2),
            payload=raw[1:],
        )


@dataclass(frozen=True)
class GapEvent:
    expected_counter: int
    received_counter: int
    frame_index: int


@dataclass(frozen=True)
class DecodeErrorEvent:
    reason: str
    frame_index: int


StreamEvent = Union[GapEvent, DecodeErrorEvent]


def _pack_payload(msg: AdasisMessage) -> tuple[MsgType, list[bytes]]:
    mtype = _TYPE_OF_CLASS[type(msg)]
    layout = _LAYOUTS[mtype]
    acc = 0
    total_bits = 0
    for name, width, signed in layout:
        value = int(getattr(msg, name))
        lo = -(1 << (width - 1)) if signed else 0
        hi = (1 << (width - 1)) - 1 if signed else (1 << width) - 1
        if not lo <= value <= hi:
            raise FieldOverflowError(
                f"{type(msg).__name__}.{name} = {value} does not fit "
                f"{width} bits ({lo}..{hi})"
            )
        acc = (acc << width) | (value & ((1 << width) - 1))
        total_bits += width
    n_frames = FRAMES_PER_TYPE[mtype]
    acc <<= n_frames * PAYLOAD_BITS - total_bits
    payloads = [
        ((acc >> (PAYLOAD_BITS * (n_frames - 1 - i))) & ((1 << PAYLOAD_BITS) - 1))
        .to_bytes(7, "big")
        for i in range(n_frames)
    ]
    return mtype, payloads


def _unpack_payload(mtype: MsgType, payload: bytes) -> AdasisMessage:
    layout = _LAYOUTS[mtype]
    acc = int.from_bytes(payload, "big")
    bits_total = len(payload) * 8
    pos = 0
    values: dict[str, int | bool | IntEnum] = {}
    for name, width, signed in layout:
        raw = (acc >> (bits_total - pos - width)) & ((1 << width) - 1)
        if signed and raw >= 1 << (width - 1):
            raw -= 1 << width
        pos += width
        if name.startswith("is_"):
            values[name] = bool(raw)
        elif name == "interpolation":
            values[name] = Interpolation(raw)
        elif name == "attribute_type":
            values[name] = AttachmentType(raw)
        else:
            values[name] = raw
    return _MSG_CLASSES[mtype](**values)  # type: ignore[arg-type]


class FrameEncoder:
    """Stateful encoder; one instance per stream, single-threaded use."""

    def __init__(self, counter: int = 0) -> None:
        self.counter = counter % 8

    def encode(self, msg: AdasisMessage) -> list[Frame]:
        mtype, payloads = _pack_payload(msg)
        frames = []
        for i, payload in enumerate(payloads):
            frames.append(
                Frame(
                    counter=self.counter,
                    msg_type=int(mtype),
                    continuation=i < len(payloads) - 1,
                    payload=payload,
                )
            )
            self.counter = (self.counter + 1) % 8
        return frames

    def encode_all(self, msgs: list[AdasisMessage]) -> list[Frame]:
        out: list[Frame] = []
        for msg in msgs:
            out.extend(self.encode(msg))
        return out


def encode_message(
    msg: AdasisMessage, counter_state: int = 0
) -> tuple[list[Frame], int]:
    encoder = FrameEncoder(counter_state)
    frames = encoder.encode(msg)
    return frames, encoder.counter


@dataclass
class DecoderState:
    expected_counter: int = 0
    frame_index: int = 0
    partial: list[Frame] = field(default_factory=list)


class FrameDecoder:
    """Reassembles messages and reports counter gaps; never raises on input."""

    def __init__(self, state: DecoderState | None = None) -> None:
        self.state = state or DecoderState()

    def decode(
        self, frames: list[Frame]
    ) -> tuple[list[AdasisMessage], list[StreamEvent]]:
        msgs: list[AdasisMessage] = []
        events: list[StreamEvent] = []
        st = self.state
        for frame in frames:
            idx = st.frame_index
            if frame.counter != st.expected_counter:
                events.append(
                    GapEvent(st.expected_counter, frame.counter, idx)
                )
                st.partial.clear()
            st.expected_counter = (frame.counter + 1) % 8
            st.frame_index += 1
            if st.partial and st.partial[0].msg_type != frame.msg_type:
                events.append(DecodeErrorEvent("message type changed mid-message", idx))
                st.partial.clear()
            st.partial.append(frame)
            if frame.continuation:
                if len(st.partial) >= 2:  # no message spans more than 2 frames
                    events.append(DecodeErrorEvent("overlong message", idx))
                    st.partial.clear()
                continue
            parts, st.partial = st.partial, []
            try:
                mtype = MsgType(parts[0].msg_type)
            except ValueError:
                events.append(
                    DecodeErrorEvent(f"invalid type tag {parts[0].msg_type}", idx)
                )
                continue
            if len(parts) != FRAMES_PER_TYPE[mtype]:
                events.append(
                    DecodeErrorEvent(
                        f"{mtype.name.lower()} message needs "
                        f"{FRAMES_PER_TYPE[mtype]} frames, got {len(parts)}", idx
                    )
                )
                continue
            try:
                msgs.append(
                    _unpack_payload(mtype, b"".join(p.payload for p in parts))
                )
            except ValueError as exc:  # enum field with an unused bit pattern
                events.append(DecodeErrorEvent(f"bad field encoding: {exc}", idx))
        return msgs, events


def decode_stream(
    frames: list[Frame], state: DecoderState | None = None
) -> tuple[list[AdasisMessage], list[StreamEvent], DecoderState]:
    decoder = FrameDecoder(state)
    msgs, events = decoder.decode(frames)
    return msgs, events, decoder.state


# ---------------------------------------------------------------------------
# Horizon -> message stream
# ---------------------------------------------------------------------------


def horizon_to_messages(h: Horizon) -> list[AdasisMessage]:
    """Deterministic emission: position, then per path ascending its
    segments, stubs, profiles and attachments, each ascending by offset."""
    scale = h.reference_length
    for path in h.paths:
        if path.path_index > PATH_INDEX_MAX:
            raise FieldOverflowError(
                f"path index {path.path_index} exceeds {PATH_INDEX_MAX}"
            )
    msgs: list[AdasisMessage] = [
        PositionMsg(
            path_index=h.position.path_index,
            offset_q=quantize_offset(h.position.offset, scale),
            probability_q=quantize_fraction(h.position.probability),
            confidence_q=quantize_fraction(h.position.confidence),
            gps_timestamp=h.position.gps_timestamp,
            speed_q=quantize_speed(h.position.speed),
            current_lane=h.position.current_lane,
        )
    ]
    for path in sorted(h.paths, key=lambda p: p.path_index):
        idx = path.path_index
        for d in sorted(
            (d for d in h.descriptors if d.path_index == idx),
            key=lambda d: d.offset,
        ):
            msgs.append(
                SegmentMsg(
                    path_index=idx, offset_q=quantize_offset(d.offset, scale),
                    speed_limit=d.speed_limit, lane_count=d.lane_count,
                    route_type=d.route_type, is_tunnel=d.is_tunnel,
                    is_bridge=d.is_bridge,
                    is_emergency_lane=d.is_emergency_lane,
                )
            )
        for s in sorted(
            (s for s in h.stubs if s.parent_path == idx),
            key=lambda s: (s.offset, s.branch_path or 0),
        ):
            msgs.append(
                StubMsg(
                    path_index=idx, offset_q=quantize_offset(s.offset, scale),
                    branch_path_index=s.branch_path or 0,
                    turn_angle_q=quantize_angle(s.turn_angle),
                    lane_count=s.lane_count,
                    branch_probability_q=quantize_fraction(s.branch_probability),
                )
            )
        for pr in sorted(
            (pr for pr in h.profiles if pr.path_index == idx),
            key=lambda pr: pr.offset,
        ):
            msgs.append(
                ProfileMsg(
                    path_index=idx, offset_q=quantize_offset(pr.offset, scale),
                    value0_q=quantize_curvature(pr.value0),
                    distance1_q=quantize_offset(pr.distance1, scale),
                    value1_q=quantize_curvature(pr.value1),
                    interpolation=pr.interpolation,
                )
            )
        for a in sorted(
            (a for a in h.attachments if a.path_index == idx),
            key=lambda a: (a.offset, int(a.attribute_type), a.value),
        ):
            msgs.append(
                AttachmentMsg(
                    path_index=idx, offset_q=quantize_offset(a.offset, scale),
                    attribute_type=a.attribute_type, attribute_value=a.value,
                )
            )
    return msgs
