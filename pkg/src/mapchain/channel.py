"""Simulated frame bus with seeded loss and corruption.

Frames are dropped or bit-flipped independently per frame from a seeded PRNG,
so identical (config, input) always reproduces the same delivery sequence.
Corruption is flagged out-of-band on the delivery record, standing in for the
link-layer integrity check of a real bus; receivers discard flagged frames,
which turns corruption into loss. An optional reverse control path carries
retransmission requests when the channel is bidirectional.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

from .codec import PAYLOAD_BITS, Frame


class RetransmitScope(IntEnum):
    SINCE_COUNTER = 0
    FULL_HORIZON = 1


@dataclass(frozen=True)
class RetransmitRequest:
    from_counter: int
    scope: RetransmitScope = RetransmitScope.FULL_HORIZON

    def __post_init__(self) -> None:
        if not 0 <= self.from_counter <= 7:
            raise ValueError("from_counter must be a 3-bit value")


@dataclass(frozen=True)
class ChannelConfig:
    drop_probability: float = 0.0
    corrupt_probability: float = 0.0
    bidirectional: bool = False
    seed: int = 0
    frames_per_tick: int = 256

    def __post_init__(self) -> None:
        for name in ("drop_probability", "corrupt_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.frames_per_tick <= 0:
            raise ValueError("frames_per_tick must be > 0")


@dataclass(frozen=True)
class Delivery:
    frame: Frame
    corrupted: bool


@dataclass
class ChannelStats:
    sent: int = 0
    dropped: int = 0
    corrupted: int = 0
    delivered: int = 0


class Channel:
    """One simulated bus; owned by a single simulation loop."""

    def __init__(self, config: ChannelConfig) -> None:
        self.config = config
        self.stats = ChannelStats()
        self._rng = random.Random(config.seed)
        self._requests: deque[RetransmitRequest] = deque()

    def transmit(self, frames: list[Frame]) -> list[Delivery]:
        """Deliver frames in order, dropping and corrupting independently."""
        out: list[Delivery] = []
        for frame in frames:
            self.stats.sent += 1
            if self._rng.random() < self.config.drop_probability:
                self.stats.dropped += 1
                continue
            corrupted = self._rng.random() < self.config.corrupt_probability
            if corrupted:
                frame = _flip_payload_bit(frame, self._rng.randrange(PAYLOAD_BITS))
                self.stats.corrupted += 1
            self.stats.delivered += 1
            out.append(Delivery(frame=frame, corrupted=corrupted))
        return out

    def request_retransmission(self, request: RetransmitRequest) -> bool:
        """Queue a reverse-path request; impossible on unidirectional buses."""
        if not self.config.bidirectional:
            return False
        self._requests.append(request)
        return True

    def pending_requests(self) -> list[RetransmitRequest]:
        """Drain requests queued since the last call (provider side)."""
        out = list(self._requests)
        self._requests.clear()
        return out


def _flip_payload_bit(frame: Frame, bit: int) -> Frame:
    byte_i, bit_i = divmod(bit, 8)
    payload = bytearray(frame.payload)
    payload[byte_i] ^= 0x80 >> bit_i
    return replace(frame, payload=bytes(payload))


def intact_frames(deliveries: list[Delivery]) -> list[Frame]:
    """Receiver-side filter: corrupted frames are discarded as lost."""
    return [d.frame for d in deliveries if not d.corrupted]


def frames_since_counter(frames: list[Frame], from_counter: int) -> list[Frame]:
    """Provider-side span for a since_counter retransmission request.

    Returns the suffix of the last emission starting at the most recent frame
    bearing from_counter; with a 3-bit counter that pins the span to at most
    8 frames of ambiguity, so requesters should ask promptly. Falls back to
    the whole emission when the counter is not present.
    """
    for i in range(len(frames) - 1, -1, -1):
        if frames[i].counter == from_counter:
            return list(frames[i:])
    return list(frames)
