"""Crowdsourced map healing: vehicle observations, fleet clouds, one service cloud.

Vehicles compare the attributes their horizon carries (map view) against
ground truth on the segment they are traversing and uplink one DataMessage
per mismatching attribute, plus periodic confirmations. Vehicle clouds are
pure batching relays that deduplicate per tick. The service cloud tallies
observations against the master map, reports a deviation once enough
distinct vehicles agree on the same wrong value, heals the master store with
change-only patches and serves them to polling vehicle caches.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .horizon import Horizon
from .road import RoadNetwork
from .store import (
    BuildingBlock,
    ChangePatch,
    HistoryPrunedError,
    MapRecord,
    MapStore,
    RegionSnapshot,
    Scalar,
    StoreError,
    attribute_layer,
    decode_value,
    encode_value,
)

_MAGIC = b"SRS1"

OBSERVED_ATTRIBUTES = (
    "speed_limit", "lane_count", "route_type",
    "is_tunnel", "is_bridge", "is_emergency_lane",
)

_WRONG_VALUE_POOLS: dict[str, tuple[int, ...]] = {
    "speed_limit": (30, 40, 50, 60, 80, 90, 100, 120, 130),
    "lane_count": (1, 2, 3, 4),
    "route_type": (0, 1, 2, 3),
}


class HealingError(ValueError):
    pass


class DefinitionClass(IntEnum):
    SD = 0  # GPS, odometry, gyro
    HD = 1  # video, radar, ultrasonic
    AD = 2  # 360-degree video, LiDAR


class CloudTier(IntEnum):
    VEHICLE_CLOUD = 0  # per-fleet batching relay
    SERVICE_CLOUD = 1  # owns the master map; exactly one per deployment


class JobState(IntEnum):
    PENDING = 0
    ACTIVE = 1
    COMPLETE = 2
    FAILED = 3


@dataclass(frozen=True)
class Observation:
    layer: BuildingBlock
    segment: int
    attribute: str
    observed_value: Scalar


@dataclass(frozen=True)
class DataMessage:
    vehicle_id: int
    timestamp: int  # milliseconds
    definition_class: DefinitionClass
    segment: int
    offset: float
    observations: tuple[Observation, ...]
    payload: bytes = b""  # opaque blob for HD/AD classes

    def __post_init__(self) -> None:
        if self.definition_class is DefinitionClass.SD and not self.observations:
            raise HealingError("SD data message without observations")
        if self.definition_class is not DefinitionClass.SD and not self.payload:
            raise HealingError("HD/AD data message without payload blob")


@dataclass(frozen=True)
class JobRequest:
    job_id: int
    requested_class: DefinitionClass
    attribute: str | None
    region: int
    window_start: int  # ticks, inclusive
    window_end: int
    min_vehicle_count: int

    def __post_init__(self) -> None:
        if self.window_start > self.window_end:
            raise HealingError("job window is not well-ordered")
        if self.min_vehicle_count < 1:
            raise HealingError("min_vehicle_count must be >= 1")


@dataclass(frozen=True)
class JobStatus:
    job_id: int
    state: JobState
    progress: float


@dataclass(frozen=True)
class Deviation:
    layer: BuildingBlock
    region: int
    segment: int
    attribute: str
    map_value: Scalar
    observed_value: Scalar
    support: int
    first_seen: int
    last_seen: int


@dataclass(frozen=True)
class NoiseConfig:
    flip_probability: float = 0.0


# ---------------------------------------------------------------------------
# Vehicle side
# ---------------------------------------------------------------------------


def observe(
    vehicle_id: int,
    tick: int,
    net: RoadNetwork,
    horizon: Horizon,
    noise: NoiseConfig,
    rng: random.Random,
    confirm: bool = False,
) -> list[DataMessage]:
    """Sense the current segment and report mismatches against the map view.

    The map view is the horizon's descriptor of the segment under the
    vehicle; sensing reads ground truth, optionally corrupted per attribute
    with noise.flip_probability into a uniformly random wrong value. With
    confirm=True matching attributes are reported too.
    """
    seg_id = horizon.paths[0].segments[0]
    desc = next(
        d for d in horizon.descriptors if d.path_index == 1 and d.offset == 0.0
    )
    truth = net.segment(seg_id)
    map_view: dict[str, Scalar] = {
        "speed_limit": desc.speed_limit,
        "lane_count": desc.lane_count,
        "route_type": desc.route_type,
        "is_tunnel": desc.is_tunnel,
        "is_bridge": desc.is_bridge,
        "is_emergency_lane": desc.is_emergency_lane,
    }
    truth_view: dict[str, Scalar] = {
        "speed_limit": truth.speed_limit,
        "lane_count": truth.lane_count,
        "route_type": int(truth.route_type),
        "is_tunnel": truth.is_tunnel,
        "is_bridge": truth.is_bridge,
        "is_emergency_lane": truth.is_emergency_lane,
    }
    timestamp = tick * 1000
    messages: list[DataMessage] = []
    for attribute in OBSERVED_ATTRIBUTES:
        sensed = truth_view[attribute]
        if noise.flip_probability > 0 and rng.random() < noise.flip_probability:
            sensed = _wrong_value(rng, attribute, sensed)
        if sensed != map_view[attribute] or confirm:
            messages.append(
                DataMessage(
                    vehicle_id=vehicle_id, timestamp=timestamp,
                    definition_class=DefinitionClass.SD, segment=seg_id,
                    offset=0.0,
                    observations=(
                        Observation(attribute_layer(attribute), seg_id,
                                    attribute, sensed),
                    ),
                )
            )
    return messages


def _wrong_value(rng: random.Random, attribute: str, truth: Scalar) -> Scalar:
    if isinstance(truth, bool):
        return not truth
    pool = [v for v in _WRONG_VALUE_POOLS[attribute] if v != truth]
    return rng.choice(pool)


# ---------------------------------------------------------------------------
# Vehicle cloud (batching relay)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UplinkBatch:
    cloud_id: int
    tick: int
    messages: tuple[DataMessage, ...]


class VehicleCloud:
    """Per-fleet relay: deduplicates and batches per healing interval."""

    tier = CloudTier.VEHICLE_CLOUD

    def __init__(self, cloud_id: int) -> None:
        self.cloud_id = cloud_id
        self._buffer: list[DataMessage] = []
        self._seen: set[tuple] = set()

    def submit(self, messages: list[DataMessage]) -> None:
        for msg in messages:
            for obs in msg.observations:
                key = (msg.vehicle_id, int(obs.layer), obs.segment,
                       obs.attribute, obs.observed_value, msg.timestamp)
                if key in self._seen:
                    continue
                self._seen.add(key)
                self._buffer.append(
                    DataMessage(
                        vehicle_id=msg.vehicle_id, timestamp=msg.timestamp,
                        definition_class=msg.definition_class,
                        segment=msg.segment, offset=msg.offset,
                        observations=(obs,), payload=msg.payload,
                    )
                )

    def buffered(self) -> list[DataMessage]:
        return list(self._buffer)

    def flush(self, tick: int) -> UplinkBatch:
        """Drain the buffer into one batch for the service cloud."""
        batch = UplinkBatch(
            cloud_id=self.cloud_id, tick=tick, messages=tuple(self._buffer)
        )
        self._buffer.clear()
        self._seen.clear()
        return batch


def aggregate(cloud: VehicleCloud, messages: list[DataMessage]) -> None:
    cloud.submit(messages)


# ---------------------------------------------------------------------------
# Service cloud
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchFeedResult:
    """Either a patch chain or, when history is pruned, a full snapshot."""

    patches: tuple[ChangePatch, ...]
    snapshot: RegionSnapshot | None = None


@dataclass
class _Tally:
    vehicles: set[int] = field(default_factory=set)
    first_seen: int = 0
    last_seen: int = 0


@dataclass
class _JobRecord:
    request: JobRequest
    state: JobState = JobState.PENDING
    matched: set[int] = field(default_factory=set)
    transitions: list[tuple[JobState, JobState]] = field(default_factory=list)

    def move(self, new_state: JobState) -> None:
        self.transitions.append((self.state, new_state))
        self.state = new_state

    def status(self) -> JobStatus:
        want = self.request.min_vehicle_count
        progress = 1.0 if self.state is JobState.COMPLETE else len(self.matched) / want
        return JobStatus(self.request.job_id, self.state, min(progress, 1.0))


class ServiceCloud:
    """Owns the master map; folds uplink batches, detects deviations, heals."""

    tier = CloudTier.SERVICE_CLOUD

    def __init__(self, master: MapStore) -> None:
        self.master = master
        self._pool: dict[tuple, dict[Scalar, _Tally]] = {}
        self._jobs: dict[int, _JobRecord] = {}

    # -- uplink ---------------------------------------------------------------

    def receive_batch(self, batch: UplinkBatch) -> None:
        for msg in batch.messages:
            if msg.definition_class is not DefinitionClass.SD:
                continue  # healing operates on SD scalar attributes only
            for obs in msg.observations:
                region = self.master.region_of(obs.layer, obs.segment, obs.attribute)
                if region is None:
                    continue  # observation for a key the master does not hold
                key = (obs.layer, region, obs.segment, obs.attribute)
                tally = self._pool.setdefault(key, {}).setdefault(
                    obs.observed_value, _Tally(first_seen=msg.timestamp,
                                               last_seen=msg.timestamp)
                )
                tally.vehicles.add(msg.vehicle_id)
                tally.first_seen = min(tally.first_seen, msg.timestamp)
                tally.last_seen = max(tally.last_seen, msg.timestamp)
            self._match_jobs(msg)

    def open_observation_keys(self) -> int:
        """Keys with at least one report disagreeing with the master map."""
        count = 0
        for (layer, region, segment, attribute), values in self._pool.items():
            map_value = self.master.get(layer, segment, attribute, region=region)
            if any(v != map_value for v in values):
                count += 1
        return count

    def pending_pool(self) -> dict[tuple, list[Scalar]]:
        """Observation values accumulated since the last healing cycle."""
        return {key: list(values) for key, values in self._pool.items()}

    # -- deviation detection and healing ---------------------------------------

    def detect_deviations(self, threshold_k: int) -> list[Deviation]:
        """Majority vote per key over values that differ from the master map."""
        if threshold_k < 1:
            raise HealingError("threshold_k must be >= 1")
        deviations: list[Deviation] = []
        for key in sorted(self._pool, key=lambda k: (int(k[0]), k[1], k[2], k[3])):
            layer, region, segment, attribute = key
            map_value = self.master.get(layer, segment, attribute, region=region)
            candidates = [
                (len(t.vehicles), value, t)
                for value, t in self._pool[key].items()
                if value != map_value and len(t.vehicles) >= threshold_k
            ]
            if not candidates:
                continue
            # Majority wins; ties break toward the smaller value.
            candidates.sort(key=lambda c: (-c[0], c[1]))
            support, value, tally = candidates[0]
            deviations.append(
                Deviation(
                    layer=layer, region=region, segment=segment,
                    attribute=attribute, map_value=map_value,
                    observed_value=value, support=support,
                    first_seen=tally.first_seen, last_seen=tally.last_seen,
                )
            )
        return deviations

    def heal(self, deviations: list[Deviation]) -> list[ChangePatch]:
        """Commit observed values into the master map, one patch per region."""
        by_region: dict[int, list[Deviation]] = {}
        for dev in deviations:
            by_region.setdefault(dev.region, []).append(dev)
        patches: list[ChangePatch] = []
        for region in sorted(by_region):
            for dev in by_region[region]:
                self.master.put(
                    MapRecord(dev.layer, region, dev.segment, dev.attribute,
                              dev.observed_value)
                )
            _, patch = self.master.commit(region)
            patches.append(patch)
        self._pool.clear()  # observations consumed by this healing cycle
        return patches

    def end_cycle(self) -> None:
        """Discard the observation pool when a cycle heals nothing."""
        self._pool.clear()

    # -- patch feed -------------------------------------------------------------

    def poll_updates(self, region: int, have_version: int) -> PatchFeedResult:
        """Patch chain from have_version to current; snapshot if pruned."""
        current = self.master.version(region)
        if have_version > current:
            raise StoreError(
                f"cache version {have_version} ahead of master {current}"
            )
        try:
            chain = self.master.diff(region, have_version, current)
        except HistoryPrunedError:
            return PatchFeedResult(
                patches=(), snapshot=self.master.snapshot(region)
            )
        return PatchFeedResult(patches=tuple(chain))

    # -- jobs ---------------------------------------------------------------------

    def submit_job(self, request: JobRequest) -> JobStatus:
        if request.job_id in self._jobs:
            raise HealingError(f"duplicate job id {request.job_id}")
        record = _JobRecord(request=request)
        self._jobs[request.job_id] = record
        return record.status()

    def _match_jobs(self, msg: DataMessage) -> None:
        tick = msg.timestamp // 1000
        for record in self._jobs.values():
            req = record.request
            if record.state in (JobState.COMPLETE, JobState.FAILED):
                continue
            if not req.window_start <= tick <= req.window_end:
                continue
            if msg.definition_class is not req.requested_class:
                continue
            if req.attribute is not None and not any(
                o.attribute == req.attribute for o in msg.observations
            ):
                continue
            region = self._message_region(msg)
            if region != req.region:
                continue
            if record.state is JobState.PENDING:
                record.move(JobState.ACTIVE)
            record.matched.add(msg.vehicle_id)

    def _message_region(self, msg: DataMessage) -> int | None:
        for obs in msg.observations:
            region = self.master.region_of(obs.layer, obs.segment, obs.attribute)
            if region is not None:
                return region
        return self.master.region_of(
            BuildingBlock.ROUTING, msg.segment, "route_type"
        )

    def advance_jobs(self, tick: int) -> list[JobStatus]:
        """Resolve jobs whose vehicle quota is met or whose window expired."""
        statuses = []
        for job_id in sorted(self._jobs):
            record = self._jobs[job_id]
            if record.state in (JobState.PENDING, JobState.ACTIVE):
                if len(record.matched) >= record.request.min_vehicle_count:
                    if record.state is JobState.PENDING:
                        record.move(JobState.ACTIVE)
                    record.move(JobState.COMPLETE)
                elif tick > record.request.window_end:
                    record.move(JobState.FAILED)
            statuses.append(record.status())
        return statuses

    def job_transitions(self, job_id: int) -> list[tuple[JobState, JobState]]:
        return list(self._jobs[job_id].transitions)


def sync_cache(cache: MapStore, feed: PatchFeedResult) -> None:
    """Bring a vehicle cache up to date from a poll response."""
    if feed.snapshot is not None:
        cache.restore_snapshot(feed.snapshot)
        return
    for patch in feed.patches:
        cache.apply_patch(patch)


# ---------------------------------------------------------------------------
# Uplink batch wire format ("SRS1", little-endian, length-prefixed records)
# ---------------------------------------------------------------------------


def encode_batch(batch: UplinkBatch) -> bytes:
    out = [_MAGIC, struct.pack("<III", batch.cloud_id, batch.tick,
                               len(batch.messages))]
    for msg in batch.messages:
        body = encode_data_message(msg)
        out.append(struct.pack("<H", len(body)))
        out.append(body)
    return b"".join(out)


def decode_batch(data: bytes) -> UplinkBatch:
    if data[:4] != _MAGIC:
        raise HealingError("bad uplink batch magic")
    cloud_id, tick, count = struct.unpack_from("<III", data, 4)
    pos = 16
    messages = []
    for _ in range(count):
        (blen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        messages.append(decode_data_message(data[pos:pos + blen]))
        pos += blen
    return UplinkBatch(cloud_id=cloud_id, tick=tick, messages=tuple(messages))


def encode_data_message(msg: DataMessage) -> bytes:
    body = struct.pack(
        "<IQBIdH", msg.vehicle_id, msg.timestamp, int(msg.definition_class),
        msg.segment, msg.offset, len(msg.observations),
    )
    for obs in msg.observations:
        attr = obs.attribute.encode("utf-8")
        body += struct.pack("<BIB", int(obs.layer), obs.segment, len(attr))
        body += attr
        body += encode_value(obs.attribute, obs.observed_value)
    body += struct.pack("<H", len(msg.payload)) + msg.payload
    return body


def decode_data_message(data: bytes) -> DataMessage:
    vehicle_id, timestamp, cls, segment, offset, n_obs = struct.unpack_from(
        "<IQBIdH", data, 0
    )
    pos = struct.calcsize("<IQBIdH")
    observations = []
    for _ in range(n_obs):
        layer, seg, alen = struct.unpack_from("<BIB", data, pos)
        pos += 6
        attribute = data[pos:pos + alen].decode("utf-8")
        pos += alen
        value, pos = decode_value(data, pos)
        observations.append(
            Observation(BuildingBlock(layer), seg, attribute, value)
        )
    (plen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    payload = data[pos:pos + plen]
    return DataMessage(
        vehicle_id=vehicle_id, timestamp=timestamp,
        definition_class=DefinitionClass(cls), segment=segment, offset=offset,
        observations=tuple(observations), payload=payload,
    )


def encode_job_request(req: JobRequest) -> bytes:
    attr = (req.attribute or "").encode("utf-8")
    return struct.pack(
        "<IBBIQQI", req.job_id, int(req.requested_class), len(attr),
        req.region, req.window_start, req.window_end, req.min_vehicle_count,
    ) + attr


def decode_job_request(data: bytes) -> JobRequest:
    job_id, cls, alen, region, start, end, min_count = struct.unpack_from(
        "<IBBIQQI", data, 0
    )
    pos = struct.calcsize("<IBBIQQI")
    attribute = data[pos:pos + alen].decode("utf-8") or None
    return JobRequest(
        job_id=job_id, requested_class=DefinitionClass(cls),
        attribute=attribute, region=region, window_start=start,
        window_end=end, min_vehicle_count=min_count,
    )


def encode_job_status(status: JobStatus) -> bytes:
    return struct.pack("<IBd", status.job_id, int(status.state), status.progress)


def decode_job_status(data: bytes) -> JobStatus:
    job_id, state, progress = struct.unpack_from("<IBd", data, 0)
    return JobStatus(job_id=job_id, state=JobState(state), progress=progress)
