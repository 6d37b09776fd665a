"""Closed-loop scenario runner.

Each tick: vehicles advance along their most probable path, extract a
horizon from their cached map, stream it over their simulated bus into a
reconstructor (with bounded retransmission rounds when the bus is
bidirectional), observe ground truth against the map view, and uplink
through their vehicle cloud. The service cloud detects and heals on its
cycle interval; caches poll the patch feed on theirs. All randomness
derives from the scenario seed, so a scenario file maps to one byte-exact
metrics CSV.
"""

from __future__ import annotations

import csv
import logging
import random
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import IO

from .channel import (
    Channel,
    ChannelConfig,
    RetransmitRequest,
    RetransmitScope,
    intact_frames,
)
from .codec import Frame, FrameDecoder, FrameEncoder, horizon_to_messages
from .healing import (
    DataMessage,
    NoiseConfig,
    ServiceCloud,
    VehicleCloud,
    encode_batch,
    decode_batch,
    observe,
    sync_cache,
)
from .horizon import (
    Horizon,
    HorizonConfig,
    VehiclePosition,
    extract_horizon,
    mpp_next_segment,
)
from .reconstructor import HorizonReconstructor
from .road import RoadNetwork, generate_chain, generate_synthetic
from .scenario import Scenario, ScenarioError
from .store import (
    MapRecord,
    MapStore,
    attribute_layer,
    build_master_store,
    encode_patch,
    encode_snapshot,
)

log = logging.getLogger("mapchain.sim")

_HARD_ROUND_CAP = 1000  # safety bound on per-tick bus rounds


@dataclass
class TickMetrics:
    tick: int
    horizon_complete: tuple[bool, ...]
    open_deviations: int
    master_mismatch: int
    cache_mismatch: int
    frames_sent: int
    frames_dropped: int
    patch_bytes: int
    uplink_bytes: int


@dataclass
class FinalReport:
    ticks: int
    vehicles: int
    master_mismatch_final: int
    converged_tick: int | None
    frames_sent_total: int
    frames_dropped_total: int
    heal_patches_total: int
    patch_bytes_total: int
    uplink_bytes_total: int


@dataclass
class _Vehicle:
    vehicle_id: int
    segment: int
    offset: float
    speed: float
    start_segment: int
    start_offset: float
    cloud_index: int
    cache: MapStore
    channel: Channel
    encoder: FrameEncoder
    decoder: FrameDecoder
    recon: HorizonReconstructor
    noise_rng: random.Random
    tx_queue: deque[Frame]
    horizon: Horizon | None = None


def build_ground_truth(scenario: Scenario) -> RoadNetwork:
    if scenario.network_kind == "chain":
        return generate_chain(
            scenario.network_segments,
            segment_length=scenario.chain_segment_length,
            speed_limit=scenario.chain_speed_limit,
        )
    seed = scenario.network_seed if scenario.network_seed is not None else scenario.seed
    return generate_synthetic(seed, scenario.network_segments)


def _resolve_starts(scenario: Scenario, net: RoadNetwork) -> list[tuple[int, float]]:
    if scenario.starts:
        starts = list(scenario.starts)
    else:
        # Spread the fleet over segments with onward connections; a clustered
        # fleet on a dead end would never cover the map.
        viable = [
            seg_id for seg_id in sorted(net.segments)
            if net.adjacency[(net.segments[seg_id].to_node, seg_id)]
        ] or sorted(net.segments)
        stride = max(1, len(viable) // scenario.vehicles)
        starts = [
            (viable[(i * stride) % len(viable)], 0.0)
            for i in range(scenario.vehicles)
        ]
    for seg_id, offset in starts:
        if seg_id not in net.segments:
            raise ScenarioError(f"start segment {seg_id} not in network")
        if not 0.0 <= offset < net.segments[seg_id].length:
            raise ScenarioError(
                f"start offset {offset} outside segment {seg_id}"
            )
    return starts


def _inject_errors(scenario: Scenario, net: RoadNetwork, master: MapStore,
                   region_map: dict[int, int]) -> None:
    touched = set()
    for err in scenario.errors:
        if err.segment not in net.segments:
            raise ScenarioError(f"error references unknown segment {err.segment}")
        layer = attribute_layer(err.attribute)
        region = region_map[err.segment]
        current = master.get(layer, err.segment, err.attribute, region=region)
        if current == err.wrong_value:
            raise ScenarioError(
                f"injected value for segment {err.segment}.{err.attribute} "
                f"equals ground truth; nothing to heal"
            )
        master.put(MapRecord(layer, region, err.segment, err.attribute,
                             err.wrong_value))
        touched.add(region)
    for region in sorted(touched):
        master.commit(region)


def _advance(vehicle: _Vehicle, net: RoadNetwork) -> None:
    vehicle.offset += vehicle.speed  # 1 s ticks
    while True:
        seg_len = net.segments[vehicle.segment].length
        if vehicle.offset < seg_len:
            return
        nxt = mpp_next_segment(net, vehicle.segment)
        if nxt is None:
            vehicle.segment = vehicle.start_segment
            vehicle.offset = vehicle.start_offset
            return
        vehicle.offset -= seg_len
        vehicle.segment = nxt


def _bus_rounds(vehicle: _Vehicle, scenario: Scenario) -> bool:
    """Drain the TX queue through the bus, retransmitting while allowed.

    Returns the final completeness flag for this tick.
    """
    retransmits = 0
    rounds = 0
    while rounds < _HARD_ROUND_CAP:
        if not vehicle.tx_queue:
            if vehicle.recon.completeness().complete:
                return True
            if (not scenario.bidirectional
                    or retransmits >= scenario.max_retransmit_rounds):
                return False
            request = RetransmitRequest(
                from_counter=vehicle.encoder.counter,
                scope=RetransmitScope.FULL_HORIZON,
            )
            if not vehicle.channel.request_retransmission(request):
                return False
            for _ in vehicle.channel.pending_requests():
                assert vehicle.horizon is not None
                vehicle.tx_queue.extend(
                    vehicle.encoder.encode_all(horizon_to_messages(vehicle.horizon))
                )
            retransmits += 1
        chunk = [
            vehicle.tx_queue.popleft()
            for _ in range(min(scenario.frames_per_tick, len(vehicle.tx_queue)))
        ]
        deliveries = vehicle.channel.transmit(chunk)
        messages, events = vehicle.decoder.decode(intact_frames(deliveries))
        vehicle.recon.ingest(messages, events)
        rounds += 1
    return vehicle.recon.completeness().complete


def _vehicle_tick(
    vehicle: _Vehicle, tick: int, net: RoadNetwork, scenario: Scenario,
    hcfg: HorizonConfig, noise: NoiseConfig,
) -> tuple[bool, list[DataMessage]]:
    _advance(vehicle, net)
    pos = VehiclePosition(
        segment=vehicle.segment, offset=vehicle.offset, speed=vehicle.speed,
        gps_timestamp=tick * 1000,
    )
    vehicle.horizon = extract_horizon(net, vehicle.cache, pos, hcfg)
    vehicle.tx_queue.extend(
        vehicle.encoder.encode_all(horizon_to_messages(vehicle.horizon))
    )
    complete = _bus_rounds(vehicle, scenario)
    confirm = tick % scenario.confirm_interval == 0
    observations = observe(
        vehicle.vehicle_id, tick, net, vehicle.horizon, noise,
        vehicle.noise_rng, confirm=confirm,
    )
    return complete, observations


def _master_mismatch(net: RoadNetwork, master: MapStore,
                     region_map: dict[int, int]) -> int:
    count = 0
    for seg_id, seg in net.segments.items():
        region = region_map[seg_id]
        truth = {
            "speed_limit": seg.speed_limit,
            "lane_count": seg.lane_count,
            "route_type": int(seg.route_type),
            "is_tunnel": seg.is_tunnel,
            "is_bridge": seg.is_bridge,
            "is_emergency_lane": seg.is_emergency_lane,
        }
        for attribute, value in truth.items():
            layer = attribute_layer(attribute)
            if master.get(layer, seg_id, attribute, region=region) != value:
                count += 1
    return count


def _cache_mismatch(master: MapStore, caches: list[MapStore]) -> int:
    worst = 0
    regions = master.regions()
    for cache in caches:
        diff = 0
        for region in regions:
            master_records = master.record_set(region)
            cache_records = cache.record_set(region)
            keys = set(master_records) | set(cache_records)
            diff += sum(
                1 for key in keys
                if master_records.get(key) != cache_records.get(key)
            )
        worst = max(worst, diff)
    return worst


def _open_deviation_keys(service: ServiceCloud, clouds: list[VehicleCloud],
                         master: MapStore) -> int:
    """Keys anywhere in flight whose reported value disagrees with the master."""
    keys = set()
    for cloud in clouds:
        for msg in cloud.buffered():
            for obs in msg.observations:
                region = master.region_of(obs.layer, obs.segment, obs.attribute)
                if region is None:
                    continue
                current = master.get(obs.layer, obs.segment, obs.attribute,
                                     region=region)
                if obs.observed_value != current:
                    keys.add((obs.layer, region, obs.segment, obs.attribute))
    for key, values in service.pending_pool().items():
        layer, region, segment, attribute = key
        current = master.get(layer, segment, attribute, region=region)
        if any(v != current for v in values):
            keys.add(key)
    return len(keys)


def run(scenario: Scenario, parallel: bool = False) -> tuple[list[TickMetrics], FinalReport]:
    """Run a scenario to completion; deterministic for identical input."""
    scenario.validate()
    net = build_ground_truth(scenario)
    master, region_map = build_master_store(net, scenario.regions)
    _inject_errors(scenario, net, master, region_map)

    starts = _resolve_starts(scenario, net)
    hcfg = HorizonConfig(
        horizon_length=scenario.horizon_length, mode=scenario.horizon_mode,
        max_branch_depth=scenario.max_branch_depth,
        profile_tolerance=scenario.profile_tolerance,
    )
    noise = NoiseConfig(flip_probability=scenario.noise_flip_probability)
    service = ServiceCloud(master)
    clouds = [VehicleCloud(i) for i in range(scenario.clouds)]

    vehicles: list[_Vehicle] = []
    for i in range(scenario.vehicles):
        seg, off = starts[i]
        chan_cfg = ChannelConfig(
            drop_probability=scenario.drop_probability,
            corrupt_probability=scenario.corrupt_probability,
            bidirectional=scenario.bidirectional,
            seed=scenario.seed * 1_000_003 + 7919 * i + 1,
            frames_per_tick=scenario.frames_per_tick,
        )
        vehicles.append(
            _Vehicle(
                vehicle_id=i, segment=seg, offset=off, speed=scenario.speed,
                start_segment=seg, start_offset=off,
                cloud_index=i % scenario.clouds,
                cache=master.copy(),
                channel=Channel(chan_cfg),
                encoder=FrameEncoder(),
                decoder=FrameDecoder(),
                recon=HorizonReconstructor(scenario.horizon_length),
                noise_rng=random.Random(scenario.seed * 1_000_003 + 7919 * i + 2),
                tx_queue=deque(),
            )
        )

    metrics: list[TickMetrics] = []
    heal_patches_total = 0
    prev_sent = prev_dropped = 0
    for tick in range(1, scenario.duration + 1):
        if parallel and len(vehicles) > 1:
            with ThreadPoolExecutor(max_workers=min(8, len(vehicles))) as pool:
                results = list(
                    pool.map(
                        lambda v: _vehicle_tick(v, tick, net, scenario, hcfg, noise),
                        vehicles,
                    )
                )
        else:
            results = [
                _vehicle_tick(v, tick, net, scenario, hcfg, noise)
                for v in vehicles
            ]
        complete_flags = tuple(r[0] for r in results)
        for vehicle, (_, observations) in zip(vehicles, results):
            clouds[vehicle.cloud_index].submit(observations)

        uplink_bytes = 0
        patch_bytes = 0
        if tick % scenario.cycle_interval == 0:
            for cloud in clouds:
                batch = cloud.flush(tick)
                wire = encode_batch(batch)
                uplink_bytes += len(wire)
                service.receive_batch(decode_batch(wire))
            deviations = service.detect_deviations(scenario.threshold_k)
            if deviations:
                patches = service.heal(deviations)
                heal_patches_total += len(patches)
                log.info("tick %d: healed %d deviations in %d patches",
                         tick, len(deviations), len(patches))
            else:
                service.end_cycle()
            service.advance_jobs(tick)

        if tick % scenario.poll_interval == 0:
            for vehicle in vehicles:
                for region in master.regions():
                    feed = service.poll_updates(
                        region, vehicle.cache.version(region)
                    )
                    if feed.snapshot is not None:
                        patch_bytes += len(encode_snapshot(feed.snapshot))
                    else:
                        patch_bytes += sum(
                            len(encode_patch(p)) for p in feed.patches
                        )
                    sync_cache(vehicle.cache, feed)

        sent = sum(v.channel.stats.sent for v in vehicles)
        dropped = sum(v.channel.stats.dropped for v in vehicles)
        metrics.append(
            TickMetrics(
                tick=tick,
                horizon_complete=complete_flags,
                open_deviations=_open_deviation_keys(service, clouds, master),
                master_mismatch=_master_mismatch(net, master, region_map),
                cache_mismatch=_cache_mismatch(
                    master, [v.cache for v in vehicles]
                ),
                frames_sent=sent - prev_sent,
                frames_dropped=dropped - prev_dropped,
                patch_bytes=patch_bytes,
                uplink_bytes=uplink_bytes,
            )
        )
        prev_sent, prev_dropped = sent, dropped

    converged_tick = None
    for m in reversed(metrics):
        if m.master_mismatch == 0:
            converged_tick = m.tick
        else:
            break
    report = FinalReport(
        ticks=scenario.duration,
        vehicles=scenario.vehicles,
        master_mismatch_final=metrics[-1].master_mismatch,
        converged_tick=converged_tick,
        frames_sent_total=prev_sent,
        frames_dropped_total=prev_dropped,
        heal_patches_total=heal_patches_total,
        patch_bytes_total=sum(m.patch_bytes for m in metrics),
        uplink_bytes_total=sum(m.uplink_bytes for m in metrics),
    )
    return metrics, report


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

CSV_FIELDS = [f.name for f in fields(TickMetrics)]


def _format_value(name: str, value) -> str:
    if name == "horizon_complete":
        return "".join("1" if flag else "0" for flag in value)
    return str(value)


def emit_csv(metrics: list[TickMetrics], out: IO[str]) -> None:
    """Header plus one row per tick; locale-independent, newline-terminated."""
    if not metrics:
        raise ValueError("no metrics to emit")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for m in metrics:
        writer.writerow(
            [_format_value(f, getattr(m, f)) for f in CSV_FIELDS]
        )


def emit_csv_path(metrics: list[TickMetrics], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        emit_csv(metrics, fh)


def read_metrics_csv(path: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
