import random

from _builders import random_connected_network
from mapchain.channel import Channel, ChannelConfig, intact_frames
from mapchain.codec import (
    FrameDecoder,
    FrameEncoder,
    GapEvent,
    PositionMsg,
    ProfileMsg,
    SegmentMsg,
    StubMsg,
    horizon_to_messages,
)
from mapchain.horizon import HorizonConfig, VehiclePosition, extract_horizon
from mapchain.reconstructor import (
    PENDING_BUFFER_LIMIT,
    HorizonReconstructor,
    build_horizon,
    compare_horizons,
    completeness,
    ingest,
)
from mapchain.store import build_master_store


def sample_horizon(seed, n_segments=35, horizon_length=600.0, offset=1.0):
    rng = random.Random(seed)
    net = random_connected_network(rng, n_segments)
    store, _ = build_master_store(net, 1)
    start = rng.choice(sorted(net.segments))
    pos = VehiclePosition(segment=start, offset=offset, speed=12.0,
                          gps_timestamp=1000)
    return extract_horizon(net, store, pos,
                           HorizonConfig(horizon_length=horizon_length))


class TestLosslessAssembly:
    def test_matches_provider_horizon(self):
        for seed in range(10):
            h = sample_horizon(seed)
            msgs = horizon_to_messages(h)
            state = HorizonReconstructor(h.reference_length)
            state.ingest(msgs)
            assert state.completeness().complete
            assert compare_horizons(h, build_horizon(state)) == []

    def test_functional_wrappers(self):
        h = sample_horizon(3)
        state = ingest(HorizonReconstructor(h.reference_length),
                       horizon_to_messages(h))
        assert completeness(state).complete


class TestCompleteness:
    def test_fresh_state_missing_position(self):
        state = HorizonReconstructor(500.0)
        report = state.completeness()
        assert not report.complete
        assert report.missing == ["position"]

    def test_missing_all_profiles(self):
        h = sample_horizon(1)
        msgs = [m for m in horizon_to_messages(h)
                if not isinstance(m, ProfileMsg)]
        state = HorizonReconstructor(h.reference_length)
        state.ingest(msgs)
        report = state.completeness()
        assert not report.complete
        assert all("profile coverage" in item for item in report.missing)

    def test_one_dropped_segment_is_located(self):
        h = sample_horizon(2)
        msgs = horizon_to_messages(h)
        segments = [m for m in msgs if isinstance(m, SegmentMsg)
                    and m.path_index == 1]
        victim = segments[len(segments) // 2]
        state = HorizonReconstructor(h.reference_length)
        state.ingest([m for m in msgs if m is not victim])
        report = state.completeness()
        assert not report.complete
        # The surviving speed attachment pinpoints the missing span.
        assert any(f"segment at q{victim.offset_q}" in item
                   for item in report.missing)
        assert any("segments" in item for item in report.missing)

    def test_missing_descriptor_reported(self):
        h = sample_horizon(4)
        msgs = horizon_to_messages(h)
        from mapchain.codec import AttachmentMsg
        from mapchain.horizon import AttachmentType

        kept = [
            m for m in msgs
            if not (isinstance(m, AttachmentMsg)
                    and m.attribute_type is AttachmentType.PATH_METADATA
                    and m.path_index == 1)
        ]
        state = HorizonReconstructor(h.reference_length)
        state.ingest(kept)
        report = state.completeness()
        assert not report.complete
        assert any(item == "path 1: descriptor" for item in report.missing)

    def test_gap_events_counted_until_closure(self):
        h = sample_horizon(5)
        msgs = horizon_to_messages(h)
        state = HorizonReconstructor(h.reference_length)
        gap = GapEvent(expected_counter=1, received_counter=3, frame_index=9)
        state.ingest(msgs[:2], [gap])
        report = state.completeness()
        assert not report.complete and report.unresolved_gaps == 1
        state.ingest(msgs)
        report = state.completeness()
        assert report.complete and report.unresolved_gaps == 0


class TestIdempotence:
    def test_duplicate_ingest_is_noop(self):
        h = sample_horizon(6)
        msgs = horizon_to_messages(h)
        state = HorizonReconstructor(h.reference_length)
        state.ingest(msgs)
        snapshot = build_horizon(state)
        count = state.entity_count()
        state.ingest(msgs)  # full duplicate (retransmission)
        assert state.entity_count() == count
        assert build_horizon(state) == snapshot

    def test_duplicate_single_segment(self):
        h = sample_horizon(7)
        msgs = horizon_to_messages(h)
        seg = next(m for m in msgs if isinstance(m, SegmentMsg))
        state = HorizonReconstructor(h.reference_length)
        state.ingest(msgs)
        before = build_horizon(state)
        state.ingest([seg])
        assert build_horizon(state) == before


class TestBuffering:
    def test_messages_for_unknown_path_wait_for_first_segment(self):
        h = sample_horizon(18)  # seed chosen to yield a branch path
        assert len(h.paths) >= 2
        msgs = horizon_to_messages(h)
        state = HorizonReconstructor(h.reference_length)
        stubs = [m for m in msgs if isinstance(m, StubMsg)]
        non_segment_first = sorted(
            msgs, key=lambda m: isinstance(m, (SegmentMsg,))
        )
        state.ingest(non_segment_first)
        assert state.completeness().complete
        assert compare_horizons(h, build_horizon(state)) == []
        assert len(state.pending) == 0
        assert stubs  # scenario actually exercised branch content

    def test_buffer_bounded_with_overflow_events(self):
        state = HorizonReconstructor(500.0)
        for i in range(PENDING_BUFFER_LIMIT + 10):
            state.ingest([
                StubMsg(path_index=9, offset_q=i % 8192, branch_path_index=0,
                        turn_angle_q=0, lane_count=1, branch_probability_q=0)
            ])
        assert len(state.pending) == PENDING_BUFFER_LIMIT
        assert state.overflow_count == 10


class TestEpochs:
    def test_newer_position_resets_state(self):
        h = sample_horizon(9)
        msgs = horizon_to_messages(h)
        state = HorizonReconstructor(h.reference_length)
        state.ingest(msgs)
        assert state.completeness().complete
        newer = PositionMsg(path_index=1, offset_q=0, probability_q=63,
                            confidence_q=63, gps_timestamp=2000, speed_q=20,
                            current_lane=1)
        state.ingest([newer])
        assert not state.completeness().complete
        assert state.paths == {}

    def test_stale_position_ignored(self):
        state = HorizonReconstructor(500.0)
        now = PositionMsg(1, 0, 63, 63, 5000, 20, 1)
        old = PositionMsg(1, 100, 63, 63, 4000, 20, 1)
        state.ingest([now, old])
        assert state.position == now

    def test_same_timestamp_accumulates(self):
        h = sample_horizon(10)
        msgs = horizon_to_messages(h)
        state = HorizonReconstructor(h.reference_length)
        half = len(msgs) // 2
        state.ingest(msgs[:half])
        state.ingest(msgs)  # retransmission of the same extraction
        assert state.completeness().complete


class TestMonotoneRecovery:
    def test_entity_count_never_decreases_over_lossy_rounds(self):
        h = sample_horizon(11)
        msgs = horizon_to_messages(h)
        channel = Channel(ChannelConfig(drop_probability=0.3, seed=17,
                                        bidirectional=True))
        encoder = FrameEncoder()
        decoder = FrameDecoder()
        state = HorizonReconstructor(h.reference_length)
        last = 0
        for _ in range(12):
            frames = encoder.encode_all(msgs)
            deliveries = channel.transmit(frames)
            got, events = decoder.decode(intact_frames(deliveries))
            state.ingest(got, events)
            count = state.entity_count()
            assert count >= last
            last = count
        assert state.completeness().complete


def test_compare_detects_attribute_corruption():
    import dataclasses

    h = sample_horizon(12)
    msgs = horizon_to_messages(h)
    idx = next(i for i, m in enumerate(msgs) if isinstance(m, SegmentMsg))
    msgs[idx] = dataclasses.replace(msgs[idx],
                                    speed_limit=msgs[idx].speed_limit + 1)
    state = HorizonReconstructor(h.reference_length)
    state.ingest(msgs)
    assert compare_horizons(h, build_horizon(state)) != []
