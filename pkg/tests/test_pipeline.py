from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from movo import crypto, mam
from movo.pipeline import (
    AccessDenied,
    Anchor,
    DevicePipeline,
    Manifest,
    PacketFormatError,
    consumer_read,
    decode_samples,
    encode_samples,
    stream_fingerprint,
)
from movo.sensors import (
    AFFECT_MEASUREMENT,
    CAMERA_FRAME,
    VEHICLE_POINT,
    SensorSample,
    camera_source,
    location_source,
    sample_times,
    vehicle_source,
)

from helpers import World


def make_pipeline(world: World, **kwargs) -> DevicePipeline:
    p = DevicePipeline(world.sim, world.owner_account, world.store, world.ledger, world.authz, world.rng, **kwargs)
    p.setup()
    return p


# -- sources -----------------------------------------------------------------------


def test_camera_source_for_a_minute():
    records = list(camera_source(random.Random(0), 60_000))
    assert len(records) == 600
    frames = [r[0] for r in records]
    assert all(f.sensor_type == CAMERA_FRAME and len(f.payload) == 100_000 for f in frames)
    assert sum(len(f.payload) for f in frames) == pytest.approx(60_000_000, rel=0.05)
    assert all(r[1].sensor_type == AFFECT_MEASUREMENT and r[1].produced_at == r[0].produced_at for r in records)


def test_vehicle_source_for_a_minute():
    points = [r[0] for r in vehicle_source(random.Random(0), 60_000)]
    assert len(points) == 5400
    assert all(p.sensor_type == VEHICLE_POINT for p in points)
    assert [p.produced_at for p in points[:3]] == [0, 11, 22]


def test_vehicle_point_value_is_capped_at_256_chars():
    point = next(vehicle_source(random.Random(0), 1000, point_bytes=10_000))[0]
    assert len(json.loads(point.payload)["value"]) == 256


def test_zero_rate_gives_an_empty_stream():
    assert list(sample_times(0, 60_000)) == []
    assert list(camera_source(random.Random(0), 60_000, rate_hz=0)) == []
    assert list(location_source(random.Random(0), 0)) == []


def test_sample_times_do_not_drift():
    times = list(sample_times(90, 60_000))
    assert len(times) == 5400
    assert sum(1 for t in times if t < 1000) == 90
    assert times[-1] < 60_000


# -- packets, manifests and anchors ---------------------------------------------------


@given(st.lists(st.tuples(st.sampled_from([CAMERA_FRAME, AFFECT_MEASUREMENT, VEHICLE_POINT]), st.integers(0, 2**40), st.binary(max_size=300)), max_size=20))
@settings(max_examples=200)
def test_packet_encoding_round_trip(items):
    samples = [SensorSample(t, ts, p) for t, ts, p in items]
    blob = encode_samples(VEHICLE_POINT, 1000, 2000, samples)
    assert decode_samples(blob) == (VEHICLE_POINT, 1000, 2000, samples)


def test_truncated_packet_is_rejected():
    blob = encode_samples(VEHICLE_POINT, 0, 1000, [SensorSample(VEHICLE_POINT, 1, b"abc")])
    for cut in (1, 5, len(blob) - 1):
        with pytest.raises(PacketFormatError):
            decode_samples(blob[:cut])
    with pytest.raises(PacketFormatError):
        decode_samples(blob + b"x")


def test_manifest_and_anchor_round_trip():
    slots = [[crypto.hash(bytes([i, j])) for j in range(i % 3)] for i in range(20)]
    m = Manifest(crypto.hash(b"root"), 4, slots, {VEHICLE_POINT: 20})
    assert Manifest.decode(m.encode()) == m
    anchor = Anchor(4, len(m.packet_digests), crypto.hash(b"m"), tuple(m.slot_roots()))
    body = anchor.encode()
    assert len(body) == 14 + 32 + 20 * 32
    assert Anchor.decode(body) == anchor
    with pytest.raises(PacketFormatError):
        Anchor.decode(body[:-1])


# -- producer --------------------------------------------------------------------------


def test_per_record_packets_for_twenty_seconds_of_camera(world):
    p = make_pipeline(world, records_per_packet=1)
    p.start([camera_source(random.Random(1), 20_000)], 20_000)
    world.sim.run()
    assert len(p.packets) == 200
    assert all(pk.sample_count == 2 for pk in p.packets)
    assert len(p.messages) == 1
    assert p.check_invariants() == []


def test_batched_camera_gives_one_packet_per_second(world):
    p = make_pipeline(world)
    p.start([camera_source(random.Random(1), 20_000)], 20_000)
    world.sim.run()
    assert len(p.packets) == 20
    assert all(pk.sample_count == 20 for pk in p.packets)
    assert len({pk.interval for pk in p.packets}) == 20


def test_batched_vehicle_packets_hold_ninety_points(world):
    # 90 points of about 300 bytes each in every 1 s packet
    p = make_pipeline(world)
    p.start([vehicle_source(random.Random(1), 20_000, point_bytes=300)], 20_000)
    world.sim.run()
    assert len(p.packets) == 20
    assert all(pk.sample_count == 90 for pk in p.packets)
    assert all(len(pk.ciphertext) == pytest.approx(27_000, rel=0.05) for pk in p.packets)


def test_a_gap_in_the_stream_emits_no_packets():
    world = World()
    p = make_pipeline(world)
    p.start([vehicle_source(random.Random(1), 5_000)], 20_000)
    world.sim.run()
    assert len(p.packets) == 5
    assert sorted(pk.interval[0] for pk in p.packets) == [0, 1000, 2000, 3000, 4000]


def test_a_minute_of_data_gives_three_anchors_of_three_transactions(world):
    p = make_pipeline(world)
    p.start([vehicle_source(random.Random(2), 60_000)], 60_000)
    world.sim.run()
    assert len(p.messages) == 3
    assert [len(m.chunk_tx_ids) for m in p.messages] == [3, 3, 3]
    assert [mam.confirmation_latency(world.ledger, m) for m in p.messages] == [20_000] * 3
    assert p.check_invariants() == []


def test_an_empty_interval_still_gets_a_heartbeat(world):
    p = make_pipeline(world)
    p.start([], 40_000)
    world.sim.run()
    assert len(p.messages) == 2
    assert [len(m.chunk_tx_ids) for m in p.messages] == [3, 3]
    side = p.channel.side_key
    bodies = mam.fetch(world.ledger, p.channel_root, side)
    assert [Anchor.decode(b).packet_count for b in bodies] == [0, 0]


def test_anchors_wait_for_an_unavailable_ledger():
    world = World()
    p = make_pipeline(world)
    world.sim.at(19_000, setattr, world.ledger, "available", False)
    world.sim.at(26_000, setattr, world.ledger, "available", True)
    p.start([vehicle_source(random.Random(3), 60_000)], 60_000)
    world.sim.run()
    assert p.anchor_retries > 0
    assert len(p.messages) == 3
    assert p.messages[0].published_at >= 26_000
    assert p.check_invariants() == []
    assert p.failures == []


def test_anchoring_gives_up_after_bounded_retries():
    world = World()
    p = make_pipeline(world, max_retries=2)
    world.ledger.available = False
    p.start([], 20_000)
    world.sim.run()
    assert p.messages == []
    assert any("giving up" in f for f in p.failures)
    assert p.check_invariants() != []


def test_backpressure_holds_sources_until_the_store_catches_up():
    world = World(base_latency_ms=2_000, concurrency_limit=4)
    p = make_pipeline(world, max_pending=16)
    p.start([vehicle_source(random.Random(4), 20_000)], 20_000)
    world.sim.run()
    assert p.samples_emitted == 1800
    assert len(p.messages) == 1
    assert world.store.backlog == 0
    assert p.check_invariants() == []


def test_upload_failures_are_reported_not_absorbed():
    world = World(capacity_bytes=500_000)
    p = make_pipeline(world)
    p.start([camera_source(random.Random(5), 20_000)], 20_000)
    world.sim.run()
    assert p.packets_failed > 0
    assert any("upload failed" in f for f in p.failures)
    assert p.check_invariants() == []


# -- consumer ----------------------------------------------------------------------------


def produce(world: World, duration_ms: int = 60_000, **kwargs) -> DevicePipeline:
    p = make_pipeline(world, keep_samples=True, **kwargs)
    p.start([camera_source(random.Random(6), duration_ms)], duration_ms)
    world.sim.run()
    return p


def test_granted_consumer_recovers_every_frame_byte_for_byte(world):
    p = produce(world)
    world.owner_account.grant(world.insurer.address, p.channel_root)
    result = consumer_read(world.ledger, world.store, world.chain, world.authz, world.insurer, p.channel_root)
    assert result.alarms == [] and result.denied == []
    assert result.messages == 3
    frames = sorted((s for s in result.samples if s.sensor_type == CAMERA_FRAME), key=lambda s: s.produced_at)
    produced = sorted((s for s in p.produced if s.sensor_type == CAMERA_FRAME), key=lambda s: s.produced_at)
    assert len(frames) == 600
    assert frames == produced
    assert result.recovered_bytes == p.produced_bytes
    assert result.fingerprint() == stream_fingerprint(p.produced_hashes)


def test_consumer_without_a_grant_gets_nothing(world):
    p = produce(world, 20_000)
    with pytest.raises(AccessDenied):
        consumer_read(world.ledger, world.store, world.chain, world.authz, world.stranger, p.channel_root)
    assert world.authz.released == 0


def test_revoked_consumer_is_denied(world):
    p = produce(world, 20_000)
    world.owner_account.grant(world.insurer.address, p.channel_root)
    world.owner_account.revoke(world.insurer.address, p.channel_root)
    with pytest.raises(AccessDenied):
        consumer_read(world.ledger, world.store, world.chain, world.authz, world.insurer, p.channel_root)


def test_one_corrupted_packet_raises_exactly_one_alarm(world):
    p = produce(world, 40_000)
    world.owner_account.grant(world.insurer.address, p.channel_root)
    victim = p.packets[27].digest
    blob = bytearray(world.store.get(victim))
    blob[10] ^= 0x40
    world.store._objects[victim] = bytes(blob)
    result = consumer_read(world.ledger, world.store, world.chain, world.authz, world.insurer, p.channel_root)
    assert len(result.alarms) == 1
    assert result.alarms[0].digest == victim
    assert result.packets_decrypted == len(p.packets) - 1


def test_missing_manifest_is_flagged(world):
    p = produce(world, 20_000)
    world.owner_account.grant(world.insurer.address, p.channel_root)
    del world.store._objects[p.manifests[0]]
    result = consumer_read(world.ledger, world.store, world.chain, world.authz, world.insurer, p.channel_root)
    assert len(result.alarms) == 1 and "manifest" in result.alarms[0].reason
    assert result.samples == []
