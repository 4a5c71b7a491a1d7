from __future__ import annotations

import dataclasses
import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from movo.framing import encode_frame
from movo.p2p import (
    ConnectError,
    Link,
    ProtocolError,
    Radio,
    RoadsideUnit,
    SessionDropped,
    SessionState,
    TranscriptError,
    dump_transcript,
    load_transcript,
    request_location_certificate,
    verify_transcript,
)
from movo.sim import Simulator

from helpers import CHARGER, VEHICLE, ChargingSession, keypair

RSU = keypair("rsu")


def echo(ep, msg):
    ep.send(msg)


# -- transport -------------------------------------------------------------------------


def test_discovery_finds_the_registered_roadside_unit():
    radio = Radio(Simulator())
    radio.register("rsu-1", RoadsideUnit(radio.sim, RSU, (40.0, 2.0)).accept)
    radio.register("vehicle", lambda ep: None)
    assert radio.discover(exclude="vehicle") == ["rsu-1"]
    radio.unregister("rsu-1")
    assert radio.discover(exclude="vehicle") == []


def test_connecting_to_an_absent_peer_fails():
    with pytest.raises(ConnectError):
        Radio(Simulator()).connect("nobody")


def test_echo_is_byte_exact():
    sim = Simulator()
    radio = Radio(sim, latency_ms=7)
    radio.register("echo", lambda ep: setattr(ep, "handler", echo))
    ep = radio.connect("echo")
    msg = {"type": "PAY_RECEIPT", "n": 1, "blob": "é" * 3, "nested": {"b": [1, 2], "a": None}}
    assert ep.call(msg) == msg
    assert sim.now == 14
    wire = radio.links[0].wire
    assert wire[0] == ("a", encode_frame(msg)) and wire[1][1] == wire[0][1]


def test_unknown_message_types_get_an_error_reply():
    sim = Simulator()
    link = Link(sim)
    link.b.handler = echo
    link.a.send_raw(encode_frame({"type": "SELF_DESTRUCT"}))
    sim.run()
    assert link.b.rejected == 1 and link.b.received == 0
    assert link.a.inbox.popleft()["code"] == "unknown_type"
    link.a.send_raw(b"\x00\x00\x00\x02{]")
    sim.run()
    assert link.a.inbox.popleft()["code"] == "bad_frame"


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(0, 2**32))
@settings(max_examples=100)
def test_jittery_links_keep_frames_in_order(gaps, seed):
    sim = Simulator()
    link = Link(sim, latency_ms=5, jitter_ms=40, rng=random.Random(seed))
    sent = []

    def send(i):
        sent.append(i)
        link.a.send({"type": "PAY_UPDATE", "i": i})

    t = 0
    for i, gap in enumerate(gaps):
        t += gap
        sim.at(t, send, i)
    sim.run()
    assert [m["i"] for m in link.b.inbox] == sent == list(range(len(gaps)))


def test_frames_sent_later_never_arrive_earlier():
    sim = Simulator()
    link = Link(sim, latency_ms=5, jitter_ms=50, rng=random.Random(1))
    for i in range(200):
        sim.at(i, link.a.send, {"type": "PAY_UPDATE", "i": i})
    sim.run()
    assert [m["i"] for m in link.b.inbox] == list(range(200))


def test_dropped_link_raises_and_notifies():
    sim = Simulator()
    link = Link(sim)
    dropped = []
    link.b.on_drop = dropped.append
    link.drop()
    with pytest.raises(SessionDropped):
        link.a.send({"type": "PAY_UPDATE"})
    sim.run()
    assert dropped == [link.b]


def test_fault_hook_drops_the_link_mid_session():
    sim = Simulator()
    link = Link(sim)
    link.b.handler = echo
    link.fault = lambda src, frame: src is link.b
    with pytest.raises(SessionDropped):
        link.a.call({"type": "PAY_UPDATE"})
    assert link.dropped


def test_silent_peer_times_out():
    link = Link(Simulator())
    with pytest.raises(TimeoutError):
        link.a.call({"type": "PAY_UPDATE"}, timeout_ms=1_000)


# -- location certificates -----------------------------------------------------------------


def rsu_radio(**kwargs):
    sim = Simulator()
    radio = Radio(sim)
    rsu = RoadsideUnit(sim, RSU, (40.0, 2.0), **kwargs)
    radio.register("rsu", rsu.accept)
    return sim, radio, rsu


def test_location_certificate_is_issued_and_verifies():
    sim, radio, _ = rsu_radio()
    sim.run(until=1_234)
    cert = request_location_certificate(radio.connect("rsu"), VEHICLE.address)
    assert cert.location == (40.0, 2.0)
    assert cert.subject == VEHICLE.address and cert.issued_at == 1_234 + 5  # stamped on arrival
    assert cert.verify(RSU.public_key)
    assert not cert.verify(CHARGER.public_key)


@pytest.mark.parametrize("field,value", [("issued_at", 1), ("location", (40.0, 2.1)), ("subject", bytes(20))])
def test_tampered_certificate_fails_verification(field, value):
    _, radio, _ = rsu_radio()
    cert = request_location_certificate(radio.connect("rsu"), VEHICLE.address)
    assert not dataclasses.replace(cert, **{field: value}).verify(RSU.public_key)


def test_certificate_survives_serialization():
    _, radio, rsu = rsu_radio()
    cert = request_location_certificate(radio.connect("rsu"), VEHICLE.address)
    assert type(cert).from_dict(cert.to_dict()) == cert == rsu.issued[0]


def test_certificate_request_over_a_dropped_session_fails():
    _, radio, _ = rsu_radio()
    ep = radio.connect("rsu")
    ep.link.drop()
    with pytest.raises(SessionDropped):
        request_location_certificate(ep, VEHICLE.address)


def test_roadside_unit_can_refuse_subjects():
    _, radio, _ = rsu_radio(allowlist=[CHARGER.address])
    with pytest.raises(ProtocolError) as info:
        request_location_certificate(radio.connect("rsu"), VEHICLE.address)
    assert info.value.code == "subject_refused"


# -- charging sessions -------------------------------------------------------------------------


def test_eight_units_at_five_cost_forty():
    s = ChargingSession()
    assert s.client.buy(8) == 8
    assert s.client.session.balance == 40
    assert s.client.updates_sent == 8
    assert [u.seq for u in s.server_session.transcript] == list(range(1, 9))
    settlement = s.client.close()
    assert settlement == {"client_refund": 60, "server_payout": 40}
    assert s.chain.token_balance(CHARGER.address) == 40
    assert s.chain.token_balance(VEHICLE.address) == 960
    assert s.chain.tx_count == 2
    assert s.server_session.state is SessionState.DONE
    assert verify_transcript(s.server_session.transcript, VEHICLE.public_key, CHARGER.public_key, 100, s.channel_id) == 40


def test_delivery_stops_when_the_deposit_is_exhausted():
    s = ChargingSession()
    assert s.client.buy(25) == 20
    assert s.client.session.balance == 100
    assert s.raw_update(21, 105)["code"] == "over_deposit"
    assert s.server_session.units_delivered == 20


def test_replayed_and_stale_updates_are_rejected():
    s = ChargingSession()
    s.client.buy(5)
    assert s.raw_update(3, 15)["code"] == "stale_update"
    assert s.raw_update(5, 25)["code"] == "stale_update"
    assert s.raw_update(7, 35)["code"] == "seq_gap"
    assert s.raw_update(6, 35)["code"] == "bad_amount"
    assert s.server_session.units_delivered == 5
    assert s.raw_update(6, 30)["type"] == "PAY_RECEIPT"


@given(st.integers(1, 12), st.data())
@settings(max_examples=100, deadline=None)
def test_only_the_next_exact_update_is_ever_accepted(bought, data):
    s = ChargingSession()
    s.client.buy(bought)
    seq = data.draw(st.integers(0, 30))
    balance = data.draw(st.integers(0, 150))
    reply = s.raw_update(seq, balance)
    accepted = reply["type"] == "PAY_RECEIPT"
    assert accepted == (seq == bought + 1 and balance == 5 * (bought + 1) and balance <= 100)
    assert s.server_session.units_delivered == bought + accepted


def test_forged_client_signature_ends_the_service():
    s = ChargingSession()
    s.client.buy(3)
    reply = s.raw_update(4, 20, signer=keypair("mallory"))
    assert reply["code"] == "protocol_violation"
    assert s.server_session.state is SessionState.CLOSING
    assert s.server.violations
    assert s.raw_update(4, 20)["code"] == "not_active"
    settlement = s.client.close()
    assert settlement == {"client_refund": 85, "server_payout": 15}


def test_updates_during_a_pause_are_refused():
    s = ChargingSession()
    s.client.buy(2)
    s.client.pause()
    assert s.server_session.state is SessionState.PAUSED
    assert s.raw_update(3, 15)["code"] == "not_active"
    s.sim.run(until=s.sim.now + 3_600_000)
    s.client.resume()
    assert s.client.buy(2) == 2
    assert s.client.close()["server_payout"] == 20


def test_immediate_close_refunds_the_full_deposit():
    s = ChargingSession()
    assert s.client.close() == {"client_refund": 100, "server_payout": 0}
    assert s.chain.token_balance(VEHICLE.address) == 1000
    assert s.chain.tx_count == 2


def test_client_may_submit_the_close_itself():
    s = ChargingSession()
    s.client.buy(4)
    assert s.client.close(submit_myself=True) == {"client_refund": 80, "server_payout": 20}
    assert s.server_session.settlement == {"client_refund": 80, "server_payout": 20}
    assert s.chain.tx_count == 2


def test_unresponsive_server_leaves_the_timeout_refund():
    s = ChargingSession(expiry_ms=10_000)
    s.client.ep.link.drop()
    with pytest.raises(SessionDropped):
        s.client.buy(1)
    s.sim.run(until=10_000)
    r = s.client.account.paychan_refund(s.channel_id)
    assert r.result == {"client_refund": 100, "server_payout": 0}
    assert s.chain.tx_count == 2


def test_server_ignores_channels_it_is_not_part_of():
    s = ChargingSession()
    reply = s.client.ep.call({"type": "PAY_OPEN_INFO", "channel_id": "00" * 32})
    assert reply["code"] == "channel_not_open"
    assert s.client.ep.call({"type": "LOC_CERT_REQ"})["code"] == "unsupported"
    assert s.client.ep.call({"type": "PAY_UPDATE"})["code"] == "malformed"


# -- transcripts ----------------------------------------------------------------------------------


def transcript_text(units: int) -> tuple[ChargingSession, str]:
    s = ChargingSession()
    s.client.buy(units)
    buf = io.StringIO()
    dump_transcript(s.server_session.transcript, buf)
    return s, buf.getvalue()


def test_transcript_round_trip():
    s, text = transcript_text(8)
    updates = load_transcript(text.splitlines(True))
    assert updates == s.server_session.transcript
    assert verify_transcript(updates, VEHICLE.public_key, CHARGER.public_key, 100) == 40


def detects(s: ChargingSession, data: bytes) -> bool:
    try:
        updates = load_transcript(data.decode("utf-8").splitlines(True))
        verify_transcript(updates, VEHICLE.public_key, CHARGER.public_key, s.deposit, s.channel_id)
    except (UnicodeDecodeError, TranscriptError):
        return True
    return len(updates) != len(s.server_session.transcript)


def test_every_single_bit_flip_in_a_transcript_is_detected():
    s, text = transcript_text(2)
    raw = text.encode()
    for i in range(len(raw)):
        for bit in range(8):
            flipped = bytearray(raw)
            flipped[i] ^= 1 << bit
            assert detects(s, bytes(flipped)), (i, bit)


def test_transcript_checks():
    s, text = transcript_text(3)
    updates = load_transcript(text.splitlines())
    with pytest.raises(TranscriptError):
        verify_transcript(updates[1:], VEHICLE.public_key, CHARGER.public_key, 100)
    with pytest.raises(TranscriptError):
        verify_transcript(updates, VEHICLE.public_key, CHARGER.public_key, 10)
    with pytest.raises(TranscriptError):
        verify_transcript(updates, CHARGER.public_key, VEHICLE.public_key, 100)
    with pytest.raises(TranscriptError):
        verify_transcript(updates, VEHICLE.public_key, CHARGER.public_key, 100, bytes(32))
