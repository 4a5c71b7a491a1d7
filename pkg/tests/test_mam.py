from __future__ import annotations

import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from movo import crypto, mam
from movo.ledger import Ledger
from movo.sim import Simulator

from helpers import keypair

ANCHOR_BODY = 14 + 32 + 20 * 32  # interval header, manifest digest, 20 slot roots


def channel(seed: int = 0) -> mam.MamChannel:
    return mam.MamChannel.create(keypair("publisher"), random.Random(seed))


def test_anchor_sized_body_spans_three_transactions():
    ledger, ch = Ledger(), channel()
    msg = mam.publish(ledger, ch, bytes(ANCHOR_BODY), random.Random(1))
    assert len(msg.chunk_tx_ids) == 3
    assert mam.chunk_count(ANCHOR_BODY, 512) == 3


def test_empty_body_fits_one_transaction():
    ledger, ch = Ledger(), channel()
    msg = mam.publish(ledger, ch, b"")
    assert len(msg.chunk_tx_ids) == 1
    assert mam.encoded_size(0) <= 512


def test_chunk_count_formula_matches_actual_publishing():
    rng = random.Random(9)
    for size in [0, 1, 200, 208, 209, 540, 541, 700, 924, 925, 3000]:
        ledger, ch = Ledger(), channel(size)
        msg = mam.publish(ledger, ch, rng.randbytes(size))
        assert len(msg.encode()) == mam.encoded_size(size)
        assert len(msg.chunk_tx_ids) == mam.chunk_count(size, 512)
        assert all(len(ledger.txs[t].payload) <= 512 for t in msg.chunk_tx_ids)


def test_consecutive_messages_are_root_linked():
    ledger, ch = Ledger(), channel()
    m1 = mam.publish(ledger, ch, b"one")
    m2 = mam.publish(ledger, ch, b"two")
    assert m1.next_root == ch.root(1)
    assert m2.address == crypto.hash(m1.next_root)
    assert m1.address == crypto.hash(ch.channel_id)


def test_fetch_returns_every_body_in_order():
    ledger, ch = Ledger(), channel()
    bodies = [b"alpha", bytes(ANCHOR_BODY), b""]
    for b in bodies:
        mam.publish(ledger, ch, b)
    assert mam.fetch(ledger, ch.channel_id, ch.side_key) == bodies
    assert mam.fetch(ledger, ch.channel_id, ch.side_key, expected_owner=ch.owner.address) == bodies


def test_fetch_from_an_unused_root_is_empty():
    assert mam.fetch(Ledger(), crypto.hash(b"nobody"), bytes(32)) == []


def test_fetch_with_the_wrong_side_key_fails():
    ledger, ch = Ledger(), channel()
    mam.publish(ledger, ch, b"secret")
    with pytest.raises(crypto.AuthenticationError):
        mam.fetch(ledger, ch.channel_id, crypto.new_sym_key())


def test_fetch_rejects_a_different_owner():
    ledger, ch = Ledger(), channel()
    mam.publish(ledger, ch, b"x")
    with pytest.raises(mam.MamIntegrityError):
        mam.fetch(ledger, ch.channel_id, ch.side_key, expected_owner=keypair("other").address)


def flip(ledger: Ledger, tx_id: bytes, pos: int, bit: int = 0) -> None:
    tx = ledger.txs[tx_id]
    payload = bytearray(tx.payload)
    payload[pos % len(payload)] ^= 1 << bit
    ledger.txs[tx_id] = dataclasses.replace(tx, payload=bytes(payload))


def test_flipped_byte_is_reported_at_its_message():
    ledger, ch = Ledger(), channel()
    msgs = [mam.publish(ledger, ch, bytes(ANCHOR_BODY)) for _ in range(3)]
    flip(ledger, msgs[1].chunk_tx_ids[2], 100)
    with pytest.raises(mam.MamIntegrityError) as info:
        mam.fetch(ledger, ch.channel_id, ch.side_key)
    assert info.value.index == 1


@given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 511), st.integers(0, 7))
@settings(max_examples=300, deadline=None)
def test_any_single_bit_flip_in_any_chunk_is_detected(msg_i, chunk_i, pos, bit):
    ledger, ch = Ledger(), channel()
    msgs = [mam.publish(ledger, ch, bytes([i]) * ANCHOR_BODY) for i in range(3)]
    flip(ledger, msgs[msg_i].chunk_tx_ids[chunk_i], pos, bit)
    with pytest.raises(mam.MamIntegrityError) as info:
        mam.fetch(ledger, ch.channel_id, ch.side_key)
    assert info.value.index == msg_i


@given(st.binary(max_size=65536))
@settings(max_examples=50, deadline=None)
def test_round_trip_for_arbitrary_bodies(body):
    ledger, ch = Ledger(), channel()
    mam.publish(ledger, ch, body)
    assert mam.fetch(ledger, ch.channel_id, ch.side_key) == [body]


def test_confirmation_latency_on_the_virtual_clock():
    sim = Simulator()
    ledger, ch = Ledger(sim, confirmation_latency_ms=20_000), channel()
    sim.run(until=5_000)
    msg = mam.publish(ledger, ch, bytes(ANCHOR_BODY))
    assert msg.published_at == 5_000
    assert mam.confirmation_latency(ledger, msg) == 20_000
