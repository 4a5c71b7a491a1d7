from __future__ import annotations

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from movo.encoding import canonical_json
from movo.framing import FrameDecoder, FrameError, UnknownMessageType, decode_frame, encode_frame

TYPES = {"PING", "PONG"}

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**53), 2**53) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12,
)
messages = st.builds(lambda t, body: {**body, "type": t}, st.sampled_from(sorted(TYPES)), st.dictionaries(st.text(max_size=8), json_values, max_size=5))


@given(messages)
@settings(max_examples=200)
def test_round_trip_is_bit_exact(msg):
    frame = encode_frame(msg, TYPES)
    assert decode_frame(frame, TYPES) == msg
    assert encode_frame(decode_frame(frame, TYPES), TYPES) == frame
    assert frame[4:] == canonical_json(msg)


@given(st.lists(messages, min_size=1, max_size=8), st.lists(st.integers(1, 50), min_size=1, max_size=30))
@settings(max_examples=100)
def test_stream_decoder_handles_arbitrary_splits(msgs, cuts):
    stream = b"".join(encode_frame(m, TYPES) for m in msgs)
    dec = FrameDecoder(TYPES)
    out, pos, i = [], 0, 0
    while pos < len(stream):
        step = cuts[i % len(cuts)]
        dec.feed(stream[pos : pos + step])
        pos += step
        i += 1
        out.extend(dec.drain())
    assert out == msgs


def test_unknown_types_are_refused_on_both_sides():
    with pytest.raises(UnknownMessageType):
        encode_frame({"type": "HELLO"}, TYPES)
    frame = encode_frame({"type": "HELLO"})
    with pytest.raises(UnknownMessageType):
        decode_frame(frame, TYPES)


@pytest.mark.parametrize(
    "frame",
    [
        b"\x00\x00",
        struct.pack(">I", 10) + b"{}",
        struct.pack(">I", 2) + b"{}",
        struct.pack(">I", 4) + b"\xff\xfe{}",
        struct.pack(">I", 13) + b'{"type":1234}',
    ],
)
def test_malformed_frames_raise(frame):
    with pytest.raises(FrameError):
        decode_frame(frame, TYPES)


def test_decoder_recovers_after_a_bad_frame():
    dec = FrameDecoder(TYPES)
    dec.feed(encode_frame({"type": "HELLO"}) + encode_frame({"type": "PING", "n": 1}, TYPES))
    with pytest.raises(UnknownMessageType):
        dec.next()
    assert dec.next() == {"type": "PING", "n": 1}
    assert dec.next() is None


def test_oversized_length_prefix_is_refused():
    dec = FrameDecoder(TYPES)
    dec.feed(struct.pack(">I", 2**31))
    with pytest.raises(FrameError):
        dec.next()
