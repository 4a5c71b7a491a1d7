"""Masked authenticated messaging over the DAG ledger.

A channel is a forward-linked chain of roots. Message ``i`` lives at ledger
address ``hash(root_i)`` and carries ``root_{i+1}``, so a reader holding the
first root and the side key can walk the whole stream.

Wire layout of one message before chunking::

    u32 length (big-endian) of the remainder
    64  publisher public key
    64  signature over public key || address || ciphertext || next_root
    32  next_root
    ..  ciphertext = sym_encrypt(side_key, {"body_base64","index","next_root_hex"})

The framed message is cut into ``chunk_capacity``-sized ledger transactions.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field

from . import crypto
from .encoding import b64, canonical_json, unb64
from .ledger import Ledger

_HEADER = crypto.PUBLIC_KEY_SIZE + crypto.SIGNATURE_SIZE + crypto.DIGEST_SIZE


class MamIntegrityError(Exception):
    def __init__(self, index: int, reason: str) -> None:
        super().__init__(f"message {index}: {reason}")
        self.index = index
        self.reason = reason


@dataclass
class MamChannel:
    owner: crypto.KeyPair
    side_key: bytes
    secret: bytes
    next_index: int = 0
    current_root: bytes = b""

    @classmethod
    def create(cls, owner: crypto.KeyPair, rng: random.Random | None = None, side_key: bytes | None = None) -> "MamChannel":
        chan = cls(owner=owner, side_key=side_key or crypto.new_sym_key(rng), secret=crypto.random_bytes(32, rng))
        chan.current_root = chan.root(0)
        return chan

    def root(self, index: int) -> bytes:
        return crypto.hash(b"mam-root" + self.secret + index.to_bytes(8, "big"))

    @property
    def channel_id(self) -> bytes:
        return self.root(0)


@dataclass
class MamMessage:
    index: int
    address: bytes
    ciphertext: bytes
    next_root: bytes
    signature: bytes
    public_key: bytes
    published_at: int
    chunk_tx_ids: list[bytes] = field(default_factory=list)

    def encode(self) -> bytes:
        rest = self.public_key + self.signature + self.next_root + self.ciphertext
        return struct.pack(">I", len(rest)) + rest


def _signed_bytes(public_key: bytes, address: bytes, ciphertext: bytes, next_root: bytes) -> bytes:
    # the whole published key is covered, not just the half that verifies
    return public_key + address + ciphertext + next_root


def encoded_size(body_len: int, index: int = 0) -> int:
    """Bytes a message with a ``body_len`` body occupies before chunking."""
    b64_len = 4 * ((body_len + 2) // 3)
    envelope = len(canonical_json({"body_base64": "", "index": index, "next_root_hex": "0" * 64})) + b64_len
    return 4 + _HEADER + crypto.SYM_OVERHEAD + envelope


def chunk_count(body_len: int, capacity: int, index: int = 0) -> int:
    return -(-encoded_size(body_len, index) // capacity)


def publish(ledger: Ledger, channel: MamChannel, body: bytes, rng: random.Random | None = None) -> MamMessage:
    index = channel.next_index
    root = channel.current_root
    next_root = channel.root(index + 1)
    address = crypto.hash(root)
    envelope = canonical_json({"body_base64": b64(body), "index": index, "next_root_hex": next_root.hex()})
    ciphertext = crypto.sym_encrypt(channel.side_key, envelope, rng)
    msg = MamMessage(
        index=index,
        address=address,
        ciphertext=ciphertext,
        next_root=next_root,
        signature=channel.owner.sign(_signed_bytes(channel.owner.public_key, address, ciphertext, next_root)),
        public_key=channel.owner.public_key,
        published_at=ledger.sim.now,
    )
    encoded = msg.encode()
    cap = ledger.chunk_capacity
    for off in range(0, len(encoded), cap):
        msg.chunk_tx_ids.append(ledger.attach(encoded[off : off + cap], address=address).id)
    channel.current_root = next_root
    channel.next_index = index + 1
    return msg


def confirmation_latency(ledger: Ledger, msg: MamMessage) -> int:
    return max(ledger.txs[i].confirmed_at for i in msg.chunk_tx_ids) - msg.published_at


def fetch(
    ledger: Ledger,
    root: bytes,
    side_key: bytes,
    expected_owner: bytes | None = None,
) -> list[bytes]:
    """Walk a channel from ``root`` and return every decrypted body in order.

    Raises MamIntegrityError for malformed or mis-signed messages and
    crypto.AuthenticationError when the side key does not open a message.
    """
    bodies: list[bytes] = []
    owner_pk: bytes | None = None
    index = 0
    while True:
        address = crypto.hash(root)
        chunks = ledger.by_address(address)
        if not chunks:
            return bodies
        blob = b"".join(tx.payload for tx in chunks)
        if len(blob) < 4:
            raise MamIntegrityError(index, "truncated frame")
        (length,) = struct.unpack(">I", blob[:4])
        rest = blob[4:]
        if length != len(rest) or length < _HEADER + crypto.SYM_OVERHEAD:
            raise MamIntegrityError(index, "frame length mismatch")
        pk = rest[: crypto.PUBLIC_KEY_SIZE]
        sig = rest[crypto.PUBLIC_KEY_SIZE : crypto.PUBLIC_KEY_SIZE + crypto.SIGNATURE_SIZE]
        next_root = rest[crypto.PUBLIC_KEY_SIZE + crypto.SIGNATURE_SIZE : _HEADER]
        ciphertext = rest[_HEADER:]
        if owner_pk is None:
            if expected_owner is not None and crypto.address_of(pk) != expected_owner:
                raise MamIntegrityError(index, "publisher is not the channel owner")
            owner_pk = pk
        elif pk != owner_pk:
            raise MamIntegrityError(index, "publisher key changed mid-stream")
        if not crypto.verify(pk, _signed_bytes(pk, address, ciphertext, next_root), sig):
            raise MamIntegrityError(index, "bad signature")
        envelope = json.loads(crypto.sym_decrypt(side_key, ciphertext))
        if envelope.get("index") != index or envelope.get("next_root_hex") != next_root.hex():
            raise MamIntegrityError(index, "envelope does not match header")
        bodies.append(unb64(envelope["body_base64"]))
        root = next_root
        index += 1
