"""Hashing, signatures, authenticated encryption, key wrapping and the wallet.

Primitives:
    digest      SHA-256 (32 bytes)
    signatures  Ed25519
    symmetric   ChaCha20-Poly1305, 12-byte nonce prepended, 16-byte tag
    key wrap    X25519 ephemeral-static ECDH + HKDF-SHA256 + ChaCha20-Poly1305

A public key is the 32-byte Ed25519 verification key followed by the 32-byte
X25519 encryption key; the address is the first 20 bytes of its digest.

Every function that needs randomness accepts an optional ``random.Random``.
Simulations pass a seeded one so runs are reproducible; ``None`` falls back to
``os.urandom``.
"""

from __future__ import annotations

import hashlib
import os
import random
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DIGEST_SIZE = 32
ADDRESS_SIZE = 20
SYM_KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SYM_OVERHEAD = NONCE_SIZE + TAG_SIZE
PUBLIC_KEY_SIZE = 64
SIGNATURE_SIZE = 64
WRAPPED_KEY_SIZE = 32 + SYM_OVERHEAD + SYM_KEY_SIZE

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NO_ENC = serialization.NoEncryption()


class AuthenticationError(Exception):
    """Ciphertext failed authentication (wrong key or tampering)."""


def random_bytes(n: int, rng: random.Random | None = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.randbytes(n)


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the domain vocabulary
    return hashlib.sha256(data).digest()


def address_of(public_key: bytes) -> bytes:
    return hash(public_key)[:ADDRESS_SIZE]


@dataclass(frozen=True)
class KeyPair:
    seed: bytes
    public_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError("seed must be 32 bytes")
        sig_pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes(_RAW, _RAW_PUB)
        box_pub = _box_private(seed).public_key().public_bytes(_RAW, _RAW_PUB)
        return cls(seed=seed, public_key=sig_pub + box_pub)

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "KeyPair":
        return cls.from_seed(random_bytes(32, rng))

    @property
    def address(self) -> bytes:
        return address_of(self.public_key)

    def sign(self, msg: bytes) -> bytes:
        return sign(self.seed, msg)

    def __repr__(self) -> str:
        return f"KeyPair(address={self.address.hex()})"


def _box_private(seed: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(hash(b"movo-x25519" + seed))


def sign(secret: bytes, msg: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(secret).sign(msg)


def verify(public_key: bytes, msg: bytes, signature: bytes) -> bool:
    """Never raises: malformed keys or signatures simply fail verification."""
    try:
        if len(public_key) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
            return False
        Ed25519PublicKey.from_public_bytes(public_key[:32]).verify(signature, msg)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def sym_encrypt(key: bytes, plaintext: bytes, rng: random.Random | None = None, aad: bytes = b"") -> bytes:
    if len(key) != SYM_KEY_SIZE:
        raise ValueError("symmetric key must be 32 bytes")
    nonce = random_bytes(NONCE_SIZE, rng)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad or None)


def sym_decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    if len(key) != SYM_KEY_SIZE:
        raise ValueError("symmetric key must be 32 bytes")
    if len(blob) < SYM_OVERHEAD:
        raise AuthenticationError("ciphertext too short")
    try:
        return ChaCha20Poly1305(key).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], aad or None)
    except InvalidTag as exc:
        raise AuthenticationError("authentication failed") from exc


def new_sym_key(rng: random.Random | None = None) -> bytes:
    return random_bytes(SYM_KEY_SIZE, rng)


def _wrap_key(shared: bytes, eph_pub: bytes, recipient_box: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=None, info=b"movo-wrap" + eph_pub + recipient_box).derive(shared)


def wrap(public_key: bytes, key: bytes, rng: random.Random | None = None) -> bytes:
    """Encrypt ``key`` so only the holder of ``public_key``'s secret can read it."""
    recipient_box = public_key[32:]
    eph = X25519PrivateKey.from_private_bytes(random_bytes(32, rng))
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_box))
    return eph_pub + sym_encrypt(_wrap_key(shared, eph_pub, recipient_box), key, rng)


def unwrap(keypair: KeyPair, wrapped: bytes) -> bytes:
    eph_pub, body = wrapped[:32], wrapped[32:]
    try:
        shared = _box_private(keypair.seed).exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError as exc:
        raise AuthenticationError("malformed wrapped key") from exc
    return sym_decrypt(_wrap_key(shared, eph_pub, keypair.public_key[32:]), body)


class Wallet:
    """Keys held by one actor. Reads are lock-free; writes are serialized."""

    def __init__(self) -> None:
        self._keypairs: dict[bytes, KeyPair] = {}
        self._sym_keys: dict[tuple[bytes, int], bytes] = {}
        self._lock = threading.Lock()

    def add_keypair(self, keypair: KeyPair) -> bytes:
        with self._lock:
            self._keypairs[keypair.address] = keypair
        return keypair.address

    def keypair(self, address: bytes) -> KeyPair | None:
        return self._keypairs.get(address)

    def put_sym_key(self, channel_id: bytes, interval: int, key: bytes) -> None:
        with self._lock:
            self._sym_keys[(channel_id, interval)] = key

    def sym_key(self, channel_id: bytes, interval: int) -> bytes | None:
        return self._sym_keys.get((channel_id, interval))

    def sym_key_or_create(self, channel_id: bytes, interval: int, rng: random.Random | None = None) -> bytes:
        with self._lock:
            key = self._sym_keys.get((channel_id, interval))
            if key is None:
                key = new_sym_key(rng)
                self._sym_keys[(channel_id, interval)] = key
            return key
