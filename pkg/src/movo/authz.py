"""Key-release service gated by the on-chain ACL.

Data owners register per-interval symmetric keys (wrapped to the service's
public key and signed). A requester receives a key, wrapped to its own
public key, only if its signed request verifies and the ACL contract
currently authorizes it for the channel.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass

from . import crypto
from .chain import Chain
from .encoding import canonical_json, unhex

# interval id under which a channel's MAM side key is registered
SIDE_KEY_INTERVAL = -1

GRANTED = "granted"
NOT_FOUND = "not_found"
BAD_SIGNATURE = "bad_signature"
UNAUTHORIZED = "unauthorized"

MESSAGE_TYPES = frozenset({"KEY_REGISTER", "KEY_REGISTER_ACK", "KEY_REQUEST", "KEY_RESPONSE", "ERR"})


class RegistrationRejected(Exception):
    def __init__(self, code: str) -> None:
        super().__init__(code)
        self.code = code


@dataclass(frozen=True)
class KeyRecord:
    channel_root: bytes
    interval_id: int
    sym_key: bytes
    owner: bytes


@dataclass(frozen=True)
class KeyRegistration:
    channel_root: bytes
    interval_id: int
    wrapped_key: bytes
    owner_public_key: bytes
    signature: bytes

    @staticmethod
    def signing_bytes(channel_root: bytes, interval_id: int, wrapped_key: bytes) -> bytes:
        return canonical_json(
            {"channel_root": channel_root.hex(), "interval_id": interval_id, "wrapped_key": wrapped_key.hex()}
        )

    @classmethod
    def create(
        cls,
        owner: crypto.KeyPair,
        service_public_key: bytes,
        channel_root: bytes,
        interval_id: int,
        key: bytes,
        rng: random.Random | None = None,
    ) -> "KeyRegistration":
        wrapped = crypto.wrap(service_public_key, key, rng)
        sig = owner.sign(cls.signing_bytes(channel_root, interval_id, wrapped))
        return cls(channel_root, interval_id, wrapped, owner.public_key, sig)

    def to_dict(self) -> dict:
        return {
            "channel_root": self.channel_root.hex(),
            "interval_id": self.interval_id,
            "owner_public_key": self.owner_public_key.hex(),
            "signature": self.signature.hex(),
            "wrapped_key": self.wrapped_key.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyRegistration":
        return cls(
            unhex(d["channel_root"], 32),
            int(d["interval_id"]),
            unhex(d["wrapped_key"]),
            unhex(d["owner_public_key"]),
            unhex(d["signature"]),
        )


@dataclass(frozen=True)
class KeyRequest:
    requester_public_key: bytes
    channel_root: bytes
    interval_id: int
    signature: bytes

    @property
    def requester(self) -> bytes:
        return crypto.address_of(self.requester_public_key)

    @staticmethod
    def signing_bytes(requester: bytes, channel_root: bytes, interval_id: int) -> bytes:
        return canonical_json(
            {"channel_root": channel_root.hex(), "interval_id": interval_id, "requester": requester.hex()}
        )

    @classmethod
    def create(cls, requester: crypto.KeyPair, channel_root: bytes, interval_id: int) -> "KeyRequest":
        sig = requester.sign(cls.signing_bytes(requester.address, channel_root, interval_id))
        return cls(requester.public_key, channel_root, interval_id, sig)

    def to_dict(self) -> dict:
        return {
            "channel_root": self.channel_root.hex(),
            "interval_id": self.interval_id,
            "requester_public_key": self.requester_public_key.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyRequest":
        return cls(unhex(d["requester_public_key"]), unhex(d["channel_root"], 32), int(d["interval_id"]), unhex(d["signature"]))


@dataclass(frozen=True)
class KeyResponse:
    status: str
    wrapped_key: bytes | None = None

    @property
    def granted(self) -> bool:
        return self.status == GRANTED


class AuthorizationService:
    def __init__(self, chain: Chain, keypair: crypto.KeyPair, rng: random.Random | None = None) -> None:
        self.chain = chain
        self.keypair = keypair
        self.rng = rng
        self._keys: dict[tuple[bytes, int], KeyRecord] = {}
        self._lock = threading.Lock()
        self.released = 0
        self.denied = 0

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def register_key(self, reg: KeyRegistration) -> KeyRecord:
        owner = crypto.address_of(reg.owner_public_key)
        if not crypto.verify(
            reg.owner_public_key, KeyRegistration.signing_bytes(reg.channel_root, reg.interval_id, reg.wrapped_key), reg.signature
        ):
            raise RegistrationRejected(BAD_SIGNATURE)
        if self.chain.channel_owner(reg.channel_root) != owner:
            raise RegistrationRejected("not_owner")
        try:
            key = crypto.unwrap(self.keypair, reg.wrapped_key)
        except crypto.AuthenticationError:
            raise RegistrationRejected("bad_wrapping") from None
        record = KeyRecord(reg.channel_root, reg.interval_id, key, owner)
        with self._lock:
            existing = self._keys.get((reg.channel_root, reg.interval_id))
            if existing is not None and existing.sym_key != key:
                raise RegistrationRejected("conflict")
            self._keys[(reg.channel_root, reg.interval_id)] = record
        return record

    def decide(self, req: KeyRequest) -> str:
        """Release decision for ``req`` against the chain's current state."""
        requester = req.requester
        if not crypto.verify(
            req.requester_public_key, KeyRequest.signing_bytes(requester, req.channel_root, req.interval_id), req.signature
        ):
            return BAD_SIGNATURE
        if not self.chain.acl_is_authorized(requester, req.channel_root):
            return UNAUTHORIZED
        if (req.channel_root, req.interval_id) not in self._keys:
            return NOT_FOUND
        return GRANTED

    def request_key(self, req: KeyRequest) -> KeyResponse:
        status = self.decide(req)
        if status != GRANTED:
            self.denied += 1
            return KeyResponse(status)
        record = self._keys[(req.channel_root, req.interval_id)]
        self.released += 1
        return KeyResponse(GRANTED, crypto.wrap(req.requester_public_key, record.sym_key, self.rng))

    def handle(self, msg: dict) -> dict:
        """Serve one decoded frame body (see framing)."""
        try:
            if msg.get("type") == "KEY_REGISTER":
                rec = self.register_key(KeyRegistration.from_dict(msg["registration"]))
                return {"type": "KEY_REGISTER_ACK", "channel_root": rec.channel_root.hex(), "interval_id": rec.interval_id}
            if msg.get("type") == "KEY_REQUEST":
                resp = self.request_key(KeyRequest.from_dict(msg["request"]))
                out = {"type": "KEY_RESPONSE", "status": resp.status}
                if resp.wrapped_key is not None:
                    out["wrapped_key"] = resp.wrapped_key.hex()
                return out
        except RegistrationRejected as exc:
            return {"type": "ERR", "code": exc.code}
        except (KeyError, TypeError, ValueError):
            return {"type": "ERR", "code": "malformed"}
        return {"type": "ERR", "code": "unsupported"}


def request_and_unwrap(service: AuthorizationService, keypair: crypto.KeyPair, channel_root: bytes, interval_id: int) -> bytes | None:
    """Convenience for consumers: the plaintext key, or None on denial."""
    resp = service.request_key(KeyRequest.create(keypair, channel_root, interval_id))
    if not resp.granted:
        return None
    return crypto.unwrap(keypair, resp.wrapped_key)
