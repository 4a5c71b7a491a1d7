"""Direct device-to-device sessions: transport, location certificates, micropayments.

The transport is an in-process reliable duplex link running on the simulator.
Frames are a 4-byte big-endian length followed by canonical JSON carrying a
mandatory ``type`` drawn from a closed vocabulary.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Callable, Iterable

from . import crypto
from .chain import Account, BalanceUpdate, Chain
from .encoding import canonical_json, unhex
from .framing import FrameDecoder, FrameError, UnknownMessageType, encode_frame
from .sim import Simulator

logger = logging.getLogger(__name__)

MESSAGE_TYPES = frozenset(
    {
        "LOC_CERT_REQ",
        "LOC_CERT_RESP",
        "PAY_OPEN_INFO",
        "PAY_UPDATE",
        "PAY_RECEIPT",
        "PAY_PAUSE",
        "PAY_RESUME",
        "PAY_CLOSE",
        "ERR",
    }
)


class ConnectError(Exception):
    pass


class SessionDropped(Exception):
    pass


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


# -- transport -----------------------------------------------------------------


class Endpoint:
    """One side of a link. Incoming messages go to ``handler`` or the inbox."""

    def __init__(self, link: "Link", name: str) -> None:
        self.link = link
        self.name = name
        self.peer: Endpoint | None = None
        self.handler: Callable[[Endpoint, dict], None] | None = None
        self.on_drop: Callable[[Endpoint], None] | None = None
        self.inbox: deque[dict] = deque()
        self.rejected = 0
        self.sent = 0
        self.received = 0
        self._decoder = FrameDecoder(MESSAGE_TYPES)

    @property
    def dropped(self) -> bool:
        return self.link.dropped

    def send(self, msg: dict) -> None:
        self.send_raw(encode_frame(msg, MESSAGE_TYPES))

    def send_raw(self, frame: bytes) -> None:
        if self.link.dropped:
            raise SessionDropped(f"{self.name}: link is down")
        self.sent += 1
        self.link._transmit(self, frame)

    def _receive(self, data: bytes) -> None:
        self._decoder.feed(data)
        while True:
            try:
                msg = self._decoder.next()
            except UnknownMessageType as exc:
                self.rejected += 1
                self._reply_error("unknown_type", str(exc))
                continue
            except FrameError as exc:
                self.rejected += 1
                self._reply_error("bad_frame", str(exc))
                continue
            if msg is None:
                return
            self.received += 1
            if self.handler is not None:
                self.handler(self, msg)
            else:
                self.inbox.append(msg)

    def _reply_error(self, code: str, detail: str) -> None:
        if not self.link.dropped:
            self.send({"type": "ERR", "code": code, "detail": detail})

    def call(self, msg: dict, timeout_ms: int = 60_000) -> dict:
        """Send ``msg`` and run the simulator until a reply arrives."""
        self.send(msg)
        sim = self.link.sim
        deadline = sim.now + timeout_ms
        sim.run_until(lambda: bool(self.inbox) or self.link.dropped, limit=deadline)
        if self.inbox:
            return self.inbox.popleft()
        if self.link.dropped:
            raise SessionDropped(f"{self.name}: link dropped while waiting for a reply")
        raise TimeoutError(f"{self.name}: no reply to {msg['type']}")


class Link:
    """Reliable, ordered duplex pipe with latency, jitter and drop injection."""

    def __init__(self, sim: Simulator, latency_ms: int = 5, jitter_ms: int = 0, rng: random.Random | None = None) -> None:
        self.sim = sim
        self.latency_ms = latency_ms
        self.jitter_ms = jitter_ms
        self.rng = rng or random.Random(0)
        self.a = Endpoint(self, "a")
        self.b = Endpoint(self, "b")
        self.a.peer, self.b.peer = self.b, self.a
        self.dropped = False
        # drop injection: called with each outgoing frame; True drops the link
        self.fault: Callable[[Endpoint, bytes], bool] | None = None
        self.wire: list[tuple[str, bytes]] = []
        self._last_delivery = {self.a.name: 0, self.b.name: 0}

    def _transmit(self, src: Endpoint, frame: bytes) -> None:
        if self.fault is not None and self.fault(src, frame):
            self.drop()
            raise SessionDropped(f"{src.name}: link dropped")
        self.wire.append((src.name, frame))
        delay = self.latency_ms + (self.rng.randint(0, self.jitter_ms) if self.jitter_ms else 0)
        # never overtake an earlier frame in the same direction
        when = max(self.sim.now + delay, self._last_delivery[src.name])
        self._last_delivery[src.name] = when
        self.sim.at(when, self._deliver, src.peer, frame)

    def _deliver(self, dst: Endpoint, frame: bytes) -> None:
        if not self.dropped:
            dst._receive(frame)

    def drop(self) -> None:
        if self.dropped:
            return
        self.dropped = True
        for ep in (self.a, self.b):
            if ep.on_drop is not None:
                self.sim.schedule(0, ep.on_drop, ep)


class Radio:
    """Peers within simulated radio range, keyed by id."""

    def __init__(self, sim: Simulator, latency_ms: int = 5, jitter_ms: int = 0, seed: int = 0) -> None:
        self.sim = sim
        self.latency_ms = latency_ms
        self.jitter_ms = jitter_ms
        self.rng = random.Random(seed)
        self._peers: dict[str, Callable[[Endpoint], None]] = {}
        self.links: list[Link] = []

    def register(self, peer_id: str, accept: Callable[[Endpoint], None]) -> None:
        self._peers[peer_id] = accept

    def unregister(self, peer_id: str) -> None:
        self._peers.pop(peer_id, None)

    def discover(self, exclude: str | None = None) -> list[str]:
        return sorted(p for p in self._peers if p != exclude)

    def connect(self, peer_id: str) -> Endpoint:
        accept = self._peers.get(peer_id)
        if accept is None:
            raise ConnectError(f"no peer {peer_id!r} in range")
        link = Link(self.sim, self.latency_ms, self.jitter_ms, random.Random(self.rng.random()))
        self.links.append(link)
        accept(link.b)
        return link.a


# -- location certificates -----------------------------------------------------


@dataclass(frozen=True)
class LocationCertificate:
    rsu_id: bytes
    subject: bytes
    location: tuple[float, float]
    issued_at: int
    signature: bytes

    @staticmethod
    def signing_bytes(rsu_id: bytes, subject: bytes, location: tuple[float, float], issued_at: int) -> bytes:
        return canonical_json(
            {"issued_at": issued_at, "lat": location[0], "lon": location[1], "rsu_id": rsu_id.hex(), "subject": subject.hex()}
        )

    def verify(self, rsu_public_key: bytes) -> bool:
        if crypto.address_of(rsu_public_key) != self.rsu_id:
            return False
        return crypto.verify(
            rsu_public_key, self.signing_bytes(self.rsu_id, self.subject, self.location, self.issued_at), self.signature
        )

    def to_dict(self) -> dict:
        return {
            "issued_at": self.issued_at,
            "lat": self.location[0],
            "lon": self.location[1],
            "rsu_id": self.rsu_id.hex(),
            "signature": self.signature.hex(),
            "subject": self.subject.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocationCertificate":
        return cls(unhex(d["rsu_id"], 20), unhex(d["subject"], 20), (d["lat"], d["lon"]), d["issued_at"], unhex(d["signature"]))


class RoadsideUnit:
    """Fixed node issuing signed location certificates to passing vehicles."""

    def __init__(
        self,
        sim: Simulator,
        keypair: crypto.KeyPair,
        location: tuple[float, float],
        allowlist: Iterable[bytes] | None = None,
    ) -> None:
        self.sim = sim
        self.keypair = keypair
        self.location = location
        self.allowlist = set(allowlist) if allowlist is not None else None
        self.issued: list[LocationCertificate] = []

    @property
    def address(self) -> bytes:
        return self.keypair.address

    def accept(self, ep: Endpoint) -> None:
        ep.handler = self.handle

    def issue(self, subject: bytes) -> LocationCertificate:
        t = self.sim.now
        sig = self.keypair.sign(LocationCertificate.signing_bytes(self.address, subject, self.location, t))
        cert = LocationCertificate(self.address, subject, self.location, t, sig)
        self.issued.append(cert)
        return cert

    def handle(self, ep: Endpoint, msg: dict) -> None:
        if msg["type"] != "LOC_CERT_REQ":
            ep.send({"type": "ERR", "code": "unsupported", "detail": msg["type"]})
            return
        try:
            subject = unhex(msg["subject"], crypto.ADDRESS_SIZE)
        except (KeyError, TypeError, ValueError):
            ep.send({"type": "ERR", "code": "bad_request"})
            return
        if self.allowlist is not None and subject not in self.allowlist:
            ep.send({"type": "ERR", "code": "subject_refused"})
            return
        ep.send({"type": "LOC_CERT_RESP", "certificate": self.issue(subject).to_dict()})


def request_location_certificate(ep: Endpoint, subject: bytes) -> LocationCertificate:
    reply = ep.call({"type": "LOC_CERT_REQ", "subject": subject.hex()})
    if reply["type"] != "LOC_CERT_RESP":
        raise ProtocolError(reply.get("code", "unexpected"), reply.get("detail", ""))
    return LocationCertificate.from_dict(reply["certificate"])


# -- micropayment sessions ------------------------------------------------------


class SessionState(str, Enum):
    INIT = "init"
    ACTIVE = "active"
    PAUSED = "paused"
    CLOSING = "closing"
    DONE = "done"


_TRANSITIONS = {
    SessionState.INIT: {SessionState.ACTIVE, SessionState.CLOSING},
    SessionState.ACTIVE: {SessionState.PAUSED, SessionState.CLOSING},
    SessionState.PAUSED: {SessionState.ACTIVE, SessionState.CLOSING},
    SessionState.CLOSING: {SessionState.DONE},
    SessionState.DONE: set(),
}


@dataclass
class ChannelSession:
    channel_id: bytes
    role: str
    deposit: int
    price_per_unit: int = 0
    state: SessionState = SessionState.INIT
    last_update: BalanceUpdate | None = None
    units_delivered: int = 0
    transcript: list[BalanceUpdate] = field(default_factory=list)
    settlement: dict | None = None

    @property
    def balance(self) -> int:
        return self.last_update.balance if self.last_update else 0

    @property
    def seq(self) -> int:
        return self.last_update.seq if self.last_update else 0

    def move(self, new: SessionState) -> None:
        if new not in _TRANSITIONS[self.state]:
            raise ProtocolError("bad_transition", f"{self.state.value} -> {new.value}")
        self.state = new

    def record(self, update: BalanceUpdate) -> None:
        if self.last_update is not None and (update.seq <= self.seq or update.balance < self.balance):
            raise ProtocolError("stale_update")
        self.last_update = update
        self.transcript.append(update)


class TranscriptError(ValueError):
    pass


def verify_transcript(
    updates: Iterable[BalanceUpdate], client_key: bytes, server_key: bytes, deposit: int, channel_id: bytes | None = None
) -> int:
    """Check co-signatures, seq continuity and balance bounds. Returns the final balance."""
    prev_seq, prev_balance = 0, 0
    for u in updates:
        if channel_id is not None and u.channel_id != channel_id:
            raise TranscriptError(f"seq {u.seq}: foreign channel")
        if u.seq != prev_seq + 1:
            raise TranscriptError(f"seq {u.seq} follows {prev_seq}")
        if u.balance < prev_balance or u.balance > deposit:
            raise TranscriptError(f"seq {u.seq}: balance {u.balance} out of bounds")
        msg = u.message()
        if not crypto.verify(client_key, msg, u.client_sig) or not crypto.verify(server_key, msg, u.server_sig):
            raise TranscriptError(f"seq {u.seq}: bad co-signature")
        prev_seq, prev_balance = u.seq, u.balance
    return prev_balance


def dump_transcript(updates: Iterable[BalanceUpdate], fh: IO[str]) -> None:
    for u in updates:
        fh.write(canonical_json(u.to_dict()).decode() + "\n")


def load_transcript(lines: Iterable[str]) -> list[BalanceUpdate]:
    """Parse a transcript, rejecting any line that is not in canonical form."""
    out = []
    for n, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        try:
            update = BalanceUpdate.from_dict(json.loads(line))
        except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
            raise TranscriptError(f"line {n}: {exc}") from exc
        if canonical_json(update.to_dict()).decode() != line:
            raise TranscriptError(f"line {n}: not in canonical form")
        out.append(update)
    return out


class ChargingServer:
    """Charger: verifies each client-signed update, countersigns it and delivers one unit."""

    def __init__(self, sim: Simulator, account: Account, price_per_unit: int) -> None:
        self.sim = sim
        self.account = account
        self.price_per_unit = price_per_unit
        self.sessions: dict[bytes, ChannelSession] = {}
        self.violations: list[str] = []

    @property
    def chain(self) -> Chain:
        return self.account.chain

    @property
    def keypair(self) -> crypto.KeyPair:
        return self.account.keypair

    def accept(self, ep: Endpoint) -> None:
        ep.handler = self.handle

    def handle(self, ep: Endpoint, msg: dict) -> None:
        method = getattr(self, "_on_" + msg["type"].lower(), None)
        try:
            if method is None:
                raise ProtocolError("unsupported", msg["type"])
            reply = method(msg)
        except ProtocolError as exc:
            reply = {"type": "ERR", "code": exc.code, "detail": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            reply = {"type": "ERR", "code": "malformed", "detail": str(exc)}
        if not ep.dropped:
            ep.send(reply)

    def _session(self, msg: dict) -> ChannelSession:
        session = self.sessions.get(unhex(msg["channel_id"], 32))
        if session is None:
            raise ProtocolError("unknown_channel")
        return session

    def _on_pay_open_info(self, msg: dict) -> dict:
        channel_id = unhex(msg["channel_id"], 32)
        chan = self.chain.paychan(channel_id)
        if chan is None or chan.status != "open" or chan.server != self.keypair.address:
            raise ProtocolError("channel_not_open")
        session = self.sessions.get(channel_id)
        if session is None:
            session = self.sessions[channel_id] = ChannelSession(channel_id, "server", chan.deposit, self.price_per_unit)
            session.move(SessionState.ACTIVE)
        return {
            "type": "PAY_OPEN_INFO",
            "channel_id": channel_id.hex(),
            "deposit": chan.deposit,
            "price_per_unit": session.price_per_unit,
            "balance": session.balance,
            "seq": session.seq,
        }

    def _on_pay_update(self, msg: dict) -> dict:
        session = self._session(msg)
        if session.state is not SessionState.ACTIVE:
            raise ProtocolError("not_active", session.state.value)
        update = BalanceUpdate.from_dict(msg["update"])
        if update.channel_id != session.channel_id:
            raise ProtocolError("foreign_update")
        if update.seq <= session.seq or update.balance < session.balance:
            raise ProtocolError("stale_update", f"seq {update.seq} after {session.seq}")
        if update.seq != session.seq + 1:
            raise ProtocolError("seq_gap", f"seq {update.seq} after {session.seq}")
        if update.balance > session.deposit:
            raise ProtocolError("over_deposit", f"balance {update.balance} > deposit {session.deposit}")
        if update.balance != session.balance + session.price_per_unit:
            raise ProtocolError("bad_amount", f"expected {session.balance + session.price_per_unit}")
        chan = self.chain.paychan(session.channel_id)
        if not crypto.verify(chan.client_key, update.message(), update.client_sig):
            # a forged update ends service; the last valid state stays closeable
            self.violations.append(f"{session.channel_id.hex()[:16]}: bad client signature at seq {update.seq}")
            session.move(SessionState.CLOSING)
            raise ProtocolError("protocol_violation", "bad client signature")
        cosigned = update.signed_by_server(self.keypair)
        session.record(cosigned)
        session.units_delivered += 1
        return {
            "type": "PAY_RECEIPT",
            "channel_id": session.channel_id.hex(),
            "unit": session.units_delivered,
            "price_per_unit": session.price_per_unit,
            "update": cosigned.to_dict(),
        }

    def _on_pay_pause(self, msg: dict) -> dict:
        session = self._session(msg)
        session.move(SessionState.PAUSED)
        return {"type": "PAY_PAUSE", "channel_id": session.channel_id.hex(), "state": session.state.value}

    def _on_pay_resume(self, msg: dict) -> dict:
        session = self._session(msg)
        session.move(SessionState.ACTIVE)
        return {"type": "PAY_RESUME", "channel_id": session.channel_id.hex(), "state": session.state.value}

    def _on_pay_close(self, msg: dict) -> dict:
        session = self._session(msg)
        if session.state is not SessionState.CLOSING:
            session.move(SessionState.CLOSING)
        if msg.get("closed_by_client"):
            chan = self.chain.paychan(session.channel_id)
            if chan is None or chan.status != "closed":
                raise ProtocolError("not_closed_on_chain")
            session.settlement = {"client_refund": chan.deposit - chan.final_balance, "server_payout": chan.final_balance}
        else:
            session.settlement = self.close(session, msg.get("update"))
        session.move(SessionState.DONE)
        return {"type": "PAY_CLOSE", "channel_id": session.channel_id.hex(), "settlement": session.settlement}

    def close(self, session: ChannelSession, zero_update: dict | None = None) -> dict:
        """Submit the last co-signed state on chain (the second and final tx)."""
        update = session.last_update
        if update is None:
            # nothing consumed: countersign the client's zero-balance state
            if zero_update is None:
                raise ProtocolError("no_update")
            zero = BalanceUpdate.from_dict(zero_update)
            chan = self.chain.paychan(session.channel_id)
            if zero.seq != 0 or zero.balance != 0 or not crypto.verify(chan.client_key, zero.message(), zero.client_sig):
                raise ProtocolError("bad_zero_update")
            update = zero.signed_by_server(self.keypair)
        receipt = self.account.paychan_close(session.channel_id, update)
        if not receipt.ok:
            raise ProtocolError("close_rejected", receipt.error.value)
        return receipt.result


class ChargingClient:
    """Vehicle side of a charging session."""

    def __init__(self, account: Account) -> None:
        self.account = account
        self.session: ChannelSession | None = None
        self.ep: Endpoint | None = None
        self.updates_sent = 0
        self.frames_sent = 0
        self.errors: list[str] = []

    @property
    def keypair(self) -> crypto.KeyPair:
        return self.account.keypair

    def open_channel(self, server_key: bytes, deposit: int, expiry_ms: int | None = None) -> bytes:
        receipt = self.account.paychan_open(server_key, deposit, expiry_ms)
        if not receipt.ok:
            raise ProtocolError("open_rejected", receipt.error.value)
        channel_id = bytes.fromhex(receipt.result)
        self.session = ChannelSession(channel_id, "client", deposit)
        return channel_id

    def _call(self, msg: dict) -> dict:
        self.frames_sent += 1
        reply = self.ep.call(msg)
        if reply["type"] == "ERR":
            self.errors.append(reply.get("code", "?"))
        return reply

    def start(self, ep: Endpoint) -> int:
        """Announce the channel to the server; returns the agreed price per unit."""
        self.ep = ep
        reply = self._call({"type": "PAY_OPEN_INFO", "channel_id": self.session.channel_id.hex()})
        if reply["type"] != "PAY_OPEN_INFO":
            raise ProtocolError(reply.get("code", "unexpected"))
        self.session.price_per_unit = reply["price_per_unit"]
        if self.session.state is SessionState.INIT:
            self.session.move(SessionState.ACTIVE)
        return self.session.price_per_unit

    def buy(self, units: int) -> int:
        """Pay for up to ``units`` units, stopping when the deposit is exhausted."""
        s = self.session
        bought = 0
        for _ in range(units):
            if s.balance + s.price_per_unit > s.deposit:
                break
            update = BalanceUpdate(s.channel_id, s.seq + 1, s.balance + s.price_per_unit).signed_by_client(self.keypair)
            if not self.send_update(update):
                break
            bought += 1
        return bought

    def send_update(self, update: BalanceUpdate) -> bool:
        s = self.session
        self.updates_sent += 1
        reply = self._call({"type": "PAY_UPDATE", "channel_id": s.channel_id.hex(), "update": update.to_dict()})
        if reply["type"] != "PAY_RECEIPT":
            return False
        cosigned = BalanceUpdate.from_dict(reply["update"])
        chan = self.account.chain.paychan(s.channel_id)
        if (
            cosigned.message() != update.message()
            or cosigned.client_sig != update.client_sig
            or not crypto.verify(chan.server_key, cosigned.message(), cosigned.server_sig)
            or reply["price_per_unit"] != s.price_per_unit
        ):
            self.errors.append("bad_receipt")
            return False
        s.record(cosigned)
        s.units_delivered += 1
        return True

    def pause(self) -> None:
        reply = self._call({"type": "PAY_PAUSE", "channel_id": self.session.channel_id.hex()})
        if reply["type"] == "PAY_PAUSE":
            self.session.move(SessionState.PAUSED)

    def resume(self) -> None:
        reply = self._call({"type": "PAY_RESUME", "channel_id": self.session.channel_id.hex()})
        if reply["type"] == "PAY_RESUME":
            self.session.move(SessionState.ACTIVE)

    def close(self, submit_myself: bool = False) -> dict:
        """Settle on chain, by the server (default) or by this client."""
        s = self.session
        if s.state is not SessionState.CLOSING:
            s.move(SessionState.CLOSING)
        msg: dict = {"type": "PAY_CLOSE", "channel_id": s.channel_id.hex()}
        if submit_myself:
            update = s.last_update
            if update is None:
                raise ProtocolError("no_update", "a zero-balance close needs the server's signature")
            receipt = self.account.paychan_close(s.channel_id, update)
            if not receipt.ok:
                raise ProtocolError("close_rejected", receipt.error.value)
            s.settlement = receipt.result
            msg["closed_by_client"] = True
        elif s.last_update is None:
            msg["update"] = BalanceUpdate(s.channel_id, 0, 0).signed_by_client(self.keypair).to_dict()
        reply = self._call(msg)
        if reply["type"] != "PAY_CLOSE":
            raise ProtocolError(reply.get("code", "unexpected"), reply.get("detail", ""))
        s.settlement = reply["settlement"]
        s.move(SessionState.DONE)
        return s.settlement
