"""Device data pipeline: packetize, encrypt, upload, index and anchor.

Records from a source are grouped into one packet per 1 s slot, or one
packet per record when ``records_per_packet`` is set. Packets are encrypted with the
key of their anchoring interval (default 20 s) and uploaded to the content
store. When an interval has ended and all of its uploads have settled, its
manifest (the ordered packet digests grouped by 1 s slot) is encrypted and
stored, and one MAM message anchors it. The anchor body is fixed-size::

    u64 interval_id | u32 packet_count | u16 n_slots | manifest digest | n_slots x slot root

where a slot root is the digest of the concatenated packet digests of that
slot. Consumers walk the MAM channel, fetch manifests and packets, request
interval keys from the authorization service and verify every digest.
"""

from __future__ import annotations

import json
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from . import crypto, mam
from .authz import SIDE_KEY_INTERVAL, AuthorizationService, KeyRegistration, request_and_unwrap
from .chain import Account, Chain
from .encoding import canonical_json
from .ledger import Ledger, LedgerUnavailable
from .sensors import SENSOR_CODES, SENSOR_NAMES, Record, SensorSample
from .sim import Simulator
from .store import ContentStore

logger = logging.getLogger(__name__)

INTERVAL_MS = 20_000
SLOT_MS = 1_000

_PACKET_HEADER = struct.Struct(">BQQH")
_SAMPLE_HEADER = struct.Struct(">BQI")
_ANCHOR_HEADER = struct.Struct(">QIH")


class PacketFormatError(ValueError):
    pass


# -- packets -----------------------------------------------------------------


def encode_samples(sensor_type: str, start: int, end: int, samples: Iterable[SensorSample]) -> bytes:
    samples = list(samples)
    parts = [_PACKET_HEADER.pack(SENSOR_CODES[sensor_type], start, end, len(samples))]
    for s in samples:
        parts.append(_SAMPLE_HEADER.pack(SENSOR_CODES[s.sensor_type], s.produced_at, len(s.payload)))
        parts.append(s.payload)
    return b"".join(parts)


def decode_samples(blob: bytes) -> tuple[str, int, int, list[SensorSample]]:
    try:
        code, start, end, count = _PACKET_HEADER.unpack_from(blob, 0)
        off = _PACKET_HEADER.size
        samples = []
        for _ in range(count):
            scode, ts, n = _SAMPLE_HEADER.unpack_from(blob, off)
            off += _SAMPLE_HEADER.size
            if off + n > len(blob):
                raise PacketFormatError("sample overruns packet")
            samples.append(SensorSample(SENSOR_NAMES[scode], ts, blob[off : off + n]))
            off += n
        if off != len(blob):
            raise PacketFormatError("trailing bytes in packet")
        return SENSOR_NAMES[code], start, end, samples
    except (struct.error, KeyError) as exc:
        raise PacketFormatError(str(exc)) from exc


@dataclass
class DataPacket:
    owner: bytes
    sensor_type: str
    interval: tuple[int, int]
    ciphertext: bytes
    digest: bytes
    sample_count: int


# -- manifests and anchors ------------------------------------------------------


@dataclass
class Manifest:
    channel_root: bytes
    interval_id: int
    slots: list[list[bytes]]
    counts: dict[str, int]

    @property
    def packet_digests(self) -> list[bytes]:
        return [d for slot in self.slots for d in slot]

    def slot_roots(self) -> list[bytes]:
        return [crypto.hash(b"".join(slot)) for slot in self.slots]

    def encode(self) -> bytes:
        header = canonical_json(
            {
                "channel_root": self.channel_root.hex(),
                "counts": self.counts,
                "interval_id": self.interval_id,
                "slot_sizes": [len(s) for s in self.slots],
            }
        )
        return struct.pack(">I", len(header)) + header + b"".join(self.packet_digests)

    @classmethod
    def decode(cls, blob: bytes) -> "Manifest":
        (n,) = struct.unpack_from(">I", blob, 0)
        header = json.loads(blob[4 : 4 + n])
        digests = blob[4 + n :]
        sizes = header["slot_sizes"]
        if len(digests) != 32 * sum(sizes):
            raise PacketFormatError("manifest digest list has the wrong length")
        slots, off = [], 0
        for size in sizes:
            slots.append([digests[off + 32 * i : off + 32 * (i + 1)] for i in range(size)])
            off += 32 * size
        return cls(bytes.fromhex(header["channel_root"]), header["interval_id"], slots, header["counts"])


@dataclass(frozen=True)
class Anchor:
    interval_id: int
    packet_count: int
    manifest_digest: bytes
    slot_roots: tuple[bytes, ...]

    def encode(self) -> bytes:
        return (
            _ANCHOR_HEADER.pack(self.interval_id, self.packet_count, len(self.slot_roots))
            + self.manifest_digest
            + b"".join(self.slot_roots)
        )

    @classmethod
    def decode(cls, body: bytes) -> "Anchor":
        interval_id, count, n_slots = _ANCHOR_HEADER.unpack_from(body, 0)
        off = _ANCHOR_HEADER.size
        if len(body) != off + 32 * (n_slots + 1):
            raise PacketFormatError("anchor body has the wrong length")
        roots = tuple(body[off + 32 * (i + 1) : off + 32 * (i + 2)] for i in range(n_slots))
        return cls(interval_id, count, body[off : off + 32], roots)


def sample_fingerprint(s: SensorSample) -> bytes:
    return crypto.hash(_SAMPLE_HEADER.pack(SENSOR_CODES[s.sensor_type], s.produced_at, len(s.payload)) + s.payload)


def stream_fingerprint(hashes: Iterable[bytes]) -> bytes:
    """Order-independent digest of a multiset of sample fingerprints."""
    return crypto.hash(b"".join(sorted(hashes)))


# -- producer ------------------------------------------------------------------


@dataclass
class _Interval:
    index: int
    tick_fired: bool = False
    pending_puts: int = 0
    packets: list[tuple[int, int, bytes, str]] = field(default_factory=list)  # (slot, seq, digest, type)
    failed: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    anchored: bool = False


class _Stream:
    def __init__(self, stream_id: int, records: Iterator[Record]) -> None:
        self.id = stream_id
        self._it = iter(records)
        self.head: Record | None = next(self._it, None)
        self.blocked = False
        self.buffer: list[Record] = []
        self.buffer_slot: int | None = None

    @property
    def head_time(self) -> int | None:
        return None if self.head is None else self.head[0].produced_at

    def pop(self) -> Record:
        rec = self.head
        self.head = next(self._it, None)
        return rec


class DevicePipeline:
    """One vehicle's client: owns a MAM channel, its keys and its uploads."""

    def __init__(
        self,
        sim: Simulator,
        account: Account,
        store: ContentStore,
        ledger: Ledger,
        authz: AuthorizationService,
        rng: random.Random,
        wallet: crypto.Wallet | None = None,
        interval_ms: int = INTERVAL_MS,
        slot_ms: int = SLOT_MS,
        records_per_packet: int | None = None,
        max_pending: int = 4096,
        retry_backoff_ms: int = 1_000,
        max_retries: int = 8,
        keep_samples: bool = False,
    ) -> None:
        if interval_ms % slot_ms:
            raise ValueError("interval_ms must be a multiple of slot_ms")
        self.sim = sim
        self.account = account
        self.store = store
        self.ledger = ledger
        self.authz = authz
        self.rng = rng
        self.wallet = wallet or crypto.Wallet()
        self.wallet.add_keypair(account.keypair)
        self.interval_ms = interval_ms
        self.slot_ms = slot_ms
        self.records_per_packet = records_per_packet
        self.max_pending = max_pending
        self.retry_backoff_ms = retry_backoff_ms
        self.max_retries = max_retries
        self.keep_samples = keep_samples
        self.channel: mam.MamChannel | None = None
        self.streams: list[_Stream] = []
        self.intervals: dict[int, _Interval] = {}
        self.next_anchor = 0
        self.n_intervals = 0
        self.messages: list[mam.MamMessage] = []
        self.manifests: dict[int, bytes] = {}
        self.packets: list[DataPacket] = []
        self.produced: list[SensorSample] = []
        self.produced_hashes: list[bytes] = []
        self.produced_bytes = 0
        self.samples_emitted = 0
        self.samples_packed = 0
        self.packets_failed = 0
        self.anchor_retries = 0
        self.failures: list[str] = []
        self._seq = 0
        self._backlog = 0

    @property
    def owner(self) -> crypto.KeyPair:
        return self.account.keypair

    @property
    def channel_root(self) -> bytes:
        return self.channel.channel_id

    def setup(self) -> bytes:
        """Create the MAM channel, register it on chain and share its side key."""
        self.channel = mam.MamChannel.create(self.owner, self.rng)
        receipt = self.account.register_channel(self.channel_root)
        if not receipt.ok:
            raise RuntimeError(f"channel registration failed: {receipt.error}")
        self.wallet.put_sym_key(self.channel_root, SIDE_KEY_INTERVAL, self.channel.side_key)
        self._share_key(SIDE_KEY_INTERVAL, self.channel.side_key)
        return self.channel_root

    def _share_key(self, interval_id: int, key: bytes) -> None:
        self.authz.register_key(
            KeyRegistration.create(self.owner, self.authz.public_key, self.channel_root, interval_id, key, self.rng)
        )

    def interval_key(self, interval_id: int) -> bytes:
        return self.wallet.sym_key_or_create(self.channel_root, interval_id, self.rng)

    # -- driving ---------------------------------------------------------------

    def start(self, sources: Iterable[Iterable[Record]], duration_ms: int) -> None:
        """Schedule every source and the anchoring ticks on the simulator."""
        if self.channel is None:
            self.setup()
        start = self.sim.now
        self.n_intervals = -(-duration_ms // self.interval_ms)
        for k in range(self.n_intervals):
            self.sim.at(start + (k + 1) * self.interval_ms, self._tick, k)
        for src in sources:
            stream = _Stream(len(self.streams), iter(src))
            self.streams.append(stream)
            self._schedule_next(stream)

    def _schedule_next(self, stream: _Stream) -> None:
        if stream.head is not None:
            self.sim.at(max(self.sim.now, stream.head_time), self._emit, stream)

    def _emit(self, stream: _Stream) -> None:
        if self._backlog >= self.max_pending:
            stream.blocked = True
            return
        record = stream.pop()
        self._ingest(stream, record)
        if stream.head is None or self._slot_of(stream.head_time) != stream.buffer_slot:
            self._flush(stream)
        self._schedule_next(stream)
        self._check_ready()

    def _slot_of(self, t: int) -> int:
        return t // self.slot_ms

    def _ingest(self, stream: _Stream, record: Record) -> None:
        slot = self._slot_of(record[0].produced_at)
        if stream.buffer and stream.buffer_slot != slot:
            self._flush(stream)
        stream.buffer.append(record)
        stream.buffer_slot = slot
        for s in record:
            self.samples_emitted += 1
            self.produced_bytes += len(s.payload)
            self.produced_hashes.append(sample_fingerprint(s))
            if self.keep_samples:
                self.produced.append(s)
        if self.records_per_packet and len(stream.buffer) >= self.records_per_packet:
            self._flush(stream)

    def _flush(self, stream: _Stream) -> None:
        if not stream.buffer:
            return
        records, slot = stream.buffer, stream.buffer_slot
        stream.buffer, stream.buffer_slot = [], None
        samples = [s for rec in records for s in rec]
        start = slot * self.slot_ms
        interval_id = start // self.interval_ms
        sensor_type = records[0][0].sensor_type
        plaintext = encode_samples(sensor_type, start, start + self.slot_ms, samples)
        ciphertext = crypto.sym_encrypt(self.interval_key(interval_id), plaintext, self.rng)
        packet = DataPacket(
            self.owner.address, sensor_type, (start, start + self.slot_ms), ciphertext, crypto.hash(ciphertext), len(samples)
        )
        self.samples_packed += len(samples)
        self.packets.append(packet)
        iv = self._interval(interval_id)
        iv.pending_puts += 1
        self._backlog += 1
        seq = self._seq
        self._seq += 1
        self.store.submit_put(
            ciphertext, lambda digest, err: self._put_done(iv, slot - interval_id * (self.interval_ms // self.slot_ms), seq, packet, digest, err)
        )

    def _interval(self, k: int) -> _Interval:
        iv = self.intervals.get(k)
        if iv is None:
            iv = self.intervals[k] = _Interval(k)
        return iv

    def _put_done(self, iv: _Interval, slot: int, seq: int, packet: DataPacket, digest, err) -> None:
        iv.pending_puts -= 1
        self._backlog -= 1
        if err is not None:
            iv.failed += 1
            self.packets_failed += 1
            self.failures.append(f"packet {packet.digest.hex()[:16]} upload failed: {err}")
        else:
            iv.packets.append((slot, seq, digest, packet.sensor_type))
            iv.counts[packet.sensor_type] = iv.counts.get(packet.sensor_type, 0) + 1
        for stream in self.streams:
            if stream.blocked:
                stream.blocked = False
                self.sim.schedule(0, self._emit, stream)
        self._check_ready()

    def _tick(self, k: int) -> None:
        self._interval(k).tick_fired = True
        # streams that have moved past the boundary hold no more data for k
        self._check_ready()

    def _ready(self, k: int) -> bool:
        iv = self.intervals.get(k)
        if iv is None or not iv.tick_fired or iv.pending_puts:
            return False
        end = (k + 1) * self.interval_ms
        for stream in self.streams:
            if stream.head is not None and stream.head_time < end:
                return False
            if stream.buffer and stream.buffer_slot * self.slot_ms < end:
                return False
        return True

    def _check_ready(self) -> None:
        while self.next_anchor < self.n_intervals and self._ready(self.next_anchor):
            iv = self.intervals[self.next_anchor]
            iv.anchored = True
            self.next_anchor += 1
            self._anchor(iv, attempt=0)

    # -- anchoring -------------------------------------------------------------

    def build_manifest(self, iv: _Interval) -> Manifest:
        n_slots = self.interval_ms // self.slot_ms
        slots: list[list[bytes]] = [[] for _ in range(n_slots)]
        for slot, _, digest, _ in sorted(iv.packets, key=lambda p: (p[0], p[1])):
            slots[slot].append(digest)
        return Manifest(self.channel_root, iv.index, slots, dict(sorted(iv.counts.items())))

    def _anchor(self, iv: _Interval, attempt: int) -> None:
        manifest = self.build_manifest(iv)
        key = self.interval_key(iv.index)
        blob = crypto.sym_encrypt(key, manifest.encode(), self.rng)

        def stored(digest, err):
            if err is not None:
                self._retry(iv, attempt, f"manifest put failed: {err}")
                return
            self._publish(iv, manifest, digest, key, attempt)

        self.store.submit_put(blob, stored)

    def _publish(self, iv: _Interval, manifest: Manifest, manifest_digest: bytes, key: bytes, attempt: int) -> None:
        anchor = Anchor(iv.index, len(manifest.packet_digests), manifest_digest, tuple(manifest.slot_roots()))
        try:
            msg = mam.publish(self.ledger, self.channel, anchor.encode(), self.rng)
        except LedgerUnavailable as exc:
            self._retry(iv, attempt, f"ledger unavailable: {exc}")
            return
        self.messages.append(msg)
        self.manifests[iv.index] = manifest_digest
        self._share_key(iv.index, key)
        logger.debug("anchored interval %d: %d packets, %d txs", iv.index, anchor.packet_count, len(msg.chunk_tx_ids))

    def _retry(self, iv: _Interval, attempt: int, reason: str) -> None:
        if attempt + 1 > self.max_retries:
            self.failures.append(f"interval {iv.index}: giving up after {attempt + 1} attempts ({reason})")
            return
        self.anchor_retries += 1
        backoff = self.retry_backoff_ms * (2**attempt)
        self.sim.schedule(backoff, self._anchor, iv, attempt + 1)

    # -- invariants ------------------------------------------------------------

    def check_invariants(self) -> list[str]:
        breaches = []
        if self.samples_packed != self.samples_emitted:
            breaches.append(f"{self.samples_emitted} samples emitted but {self.samples_packed} packed")
        stored = [p for iv in self.intervals.values() for p in iv.packets]
        digests = [d for _, _, d, _ in stored]
        if len(set(digests)) != len(digests):
            breaches.append("a packet digest appears in more than one manifest")
        if len(stored) + self.packets_failed != len(self.packets):
            breaches.append("uploaded plus failed packets do not add up to packets built")
        if len(self.messages) != len(self.manifests):
            breaches.append("manifest and MAM message counts differ")
        if len(set(self.manifests.values())) != len(self.manifests):
            breaches.append("a manifest digest is anchored more than once")
        if self.n_intervals and len(self.messages) != self.n_intervals:
            breaches.append(f"{len(self.messages)} MAM messages for {self.n_intervals} intervals")
        return breaches


# -- consumer -------------------------------------------------------------------


@dataclass(frozen=True)
class IntegrityAlarm:
    interval_id: int
    digest: bytes
    reason: str


@dataclass
class ConsumerResult:
    samples: list[SensorSample] = field(default_factory=list)
    alarms: list[IntegrityAlarm] = field(default_factory=list)
    denied: list[int] = field(default_factory=list)
    packets_decrypted: int = 0
    messages: int = 0

    @property
    def recovered_bytes(self) -> int:
        return sum(len(s.payload) for s in self.samples)

    def fingerprint(self) -> bytes:
        return stream_fingerprint(sample_fingerprint(s) for s in self.samples)


class AccessDenied(Exception):
    pass


def consumer_read(
    ledger: Ledger,
    store: ContentStore,
    chain: Chain,
    authz: AuthorizationService,
    consumer: crypto.KeyPair,
    channel_root: bytes,
) -> ConsumerResult:
    """Fetch, verify and decrypt everything anchored on ``channel_root``.

    Raises AccessDenied if the side key is withheld; per-interval denials and
    integrity failures are collected in the result without stopping the read.
    """
    side_key = request_and_unwrap(authz, consumer, channel_root, SIDE_KEY_INTERVAL)
    if side_key is None:
        raise AccessDenied("side key request denied")
    result = ConsumerResult()
    bodies = mam.fetch(ledger, channel_root, side_key, expected_owner=chain.channel_owner(channel_root))
    result.messages = len(bodies)
    for body in bodies:
        anchor = Anchor.decode(body)
        key = request_and_unwrap(authz, consumer, channel_root, anchor.interval_id)
        if key is None:
            result.denied.append(anchor.interval_id)
            continue
        manifest = _read_manifest(store, key, anchor, result)
        if manifest is None:
            continue
        for digest in manifest.packet_digests:
            blob = store.get(digest)
            if blob is None:
                result.alarms.append(IntegrityAlarm(anchor.interval_id, digest, "packet missing"))
                continue
            if crypto.hash(blob) != digest:
                result.alarms.append(IntegrityAlarm(anchor.interval_id, digest, "packet digest mismatch"))
                continue
            try:
                _, _, _, samples = decode_samples(crypto.sym_decrypt(key, blob))
            except (crypto.AuthenticationError, PacketFormatError) as exc:
                result.alarms.append(IntegrityAlarm(anchor.interval_id, digest, f"packet unreadable: {exc}"))
                continue
            result.packets_decrypted += 1
            result.samples.extend(samples)
    return result


def _read_manifest(store: ContentStore, key: bytes, anchor: Anchor, result: ConsumerResult) -> Manifest | None:
    blob = store.get(anchor.manifest_digest)
    if blob is None or crypto.hash(blob) != anchor.manifest_digest:
        result.alarms.append(IntegrityAlarm(anchor.interval_id, anchor.manifest_digest, "manifest missing or altered"))
        return None
    try:
        manifest = Manifest.decode(crypto.sym_decrypt(key, blob))
    except (crypto.AuthenticationError, PacketFormatError, ValueError, KeyError) as exc:
        result.alarms.append(IntegrityAlarm(anchor.interval_id, anchor.manifest_digest, f"manifest unreadable: {exc}"))
        return None
    if tuple(manifest.slot_roots()) != anchor.slot_roots or len(manifest.packet_digests) != anchor.packet_count:
        result.alarms.append(IntegrityAlarm(anchor.interval_id, anchor.manifest_digest, "manifest does not match anchor"))
        return None
    return manifest
