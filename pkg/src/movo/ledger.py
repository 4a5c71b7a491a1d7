"""Simulated Tangle: a feeless DAG where every transaction approves two tips."""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass
from typing import IO, Iterable

from . import crypto
from .encoding import b64, canonical_json, unb64, unhex
from .sim import Simulator

CHUNK_CAPACITY = 512
CONFIRMATION_LATENCY_MS = 20_000
NULL_ID = bytes(32)


class CapacityError(ValueError):
    pass


class LedgerUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class LedgerTx:
    id: bytes
    trunk: bytes
    branch: bytes
    payload: bytes
    timestamp: int
    confirmed_at: int
    address: bytes = NULL_ID

    @staticmethod
    def compute_id(trunk: bytes, branch: bytes, payload: bytes, timestamp: int, address: bytes) -> bytes:
        return crypto.hash(
            canonical_json(
                {
                    "address": address.hex(),
                    "branch": branch.hex(),
                    "payload_base64": b64(payload),
                    "timestamp": timestamp,
                    "trunk": trunk.hex(),
                }
            )
        )

    def to_json(self) -> str:
        # field order is part of the dump format
        return json.dumps(
            {
                "id": self.id.hex(),
                "trunk": self.trunk.hex(),
                "branch": self.branch.hex(),
                "timestamp": self.timestamp,
                "payload_base64": b64(self.payload),
                "address": self.address.hex(),
                "confirmed_at": self.confirmed_at,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "LedgerTx":
        d = json.loads(line)
        return cls(
            id=unhex(d["id"], 32),
            trunk=unhex(d["trunk"], 32),
            branch=unhex(d["branch"], 32),
            payload=unb64(d["payload_base64"]),
            timestamp=int(d["timestamp"]),
            confirmed_at=int(d.get("confirmed_at", d["timestamp"])),
            address=unhex(d.get("address", NULL_ID.hex()), 32),
        )


class Ledger:
    """Linearizes attaches from any number of callers.

    Tips are kept in insertion order and two distinct tips are drawn uniformly
    with the seeded RNG; only a single-tip ledger yields trunk == branch.
    """

    def __init__(
        self,
        sim: Simulator | None = None,
        seed: int = 0,
        chunk_capacity: int = CHUNK_CAPACITY,
        confirmation_latency_ms: int = CONFIRMATION_LATENCY_MS,
        confirmation_jitter_ms: int = 0,
    ) -> None:
        self.sim = sim or Simulator()
        self.rng = random.Random(seed)
        self.chunk_capacity = chunk_capacity
        self.confirmation_latency_ms = confirmation_latency_ms
        self.confirmation_jitter_ms = confirmation_jitter_ms
        self.available = True
        self._lock = threading.Lock()
        self.txs: dict[bytes, LedgerTx] = {}
        self.order: list[bytes] = []
        self._tips: dict[bytes, None] = {}
        self._by_address: dict[bytes, list[bytes]] = {}
        ts = self.sim.now
        gid = LedgerTx.compute_id(NULL_ID, NULL_ID, b"", ts, NULL_ID)
        self.genesis = LedgerTx(gid, NULL_ID, NULL_ID, b"", ts, ts, NULL_ID)
        self._insert(self.genesis)

    def _insert(self, tx: LedgerTx) -> None:
        if self.order:
            self._tips.pop(tx.trunk, None)
            self._tips.pop(tx.branch, None)
        self.txs[tx.id] = tx
        self.order.append(tx.id)
        self._tips[tx.id] = None
        if tx.address != NULL_ID:
            self._by_address.setdefault(tx.address, []).append(tx.id)

    @property
    def tips(self) -> list[bytes]:
        return list(self._tips)

    def __len__(self) -> int:
        return len(self.txs)

    def select_tips(self) -> tuple[bytes, bytes]:
        tips = list(self._tips)
        if len(tips) == 1:
            return tips[0], tips[0]
        trunk, branch = self.rng.sample(tips, 2)
        return trunk, branch

    def attach(self, payload: bytes, address: bytes = NULL_ID) -> LedgerTx:
        if len(payload) > self.chunk_capacity:
            raise CapacityError(f"payload of {len(payload)} bytes exceeds capacity {self.chunk_capacity}")
        with self._lock:
            if not self.available:
                raise LedgerUnavailable("ledger is not accepting transactions")
            trunk, branch = self.select_tips()
            ts = self.sim.now
            latency = self.confirmation_latency_ms
            if self.confirmation_jitter_ms:
                latency += self.rng.randint(-self.confirmation_jitter_ms, self.confirmation_jitter_ms)
            tx = LedgerTx(
                id=LedgerTx.compute_id(trunk, branch, payload, ts, address),
                trunk=trunk,
                branch=branch,
                payload=payload,
                timestamp=ts,
                confirmed_at=ts + max(0, latency),
                address=address,
            )
            self._insert(tx)
            return tx

    def by_address(self, address: bytes) -> list[LedgerTx]:
        return [self.txs[i] for i in self._by_address.get(address, ())]

    def get(self, tx_id: bytes) -> LedgerTx | None:
        return self.txs.get(tx_id)

    def dump(self, fh: IO[str]) -> None:
        for tx_id in self.order:
            fh.write(self.txs[tx_id].to_json() + "\n")

    @classmethod
    def load(cls, lines: Iterable[str], **kwargs) -> "Ledger":
        """Rebuild a ledger from a dump, checking ids and parent references."""
        txs = [LedgerTx.from_json(line) for line in lines if line.strip()]
        if not txs:
            raise ValueError("empty ledger dump")
        ledger = cls(Simulator(txs[0].timestamp), **kwargs)
        if txs[0].id != ledger.genesis.id:
            raise ValueError("dump does not start with the genesis transaction")
        for tx in txs[1:]:
            if LedgerTx.compute_id(tx.trunk, tx.branch, tx.payload, tx.timestamp, tx.address) != tx.id:
                raise ValueError(f"transaction {tx.id.hex()} has a mismatching id")
            if tx.trunk not in ledger.txs or tx.branch not in ledger.txs:
                raise ValueError(f"transaction {tx.id.hex()} references an unknown parent")
            ledger._insert(tx)
        ledger.sim.now = max(tx.timestamp for tx in txs)
        return ledger
