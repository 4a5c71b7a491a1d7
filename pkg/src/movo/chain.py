"""Single-sequencer account chain running the token, ACL and payment-channel contracts.

Transactions are signed over a canonical JSON encoding and applied strictly
in submission order. A transaction with a bad signature, wrong nonce or an
unknown call is rejected outright; one that passes those checks but fails
inside a contract is recorded with a failed receipt and still consumes the
sender's nonce.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any, Callable, Iterable

from . import crypto
from .encoding import canonical_json, unhex
from .sim import Simulator

PAYCHAN_ESCROW = crypto.hash(b"movo/paychan-escrow")[: crypto.ADDRESS_SIZE]
DEFAULT_PAYCHAN_EXPIRY_MS = 24 * 3600 * 1000


class ErrorCode(str, Enum):
    BAD_SIGNATURE = "bad_signature"
    BAD_NONCE = "bad_nonce"
    UNKNOWN_CALL = "unknown_call"
    BAD_ARGS = "bad_args"
    INSUFFICIENT_FUNDS = "insufficient_funds"
    NOT_MINTER = "not_minter"
    UNREGISTERED_CHANNEL = "unregistered_channel"
    DUPLICATE_CHANNEL = "duplicate_channel"
    NOT_OWNER = "not_owner"
    NO_GRANT = "no_grant"
    ZERO_DEPOSIT = "zero_deposit"
    BAD_SERVER_KEY = "bad_server_key"
    UNKNOWN_PAYCHAN = "unknown_paychan"
    NOT_PARTICIPANT = "not_participant"
    CHANNEL_CLOSED = "channel_closed"
    OVER_DEPOSIT = "over_deposit"
    BAD_COSIGNATURE = "bad_cosignature"
    NOT_EXPIRED = "not_expired"


class TxRejected(Exception):
    def __init__(self, code: ErrorCode, detail: str = "") -> None:
        super().__init__(f"{code.value}: {detail}" if detail else code.value)
        self.code = code


class ContractError(Exception):
    def __init__(self, code: ErrorCode, detail: str = "") -> None:
        super().__init__(f"{code.value}: {detail}" if detail else code.value)
        self.code = code


@dataclass(frozen=True)
class ChainTx:
    sender: bytes
    nonce: int
    call: dict
    public_key: bytes
    signature: bytes

    @staticmethod
    def signing_bytes(sender: bytes, nonce: int, call: dict) -> bytes:
        return canonical_json({"call": call, "nonce": nonce, "sender": sender.hex()})

    @classmethod
    def create(cls, keypair: crypto.KeyPair, nonce: int, contract: str, method: str, **args: Any) -> "ChainTx":
        call = {"args": args, "contract": contract, "method": method}
        sig = keypair.sign(cls.signing_bytes(keypair.address, nonce, call))
        return cls(keypair.address, nonce, call, keypair.public_key, sig)

    @property
    def hash(self) -> bytes:
        return crypto.hash(canonical_json(self.to_dict()))

    def to_dict(self) -> dict:
        return {
            "call": self.call,
            "nonce": self.nonce,
            "public_key": self.public_key.hex(),
            "sender": self.sender.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainTx":
        return cls(
            sender=unhex(d["sender"], crypto.ADDRESS_SIZE),
            nonce=int(d["nonce"]),
            call=d["call"],
            public_key=unhex(d["public_key"]),
            signature=unhex(d["signature"]),
        )


@dataclass(frozen=True)
class Receipt:
    index: int
    tx_hash: bytes
    ok: bool
    error: ErrorCode | None = None
    result: Any = None
    timestamp: int = 0


@dataclass(frozen=True)
class BalanceUpdate:
    """Off-chain channel state; closeable once both parties have signed it."""

    channel_id: bytes
    seq: int
    balance: int
    client_sig: bytes = b""
    server_sig: bytes = b""

    @staticmethod
    def signing_bytes(channel_id: bytes, seq: int, balance: int) -> bytes:
        return canonical_json({"balance": balance, "channel_id": channel_id.hex(), "seq": seq})

    def message(self) -> bytes:
        return self.signing_bytes(self.channel_id, self.seq, self.balance)

    def signed_by_client(self, keypair: crypto.KeyPair) -> "BalanceUpdate":
        return BalanceUpdate(self.channel_id, self.seq, self.balance, keypair.sign(self.message()), self.server_sig)

    def signed_by_server(self, keypair: crypto.KeyPair) -> "BalanceUpdate":
        return BalanceUpdate(self.channel_id, self.seq, self.balance, self.client_sig, keypair.sign(self.message()))

    def to_dict(self) -> dict:
        return {
            "balance": self.balance,
            "channel_id": self.channel_id.hex(),
            "client_sig": self.client_sig.hex(),
            "seq": self.seq,
            "server_sig": self.server_sig.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BalanceUpdate":
        seq, balance = d["seq"], d["balance"]
        if type(seq) is not int or type(balance) is not int:
            raise ValueError("seq and balance must be integers")
        return cls(
            channel_id=unhex(d["channel_id"], 32),
            seq=seq,
            balance=balance,
            client_sig=unhex(d.get("client_sig", "")),
            server_sig=unhex(d.get("server_sig", "")),
        )


@dataclass
class AccessGrant:
    owner: bytes
    consumer: bytes
    channel_root: bytes
    granted_at: int
    revoked: bool = False


@dataclass
class PaymentChannel:
    channel_id: bytes
    client: bytes
    server: bytes
    client_key: bytes
    server_key: bytes
    deposit: int
    opened_at: int
    expiry_ms: int
    status: str = "open"
    final_balance: int | None = None


def _addr(value: Any) -> bytes:
    try:
        return unhex(value, crypto.ADDRESS_SIZE)
    except (TypeError, ValueError) as exc:
        raise ContractError(ErrorCode.BAD_ARGS, f"bad address {value!r}") from exc


def _amount(value: Any, name: str = "amount") -> int:
    if type(value) is not int or value < 0:
        raise ContractError(ErrorCode.BAD_ARGS, f"{name} must be a non-negative integer")
    return value


def _digest(value: Any) -> bytes:
    try:
        return unhex(value, crypto.DIGEST_SIZE)
    except (TypeError, ValueError) as exc:
        raise ContractError(ErrorCode.BAD_ARGS, f"bad digest {value!r}") from exc


class Chain:
    def __init__(
        self,
        sim: Simulator | None = None,
        genesis: dict[bytes, int] | None = None,
        minter: bytes | None = None,
        paychan_expiry_ms: int = DEFAULT_PAYCHAN_EXPIRY_MS,
    ) -> None:
        self.sim = sim or Simulator()
        self.genesis = dict(genesis or {})
        self.minter = minter
        self.paychan_expiry_ms = paychan_expiry_ms
        self.balances: dict[bytes, int] = {a: v for a, v in self.genesis.items() if v}
        self.nonces: dict[bytes, int] = {}
        self.channel_owners: dict[bytes, bytes] = {}
        self.grants: dict[tuple[bytes, bytes], AccessGrant] = {}
        self.paychans: dict[bytes, PaymentChannel] = {}
        self.receipts: list[Receipt] = []
        self.log: list[dict] = []
        self._lock = threading.RLock()
        self._methods: dict[tuple[str, str], Callable[[ChainTx, dict], Any]] = {
            ("token", "transfer"): self._token_transfer,
            ("token", "mint"): self._token_mint,
            ("acl", "register_channel"): self._acl_register,
            ("acl", "grant"): self._acl_grant,
            ("acl", "revoke"): self._acl_revoke,
            ("services", "checkin"): self._services_checkin,
            ("paychan", "open"): self._paychan_open,
            ("paychan", "close"): self._paychan_close,
            ("paychan", "refund"): self._paychan_refund,
        }

    # -- submission ---------------------------------------------------------

    @property
    def tx_count(self) -> int:
        return len(self.receipts)

    def nonce(self, address: bytes) -> int:
        return self.nonces.get(address, 0)

    def submit(self, tx: ChainTx) -> Receipt:
        with self._lock:
            if crypto.address_of(tx.public_key) != tx.sender or not crypto.verify(
                tx.public_key, ChainTx.signing_bytes(tx.sender, tx.nonce, tx.call), tx.signature
            ):
                raise TxRejected(ErrorCode.BAD_SIGNATURE)
            expected = self.nonce(tx.sender)
            if tx.nonce != expected:
                raise TxRejected(ErrorCode.BAD_NONCE, f"expected {expected}, got {tx.nonce}")
            method = self._methods.get((tx.call.get("contract"), tx.call.get("method")))
            args = tx.call.get("args")
            if method is None or not isinstance(args, dict):
                raise TxRejected(ErrorCode.UNKNOWN_CALL, f"{tx.call.get('contract')}.{tx.call.get('method')}")
            self.nonces[tx.sender] = expected + 1
            now = self.sim.now
            try:
                receipt = Receipt(len(self.receipts), tx.hash, True, None, method(tx, args), now)
            except ContractError as exc:
                receipt = Receipt(len(self.receipts), tx.hash, False, exc.code, None, now)
            self.receipts.append(receipt)
            self.log.append({"timestamp": now, "tx": tx.to_dict()})
            return receipt

    # -- reads --------------------------------------------------------------

    def token_balance(self, address: bytes) -> int:
        return self.balances.get(address, 0)

    def total_supply(self) -> int:
        return sum(self.balances.values())

    def channel_owner(self, channel_root: bytes) -> bytes | None:
        return self.channel_owners.get(channel_root)

    def acl_is_authorized(self, consumer: bytes, channel_root: bytes) -> bool:
        grant = self.grants.get((channel_root, consumer))
        return grant is not None and not grant.revoked

    def paychan(self, channel_id: bytes) -> PaymentChannel | None:
        return self.paychans.get(channel_id)

    # -- token --------------------------------------------------------------

    def _move(self, src: bytes, dst: bytes, amount: int) -> None:
        if self.balances.get(src, 0) < amount:
            raise ContractError(ErrorCode.INSUFFICIENT_FUNDS, f"{src.hex()} holds {self.balances.get(src, 0)}")
        if amount == 0:
            return
        self.balances[src] -= amount
        if not self.balances[src]:
            del self.balances[src]
        self.balances[dst] = self.balances.get(dst, 0) + amount

    def _token_transfer(self, tx: ChainTx, args: dict) -> None:
        self._move(tx.sender, _addr(args.get("to")), _amount(args.get("amount")))

    def _token_mint(self, tx: ChainTx, args: dict) -> None:
        if self.minter is None or tx.sender != self.minter:
            raise ContractError(ErrorCode.NOT_MINTER)
        to, amount = _addr(args.get("to")), _amount(args.get("amount"))
        if amount:
            self.balances[to] = self.balances.get(to, 0) + amount

    # -- data-sharing ACL ---------------------------------------------------

    def _acl_register(self, tx: ChainTx, args: dict) -> None:
        root = _digest(args.get("channel_root"))
        if root in self.channel_owners:
            raise ContractError(ErrorCode.DUPLICATE_CHANNEL)
        self.channel_owners[root] = tx.sender

    def _owned_root(self, tx: ChainTx, args: dict) -> bytes:
        root = _digest(args.get("channel_root"))
        owner = self.channel_owners.get(root)
        if owner is None:
            raise ContractError(ErrorCode.UNREGISTERED_CHANNEL)
        if owner != tx.sender:
            raise ContractError(ErrorCode.NOT_OWNER)
        return root

    def _grant(self, owner: bytes, consumer: bytes, root: bytes) -> None:
        grant = self.grants.get((root, consumer))
        if grant is None or grant.revoked:
            self.grants[(root, consumer)] = AccessGrant(owner, consumer, root, self.sim.now)

    def _acl_grant(self, tx: ChainTx, args: dict) -> None:
        root = self._owned_root(tx, args)
        self._grant(tx.sender, _addr(args.get("consumer")), root)

    def _acl_revoke(self, tx: ChainTx, args: dict) -> None:
        root = self._owned_root(tx, args)
        grant = self.grants.get((root, _addr(args.get("consumer"))))
        if grant is None or grant.revoked:
            raise ContractError(ErrorCode.NO_GRANT)
        grant.revoked = True

    def _services_checkin(self, tx: ChainTx, args: dict) -> None:
        # pay a service provider and list it as a data consumer in one step
        root = self._owned_root(tx, args)
        provider, fee = _addr(args.get("provider")), _amount(args.get("fee"), "fee")
        self._move(tx.sender, provider, fee)
        self._grant(tx.sender, provider, root)

    # -- micropayment channels ----------------------------------------------

    def _paychan_open(self, tx: ChainTx, args: dict) -> str:
        server = _addr(args.get("server"))
        deposit = _amount(args.get("deposit"), "deposit")
        try:
            server_key = unhex(args.get("server_key", ""))
        except (TypeError, ValueError):
            server_key = b""
        expiry = args.get("expiry_ms", self.paychan_expiry_ms)
        if type(expiry) is not int or expiry < 0:
            raise ContractError(ErrorCode.BAD_ARGS, "expiry_ms")
        if deposit == 0:
            raise ContractError(ErrorCode.ZERO_DEPOSIT)
        if crypto.address_of(server_key) != server:
            raise ContractError(ErrorCode.BAD_SERVER_KEY)
        if any(c.client == tx.sender and c.server == server and c.status == "open" for c in self.paychans.values()):
            raise ContractError(ErrorCode.DUPLICATE_CHANNEL)
        channel_id = crypto.hash(canonical_json({"client": tx.sender.hex(), "nonce": tx.nonce, "server": server.hex()}))
        self._move(tx.sender, PAYCHAN_ESCROW, deposit)
        self.paychans[channel_id] = PaymentChannel(
            channel_id, tx.sender, server, tx.public_key, server_key, deposit, self.sim.now, expiry
        )
        return channel_id.hex()

    def _open_paychan(self, tx: ChainTx, args: dict) -> PaymentChannel:
        try:
            chan = self.paychans.get(unhex(args.get("channel_id", ""), 32))
        except (TypeError, ValueError):
            chan = None
        if chan is None:
            raise ContractError(ErrorCode.UNKNOWN_PAYCHAN)
        if tx.sender not in (chan.client, chan.server):
            raise ContractError(ErrorCode.NOT_PARTICIPANT)
        if chan.status != "open":
            raise ContractError(ErrorCode.CHANNEL_CLOSED)
        return chan

    def _settle(self, chan: PaymentChannel, balance: int) -> dict:
        self._move(PAYCHAN_ESCROW, chan.server, balance)
        self._move(PAYCHAN_ESCROW, chan.client, chan.deposit - balance)
        chan.status = "closed"
        chan.final_balance = balance
        return {"client_refund": chan.deposit - balance, "server_payout": balance}

    def _paychan_close(self, tx: ChainTx, args: dict) -> dict:
        chan = self._open_paychan(tx, args)
        try:
            update = BalanceUpdate.from_dict(args.get("update") or {})
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(ErrorCode.BAD_ARGS, "malformed balance update") from exc
        if update.channel_id != chan.channel_id or update.seq < 0 or update.balance < 0:
            raise ContractError(ErrorCode.BAD_ARGS, "update does not belong to this channel")
        if update.balance > chan.deposit:
            raise ContractError(ErrorCode.OVER_DEPOSIT)
        msg = update.message()
        if not (crypto.verify(chan.client_key, msg, update.client_sig) and crypto.verify(chan.server_key, msg, update.server_sig)):
            raise ContractError(ErrorCode.BAD_COSIGNATURE)
        return self._settle(chan, update.balance)

    def _paychan_refund(self, tx: ChainTx, args: dict) -> dict:
        chan = self._open_paychan(tx, args)
        if tx.sender != chan.client:
            raise ContractError(ErrorCode.NOT_PARTICIPANT)
        if self.sim.now < chan.opened_at + chan.expiry_ms:
            raise ContractError(ErrorCode.NOT_EXPIRED)
        return self._settle(chan, 0)

    # -- persistence --------------------------------------------------------

    def state_snapshot(self) -> bytes:
        return canonical_json(
            {
                "balances": {a.hex(): v for a, v in sorted(self.balances.items())},
                "channels": {r.hex(): o.hex() for r, o in sorted(self.channel_owners.items())},
                "grants": [
                    {
                        "channel_root": g.channel_root.hex(),
                        "consumer": g.consumer.hex(),
                        "granted_at": g.granted_at,
                        "owner": g.owner.hex(),
                        "revoked": g.revoked,
                    }
                    for _, g in sorted(self.grants.items())
                ],
                "nonces": {a.hex(): v for a, v in sorted(self.nonces.items())},
                "paychans": [
                    {
                        "channel_id": c.channel_id.hex(),
                        "client": c.client.hex(),
                        "deposit": c.deposit,
                        "expiry_ms": c.expiry_ms,
                        "final_balance": c.final_balance,
                        "opened_at": c.opened_at,
                        "server": c.server.hex(),
                        "status": c.status,
                    }
                    for _, c in sorted(self.paychans.items())
                ],
                "receipts": [
                    {"error": r.error.value if r.error else None, "ok": r.ok, "tx_hash": r.tx_hash.hex()}
                    for r in self.receipts
                ],
            }
        )

    def export_log(self, fh: IO[str]) -> None:
        header = {
            "genesis": {a.hex(): v for a, v in sorted(self.genesis.items())},
            "minter": self.minter.hex() if self.minter else None,
            "paychan_expiry_ms": self.paychan_expiry_ms,
        }
        fh.write(canonical_json(header).decode() + "\n")
        for entry in self.log:
            fh.write(canonical_json(entry).decode() + "\n")

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "Chain":
        """Rebuild a chain by re-executing an exported log from genesis."""
        it = (line for line in lines if line.strip())
        header = json.loads(next(it))
        sim = Simulator()
        chain = cls(
            sim,
            genesis={unhex(a): v for a, v in header["genesis"].items()},
            minter=unhex(header["minter"]) if header.get("minter") else None,
            paychan_expiry_ms=header["paychan_expiry_ms"],
        )
        for line in it:
            entry = json.loads(line)
            sim.now = max(sim.now, entry["timestamp"])
            chain.submit(ChainTx.from_dict(entry["tx"]))
        return chain


@dataclass
class Account:
    """A keypair bound to a chain, tracking its own nonce."""

    chain: Chain
    keypair: crypto.KeyPair
    receipts: list[Receipt] = field(default_factory=list)

    @property
    def address(self) -> bytes:
        return self.keypair.address

    def call(self, contract: str, method: str, **args: Any) -> Receipt:
        tx = ChainTx.create(self.keypair, self.chain.nonce(self.address), contract, method, **args)
        receipt = self.chain.submit(tx)
        self.receipts.append(receipt)
        return receipt

    def transfer(self, to: bytes, amount: int) -> Receipt:
        return self.call("token", "transfer", to=to.hex(), amount=amount)

    def register_channel(self, channel_root: bytes) -> Receipt:
        return self.call("acl", "register_channel", channel_root=channel_root.hex())

    def grant(self, consumer: bytes, channel_root: bytes) -> Receipt:
        return self.call("acl", "grant", consumer=consumer.hex(), channel_root=channel_root.hex())

    def revoke(self, consumer: bytes, channel_root: bytes) -> Receipt:
        return self.call("acl", "revoke", consumer=consumer.hex(), channel_root=channel_root.hex())

    def checkin(self, provider: bytes, fee: int, channel_root: bytes) -> Receipt:
        return self.call("services", "checkin", provider=provider.hex(), fee=fee, channel_root=channel_root.hex())

    def paychan_open(self, server_key: bytes, deposit: int, expiry_ms: int | None = None) -> Receipt:
        args: dict[str, Any] = {"server": crypto.address_of(server_key).hex(), "server_key": server_key.hex(), "deposit": deposit}
        if expiry_ms is not None:
            args["expiry_ms"] = expiry_ms
        return self.call("paychan", "open", **args)

    def paychan_close(self, channel_id: bytes, update: BalanceUpdate) -> Receipt:
        return self.call("paychan", "close", channel_id=channel_id.hex(), update=update.to_dict())

    def paychan_refund(self, channel_id: bytes) -> Receipt:
        return self.call("paychan", "refund", channel_id=channel_id.hex())
