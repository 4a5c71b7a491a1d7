from __future__ import annotations

import random

from movo import crypto
from movo.authz import AuthorizationService
from movo.chain import Account, BalanceUpdate, Chain
from movo.ledger import Ledger
from movo.p2p import ChargingClient, ChargingServer, Radio
from movo.sim import Simulator
from movo.store import ContentStore


def keypair(name: str) -> crypto.KeyPair:
    return crypto.KeyPair.from_seed(crypto.hash(name.encode()))



class World:
    """A vehicle, an insurer and a stranger sharing one chain, ledger, store and key service."""

    def __init__(self, seed: int = 0, **store_kwargs) -> None:
        self.sim = Simulator()
        self.rng = random.Random(seed)
        self.owner = keypair("owner")
        self.insurer = keypair("insurer")
        self.stranger = keypair("stranger")
        self.chain = Chain(self.sim, genesis={self.owner.address: 1000, self.insurer.address: 1000})
        self.ledger = Ledger(self.sim, seed=seed)
        self.store = ContentStore(self.sim, **store_kwargs)
        self.authz = AuthorizationService(self.chain, keypair("authz"), random.Random(seed + 1))
        self.owner_account = Account(self.chain, self.owner)
        self.insurer_account = Account(self.chain, self.insurer)


VEHICLE, CHARGER = keypair("vehicle"), keypair("charger")


class ChargingSession:
    """An open payment channel between VEHICLE and CHARGER with a live session."""

    def __init__(self, deposit: int = 100, price: int = 5, expiry_ms: int | None = None) -> None:
        self.sim = Simulator()
        self.chain = Chain(self.sim, genesis={VEHICLE.address: 1000})
        self.server = ChargingServer(self.sim, Account(self.chain, CHARGER), price)
        self.client = ChargingClient(Account(self.chain, VEHICLE))
        radio = Radio(self.sim)
        radio.register("charger", self.server.accept)
        self.channel_id = self.client.open_channel(CHARGER.public_key, deposit, expiry_ms)
        self.price = self.client.start(radio.connect("charger"))
        self.deposit = deposit

    @property
    def server_session(self):
        return self.server.sessions[self.channel_id]

    def raw_update(self, seq: int, balance: int, signer=VEHICLE) -> dict:
        u = BalanceUpdate(self.channel_id, seq, balance).signed_by_client(signer)
        return self.client.ep.call({"type": "PAY_UPDATE", "channel_id": self.channel_id.hex(), "update": u.to_dict()})
