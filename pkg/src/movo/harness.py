"""Scenario runners wiring every service together on one virtual clock."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import crypto, mam
from .authz import AuthorizationService
from .chain import Account, Chain
from .config import ScenarioConfig
from .encoding import canonical_json
from .ledger import Ledger
from .p2p import (
    ChargingClient,
    ChargingServer,
    Radio,
    RoadsideUnit,
    TranscriptError,
    request_location_certificate,
    verify_transcript,
)
from .pipeline import AccessDenied, DevicePipeline, consumer_read, stream_fingerprint
from .sensors import camera_source, vehicle_source
from .sim import Simulator
from .store import ContentStore


class InvariantBreach(RuntimeError):
    def __init__(self, breaches: list[str]) -> None:
        super().__init__("; ".join(breaches))
        self.breaches = breaches


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    duration_s: int
    dfs_bytes_per_min: float = 0.0
    dfs_puts_per_sec: float = 0.0
    mam_messages_per_min: float = 0.0
    ledger_txs_per_mam_message: float = 0.0
    onchain_tx_count: int = 0
    offchain_msg_count: int = 0
    end_to_end_recovered_bytes: int = 0
    failures: list[str] = field(default_factory=list)
    invariant_breaches: list[str] = field(default_factory=list)
    produced_bytes: int = 0
    samples_produced: int = 0
    mam_messages: int = 0
    mam_mean_latency_s: float = 0.0
    daily_minutes: int = 0
    daily_bytes: float = 0.0
    integrity_alarms: int = 0
    units_delivered: int = 0
    server_revenue: int = 0
    settlement: dict[str, int] | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


@dataclass
class Run:
    """A finished scenario: its report, event log and the live components."""

    config: ScenarioConfig
    report: MetricsReport
    events: list[dict] = field(default_factory=list)
    sim: Simulator | None = None
    chain: Chain | None = None
    ledger: Ledger | None = None
    store: ContentStore | None = None
    authz: AuthorizationService | None = None
    pipeline: DevicePipeline | None = None
    consumer: crypto.KeyPair | None = None
    client: ChargingClient | None = None
    server: ChargingServer | None = None

    def events_jsonl(self) -> str:
        return "".join(canonical_json(e).decode() + "\n" for e in self.events)

    def write(self, path: str | Path) -> Path:
        """Write the report to ``path`` and the event log next to it."""
        path = Path(path)
        self.report.write(path)
        log = path.with_suffix(".events.jsonl")
        log.write_text(self.events_jsonl())
        return log


def role_keypair(role: str, seed: int) -> crypto.KeyPair:
    return crypto.KeyPair.from_seed(crypto.hash(f"movo-sim/{role}/{seed}".encode()))


def _rng(seed: int, purpose: str) -> random.Random:
    return random.Random(f"{seed}/{purpose}")


def _rate(value: float) -> float:
    return round(value, 6)


# -- data scenarios ----------------------------------------------------------


def _data_run(config: ScenarioConfig, consumer_role: str, make_sources: Callable, grant: Callable) -> Run:
    sim = Simulator()
    owner = role_keypair("vehicle", config.seed)
    consumer = role_keypair(consumer_role, config.seed)
    chain = Chain(sim, genesis={owner.address: config.initial_tokens, consumer.address: config.initial_tokens})
    lc, sc, pc = config.ledger, config.store, config.pipeline
    ledger = Ledger(
        sim,
        seed=config.seed,
        chunk_capacity=lc.chunk_capacity,
        confirmation_latency_ms=lc.confirmation_latency_ms,
        confirmation_jitter_ms=lc.confirmation_jitter_ms,
    )
    store = ContentStore(
        sim,
        base_latency_ms=sc.base_latency_ms,
        bandwidth_bytes_per_s=sc.bandwidth_bytes_per_s,
        concurrency_limit=sc.concurrency_limit,
        capacity_bytes=sc.capacity_bytes,
    )
    authz = AuthorizationService(chain, role_keypair("authz", config.seed), _rng(config.seed, "authz"))
    owner_account = Account(chain, owner)
    pipeline = DevicePipeline(
        sim,
        owner_account,
        store,
        ledger,
        authz,
        _rng(config.seed, "pipeline"),
        interval_ms=pc.interval_ms,
        slot_ms=pc.slot_ms,
        records_per_packet=config.records_per_packet,
        max_pending=pc.max_pending,
        retry_backoff_ms=pc.retry_backoff_ms,
    )
    run = Run(config, MetricsReport(config.scenario, config.seed, config.duration_s), sim=sim, chain=chain,
              ledger=ledger, store=store, authz=authz, pipeline=pipeline, consumer=consumer)
    ev = run.events
    duration_ms = config.duration_s * 1000
    if duration_ms == 0:
        # a null run touches nothing, the chain included
        run.report.daily_minutes = config.daily_minutes
        return run

    root = pipeline.setup()
    ev.append({"t": sim.now, "event": "channel_registered", "channel_root": root.hex(), "owner": owner.address.hex()})
    receipt = grant(owner_account, Account(chain, consumer), root)
    ev.append({"t": sim.now, "event": "access_granted", "consumer": consumer.address.hex(), "ok": receipt.ok})
    if not receipt.ok:
        run.report.failures.append(f"grant failed: {receipt.error.value}")

    pipeline.start(make_sources(_rng(config.seed, "sensors"), duration_ms), duration_ms)
    sim.run()

    for msg in pipeline.messages:
        ev.append(
            {
                "t": msg.published_at,
                "event": "mam_published",
                "index": msg.index,
                "txs": len(msg.chunk_tx_ids),
                "latency_ms": mam.confirmation_latency(ledger, msg),
            }
        )

    try:
        result = consumer_read(ledger, store, chain, authz, consumer, root)
    except AccessDenied as exc:
        run.report.failures.append(f"consumer: {exc}")
        result = None
    if result is not None:
        ev.append(
            {
                "t": sim.now,
                "event": "consumer_read",
                "messages": result.messages,
                "packets": result.packets_decrypted,
                "bytes": result.recovered_bytes,
                "alarms": len(result.alarms),
                "denied": len(result.denied),
            }
        )

    _fill_data_metrics(run, result, duration_ms)
    return run


def _fill_data_metrics(run: Run, result, duration_ms: int) -> None:
    r, pipeline, store, ledger = run.report, run.pipeline, run.store, run.ledger
    if duration_ms > 0:
        puts, size = store.ingress(0, duration_ms)
        minutes = duration_ms / 60_000
        r.dfs_bytes_per_min = _rate(size / minutes)
        r.dfs_puts_per_sec = _rate(puts / (duration_ms / 1000))
        r.mam_messages_per_min = _rate(len(pipeline.messages) / minutes)
    messages = pipeline.messages
    r.mam_messages = len(messages)
    if messages:
        r.ledger_txs_per_mam_message = _rate(sum(len(m.chunk_tx_ids) for m in messages) / len(messages))
        r.mam_mean_latency_s = _rate(sum(mam.confirmation_latency(ledger, m) for m in messages) / len(messages) / 1000)
    r.onchain_tx_count = run.chain.tx_count
    r.produced_bytes = pipeline.produced_bytes
    r.samples_produced = pipeline.samples_emitted
    r.daily_minutes = run.config.daily_minutes
    r.daily_bytes = _rate(r.dfs_bytes_per_min * run.config.daily_minutes)
    r.failures.extend(pipeline.failures)

    breaches = pipeline.check_invariants()
    if result is not None:
        r.end_to_end_recovered_bytes = result.recovered_bytes
        r.integrity_alarms = len(result.alarms)
        r.failures.extend(f"interval {a.interval_id}: {a.reason}" for a in result.alarms)
        r.failures.extend(f"interval {k}: key denied" for k in result.denied)
        if result.recovered_bytes > pipeline.produced_bytes:
            breaches.append("recovered more bytes than were produced")
        if not result.alarms and not result.denied and not pipeline.failures:
            if result.fingerprint() != stream_fingerprint(pipeline.produced_hashes):
                breaches.append("recovered samples differ from produced samples")
    r.invariant_breaches.extend(breaches)


def run_insurance(config: ScenarioConfig) -> MetricsReport:
    return simulate(config.replace(scenario="insurance")).report


def run_mechanic(config: ScenarioConfig) -> MetricsReport:
    return simulate(config.replace(scenario="mechanic")).report


def _insurance(config: ScenarioConfig) -> Run:
    cam = config.camera

    def sources(rng, duration_ms):
        return [camera_source(rng, duration_ms, cam.rate_hz, cam.frame_bytes)]

    return _data_run(config, "insurer", sources, lambda owner, consumer, root: owner.grant(consumer.address, root))


def _mechanic(config: ScenarioConfig) -> Run:
    veh = config.vehicle

    def sources(rng, duration_ms):
        return [vehicle_source(rng, duration_ms, veh.rate_hz, veh.point_bytes)]

    def checkin(owner, mechanic, root):
        # the vehicle pays the service fee and grants access in one contract call
        return owner.checkin(mechanic.address, config.checkin_fee, root)

    return _data_run(config, "mechanic", sources, checkin)


# -- charging ----------------------------------------------------------------


def run_charging(config: ScenarioConfig) -> MetricsReport:
    return simulate(config.replace(scenario="charging")).report


def _charging(config: ScenarioConfig) -> Run:
    cc = config.charging
    sim = Simulator()
    vehicle = role_keypair("vehicle", config.seed)
    charger = role_keypair("charger", config.seed)
    rsu_key = role_keypair("rsu", config.seed)
    chain = Chain(sim, genesis={vehicle.address: max(config.initial_tokens, cc.deposit)})
    client = ChargingClient(Account(chain, vehicle))
    server = ChargingServer(sim, Account(chain, charger), cc.price_per_unit)
    run = Run(config, MetricsReport(config.scenario, config.seed, config.duration_s), sim=sim, chain=chain,
              client=client, server=server)
    r, ev = run.report, run.events

    radio = Radio(sim, latency_ms=cc.transport_latency_ms, seed=config.seed)
    rsu = RoadsideUnit(sim, rsu_key, cc.rsu_location)
    radio.register("rsu", rsu.accept)
    radio.register("charger", server.accept)

    peers = radio.discover()
    ev.append({"t": sim.now, "event": "discovered", "peers": peers})
    cert = request_location_certificate(radio.connect("rsu"), vehicle.address)
    ev.append({"t": sim.now, "event": "location_certificate", "valid": cert.verify(rsu_key.public_key)})
    if not cert.verify(rsu_key.public_key):
        r.failures.append("location certificate does not verify")

    channel_id = client.open_channel(charger.public_key, cc.deposit)
    ev.append({"t": sim.now, "event": "paychan_opened", "channel_id": channel_id.hex(), "deposit": cc.deposit})
    price = client.start(radio.connect("charger"))

    units = cc.units
    pause_at = cc.pause_after if cc.pause_after is not None and 0 < cc.pause_after < units else None
    delivered = client.buy(pause_at if pause_at is not None else units)
    if pause_at is not None:
        client.pause()
        ev.append({"t": sim.now, "event": "paused", "units": delivered})
        sim.run(until=sim.now + cc.pause_ms)
        client.resume()
        ev.append({"t": sim.now, "event": "resumed"})
        delivered += client.buy(units - pause_at)
    ev.append({"t": sim.now, "event": "units_delivered", "units": delivered, "balance": client.session.balance})

    settlement = client.close(submit_myself=cc.client_closes and client.session.last_update is not None)
    sim.run()
    ev.append({"t": sim.now, "event": "paychan_closed", **settlement})

    session = server.sessions[channel_id]
    r.onchain_tx_count = chain.tx_count
    r.offchain_msg_count = client.updates_sent
    r.units_delivered = session.units_delivered
    r.server_revenue = settlement["server_payout"]
    r.settlement = {"deposit": cc.deposit, **settlement}
    r.failures.extend(f"charging: {code}" for code in client.errors)

    breaches = r.invariant_breaches
    if settlement["server_payout"] + settlement["client_refund"] != cc.deposit:
        breaches.append("settlement does not add up to the deposit")
    if settlement["server_payout"] != session.units_delivered * price:
        breaches.append("server payout differs from units delivered times price")
    if chain.token_balance(charger.address) != settlement["server_payout"]:
        breaches.append("charger balance differs from its payout")
    if chain.total_supply() != max(config.initial_tokens, cc.deposit):
        breaches.append("token supply changed")
    try:
        verify_transcript(session.transcript, vehicle.public_key, charger.public_key, cc.deposit, channel_id)
    except TranscriptError as exc:
        breaches.append(f"transcript: {exc}")
    return run


# -- entry points --------------------------------------------------------------

_RUNNERS = {"insurance": _insurance, "mechanic": _mechanic, "charging": _charging}


def simulate(config: ScenarioConfig, strict: bool = False) -> Run:
    """Run the configured scenario. With ``strict``, invariant breaches raise."""
    run = _RUNNERS[config.scenario](config)
    if strict and run.report.invariant_breaches:
        raise InvariantBreach(run.report.invariant_breaches)
    return run


# -- verification --------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    metric: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.metric}: {self.detail}"


class MalformedReport(ValueError):
    pass


def load_report(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedReport(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "scenario" not in data:
        raise MalformedReport(f"{path}: not a metrics report")
    return data


def verify(report: dict[str, Any], expectations: dict[str, Any] | list) -> list[Check]:
    """Check each expectation against ``report``.

    Expectations are a list (or ``{"expectations": [...]}``) of objects with a
    ``metric`` and one of ``equals``, ``approx`` (+ ``rel_tol``, default 0.05),
    ``min`` or ``max``.
    """
    if isinstance(expectations, dict):
        expectations = expectations.get("expectations", [])
    checks = []
    for exp in expectations:
        name = exp["metric"]
        if name not in report:
            checks.append(Check(name, False, "missing from report"))
            continue
        value = report[name]
        if "equals" in exp:
            ok, want = value == exp["equals"], f"== {exp['equals']}"
        elif "approx" in exp:
            target, tol = exp["approx"], exp.get("rel_tol", 0.05)
            ok, want = abs(value - target) <= tol * abs(target), f"{target} ± {tol:.0%}"
        elif "min" in exp or "max" in exp:
            lo, hi = exp.get("min"), exp.get("max")
            ok = (lo is None or value >= lo) and (hi is None or value <= hi)
            want = f"in [{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'}]"
        else:
            raise ValueError(f"expectation for {name} has no comparison")
        checks.append(Check(name, ok, f"got {value}, want {want}"))
    return checks


def builtin_expectations(scenario: str) -> dict[str, Any]:
    path = Path(__file__).with_name("expectations") / f"{scenario}.json"
    return json.loads(path.read_text())
