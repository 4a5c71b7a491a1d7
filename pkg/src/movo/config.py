"""Scenario configuration: every tunable constant, loadable from one JSON file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCENARIOS = ("insurance", "mechanic", "charging")
BATCHING = ("auto", "per_slot", "per_record")


@dataclass
class CameraConfig:
    rate_hz: int = 10
    frame_bytes: int = 100_000


@dataclass
class VehicleConfig:
    rate_hz: int = 90
    # JSON size of one point; its encrypted packet in the store is 60 bytes larger
    point_bytes: int = 220


@dataclass
class PipelineConfig:
    interval_ms: int = 20_000
    slot_ms: int = 1_000
    # "per_slot": one packet per source per slot; "per_record": one packet per
    # record; "auto": per slot for the camera, per record for vehicle points
    batching: str = "auto"
    max_pending: int = 4096
    retry_backoff_ms: int = 1_000


@dataclass
class StoreConfig:
    base_latency_ms: int = 50
    bandwidth_bytes_per_s: int = 50_000_000
    concurrency_limit: int = 128
    capacity_bytes: int | None = None


@dataclass
class LedgerConfig:
    chunk_capacity: int = 512
    confirmation_latency_ms: int = 20_000
    confirmation_jitter_ms: int = 0


@dataclass
class ChargingConfig:
    deposit: int = 100
    price_per_unit: int = 5
    units: int = 8
    pause_after: int | None = 4
    pause_ms: int = 3_600_000
    transport_latency_ms: int = 5
    client_closes: bool = False
    rsu_location: tuple[float, float] = (44.4949, 11.3426)


@dataclass
class ScenarioConfig:
    scenario: str = "insurance"
    duration_s: int = 60
    seed: int = 1
    output: str | None = None
    daily_minutes: int = 70
    initial_tokens: int = 1_000
    checkin_fee: int = 10
    camera: CameraConfig = field(default_factory=CameraConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    charging: ChargingConfig = field(default_factory=ChargingConfig)

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.duration_s < 0:
            raise ValueError("duration_s must be non-negative")
        if self.pipeline.batching not in BATCHING:
            raise ValueError(f"unknown batching {self.pipeline.batching!r}; expected one of {BATCHING}")

    @property
    def records_per_packet(self) -> int | None:
        mode = self.pipeline.batching
        if mode == "auto":
            mode = "per_record" if self.scenario == "mechanic" else "per_slot"
        return 1 if mode == "per_record" else None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path: str | Path, **overrides: Any) -> "ScenarioConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__} expects an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if default is not None and dataclasses.is_dataclass(default):
            value = _build(default, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)
