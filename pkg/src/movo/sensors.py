"""Synthetic sensor sources standing in for the camera/affect and vehicle APIs."""

from __future__ import annotations

import random
import string
from dataclasses import dataclass
from typing import Iterator

from .encoding import canonical_json

CAMERA_FRAME = "camera_frame"
AFFECT_MEASUREMENT = "affect_measurement"
VEHICLE_POINT = "vehicle_point"
LOCATION = "location"

SENSOR_CODES = {CAMERA_FRAME: 1, AFFECT_MEASUREMENT: 2, VEHICLE_POINT: 3, LOCATION: 4}
SENSOR_NAMES = {v: k for k, v in SENSOR_CODES.items()}

AFFECT_INDICES = ("anger", "attention", "eyes_closure", "surprise")
VEHICLE_SIGNALS = (
    "engine_rpm",
    "vehicle_speed",
    "battery_level",
    "fuel_level",
    "odometer",
    "coolant_temperature",
    "tire_pressure_front_left",
    "tire_pressure_front_right",
    "tire_pressure_rear_left",
    "tire_pressure_rear_right",
)
MAX_VALUE_CHARS = 256
_ALPHABET = string.ascii_letters + string.digits


@dataclass(frozen=True)
class SensorSample:
    sensor_type: str
    produced_at: int
    payload: bytes


# A record is the unit a source emits: a frame travels with its measurement.
Record = tuple[SensorSample, ...]


def sample_times(rate_hz: int, duration_ms: int, start_ms: int = 0) -> Iterator[int]:
    """Exactly ``rate_hz`` evenly spread instants per second, no drift."""
    if rate_hz <= 0 or duration_ms <= 0:
        return
    for i in range(duration_ms * rate_hz // 1000):
        yield start_ms + i * 1000 // rate_hz


class AffectModel:
    """Smooth random walk per index, clamped to [0, 1]."""

    def __init__(self, rng: random.Random, step: float = 0.05) -> None:
        self.rng = rng
        self.step = step
        self.values = {name: rng.random() for name in AFFECT_INDICES}

    def next(self) -> dict[str, float]:
        for name, v in self.values.items():
            self.values[name] = min(1.0, max(0.0, v + self.rng.gauss(0.0, self.step)))
        return {name: round(v, 4) for name, v in self.values.items()}


def camera_source(
    rng: random.Random,
    duration_ms: int,
    rate_hz: int = 10,
    frame_bytes: int = 100_000,
    start_ms: int = 0,
) -> Iterator[Record]:
    affect = AffectModel(rng)
    for frame_index, t in enumerate(sample_times(rate_hz, duration_ms, start_ms)):
        frame = SensorSample(CAMERA_FRAME, t, rng.randbytes(frame_bytes))
        measurement = {"frame_index": frame_index, **affect.next()}
        yield frame, SensorSample(AFFECT_MEASUREMENT, t, canonical_json(measurement))


def vehicle_point(rng: random.Random, name: str, timestamp: int, point_bytes: int) -> bytes:
    """JSON ``{name, timestamp, value}`` padded through ``value`` towards ``point_bytes``."""
    base = len(canonical_json({"name": name, "timestamp": timestamp, "value": ""}))
    n = max(0, min(MAX_VALUE_CHARS, point_bytes - base))
    value = "".join(rng.choices(_ALPHABET, k=n))
    return canonical_json({"name": name, "timestamp": timestamp, "value": value})


def vehicle_source(
    rng: random.Random,
    duration_ms: int,
    rate_hz: int = 90,
    point_bytes: int = 220,
    start_ms: int = 0,
) -> Iterator[Record]:
    for i, t in enumerate(sample_times(rate_hz, duration_ms, start_ms)):
        name = VEHICLE_SIGNALS[i % len(VEHICLE_SIGNALS)]
        yield (SensorSample(VEHICLE_POINT, t, vehicle_point(rng, name, t, point_bytes)),)


def location_source(
    rng: random.Random,
    duration_ms: int,
    rate_hz: int = 1,
    origin: tuple[float, float] = (44.4949, 11.3426),
    start_ms: int = 0,
) -> Iterator[Record]:
    lat, lon = origin
    for t in sample_times(rate_hz, duration_ms, start_ms):
        lat += rng.uniform(-1e-4, 1e-4)
        lon += rng.uniform(-1e-4, 1e-4)
        yield (SensorSample(LOCATION, t, canonical_json({"lat": round(lat, 6), "lon": round(lon, 6), "timestamp": t})),)
