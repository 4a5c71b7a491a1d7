"""Length-prefixed canonical JSON frames: u32 big-endian length, then the body."""

from __future__ import annotations

import json
import struct
from typing import Iterable

from .encoding import canonical_json

MAX_FRAME = 16 * 1024 * 1024


class FrameError(ValueError):
    pass


class UnknownMessageType(FrameError):
    pass


def _check(msg: dict, allowed: Iterable[str] | None) -> dict:
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise FrameError("frame body must be an object with a string 'type'")
    if allowed is not None and msg["type"] not in allowed:
        raise UnknownMessageType(msg["type"])
    return msg


def encode_frame(msg: dict, allowed: Iterable[str] | None = None) -> bytes:
    body = canonical_json(_check(msg, allowed))
    return struct.pack(">I", len(body)) + body


def decode_frame(frame: bytes, allowed: Iterable[str] | None = None) -> dict:
    if len(frame) < 4:
        raise FrameError("short frame")
    (n,) = struct.unpack(">I", frame[:4])
    if n != len(frame) - 4:
        raise FrameError(f"length prefix {n} does not match body of {len(frame) - 4} bytes")
    return _parse(frame[4:], allowed)


def _parse(body: bytes, allowed: Iterable[str] | None) -> dict:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"invalid frame body: {exc}") from exc
    return _check(msg, allowed)


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self, allowed: Iterable[str] | None = None) -> None:
        self.allowed = frozenset(allowed) if allowed is not None else None
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def next(self) -> dict | None:
        """The next complete message, or None if more bytes are needed.

        A malformed frame raises; it is consumed first so the stream can
        continue past it.
        """
        if len(self._buf) < 4:
            return None
        (n,) = struct.unpack(">I", self._buf[:4])
        if n > MAX_FRAME:
            self._buf.clear()
            raise FrameError(f"frame of {n} bytes exceeds limit")
        if len(self._buf) < 4 + n:
            return None
        body = bytes(self._buf[4 : 4 + n])
        del self._buf[: 4 + n]
        return _parse(body, self.allowed)

    def drain(self) -> list[dict]:
        """Every complete message currently buffered; raises on the first bad one."""
        out = []
        while (msg := self.next()) is not None:
            out.append(msg)
        return out
