"""Coordinator/worker messages and their newline-delimited JSON wire form.

Every message is one JSON object on one line::

    {"detector":"D003","job_id":7,"kind":"customize","payload":{...},"v":1}

Keys are sorted and separators compact, so each message has exactly one
valid byte form. :func:`decode` rejects anything else, which makes
``encode(decode(b)) == b`` hold for every accepted ``b``.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError

VERSION = 1
MAX_MESSAGE_BYTES = 16 * 1024 * 1024
KINDS = ("hello", "customize", "recustomize", "result", "heartbeat", "shutdown")
JOB_KINDS = ("customize", "recustomize")


@dataclass(frozen=True)
class JobMessage:
    kind: str
    job_id: int = 0
    detector: str = ""
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if not isinstance(self.job_id, int) or isinstance(self.job_id, bool) or self.job_id < 0:
            raise ProtocolError(f"job_id must be a non-negative integer, got {self.job_id!r}")
        if not isinstance(self.detector, str):
            raise ProtocolError("detector must be a string")
        if not isinstance(self.payload, dict):
            raise ProtocolError("payload must be an object")

    @property
    def is_job(self) -> bool:
        return self.kind in JOB_KINDS


def _reject_constant(name):
    raise ProtocolError(f"non-finite number {name} on the wire")


def encode(msg: JobMessage) -> bytes:
    body = {"v": VERSION, "kind": msg.kind, "job_id": msg.job_id,
            "detector": msg.detector, "payload": msg.payload}
    try:
        text = json.dumps(body, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"payload is not JSON-serializable: {exc}") from None
    data = text.encode("ascii") + b"\n"
    if len(data) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message of {len(data)} bytes exceeds {MAX_MESSAGE_BYTES}")
    return data


def decode(data: bytes) -> JobMessage:
    if not isinstance(data, (bytes, bytearray)):
        raise ProtocolError("expected bytes")
    if len(data) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message of {len(data)} bytes exceeds {MAX_MESSAGE_BYTES}")
    data = bytes(data)
    try:
        body = json.loads(data.decode("ascii"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(f"not a JSON message: {exc}") from None
    if not isinstance(body, dict):
        raise ProtocolError("message must be a JSON object")
    if set(body) != {"v", "kind", "job_id", "detector", "payload"}:
        raise ProtocolError(f"unexpected fields {sorted(body)}")
    if body["v"] != VERSION or isinstance(body["v"], bool):
        raise ProtocolError(f"unsupported protocol version {body['v']!r}")
    msg = JobMessage(body["kind"], body["job_id"], body["detector"], body["payload"])
    if encode(msg) != data:
        raise ProtocolError("message is not in canonical form")
    return msg


class LineReader:
    """Split a byte stream into messages, enforcing the size cap per line."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list:
        self._buf.extend(chunk)
        lines = []
        while True:
            i = self._buf.find(b"\n")
            if i < 0:
                if len(self._buf) > MAX_MESSAGE_BYTES:
                    self._buf.clear()
                    raise ProtocolError("unterminated message exceeds size cap")
                return lines
            lines.append(bytes(self._buf[:i + 1]))
            del self._buf[:i + 1]


# ---------------------------------------------------------------- payload helpers


def pack_array(values) -> str:
    return base64.b64encode(np.ascontiguousarray(values, dtype="<f8").tobytes()).decode("ascii")


def unpack_array(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError, AttributeError):
        raise ProtocolError("series is not valid base64") from None
    if len(raw) % 8:
        raise ProtocolError("series byte length is not a multiple of 8")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def series_payload(series, ref: str | None = None, begin: int = 0, end: int | None = None) -> dict:
    """Inline a SpeedSeries, or point to rows ``begin:end`` of a CSV under the shared data dir."""
    out = {"interval_minutes": series.interval_minutes, "start": series.start.isoformat()}
    if ref is not None:
        out.update(ref=ref, begin=begin, end=end)
    else:
        out["values"] = pack_array(series.values)
    return out


def series_from_payload(obj, detector: str, data_dir=None):
    from datetime import datetime

    from .core import SpeedSeries
    from .data import load_csv

    if not isinstance(obj, dict):
        raise ProtocolError("series entry must be an object")
    try:
        interval = int(obj["interval_minutes"])
        start = datetime.fromisoformat(obj["start"])
    except (KeyError, TypeError, ValueError):
        raise ProtocolError("series entry needs interval_minutes and start") from None
    if "values" in obj:
        return SpeedSeries(detector, unpack_array(obj["values"]), interval, start)
    if "ref" in obj:
        if data_dir is None:
            raise ProtocolError("file reference without a data dir")
        path = Path(data_dir) / str(obj["ref"])
        s = load_csv(path, detector, interval_minutes=interval)
        begin, end = obj.get("begin", 0), obj.get("end")
        return s.slice(int(begin), None if end is None else int(end))
    raise ProtocolError("series entry needs values or ref")


def finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def none_to_inf(x) -> float:
    return math.inf if x is None else float(x)
