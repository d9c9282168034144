"""Worker side: turn a (re-)customization job into a tuned model.

Run as a TCP worker with::

    python3 -m disttune.worker --coordinator 127.0.0.1:7070 --worker-id w1 --data-dir data/
"""

from __future__ import annotations

import argparse
import base64
import logging
import os
import socket
import sys
import threading
import time
from dataclasses import dataclass

from .core import HyperParams, Thresholds
from .errors import DistTuneError, MalformedJob, ProtocolError
from .lstm import TrainConfig, evaluate, serialize
from .protocol import (
    JOB_KINDS,
    JobMessage,
    LineReader,
    decode,
    encode,
    finite_or_none,
    series_from_payload,
    series_payload,
)
from .tuner import customize, resolve_free

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 5.0
SEED_ENV = "DISTTUNE_SEED"


@dataclass(frozen=True)
class JobSpec:
    """A decoded (re-)customization request."""

    train: object
    test: object
    initial: HyperParams
    free: tuple
    thresholds: Thresholds
    budget: int
    cfg: TrainConfig
    validation_points: int = 0
    mode: str = ""


def build_job(kind: str, job_id: int, detector: str, train, test, *,
              initial: HyperParams, free=None, thresholds: Thresholds = Thresholds(),
              budget: int = 100, cfg: TrainConfig = TrainConfig(),
              validation_points: int = 0, mode: str = "",
              train_ref: dict | None = None, test_ref: dict | None = None) -> JobMessage:
    payload = {
        "train": train_ref or series_payload(train),
        "test": test_ref or series_payload(test),
        "initial": initial.as_list(),
        "free": list(resolve_free(free)),
        "thd_aare": thresholds.thd_aare,
        "thd_aard": thresholds.thd_aard,
        "budget": budget,
        "lookback": cfg.lookback,
        "seed": cfg.seed,
        "grad_clip_norm": cfg.grad_clip_norm,
        "reference_speed": cfg.reference_speed,
        "validation_points": validation_points,
        "mode": mode,
    }
    return JobMessage(kind, job_id, detector, payload)


def parse_job(msg: JobMessage, data_dir=None) -> JobSpec:
    if msg.kind not in JOB_KINDS:
        raise MalformedJob(f"{msg.kind!r} is not a job")
    if not msg.detector:
        raise MalformedJob("job has no detector id")
    p = msg.payload
    try:
        train = series_from_payload(p["train"], msg.detector, data_dir)
        test = series_from_payload(p["test"], msg.detector, data_dir)
        seed = int(p["seed"])
        if os.environ.get(SEED_ENV):
            seed = int(os.environ[SEED_ENV])
        cfg = TrainConfig(int(p["lookback"]), seed, float(p["grad_clip_norm"]),
                          float(p["reference_speed"]))
        spec = JobSpec(
            train, test,
            HyperParams.from_sequence(p["initial"]),
            resolve_free(p["free"]),
            Thresholds(float(p["thd_aare"]), float(p["thd_aard"])),
            int(p["budget"]),
            cfg,
            int(p.get("validation_points", 0)),
            str(p.get("mode", "")),
        )
    except (KeyError, TypeError, ValueError, OSError, ProtocolError) as exc:
        raise MalformedJob(f"{msg.detector}: bad payload ({type(exc).__name__}: {exc})") from None
    if len(spec.train) < cfg.lookback + 2 or len(spec.test) <= cfg.lookback:
        raise MalformedJob(f"{msg.detector}: series too short for lookback {cfg.lookback}")
    return spec


def execute_job(msg: JobMessage, data_dir=None, worker_id: str = "") -> JobMessage:
    """Run the tuner for one job and package the outcome.

    Raises :class:`MalformedJob` for payloads that cannot be run. Anything
    that goes wrong during tuning is reported inside the result instead.
    """
    spec = parse_job(msg, data_dir)
    t0 = time.perf_counter()
    try:
        out = customize(spec.train, spec.test, spec.initial, spec.thresholds, spec.budget,
                        spec.cfg, spec.free, spec.validation_points)
    except DistTuneError as exc:
        return failure_result(msg, f"{type(exc).__name__}: {exc}", worker_id,
                              time.perf_counter() - t0)
    payload = {
        "ok": True,
        "satisfied": bool(out.satisfied),
        "best_hyper": out.best_hyper.as_list(),
        "best_aare": finite_or_none(out.best_aare),
        "evaluations": out.evaluations,
        "stop_reason": out.stop_reason,
        "restarts": out.restarts,
        "trace": [[e.index, *e.hyper.as_list(), finite_or_none(e.aare), round(e.wall_time_ms, 3)]
                  for e in out.trace],
        "model": None,
        "report": None,
        "error": None,
        "worker_id": worker_id,
        "elapsed_s": round(time.perf_counter() - t0, 6),
        "mode": spec.mode,
    }
    if out.best_model is not None:
        payload["model"] = base64.b64encode(serialize(out.best_model)).decode("ascii")
        payload["report"] = evaluate(out.best_model, spec.test).to_dict()
    else:
        payload["error"] = "no trial produced a finite model"
    return JobMessage("result", msg.job_id, msg.detector, payload)


def failure_result(msg: JobMessage, error: str, worker_id: str = "", elapsed: float = 0.0) -> JobMessage:
    return JobMessage("result", msg.job_id, msg.detector, {
        "ok": False, "satisfied": False, "error": error, "worker_id": worker_id,
        "elapsed_s": round(elapsed, 6), "evaluations": 0, "trace": [], "model": None,
        "report": None, "best_hyper": None, "best_aare": None, "stop_reason": "failed",
        "restarts": 0, "mode": msg.payload.get("mode", "") if isinstance(msg.payload, dict) else "",
    })


def respond(msg: JobMessage, data_dir=None, worker_id: str = "") -> JobMessage:
    """Like :func:`execute_job` but a malformed job becomes a rejection result."""
    try:
        return execute_job(msg, data_dir, worker_id)
    except MalformedJob as exc:
        return failure_result(msg, f"MalformedJob: {exc}", worker_id)


class WorkerRuntime:
    """One job thread plus a heartbeat thread, over any ``send`` callable."""

    def __init__(self, worker_id: str, send, data_dir=None,
                 heartbeat_interval: float = HEARTBEAT_INTERVAL):
        self.worker_id = worker_id
        self._send = send
        self._lock = threading.Lock()
        self.data_dir = data_dir
        self.heartbeat_interval = heartbeat_interval
        self.completed = 0
        self.busy_job: int | None = None
        self._stop = threading.Event()
        self._hb: threading.Thread | None = None

    def send(self, msg: JobMessage) -> None:
        with self._lock:
            self._send(msg)

    def start(self) -> None:
        self.send(JobMessage("hello", 0, "", {"worker_id": self.worker_id}))
        if self.heartbeat_interval > 0:
            self._hb = threading.Thread(target=self._beat, name=f"hb-{self.worker_id}", daemon=True)
            self._hb.start()

    def _beat(self) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            try:
                self.send(JobMessage("heartbeat", 0, "", {"worker_id": self.worker_id}))
            except (OSError, ProtocolError):
                return

    def stop(self) -> None:
        self._stop.set()

    def handle(self, msg: JobMessage) -> bool:
        """Process one incoming message; False means shut down."""
        if msg.kind == "shutdown":
            self.stop()
            return False
        if msg.is_job:
            self.busy_job = msg.job_id
            result = respond(msg, self.data_dir, self.worker_id)
            self.busy_job = None
            if self._stop.is_set():
                return False
            self.completed += 1
            self.send(result)
        return True


def run_tcp_worker(host: str, port: int, worker_id: str, data_dir=None,
                   heartbeat_interval: float = HEARTBEAT_INTERVAL) -> int:
    sock = socket.create_connection((host, port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    runtime = WorkerRuntime(worker_id, lambda m: sock.sendall(encode(m)), data_dir,
                            heartbeat_interval)
    runtime.start()
    reader = LineReader()
    try:
        while True:
            chunk = sock.recv(1 << 16)
            if not chunk:
                return 0
            for line in reader.feed(chunk):
                try:
                    msg = decode(line)
                except ProtocolError as exc:
                    log.warning("dropping bad message from coordinator: %s", exc)
                    continue
                if not runtime.handle(msg):
                    return 0
    finally:
        runtime.stop()
        sock.close()


def _endpoint(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m disttune.worker",
                                 description="Worker node executing customization jobs.")
    ap.add_argument("--coordinator", type=_endpoint, required=True, help="host:port")
    ap.add_argument("--worker-id", required=True)
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--heartbeat", type=float, default=HEARTBEAT_INTERVAL)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    host, port = args.coordinator
    try:
        return run_tcp_worker(host, port, args.worker_id, args.data_dir, args.heartbeat)
    except OSError as exc:
        print(f"worker {args.worker_id}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
