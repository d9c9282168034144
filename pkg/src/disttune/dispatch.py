"""Job scheduling between the coordinator and its workers.

A :class:`Dispatcher` keeps a FIFO job queue and hands the head job to the
first idle worker in worker-id order. Workers reach it either through
in-process channels (:class:`InProcessWorker`) or over TCP
(:class:`TcpServer`). Both paths carry encoded protocol bytes, so the wire
format is exercised either way.

If a worker dies while running a job, the job is re-queued once. A second
loss fails it. Every job ends in exactly one terminal state.
"""

from __future__ import annotations

import logging
import queue
import socket
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import NoWorkerAvailable, ProtocolError
from .protocol import JobMessage, LineReader, decode, encode
from .worker import HEARTBEAT_INTERVAL, WorkerRuntime, failure_result, respond

log = logging.getLogger(__name__)

MISSED_HEARTBEATS = 3
MAX_ATTEMPTS = 2  # the first run plus one re-queue


@dataclass
class WorkerHandle:
    worker_id: str
    send: object
    alive: bool = True
    busy_job: int | None = None
    completed: int = 0
    last_seen: float = field(default_factory=time.monotonic)


@dataclass
class JobRecord:
    msg: JobMessage
    state: str = "queued"  # queued | running | done | failed
    attempts: int = 0
    worker: str | None = None
    result: JobMessage | None = None
    history: list = field(default_factory=list)


class Dispatcher:
    """Single-threaded event loop owning all scheduling state.

    Worker-side threads only ever put events on ``self.events``; every
    mutation happens inside :meth:`step`.
    """

    def __init__(self, heartbeat_interval: float = HEARTBEAT_INTERVAL,
                 missed_limit: int = MISSED_HEARTBEATS, max_attempts: int = MAX_ATTEMPTS):
        self.events: queue.Queue = queue.Queue()
        self.workers: dict = {}
        self.jobs: dict = {}
        self.pending: deque = deque()
        self.heartbeat_interval = heartbeat_interval
        self.missed_limit = missed_limit
        self.max_attempts = max_attempts
        self.max_in_flight = 0
        self.stale_results = 0
        self.protocol_errors = 0
        self._next_id = 1
        self._owned: list = []

    # -- submission ---------------------------------------------------

    def submit(self, msg: JobMessage) -> int:
        if not msg.is_job:
            raise ValueError(f"cannot dispatch a {msg.kind!r} message")
        job_id = self._next_id
        self._next_id += 1
        msg = JobMessage(msg.kind, job_id, msg.detector, msg.payload)
        self.jobs[job_id] = JobRecord(msg)
        self.pending.append(job_id)
        self._pump()
        return job_id

    def in_flight(self) -> int:
        return sum(1 for w in self.workers.values() if w.alive and w.busy_job is not None)

    def live_workers(self) -> list:
        return [w for _, w in sorted(self.workers.items()) if w.alive]

    def _pump(self) -> None:
        while self.pending:
            idle = [w for w in self.live_workers() if w.busy_job is None]
            if not idle:
                return
            worker = idle[0]
            job_id = self.pending.popleft()
            rec = self.jobs[job_id]
            rec.state, rec.worker = "running", worker.worker_id
            rec.attempts += 1
            rec.history.append(worker.worker_id)
            worker.busy_job = job_id
            try:
                worker.send(encode(rec.msg))
            except OSError:
                self._lose(worker.worker_id, "send failed")
                continue
            self.max_in_flight = max(self.max_in_flight, self.in_flight())

    # -- events -------------------------------------------------------

    def register(self, worker_id: str, send) -> None:
        self.events.put(("hello", worker_id, send))

    def _handle(self, event) -> None:
        kind, wid, data = event
        if kind == "hello":
            old = self.workers.get(wid)
            if old is not None and old.alive:
                self._lose(wid, "replaced by a new connection")
            self.workers[wid] = WorkerHandle(wid, data)
        elif kind == "disconnect":
            self._lose(wid, "disconnected")
        elif kind == "bytes":
            w = self.workers.get(wid)
            if w is None or not w.alive:
                return
            w.last_seen = time.monotonic()
            try:
                msg = decode(data)
            except ProtocolError as exc:
                self.protocol_errors += 1
                log.warning("bad message from %s: %s", wid, exc)
                return
            if msg.kind == "result":
                self._complete(w, msg)

    def _complete(self, worker: WorkerHandle, msg: JobMessage) -> None:
        rec = self.jobs.get(msg.job_id)
        if rec is None or rec.state != "running" or rec.worker != worker.worker_id:
            self.stale_results += 1
            return
        rec.state, rec.result = "done", msg
        worker.busy_job = None
        worker.completed += 1

    def _lose(self, wid: str, why: str) -> None:
        w = self.workers.get(wid)
        if w is None or not w.alive:
            return
        w.alive = False
        log.warning("worker %s lost: %s", wid, why)
        job_id, w.busy_job = w.busy_job, None
        if job_id is None:
            return
        rec = self.jobs[job_id]
        if rec.state != "running":
            return
        if rec.attempts < self.max_attempts:
            rec.state, rec.worker = "queued", None
            self.pending.appendleft(job_id)
        else:
            rec.state = "failed"
            rec.result = failure_result(rec.msg, f"worker lost {rec.attempts} times ({why})")

    def _check_heartbeats(self) -> None:
        if self.heartbeat_interval <= 0:
            return
        limit = self.heartbeat_interval * self.missed_limit
        now = time.monotonic()
        for w in self.live_workers():
            if now - w.last_seen > limit:
                self._lose(w.worker_id, f"missed {self.missed_limit} heartbeats")

    def step(self, timeout: float | None = 0.05) -> bool:
        """Handle at most one event; return whether one arrived."""
        try:
            event = self.events.get(timeout=timeout)
        except queue.Empty:
            event = None
        if event is not None:
            self._handle(event)
        self._check_heartbeats()
        self._pump()
        return event is not None

    def wait(self, job_ids=None, timeout: float | None = None, idle_grace: float = 1.0) -> dict:
        """Block until the given jobs (default: all) are terminal; return their results."""
        ids = list(self.jobs) if job_ids is None else list(job_ids)
        deadline = None if timeout is None else time.monotonic() + timeout
        no_worker_since = None
        while any(self.jobs[j].state in ("queued", "running") for j in ids):
            self.step(0.05)
            if not self.live_workers() and not self._expect_workers():
                no_worker_since = no_worker_since or time.monotonic()
                if time.monotonic() - no_worker_since > idle_grace:
                    raise NoWorkerAvailable(f"{len(self.pending)} job(s) queued with no live worker")
            else:
                no_worker_since = None
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError("jobs still outstanding")
        return {j: self.jobs[j].result for j in ids}

    def _expect_workers(self) -> bool:
        """Whether new workers may still connect (a TCP listener is up)."""
        return any(isinstance(o, TcpServer) and o.running for o in self._owned)

    def ledger(self) -> dict:
        return {j: r.state for j, r in self.jobs.items()}

    def wait_for_workers(self, n: int, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while len(self.live_workers()) < n:
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {len(self.live_workers())} of {n} workers connected")
            self.step(0.05)

    def close(self) -> None:
        for w in self.live_workers():
            try:
                w.send(encode(JobMessage("shutdown")))
            except OSError:
                pass
        for owned in self._owned:
            owned.close()
        self._owned.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SerialDispatcher:
    """Runs jobs one by one in the caller's thread, in submission order."""

    def __init__(self, data_dir=None, worker_id: str = "local"):
        self.data_dir = data_dir
        self.worker_id = worker_id
        self.jobs: dict = {}
        self.pending: deque = deque()
        self.max_in_flight = 0
        self._next_id = 1

    def submit(self, msg: JobMessage) -> int:
        if not msg.is_job:
            raise ValueError(f"cannot dispatch a {msg.kind!r} message")
        job_id = self._next_id
        self._next_id += 1
        self.jobs[job_id] = JobRecord(JobMessage(msg.kind, job_id, msg.detector, msg.payload))
        self.pending.append(job_id)
        return job_id

    def wait(self, job_ids=None, timeout=None) -> dict:
        ids = list(self.jobs) if job_ids is None else list(job_ids)
        while any(self.jobs[j].state == "queued" for j in ids):
            rec = self.jobs[self.pending.popleft()]
            rec.state, rec.worker, rec.attempts = "running", self.worker_id, rec.attempts + 1
            self.max_in_flight = 1
            # round-trip through the wire format like the threaded transports
            reply = decode(encode(respond(decode(encode(rec.msg)), self.data_dir, self.worker_id)))
            rec.state, rec.result = "done", reply
        return {j: self.jobs[j].result for j in ids}

    def ledger(self) -> dict:
        return {j: r.state for j, r in self.jobs.items()}

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessWorker:
    """A worker thread connected to a dispatcher through queues.

    ``fault(msg)`` returning True makes the worker die on receiving that job:
    ``"disconnect"`` reports the loss at once, ``"hang"`` just goes silent and
    leaves detection to the heartbeat timeout.
    """

    def __init__(self, dispatcher: Dispatcher, worker_id: str, data_dir=None,
                 heartbeat_interval: float | None = None, fault=None, fault_mode: str = "disconnect"):
        self.dispatcher = dispatcher
        self.worker_id = worker_id
        self.inbox: queue.Queue = queue.Queue()
        self.fault = fault
        self.fault_mode = fault_mode
        hb = dispatcher.heartbeat_interval if heartbeat_interval is None else heartbeat_interval
        self.runtime = WorkerRuntime(worker_id, self._to_dispatcher, data_dir, hb)
        self._dead = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"worker-{worker_id}", daemon=True)

    def _to_dispatcher(self, msg: JobMessage) -> None:
        if msg.kind == "hello":
            self.dispatcher.register(self.worker_id, self.inbox.put)
        else:
            self.dispatcher.events.put(("bytes", self.worker_id, encode(msg)))

    def start(self) -> "InProcessWorker":
        self.runtime.start()
        self._thread.start()
        return self

    def kill(self, mode: str = "disconnect") -> None:
        self.runtime.stop()
        self._dead.set()
        if mode == "disconnect":
            self.dispatcher.events.put(("disconnect", self.worker_id, None))

    def _run(self) -> None:
        while not self._dead.is_set():
            try:
                data = self.inbox.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                msg = decode(data)
            except ProtocolError as exc:
                log.warning("worker %s dropped bad message: %s", self.worker_id, exc)
                continue
            if msg.is_job and self.fault is not None and self.fault(msg):
                self.kill(self.fault_mode)
                return
            if not self.runtime.handle(msg):
                return

    def join(self, timeout=None) -> None:
        self._thread.join(timeout)

    def close(self) -> None:
        self.runtime.stop()
        self._dead.set()


class TcpServer:
    """Accepts worker connections and feeds their messages to a dispatcher."""

    def __init__(self, dispatcher: Dispatcher, host: str = "127.0.0.1", port: int = 0):
        self.dispatcher = dispatcher
        self.sock = socket.create_server((host, port))
        self.sock.settimeout(0.2)
        self.address = self.sock.getsockname()[:2]
        self.running = True
        self._threads: list = []
        self._conns: list = []
        self._accept = threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True)
        self._accept.start()
        dispatcher._owned.append(self)

    def _accept_loop(self) -> None:
        while self.running:
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        reader = LineReader()
        lock = threading.Lock()
        wid = None

        def send(data: bytes) -> None:
            with lock:
                conn.sendall(data)

        try:
            while True:
                chunk = conn.recv(1 << 16)
                if not chunk:
                    break
                for line in reader.feed(chunk):
                    if wid is None:
                        try:
                            msg = decode(line)
                        except ProtocolError:
                            self.dispatcher.protocol_errors += 1
                            continue
                        if msg.kind == "hello" and isinstance(msg.payload.get("worker_id"), str):
                            wid = msg.payload["worker_id"]
                            self.dispatcher.register(wid, send)
                        continue
                    self.dispatcher.events.put(("bytes", wid, line))
        except (OSError, ProtocolError) as exc:
            log.warning("connection from %s closed: %s", wid, exc)
        finally:
            if wid is not None:
                self.dispatcher.events.put(("disconnect", wid, None))
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        self.running = False
        try:
            self.sock.close()
        except OSError:
            pass


def spawn_tcp_workers(n: int, address, data_dir=None, prefix: str = "w",
                      heartbeat_interval: float = HEARTBEAT_INTERVAL) -> list:
    """Start ``n`` worker processes connecting back to ``address``."""
    host, port = address
    procs = []
    for i in range(n):
        cmd = [sys.executable, "-m", "disttune.worker", "--coordinator", f"{host}:{port}",
               "--worker-id", f"{prefix}{i:02d}", "--heartbeat", str(heartbeat_interval)]
        if data_dir is not None:
            cmd += ["--data-dir", str(data_dir)]
        procs.append(subprocess.Popen(cmd))
    return procs


def local_pool(workers: int = 1, data_dir=None, heartbeat_interval: float = HEARTBEAT_INTERVAL,
               **kwargs) -> Dispatcher:
    """A dispatcher with ``workers`` in-process workers, already connected."""
    if workers < 1:
        raise ValueError("need at least one worker")
    d = Dispatcher(heartbeat_interval=heartbeat_interval, **kwargs)
    for i in range(workers):
        w = InProcessWorker(d, f"w{i:02d}", data_dir).start()
        d._owned.append(w)
    d.wait_for_workers(workers)
    return d


def tcp_pool(workers: int = 1, data_dir=None, host: str = "127.0.0.1", port: int = 0,
             heartbeat_interval: float = HEARTBEAT_INTERVAL) -> Dispatcher:
    """A dispatcher serving TCP, with ``workers`` local worker processes attached."""
    d = Dispatcher(heartbeat_interval=heartbeat_interval)
    server = TcpServer(d, host, port)
    procs = spawn_tcp_workers(workers, server.address, data_dir,
                              heartbeat_interval=heartbeat_interval)
    d._owned.extend(_Proc(p) for p in procs)
    d.wait_for_workers(workers, timeout=120.0)
    return d


class _Proc:
    def __init__(self, proc):
        self.proc = proc

    def close(self):
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
