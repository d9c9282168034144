
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disttune.core import DEFAULT_HYPERPARAMS, SpeedSeries
from disttune.dispatch import Dispatcher, InProcessWorker, SerialDispatcher, local_pool, tcp_pool
from disttune.errors import NoWorkerAvailable
from disttune.protocol import JobMessage, decode, encode
from disttune.worker import build_job


def tiny_job(detector="C", speed=60.0):
    s = SpeedSeries(detector, np.full(40, speed))
    return build_job("customize", 0, detector, s.slice(0, 25), s.slice(25),
                     initial=DEFAULT_HYPERPARAMS)


class StubWorker:
    """Answers jobs only when told to, recording what it was sent."""

    def __init__(self, dispatcher, wid):
        self.d, self.wid, self.received = dispatcher, wid, []
        dispatcher.register(wid, self.receive)
        dispatcher.step(0)

    def receive(self, data):
        self.received.append(decode(data))

    def finish(self, job_id=None):
        msg = self.received[-1] if job_id is None else next(m for m in self.received if m.job_id == job_id)
        reply = JobMessage("result", msg.job_id, msg.detector, {"ok": True})
        self.d.events.put(("bytes", self.wid, encode(reply)))
        self.d.step(0)


def test_single_worker_runs_jobs_in_order():
    d = Dispatcher(heartbeat_interval=0)
    w = StubWorker(d, "w0")
    a, b = d.submit(tiny_job("A")), d.submit(tiny_job("B"))
    assert [m.job_id for m in w.received] == [a]
    w.finish()
    assert [m.job_id for m in w.received] == [a, b]
    w.finish()
    assert d.ledger() == {a: "done", b: "done"}


def test_first_idle_worker_in_id_order():
    d = Dispatcher(heartbeat_interval=0)
    workers = [StubWorker(d, wid) for wid in ("w2", "w0", "w1")]
    d.submit(tiny_job())
    assert [len(w.received) for w in workers] == [0, 1, 0]


def test_pool_bound_with_30_workers():
    d = Dispatcher(heartbeat_interval=0)
    workers = [StubWorker(d, f"w{i:02d}") for i in range(30)]
    ids = [d.submit(tiny_job(f"D{i:03d}")) for i in range(110)]
    assert d.in_flight() == 30
    rng = np.random.default_rng(0)
    while any(s != "done" for s in d.ledger().values()):
        busy = [w for w in workers if d.workers[w.wid].busy_job is not None]
        w = busy[int(rng.integers(len(busy)))]
        w.finish(d.workers[w.wid].busy_job)
        assert d.in_flight() <= 30
    assert d.max_in_flight == 30
    assert sorted(m.job_id for w in workers for m in w.received) == ids


def test_lost_job_requeued_once_then_failed():
    d = Dispatcher(heartbeat_interval=0)
    w0 = StubWorker(d, "w0")
    StubWorker(d, "w1")
    job = d.submit(tiny_job())
    assert d.jobs[job].worker == "w0"
    d.events.put(("disconnect", "w0", None))
    d.step(0)
    assert d.jobs[job].state == "running" and d.jobs[job].worker == "w1"
    # a late reply from the dead worker must not count
    w0.finish(job)
    assert d.jobs[job].state == "running"
    d.events.put(("disconnect", "w1", None))
    d.step(0)
    assert d.jobs[job].state == "failed"
    assert d.jobs[job].history == ["w0", "w1"]
    assert not d.jobs[job].result.payload["ok"]


def test_duplicate_result_counted_once():
    d = Dispatcher(heartbeat_interval=0)
    w = StubWorker(d, "w0")
    job = d.submit(tiny_job())
    w.finish(job)
    w.finish(job)
    assert d.ledger() == {job: "done"} and d.stale_results == 1


def test_no_workers_raises():
    d = Dispatcher(heartbeat_interval=0)
    d.submit(tiny_job())
    with pytest.raises(NoWorkerAvailable):
        d.wait(idle_grace=0.1)


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=300))
def test_garbage_from_worker_is_ignored(data):
    d = Dispatcher(heartbeat_interval=0)
    w = StubWorker(d, "w0")
    job = d.submit(tiny_job())
    d.events.put(("bytes", "w0", data))
    d.step(0)
    assert d.jobs[job].state in ("running", "done")
    if d.jobs[job].state == "running":
        w.finish(job)
    assert d.ledger() == {job: "done"}


def test_in_process_pool_matches_serial():
    jobs = [tiny_job(f"D{i}", 50.0 + i) for i in range(5)]
    serial = SerialDispatcher()
    ids = [serial.submit(j) for j in jobs]
    want = serial.wait(ids)
    with local_pool(3) as d:
        ids = [d.submit(j) for j in jobs]
        got = d.wait(ids, timeout=120)
        assert d.ledger() == {i: "done" for i in ids}
    for a, b in zip(want.values(), got.values()):
        assert a.payload["best_hyper"] == b.payload["best_hyper"]
        assert a.payload["model"] == b.payload["model"]


@pytest.mark.parametrize("mode", ["disconnect", "hang"])
def test_kill_worker_mid_job(mode):
    d = Dispatcher(heartbeat_interval=0.1)
    dead = InProcessWorker(d, "w0", fault=lambda m: m.job_id == 1, fault_mode=mode).start()
    d.wait_for_workers(1)
    live = InProcessWorker(d, "w1").start()
    d.wait_for_workers(2)
    ids = [d.submit(tiny_job(f"D{i}")) for i in range(4)]
    results = d.wait(ids, timeout=60)
    assert d.ledger() == {i: "done" for i in ids}
    assert d.jobs[1].history[0] == "w0" and d.jobs[1].attempts == 2
    assert all(r.payload["ok"] for r in results.values())
    d.close()
    live.close()
    dead.close()


def test_job_fails_after_two_losses():
    d = Dispatcher(heartbeat_interval=0.1)
    for wid in ("w0", "w1"):
        InProcessWorker(d, wid, fault=lambda m: True).start()
    d.wait_for_workers(2)
    first = d.submit(tiny_job("X"))
    d.wait([first], timeout=60)
    assert d.jobs[first].history == ["w0", "w1"]
    InProcessWorker(d, "w2").start()
    d.wait_for_workers(1)
    second = d.submit(tiny_job("Y"))
    d.wait([second], timeout=60)
    assert d.ledger() == {first: "failed", second: "done"}
    d.close()


def test_tcp_workers():
    jobs = [tiny_job(f"D{i}", 50.0 + i) for i in range(3)]
    with tcp_pool(2) as d:
        ids = [d.submit(j) for j in jobs]
        res = d.wait(ids, timeout=300)
        assert {r.payload["worker_id"] for r in res.values()} <= {"w00", "w01"}
        assert all(r.payload["ok"] for r in res.values())
