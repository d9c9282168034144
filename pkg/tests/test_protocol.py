import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disttune.core import DEFAULT_HYPERPARAMS, HyperParams, SpeedSeries
from disttune.errors import MalformedJob, ProtocolError
from disttune.protocol import (
    KINDS,
    MAX_MESSAGE_BYTES,
    JobMessage,
    LineReader,
    decode,
    encode,
    pack_array,
    series_from_payload,
    series_payload,
    unpack_array,
)
from disttune.worker import build_job, execute_job, parse_job, respond

json_leaf = st.one_of(st.none(), st.booleans(), st.integers(-2**53, 2**53),
                      st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=20))
json_value = st.recursive(json_leaf, lambda c: st.one_of(
    st.lists(c, max_size=4), st.dictionaries(st.text(max_size=8), c, max_size=4)), max_leaves=20)
messages = st.builds(JobMessage, st.sampled_from(KINDS), st.integers(0, 2**40),
                     st.text(max_size=12), st.dictionaries(st.text(max_size=8), json_value, max_size=5))


@given(messages)
def test_round_trip(msg):
    data = encode(msg)
    assert data.endswith(b"\n") and data.count(b"\n") == 1
    assert decode(data) == msg
    assert encode(decode(data)) == data


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_random_bytes_never_crash(data):
    try:
        msg = decode(data)
    except ProtocolError:
        return
    assert encode(msg) == data


@settings(max_examples=200)
@given(messages, st.data())
def test_mutated_messages_rejected_or_canonical(msg, data):
    raw = bytearray(encode(msg))
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] = data.draw(st.integers(0, 255))
    try:
        back = decode(bytes(raw))
    except ProtocolError:
        return
    assert encode(back) == bytes(raw)


def test_specific_rejections():
    good = encode(JobMessage("heartbeat", 0, "w1"))
    body = json.loads(good)
    for bad in (
        b'{"v":2' + good[5:],
        good.replace(b":", b": "),
        b"[1,2]\n",
        json.dumps({**body, "extra": 1}, sort_keys=True, separators=(",", ":")).encode() + b"\n",
        good.replace(b'"heartbeat"', b'"launch"'),
        good.replace(b'"job_id":0', b'"job_id":-1'),
        good.replace(b'"job_id":0', b'"job_id":NaN'),
    ):
        with pytest.raises(ProtocolError):
            decode(bad)
    with pytest.raises(ProtocolError):
        encode(JobMessage("result", 1, "d", {"x": float("nan")}))


def test_size_cap():
    with pytest.raises(ProtocolError):
        encode(JobMessage("result", 1, "d", {"x": "a" * MAX_MESSAGE_BYTES}))
    reader = LineReader()
    with pytest.raises(ProtocolError):
        reader.feed(b"a" * (MAX_MESSAGE_BYTES + 1))


def test_line_reader_reassembles():
    msgs = [encode(JobMessage("heartbeat", i, "w")) for i in range(3)]
    stream = b"".join(msgs)
    reader = LineReader()
    got = []
    for i in range(0, len(stream), 7):
        got += reader.feed(stream[i:i + 7])
    assert got == msgs


@given(st.lists(st.floats(allow_nan=False), max_size=30))
def test_array_packing(values):
    assert np.array_equal(unpack_array(pack_array(values)), np.array(values, dtype=float))


def test_series_by_reference(tmp_path):
    from disttune.data import write_csv

    s = SpeedSeries("D7", np.arange(1.0, 21.0))
    write_csv(s, tmp_path / "D7.csv")
    obj = series_payload(s, ref="D7.csv", begin=5, end=15)
    back = series_from_payload(json.loads(json.dumps(obj)), "D7", tmp_path)
    assert back.values.tolist() == list(range(6, 16))
    assert series_from_payload(series_payload(s), "D7") == s


def constant_job(kind="customize", initial=DEFAULT_HYPERPARAMS, n=300):
    s = SpeedSeries("C", np.full(n, 60.0))
    return build_job(kind, 1, "C", s.slice(0, n - 60), s.slice(n - 60), initial=initial)


def test_execute_constant_job():
    res = execute_job(decode(encode(constant_job())), worker_id="w0")
    p = res.payload
    assert res.kind == "result" and res.job_id == 1
    assert p["ok"] and p["satisfied"] and p["evaluations"] == 1
    assert p["model"] and p["report"]["aare"] <= 0.05
    assert decode(encode(res)) == res


def test_recustomize_trace_starts_at_seed():
    seed = HyperParams(0.05, 1, 10, 180)
    res = execute_job(constant_job("recustomize", seed))
    assert res.payload["trace"][0][1:5] == [0.05, 1, 10, 180]


def test_malformed_jobs_rejected():
    job = constant_job()
    empty = JobMessage("customize", 2, "C", {**job.payload, "train": {**job.payload["train"], "values": ""}})
    with pytest.raises(MalformedJob):
        parse_job(empty)
    res = respond(empty, worker_id="w0")
    assert res.kind == "result" and not res.payload["ok"]
    assert "MalformedJob" in res.payload["error"]
    with pytest.raises(MalformedJob):
        parse_job(JobMessage("customize", 3, "C", {"train": 1}))
    with pytest.raises(MalformedJob):
        parse_job(JobMessage("heartbeat", 3, "C"))


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(sorted(constant_job().payload)), json_value, max_size=6))
def test_fuzzed_payloads_never_crash_worker(overrides):
    job = constant_job()
    msg = JobMessage("customize", 4, "C", {**job.payload, **overrides})
    try:
        spec = parse_job(msg)
    except MalformedJob:
        return
    assert len(spec.train) >= spec.cfg.lookback + 2 and spec.budget == int(spec.budget)
