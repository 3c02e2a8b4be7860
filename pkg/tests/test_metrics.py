"""Run-log metrics and CSV round-trip integrity."""

import pytest

from qmesh.metrics import (MATURE_FAILED, MATURE_NOT_SAMPLED, MATURE_SUCCESS,
                           QueryRecord, RunLog, SlowdownMismatch, percentile,
                           read_runlog, slowdown, summarize, throughput,
                           write_runlog)


def record(qid, sampled=False, outcome=MATURE_NOT_SAMPLED, online_ns=100,
           priority="high", quality=None):
    return QueryRecord(query_id=qid, priority=priority, sampled=sampled,
                       online_latency_ns=online_ns, mature_outcome=outcome,
                       mature_latency_ns=500 if outcome == MATURE_SUCCESS else None,
                       quality_score=quality)


def test_throughput_arithmetic():
    log = RunLog()
    for i in range(100):
        if i < 18:
            log.add(record(i, sampled=True, outcome=MATURE_SUCCESS, quality=1.0))
        elif i < 20:
            log.add(record(i, sampled=True, outcome=MATURE_FAILED))
        else:
            log.add(record(i))
    assert throughput(log) == 0.18


def test_throughput_zero_when_sampling_disabled():
    log = RunLog()
    for i in range(50):
        log.add(record(i))
    assert throughput(log) == 0.0


def test_throughput_equals_sampling_rate_when_all_sampled_succeed():
    # Composition oracle: all sampled and none fail -> ratio is the rate.
    log = RunLog()
    for i in range(200):
        sampled = i % 5 == 0  # 20% sampled
        log.add(record(i, sampled=sampled,
                       outcome=MATURE_SUCCESS if sampled else MATURE_NOT_SAMPLED,
                       quality=1.0 if sampled else None))
    assert throughput(log) == pytest.approx(0.2)


def test_throughput_never_exceeds_sampled_fraction():
    log = RunLog()
    for i in range(100):
        sampled = i % 4 == 0
        log.add(record(i, sampled=sampled,
                       outcome=MATURE_SUCCESS if sampled and i % 8 == 0 else
                       (MATURE_FAILED if sampled else MATURE_NOT_SAMPLED)))
    sampled_fraction = sum(1 for r in log.records if r.sampled) / len(log.records)
    assert throughput(log) <= sampled_fraction


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        throughput(RunLog())


def make_pair(with_ns, without_ns, sampled_ids=()):
    log_with, log_without = RunLog(), RunLog()
    for i, (w, wo) in enumerate(zip(with_ns, without_ns)):
        log_with.add(record(i, sampled=i in sampled_ids, online_ns=w))
        log_without.add(record(i, online_ns=wo))
    return log_with, log_without


def test_slowdown_identical_logs_is_zero():
    a, b = make_pair([100, 200, 300], [100, 200, 300])
    assert slowdown(a, b) == (0.0, 0.0)


def test_slowdown_reference_magnitudes():
    # 107 ms vs 100 ms unsampled -> 7%; 110 vs 100 sampled -> 10%.
    a, b = make_pair([107, 110], [100, 100], sampled_ids={1})
    unsampled, sampled = slowdown(a, b)
    assert unsampled == pytest.approx(7.0)
    assert sampled == pytest.approx(10.0)


def test_slowdown_rejects_mismatched_traces():
    a, _ = make_pair([100], [100])
    _, b = make_pair([100, 200], [100, 200])
    with pytest.raises(SlowdownMismatch):
        slowdown(a, b)


def test_runlog_csv_roundtrip_preserves_metrics(tmp_path):
    log = RunLog()
    for i in range(40):
        sampled = i % 3 == 0
        log.add(QueryRecord(
            query_id=i, priority="low" if i % 2 else "high", sampled=sampled,
            arrival_ns=i * 1000, online_latency_ns=100 + i,
            online_size=10, timed_out_components=("shard1", "shard2") if i % 7 == 0 else (),
            mature_outcome=MATURE_SUCCESS if sampled else MATURE_NOT_SAMPLED,
            mature_latency_ns=12345 if sampled else None,
            quality_score=0.25 + i / 100 if sampled else None))
    path = tmp_path / "runlog.csv"
    write_runlog(path, log)
    loaded = read_runlog(path)
    assert summarize(loaded) == summarize(log)
    assert [r.__dict__ for r in loaded.records] == [r.__dict__ for r in log.records]


def test_runlog_schema_version_enforced(tmp_path):
    path = tmp_path / "runlog.csv"
    path.write_text("#schema: runlog-v0\nquery_id\n1\n")
    with pytest.raises(ValueError, match="schema"):
        read_runlog(path)


def test_percentile_nearest_rank():
    values = [10, 20, 30, 40]
    assert percentile(values, 0.5) == 30  # deterministic midpoint choice
    assert percentile(values, 0.0) == 10
    assert percentile(values, 1.0) == 40
    assert percentile([], 0.5) == 0.0
