"""Run logs and the three metrics of merit: throughput (mature executions
per online execution), slowdown against a matched baseline run, quality."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

RUNLOG_SCHEMA = "runlog-v1"
RUNLOG_HEADER = [
    "query_id", "priority", "sampled", "admitted", "arrival_ns",
    "online_latency_ns", "online_size", "timed_out_components",
    "mature_outcome", "mature_latency_ns", "quality_score",
]

MATURE_SUCCESS = "success"
MATURE_FAILED = "failed"
MATURE_NOT_SAMPLED = "not_sampled"


@dataclass
class QueryRecord:
    query_id: int
    priority: str
    sampled: bool
    admitted: bool = True
    arrival_ns: int = 0
    online_latency_ns: int = 0
    online_size: int = 0
    timed_out_components: tuple = ()
    mature_outcome: str = MATURE_NOT_SAMPLED
    mature_latency_ns: Optional[int] = None
    quality_score: Optional[float] = None


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def add(self, record: QueryRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)


def write_runlog(path, log: RunLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"#schema: {RUNLOG_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(RUNLOG_HEADER)
        for r in log.records:
            writer.writerow([
                r.query_id, r.priority, int(r.sampled), int(r.admitted), r.arrival_ns,
                r.online_latency_ns, r.online_size,
                ";".join(r.timed_out_components),
                r.mature_outcome,
                "" if r.mature_latency_ns is None else r.mature_latency_ns,
                "" if r.quality_score is None else repr(r.quality_score),
            ])


def read_runlog(path) -> RunLog:
    log = RunLog()
    with open(path, "r", newline="", encoding="utf-8") as fh:
        schema_line = fh.readline().strip()
        if schema_line != f"#schema: {RUNLOG_SCHEMA}":
            raise ValueError(f"unsupported run log schema: {schema_line!r}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RUNLOG_HEADER:
            raise ValueError(f"unexpected run log header: {header}")
        for row in reader:
            log.add(QueryRecord(
                query_id=int(row[0]),
                priority=row[1],
                sampled=bool(int(row[2])),
                admitted=bool(int(row[3])),
                arrival_ns=int(row[4]),
                online_latency_ns=int(row[5]),
                online_size=int(row[6]),
                timed_out_components=tuple(c for c in row[7].split(";") if c),
                mature_outcome=row[8],
                mature_latency_ns=int(row[9]) if row[9] else None,
                quality_score=float(row[10]) if row[10] else None,
            ))
    return log


def throughput(log: RunLog) -> float:
    """Successful mature executions per online execution."""
    if not log.records:
        raise ValueError("empty run log")
    online = len(log.records)
    mature = sum(1 for r in log.records if r.mature_outcome == MATURE_SUCCESS)
    return mature / online


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def percentile(values, q: float) -> float:
    """Nearest-rank percentile, deterministic for CSV round-trips."""
    values = sorted(values)
    if not values:
        return 0.0
    idx = min(len(values) - 1, max(0, round(q * (len(values) - 1))))
    return float(values[idx])


class SlowdownMismatch(ValueError):
    pass


def slowdown(log_with: RunLog, log_without: RunLog) -> tuple[float, float]:
    """Relative online-latency increase, (unsampled %, sampled %), matched
    per query id. The sampled set is taken from the instrumented run."""
    base = {r.query_id: r for r in log_without.records}
    ours = {r.query_id: r for r in log_with.records}
    if set(base) != set(ours):
        raise SlowdownMismatch("runs cover different query sets; same trace required")
    sampled_ratio = []
    unsampled_ratio = []
    for qid, r in ours.items():
        b = base[qid]
        if b.online_latency_ns <= 0:
            continue
        bucket = sampled_ratio if r.sampled else unsampled_ratio
        bucket.append(r.online_latency_ns / b.online_latency_ns)
    def pct(ratios):
        return (_mean(ratios) - 1.0) * 100.0 if ratios else 0.0
    return pct(unsampled_ratio), pct(sampled_ratio)


def summarize(log: RunLog) -> dict:
    latencies = [r.online_latency_ns for r in log.records]
    sampled = [r for r in log.records if r.sampled]
    scores = [r.quality_score for r in log.records if r.quality_score is not None]
    return {
        "queries": len(log.records),
        "sampled": len(sampled),
        "mature_success": sum(1 for r in log.records if r.mature_outcome == MATURE_SUCCESS),
        "mature_failed": sum(1 for r in log.records if r.mature_outcome == MATURE_FAILED),
        "throughput": throughput(log) if log.records else 0.0,
        "online_latency_mean_ns": _mean(latencies),
        "online_latency_p50_ns": percentile(latencies, 0.50),
        "online_latency_p75_ns": percentile(latencies, 0.75),
        "mean_quality": _mean(scores) if scores else None,
        "low_admitted": sum(1 for r in log.records if r.priority == "low"),
    }


# -- auxiliary CSV artifacts -------------------------------------------------

QUALITY_HEADER = ["completed_at_ns", "query_id", "score", "online_size",
                  "mature_size", "mature_failed"]


def write_quality_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(QUALITY_HEADER)
        for row in rows:
            completed_at, query_id, score, online_size, mature_size, failed = row
            writer.writerow([completed_at, query_id,
                             "" if score is None else repr(score),
                             online_size, mature_size, int(failed)])


CONTROLLER_HEADER = ["time_ns", "measured_signal", "shed_probability",
                     "low_admitted", "low_rejected", "high_admitted"]


def write_controller_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONTROLLER_HEADER)
        for row in rows:
            time_ns, signal, shed, low_admitted, low_rejected, high_admitted = row
            writer.writerow([time_ns,
                             "" if signal is None else repr(signal),
                             repr(shed), low_admitted, low_rejected, high_admitted])


WINDOWS_HEADER = ["window_end_ns", "measured_quality", "true_quality",
                  "admitted", "low_admitted"]


def write_windows_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(WINDOWS_HEADER)
        for row in rows:
            end_ns, measured, true_q, admitted, low_admitted = row
            writer.writerow([end_ns,
                             "" if measured is None else repr(measured),
                             "" if true_q is None else repr(true_q),
                             admitted, low_admitted])


def read_windows_csv(path) -> list:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != WINDOWS_HEADER:
            raise ValueError(f"unexpected windows header: {header}")
        for row in reader:
            rows.append((int(row[0]),
                         float(row[1]) if row[1] else None,
                         float(row[2]) if row[2] else None,
                         int(row[3]), int(row[4])))
    return rows


SAMPLES_HEADER = ["context_id", "query_id", "record_duration_ns", "replay_duration_ns",
                  "outcome", "controls_sent", "contacted_online", "replay_hits",
                  "shadow_calls"]


def write_samples_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLES_HEADER)
        for row in rows:
            writer.writerow(list(row))


def read_samples_csv(path) -> list:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SAMPLES_HEADER:
            raise ValueError(f"unexpected samples header: {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), int(row[2]) if row[2] else None,
                         int(row[3]) if row[3] else None, row[4], int(row[5]),
                         int(row[6]), int(row[7]), int(row[8])))
    return rows
