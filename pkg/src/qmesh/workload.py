"""Trace generation: Poisson arrivals shaped by a diurnal profile, priority
split, and query-mix shift events, plus CSV load/save of generated traces."""

from __future__ import annotations

import csv
import hashlib
import random

from .config import TraceConfig
from .model import Priority, Query
from .services import make_params
from .timebase import NS_PER_SEC


def profile_value(profile: tuple, fraction: float, default: float = 1.0) -> float:
    """Step interpolation over (fraction, value) knots sorted ascending."""
    value = default
    for knot, v in profile:
        if fraction >= knot:
            value = v
        else:
            break
    return value


def generate_trace(spec: TraceConfig, rng: random.Random) -> list[Query]:
    """Inhomogeneous Poisson arrivals via thinning against the peak rate."""
    peak_mult = max((v for _, v in spec.diurnal_profile), default=1.0)
    peak_rate = spec.arrival_rate * max(peak_mult, 1e-12)
    queries: list[Query] = []
    if spec.arrival_rate <= 0 or peak_rate <= 0:
        return queries
    t_ns = 0.0
    query_id = 0
    duration = spec.duration_ns
    while True:
        t_ns += rng.expovariate(peak_rate) * NS_PER_SEC
        if t_ns >= duration:
            break
        fraction = t_ns / duration
        mult = profile_value(spec.diurnal_profile, fraction)
        if mult < peak_mult and rng.random() >= mult / peak_mult:
            continue
        heavy_fraction = profile_value(spec.mix_shifts, fraction, spec.heavy_fraction)
        heavy = rng.random() < heavy_fraction
        priority = Priority.HIGH if rng.random() < spec.high_priority_fraction else Priority.LOW
        term = rng.randrange(1 << 31)
        arrival = int(t_ns)
        if queries and arrival <= queries[-1].arrival_time_ns:
            arrival = queries[-1].arrival_time_ns + 1
        queries.append(Query(query_id, priority, make_params(term, heavy), arrival))
        query_id += 1
    return queries


def save_trace_csv(path, queries: list[Query]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arrival_time_ns", "priority", "params"])
        for q in queries:
            writer.writerow([q.arrival_time_ns, q.priority.value, q.params.decode()])


def load_trace_csv(path) -> list[Query]:
    queries: list[Query] = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["arrival_time_ns", "priority", "params"]:
            raise ValueError(f"unexpected trace header: {header}")
        last = -1
        for i, row in enumerate(reader):
            arrival = int(row[0])
            if arrival <= last:
                raise ValueError(f"trace row {i}: arrival times must be strictly increasing")
            last = arrival
            queries.append(Query(i, Priority(row[1]), row[2].encode(), arrival))
    return queries


def trace_hash(queries: list[Query]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for q in queries:
        h.update(f"{q.arrival_time_ns},{q.priority.value},".encode())
        h.update(q.params)
        h.update(b"\n")
    return h.hexdigest()
