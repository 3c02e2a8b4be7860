"""Domain types shared by every module: queries, answers, execution contexts."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class Priority(Enum):
    HIGH = "high"
    LOW = "low"


class Mode(Enum):
    NORMAL = 0
    RECORD = 1
    REPLAY = 2


class AnswerKind(Enum):
    ONLINE = "online"
    MATURE = "mature"


NORMAL_CONTEXT_ID = 0


@dataclass(frozen=True)
class Query:
    """One arriving request. `sampled` is fixed at admission and never changes."""

    query_id: int
    priority: Priority
    params: bytes
    arrival_time_ns: int
    sampled: bool = False

    def with_sampled(self, sampled: bool) -> "Query":
        return Query(self.query_id, self.priority, self.params, self.arrival_time_ns, sampled)


@dataclass(frozen=True)
class Answer:
    """A ranked result set. Mature answers never carry timed-out components."""

    items: tuple  # ((item_id, score), ...) ordered by (score desc, id asc)
    produced_at_ns: int
    kind: AnswerKind
    timed_out_components: tuple = ()

    def __post_init__(self):
        ids = [item_id for item_id, _ in self.items]
        if len(ids) != len(set(ids)):
            raise ValueError("answer items contain duplicate item ids")
        if self.kind is AnswerKind.MATURE and self.timed_out_components:
            raise ValueError("mature answers cannot have timed-out components")

    def item_ids(self) -> frozenset:
        return frozenset(item_id for item_id, _ in self.items)


@dataclass
class ExecutionContext:
    """Per-query mode plus context id; the unit propagated between components."""

    mode: Mode
    context_id: int
    record_deadline_ns: int
    created_at_ns: int

    def __post_init__(self):
        if (self.mode is Mode.NORMAL) != (self.context_id == NORMAL_CONTEXT_ID):
            raise ValueError("context id 0 is reserved for normal mode")
        if self.mode is not Mode.NORMAL and self.record_deadline_ns <= self.created_at_ns:
            raise ValueError("record deadline must be after creation")


NORMAL_CONTEXT = ExecutionContext(Mode.NORMAL, NORMAL_CONTEXT_ID, 0, 0)


def rank_items(scored: dict) -> tuple:
    """Order (id -> score) by score desc, then id asc; ties are deterministic."""
    return tuple(sorted(scored.items(), key=lambda kv: (-kv[1], kv[0])))


def top_k(scored: dict, k: int) -> tuple:
    return rank_items(scored)[:k]
