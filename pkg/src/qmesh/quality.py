"""Answer-quality scoring: pairing online and mature answers, pluggable
similarity functions, and the rolling window the controllers consume."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .model import Answer


class UnknownSimilarityError(KeyError):
    pass


def true_positive_rate(online, mature) -> float:
    """Fraction of mature result ids present in the online results.

    Accepts Answers or id collections. An empty mature answer scores 1.0:
    nothing was there to miss.
    """
    online_ids = online.item_ids() if isinstance(online, Answer) else frozenset(online)
    mature_ids = mature.item_ids() if isinstance(mature, Answer) else frozenset(mature)
    if not mature_ids:
        return 1.0
    return len(online_ids & mature_ids) / len(mature_ids)


_REGISTRY: dict[str, Callable] = {}


def register_similarity(name: str, fn: Callable) -> None:
    if name in _REGISTRY:
        raise ValueError(f"similarity function {name!r} already registered")
    _REGISTRY[name] = fn


def resolve_similarity(name: str) -> Callable:
    if name in ("default", "tpr"):
        return true_positive_rate
    fn = _REGISTRY.get(name)
    if fn is None:
        raise UnknownSimilarityError(f"unknown answer quality function {name!r}")
    return fn


@dataclass
class QualitySample:
    query_id: int
    online: Optional[Answer]
    mature: Optional[Answer]
    score: float
    completed_at_ns: int


class QualityWindow:
    """Ring of the most recent completed samples; mean recomputed exactly."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.samples: deque[QualitySample] = deque(maxlen=capacity)

    def add(self, sample: QualitySample) -> None:
        self.samples.append(sample)

    def __len__(self) -> int:
        return len(self.samples)

    def mean(self) -> Optional[float]:
        """None signals "no estimate": the controller holds its last action."""
        if not self.samples:
            return None
        return sum(s.score for s in self.samples) / len(self.samples)


def window_quality(window: QualityWindow) -> Optional[float]:
    return window.mean()
