"""Adaptive admission control: a PID on measured answer quality sheds
low-priority queries; the timeout-frequency proxy feeds the same form."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from .config import ControllerConfig
from .model import Priority, Query


@dataclass
class ControllerState:
    target_quality: float = 0.9
    kp: float = 0.8
    ki: float = 0.2
    kd: float = 0.1
    integral_limit: float = 2.0
    evaluation_interval: int = 100
    integral: float = 0.0
    last_error: float = 0.0
    shed_probability: float = 0.0

    @classmethod
    def from_config(cls, cfg: ControllerConfig, target: float = None) -> "ControllerState":
        return cls(target_quality=cfg.target_quality if target is None else target,
                   kp=cfg.kp, ki=cfg.ki, kd=cfg.kd,
                   integral_limit=cfg.integral_limit,
                   evaluation_interval=cfg.evaluation_interval)


def controller_update(state: ControllerState, measured_quality: float) -> float:
    """One PID step. Raises the shed probability when quality dips below
    target; anti-windup clamps the integral, the output clamps to [0, 1]."""
    error = state.target_quality - measured_quality
    state.integral = max(-state.integral_limit,
                         min(state.integral_limit, state.integral + error))
    delta = state.kp * error + state.ki * state.integral + state.kd * (error - state.last_error)
    state.last_error = error
    state.shed_probability = max(0.0, min(1.0, state.shed_probability + delta))
    return state.shed_probability


def admit(query: Query, state: ControllerState, rng: random.Random) -> bool:
    """High priority always passes; low priority is shed probabilistically."""
    if query.priority is Priority.HIGH:
        return True
    if state.shed_probability <= 0.0:
        return True
    if state.shed_probability >= 1.0:
        return False
    return rng.random() >= state.shed_probability


@dataclass
class TimeoutFrequencyWindow:
    """Online executions observed since the proxy was last read."""

    capacity: int
    outcomes: deque = field(default_factory=deque)

    def __post_init__(self):
        self.outcomes = deque(maxlen=self.capacity)

    def add(self, had_timeout: bool) -> None:
        self.outcomes.append(bool(had_timeout))

    def __len__(self) -> int:
        return len(self.outcomes)


def timeout_frequency_signal(window: TimeoutFrequencyWindow):
    """Proxy quality: 1 - fraction of queries with at least one timed-out
    component. None when the window is empty (hold last action)."""
    if not window.outcomes:
        return None
    timed_out = sum(1 for t in window.outcomes if t)
    return 1.0 - timed_out / len(window.outcomes)
