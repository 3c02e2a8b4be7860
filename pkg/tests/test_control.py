"""PID admission control and the timeout-frequency proxy."""

import random

from qmesh.control import (ControllerState, TimeoutFrequencyWindow, admit,
                           controller_update, timeout_frequency_signal)
from qmesh.model import Priority, Query


def query(priority):
    return Query(1, priority, b"t=1 h=0", 0)


def test_zero_error_leaves_shed_probability():
    state = ControllerState(shed_probability=0.4)
    controller_update(state, 0.9)
    assert state.shed_probability == 0.4


def test_below_target_raises_shed_probability():
    state = ControllerState(shed_probability=0.2)
    before = state.shed_probability
    controller_update(state, 0.5)
    assert state.shed_probability > before


def test_above_target_lowers_shed_probability():
    state = ControllerState(shed_probability=0.5)
    controller_update(state, 1.0)
    assert state.shed_probability < 0.5


def test_repeated_zero_quality_saturates_at_one():
    # Iterate to the fixpoint: the output must clamp at 1.0 and stay there.
    state = ControllerState()
    values = [controller_update(state, 0.0) for _ in range(50)]
    assert values[-1] == 1.0
    assert all(v <= 1.0 for v in values)
    assert abs(state.integral) <= state.integral_limit
    for _ in range(10):
        assert controller_update(state, 0.0) == 1.0


def test_recovery_unclamps():
    state = ControllerState()
    for _ in range(50):
        controller_update(state, 0.0)
    for _ in range(200):
        controller_update(state, 1.0)
    assert state.shed_probability == 0.0


def test_shed_probability_always_in_unit_interval():
    state = ControllerState()
    rng = random.Random(8)
    for _ in range(2000):
        controller_update(state, rng.random())
        assert 0.0 <= state.shed_probability <= 1.0
        assert abs(state.integral) <= state.integral_limit


def test_admit_high_priority_even_at_full_shedding():
    state = ControllerState(shed_probability=1.0)
    assert admit(query(Priority.HIGH), state, random.Random(1))


def test_admit_low_priority_full_sharing():
    state = ControllerState(shed_probability=0.0)
    assert admit(query(Priority.LOW), state, random.Random(1))


def test_reject_low_priority_no_sharing():
    state = ControllerState(shed_probability=1.0)
    assert not admit(query(Priority.LOW), state, random.Random(1))


def test_admit_rate_tracks_shed_probability():
    state = ControllerState(shed_probability=0.3)
    rng = random.Random(5)
    admitted = sum(1 for _ in range(10_000) if admit(query(Priority.LOW), state, rng))
    assert abs(admitted / 10_000 - 0.7) < 0.02


def test_proxy_no_timeouts_is_one():
    w = TimeoutFrequencyWindow(100)
    for _ in range(10):
        w.add(False)
    assert timeout_frequency_signal(w) == 1.0


def test_proxy_all_timeouts_is_zero():
    w = TimeoutFrequencyWindow(100)
    for _ in range(10):
        w.add(True)
    assert timeout_frequency_signal(w) == 0.0


def test_proxy_half_timeouts():
    w = TimeoutFrequencyWindow(100)
    for i in range(10):
        w.add(i % 2 == 0)
    assert timeout_frequency_signal(w) == 0.5


def test_proxy_empty_window_holds():
    assert timeout_frequency_signal(TimeoutFrequencyWindow(100)) is None
