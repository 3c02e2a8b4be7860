"""Query sampling: decides which admitted queries also get a mature execution.

Per-minute budgets use a token bucket (capacity = the per-minute count,
refilled continuously), so the expected number of sampled queries per
minute never exceeds the budget regardless of arrival burstiness.
Fractional rates sample each query independently. Decisions never look
at priority or params.
"""

from __future__ import annotations

import random

from .config import SamplingSpec
from .timebase import NS_PER_SEC


class Sampler:
    def __init__(self, spec: SamplingSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self._tokens = float(spec.per_minute) if spec.per_minute else 0.0
        self._capacity = float(spec.per_minute) if spec.per_minute else 0.0
        self._refill_per_ns = (spec.per_minute or 0.0) / 60.0 / NS_PER_SEC
        self._last_ns = 0

    def decide(self, now_ns: int) -> bool:
        if self.spec.fraction is not None:
            r = self.spec.fraction
            if r <= 0.0:
                return False
            if r >= 1.0:
                return True
            return self.rng.random() < r
        if not self.spec.per_minute:
            return False
        if now_ns > self._last_ns:
            self._tokens = min(self._capacity,
                               self._tokens + (now_ns - self._last_ns) * self._refill_per_ns)
            self._last_ns = now_ns
        if self._tokens >= 1.0:
            self._tokens -= 1.0
            return True
        return False


def sampler_decide(rng: random.Random, spec: SamplingSpec, now_ns: int,
                   recent_sample_times: list) -> bool:
    """Stateless form: reconstructs bucket state from past grant times.

    recent_sample_times must be sorted ascending; fractional rates ignore it.
    """
    if spec.fraction is not None:
        sampler = Sampler(spec, rng)
        return sampler.decide(now_ns)
    sampler = Sampler(spec, rng)
    for t in recent_sample_times:
        granted = sampler.decide(t)
        if not granted:
            # History lists granted samples; force-consume to mirror them.
            sampler._tokens = max(0.0, sampler._tokens - 1.0)
    return sampler.decide(now_ns)
