"""Closed-form noise schedules for both halves of the model.

The discrete side uses a masking marginal ``mask_prob(t)`` on [0, 1]
with exact endpoints 0 and 1; the continuous side uses a
variance-preserving schedule with a linear ``beta(t)`` whose integral
gives ``alpha_bar(t) = exp(-(beta_min*t + (beta_max-beta_min)*t^2/2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Parametric schedule shared by corruption, training, and sampling.

    ``kind`` selects the masking marginal; ``beta_min``/``beta_max``
    parameterize the continuous process; ``num_latent_steps`` is the
    discretization used by ancestral sampling.
    """

    kind: str = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0
    num_latent_steps: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.beta_min <= self.beta_max):
            raise ValueError("require 0 < beta_min <= beta_max")
        if self.num_latent_steps < 1:
            raise ValueError("num_latent_steps must be positive")

    def mask_prob(self, t: float) -> float:
        """Marginal probability that a token is masked at time t."""
        _check_time(t)
        if self.kind == "linear":
            return float(t)
        # cosine: 1 - cos(pi*t/2), endpoints exact by construction
        if t == 0.0:
            return 0.0
        if t == 1.0:
            return 1.0
        return 1.0 - math.cos(math.pi * t / 2.0)

    def beta(self, t: float) -> float:
        """Instantaneous continuous-noise rate (linear in t)."""
        _check_time(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t

    def alpha_bar(self, t: float) -> float:
        """Signal retention of the variance-preserving marginal at t."""
        _check_time(t)
        integral = self.beta_min * t + (self.beta_max - self.beta_min) * t * t / 2.0
        return math.exp(-integral)


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time {t} outside [0, 1]")


def unmask_budget(schedule: NoiseSchedule, length: int, steps: int) -> list[int]:
    """Per-step commit counts for reverse sampling.

    Counts follow the masking marginal on the reverse grid
    t_k = 1 - k/steps, sum exactly to ``length``, and every step gets at
    least one commit: zero-count steps borrow from the currently largest
    step (earliest such step on ties).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > length:
        raise ValueError(f"steps ({steps}) exceeds sequence length ({length})")
    grid = [1.0 - k / steps for k in range(steps + 1)]
    masked = [math.ceil(schedule.mask_prob(t) * length) for t in grid]
    counts = [abs(masked[k] - masked[k + 1]) for k in range(steps)]
    for k in range(steps):
        while counts[k] == 0:
            donor = max(range(steps), key=lambda j: (counts[j], -j))
            if counts[donor] <= 1:
                raise RuntimeError("cannot redistribute unmask budget")
            counts[donor] -= 1
            counts[k] += 1
    assert sum(counts) == length
    return counts
