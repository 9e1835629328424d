"""Warmup-stable-decay-constant and half-cosine learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class FinalCosine:
    start_step: int
    end_lr: float


@dataclass(frozen=True)
class WsdcSchedule:
    """Linear warmup 0 -> peak, flat peak, linear decay to ``decay_end_lr``, then constant.

    ``stable_end_step`` and ``decay_end_step`` default to 80% and 90% of
    ``total_steps``.  An optional ``final_cosine`` bends the constant tail
    down to ``end_lr`` between its start step and ``total_steps``.
    """

    total_steps: int
    warmup_fraction: float = 0.01
    peak_lr: float = 3e-4
    decay_end_lr: float = 3e-5
    stable_end_step: int | None = None
    decay_end_step: int | None = None
    constant_lr: float = 3e-5
    final_cosine: FinalCosine | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.stable_end_step is None:
            object.__setattr__(self, "stable_end_step", int(0.8 * self.total_steps))
        if self.decay_end_step is None:
            object.__setattr__(self, "decay_end_step", int(0.9 * self.total_steps))
        if not self.peak_lr > self.decay_end_lr >= 0:
            raise ValueError("need peak_lr > decay_end_lr >= 0")
        if self.constant_lr < 0:
            raise ValueError("constant_lr must be non-negative")
        w = self.warmup_end_step
        if not 0 < w <= self.stable_end_step < self.decay_end_step <= self.total_steps:
            raise ValueError(
                f"phase boundaries out of order: warmup_end={w}, stable_end={self.stable_end_step}, "
                f"decay_end={self.decay_end_step}, total={self.total_steps}")
        fc = self.final_cosine
        if fc is not None and not self.decay_end_step <= fc.start_step < self.total_steps:
            raise ValueError("final cosine must start inside the constant phase")

    @property
    def warmup_end_step(self) -> int:
        return max(1, round(self.warmup_fraction * self.total_steps))


def _lerp(a: float, b: float, f: float) -> float:
    # exact at both ends: f=0 -> a, f=1 -> b
    return a * (1.0 - f) + b * f


def cosine_lr(step: int, peak: float, min_lr: float, total: int) -> float:
    """Half cosine from ``peak`` at step 0 to ``min_lr`` at ``total``."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    w = 0.5 * (1.0 + math.cos(math.pi * step / total))
    return peak * w + min_lr * (1.0 - w)


def wsdc_lr(step: int, s: WsdcSchedule) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    w = s.warmup_end_step
    if step <= w:
        return s.peak_lr * (step / w)
    if step <= s.stable_end_step:
        return s.peak_lr
    if step <= s.decay_end_step:
        f = (step - s.stable_end_step) / (s.decay_end_step - s.stable_end_step)
        return _lerp(s.peak_lr, s.decay_end_lr, f)
    fc = s.final_cosine
    if fc is not None and step > fc.start_step:
        return cosine_lr(step - fc.start_step, s.constant_lr, fc.end_lr, s.total_steps - fc.start_step)
    return s.constant_lr


def schedule_table(s: WsdcSchedule, every: int = 1) -> list[tuple[int, float]]:
    steps = list(range(0, s.total_steps + 1, max(1, every)))
    if steps[-1] != s.total_steps:
        steps.append(s.total_steps)
    return [(t, wsdc_lr(t, s)) for t in steps]
