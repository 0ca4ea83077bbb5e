"""
Closed-form learning-rate and momentum schedules

All schedules are pure functions of immutable descriptors; the trainer queries
them once per mini-batch step.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or out-of-range iterations"""


@dataclass(frozen=True)
class CosineAnneal:
    """Anneal from alpha0 at t=0 to alpha1 at t=t_max"""
    alpha0: float
    alpha1: float
    t_max: int

    def __post_init__(self):
        if self.t_max < 1:
            raise ScheduleError(f"t_max must be >= 1, got {self.t_max}")


@dataclass(frozen=True)
class OneCycle:
    eta_min: float
    eta_max: float
    mu_min: float
    mu_max: float
    t_total: int
    split: float = 0.5

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ScheduleError(f"eta_min ({self.eta_min}) must be below eta_max ({self.eta_max})")
        if not self.mu_min < self.mu_max:
            raise ScheduleError(f"mu_min ({self.mu_min}) must be below mu_max ({self.mu_max})")
        if not 0.0 < self.split < 1.0:
            raise ScheduleError(f"split must lie in (0, 1), got {self.split}")
        if self.t_total < 2:
            raise ScheduleError(f"t_total must be >= 2 to hold both phases, got {self.t_total}")

    @property
    def split_point(self) -> int:
        return min(max(1, round(self.split * self.t_total)), self.t_total - 1)


@dataclass(frozen=True)
class SnapshotSchedule:
    T: int
    M: int
    peak: float
    floor: float

    def __post_init__(self):
        if not self.T >= self.M >= 1:
            raise ScheduleError(f"Snapshot schedule needs T >= M >= 1, got T={self.T}, M={self.M}")

    @property
    def cycle_length(self) -> int:
        return math.ceil(self.T / self.M)


def cosine(s: CosineAnneal, t: int) -> float:
    if not 0 <= t <= s.t_max:
        raise ScheduleError(f"t={t} outside [0, {s.t_max}]")
    if t == 0:
        return s.alpha0
    if t == s.t_max:
        return s.alpha1
    return s.alpha1 + 0.5 * (s.alpha0 - s.alpha1) * (1.0 + math.cos(math.pi * t / s.t_max))


def one_cycle(s: OneCycle, t: int) -> Tuple[float, float]:
    """(learning rate, momentum) at iteration t"""
    if not 0 <= t <= s.t_total:
        raise ScheduleError(f"t={t} outside [0, {s.t_total}]")
    split = s.split_point
    if t <= split:
        lr = cosine(CosineAnneal(s.eta_min, s.eta_max, split), t)
        momentum = cosine(CosineAnneal(s.mu_max, s.mu_min, split), t)
    else:
        length = s.t_total - split
        lr = cosine(CosineAnneal(s.eta_max, s.eta_min, length), t - split)
        momentum = cosine(CosineAnneal(s.mu_min, s.mu_max, length), t - split)
    return lr, momentum


def snapshot_lr(s: SnapshotSchedule, t: int) -> float:
    """a(t) = F(mod(t - 1, ceil(T / M))) for 1 <= t <= T

    The last step of each cycle, t = k * ceil(T / M), sits at the floor. When T == M every
    cycle is a single step that is both its first and its last; such steps stay at the peak.
    """
    if not 1 <= t <= s.T:
        raise ScheduleError(f"t={t} outside [1, {s.T}]")
    cycle = s.cycle_length
    if cycle == 1:
        return s.peak
    # the last step of a cycle sits at position cycle - 1
    return cosine(CosineAnneal(s.peak, s.floor, cycle - 1), (t - 1) % cycle)


def snapshot_cycle(s: SnapshotSchedule, t: int) -> int:
    """Zero-based cycle index of iteration t"""
    if not 1 <= t <= s.T:
        raise ScheduleError(f"t={t} outside [1, {s.T}]")
    return (t - 1) // s.cycle_length


def schedule_table(schedule, momentum: Optional[float] = None) -> List[Tuple[int, float, float]]:
    """Every (t, lr, momentum) row over the schedule's domain"""
    rows = []
    if isinstance(schedule, CosineAnneal):
        for t in range(schedule.t_max + 1):
            rows.append((t, cosine(schedule, t), momentum if momentum is not None else 0.0))
    elif isinstance(schedule, OneCycle):
        for t in range(schedule.t_total + 1):
            lr, mu = one_cycle(schedule, t)
            rows.append((t, lr, mu))
    elif isinstance(schedule, SnapshotSchedule):
        for t in range(1, schedule.T + 1):
            rows.append((t, snapshot_lr(schedule, t), momentum if momentum is not None else 0.0))
    else:
        raise ScheduleError(f"Unknown schedule type {type(schedule).__name__}")
    return rows


def table_to_csv(rows: List[Tuple[int, float, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["t", "lr", "momentum"])
    for t, lr, mu in rows:
        writer.writerow([t, repr(lr), repr(mu)])
    return buffer.getvalue()


def plot_table(rows: List[Tuple[int, float, float]], path, title: str = ""):
    """Write a two-panel PNG of the learning rate and momentum curves"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r[0] for r in rows]
    fig, (ax_lr, ax_mu) = plt.subplots(2, 1, figsize=(6, 4), sharex=True)
    ax_lr.plot(ts, [r[1] for r in rows], color="tab:blue")
    ax_lr.set_ylabel("learning rate")
    ax_mu.plot(ts, [r[2] for r in rows], color="tab:orange")
    ax_mu.set_ylabel("momentum")
    ax_mu.set_xlabel("iteration")
    if title:
        ax_lr.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote schedule plot {path}")
