"""Reward terms (new area, total variation, collision, constant) and episode termination."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .gridworld import TaskProfile

SQRT2 = math.sqrt(2.0)
_SQRT2_EXACT = Fraction(SQRT2)

GOAL, TRUNCATED, RUNNING = "goal", "truncated", "running"


@dataclass(frozen=True)
class RewardParams:
    lambda_area: float = 1.0
    lambda_tv_g: float = 0.0
    lambda_tv_i: float = 1.0
    r_coll: float = -10.0
    r_const: float = -0.1

    @classmethod
    def for_profile(cls, profile: TaskProfile | str, **kw) -> "RewardParams":
        name = profile if isinstance(profile, str) else profile.name
        lam_i = 1.0 if name == "mow" else 0.2
        kw.setdefault("lambda_tv_i", lam_i)
        return cls(**kw)


@dataclass
class RewardBreakdown:
    area: float = 0.0
    tv_global: float = 0.0
    tv_incremental: float = 0.0
    collision: float = 0.0
    constant: float = 0.0

    @property
    def total(self) -> float:
        return math.fsum((self.area, self.tv_global, self.tv_incremental, self.collision, self.constant))

    def as_dict(self) -> dict:
        return {"r_area": self.area, "r_tv_global": self.tv_global, "r_tv_incremental": self.tv_incremental,
                "r_collision": self.collision, "r_constant": self.constant, "r_total": self.total}


def reward_area(a_new: float, params: RewardParams, profile: TaskProfile) -> float:
    """New area normalised by the strip an agent-wide tool sweeps in one step at full speed."""
    if a_new < 0:
        raise ValueError("newly covered area cannot be negative")
    return params.lambda_area * a_new / (2.0 * profile.agent_radius * profile.v_max * profile.dt)


# ---------------------------------------------------------------------------
# total variation

def _tv_terms(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dv = np.zeros_like(x)
    dh = np.zeros_like(x)
    dv[:-1, :] = x[1:, :] - x[:-1, :]
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    return np.sqrt(dv * dv + dh * dh)


def _binary_counts(x: np.ndarray) -> tuple[int, int]:
    """Numbers of unit and sqrt(2) terms of the isotropic TV of a 0/1 grid."""
    b = np.asarray(x, dtype=bool)
    dv = np.zeros(b.shape, dtype=bool)
    dh = np.zeros(b.shape, dtype=bool)
    dv[:-1, :] = b[1:, :] != b[:-1, :]
    dh[:, :-1] = b[:, 1:] != b[:, :-1]
    n2 = int(np.count_nonzero(dv & dh))
    n1 = int(np.count_nonzero(dv ^ dh))
    return n1, n2


def _value(n1: int, n2: int, resolution: float) -> float:
    # correctly rounded n1 + n2*sqrt(2), the same number fsum gives over the terms
    return resolution * float(Fraction(n1) + n2 * _SQRT2_EXACT)


def total_variation(grid, resolution: float | None = None) -> float:
    """Isotropic TV in metres of boundary (replicated edges contribute nothing).

    ``grid`` is a CoverageGrid or a 2-D array; for arrays ``resolution``
    defaults to 1.
    """
    if hasattr(grid, "cells"):
        res = grid.spec.resolution if resolution is None else resolution
        x = grid.cells
    else:
        res = 1.0 if resolution is None else resolution
        x = np.asarray(grid)
    if x.dtype == bool or (x.dtype.kind in "ui" and x.size and x.max() <= 1 and x.min() >= 0):
        return _value(*_binary_counts(x), res)
    return res * math.fsum(_tv_terms(x).ravel().tolist())


class TVTracker:
    """Total variation of a binary grid kept up to date from changed cells.

    The state is the integer pair (unit terms, diagonal terms), so the value
    after any sequence of updates equals a full recomputation exactly.
    """

    def __init__(self, grid: np.ndarray, resolution: float):
        self.resolution = resolution
        self.n1, self.n2 = _binary_counts(grid)

    @property
    def value(self) -> float:
        return _value(self.n1, self.n2, self.resolution)

    def update(self, grid: np.ndarray, changed: np.ndarray, old_values=0) -> float:
        """Account for ``changed`` flat indices, whose previous values were ``old_values``.

        ``grid`` already holds the new values. Only the bounding box of the
        changed cells grown by one cell is re-examined. Returns the new value.
        """
        changed = np.asarray(changed, dtype=np.int64)
        if changed.size == 0:
            return self.value
        h, w = grid.shape
        iy, ix = np.divmod(changed, w)
        # terms at rows/cols [min-1, max] can change; they read one more cell down/right
        y0, y1 = max(int(iy.min()) - 1, 0), int(iy.max()) + 1
        x0, x1 = max(int(ix.min()) - 1, 0), int(ix.max()) + 1
        after = np.asarray(grid[y0:min(y1 + 1, h), x0:min(x1 + 1, w)], dtype=bool)
        before = after.copy()
        before[iy - y0, ix - x0] = np.asarray(old_values, dtype=bool)
        a1, a2 = _window_counts(after, y1 - y0, x1 - x0)
        b1, b2 = _window_counts(before, y1 - y0, x1 - x0)
        self.n1 += a1 - b1
        self.n2 += a2 - b2
        return self.value


def _window_counts(b: np.ndarray, rows: int, cols: int) -> tuple[int, int]:
    """TV term counts for the top-left ``rows x cols`` cells of ``b``, which may carry one extra row/column."""
    dv = np.zeros((rows, cols), dtype=bool)
    dh = np.zeros((rows, cols), dtype=bool)
    r = min(rows, b.shape[0] - 1)
    c = min(cols, b.shape[1] - 1)
    dv[:r, :] = b[1:r + 1, :cols] != b[:r, :cols]
    dh[:, :c] = b[:rows, 1:c + 1] != b[:rows, :c]
    return int(np.count_nonzero(dv ^ dh)), int(np.count_nonzero(dv & dh))


def reward_tv_global(v_t: float, a_covered: float, params: RewardParams) -> float:
    """-lambda * V / sqrt(A); zero before anything is covered."""
    if a_covered <= 0 or params.lambda_tv_g == 0:
        return 0.0
    return -params.lambda_tv_g * v_t / math.sqrt(a_covered)


def reward_tv_incremental(v_t: float, v_prev: float, params: RewardParams, profile: TaskProfile) -> float:
    return -params.lambda_tv_i * (v_t - v_prev) / (2.0 * profile.v_max * profile.dt)


def step_reward(a_new: float, v_t: float, v_prev: float, a_covered: float, collided: bool,
                params: RewardParams, profile: TaskProfile) -> RewardBreakdown:
    return RewardBreakdown(
        area=reward_area(a_new, params, profile),
        tv_global=reward_tv_global(v_t, a_covered, params),
        tv_incremental=reward_tv_incremental(v_t, v_prev, params, profile),
        collision=params.r_coll if collided else 0.0,
        constant=params.r_const,
    )


@dataclass
class EpisodeStatus:
    goal_coverage: float = 0.99
    tau: int = 1000
    steps_since_new: int = 0
    done_reason: str = RUNNING

    def record(self, new_cells: int) -> None:
        self.steps_since_new = 0 if new_cells > 0 else self.steps_since_new + 1


def check_termination(status: EpisodeStatus, covered_fraction: float) -> str:
    if covered_fraction >= status.goal_coverage:
        reason = GOAL
    elif status.steps_since_new >= status.tau:
        reason = TRUNCATED
    else:
        reason = RUNNING
    status.done_reason = reason
    return reason
