"""Action selection on a fixed acceleration grid.

The ideal action is the grid argmax of the anticipated utility.  For
calibration the argmax is replaced by the Boltzmann mean action, which is
smooth in the utility parameters; the temperature-like weight lambda is a
fixed regularization constant, not an estimated quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import utility
from .ingest import PerceivedState
from .utility import AnticipationConfig, UtilityParams, bumper_gap, effective_utility_grid

__all__ = [
    "ActionGrid",
    "ActionDistribution",
    "optimal_action",
    "action_distribution",
    "mean_action",
    "optimal_actions_batch",
    "mean_actions_batch",
]


@dataclass(frozen=True)
class ActionGrid:
    """Equally spaced candidate accelerations with the Boltzmann weight lambda."""

    a_min: float = -6.0
    a_max: float = 4.0
    n_points: int = 41
    lam: float = 200.0

    def __post_init__(self):
        if self.n_points < 2 or self.a_max <= self.a_min:
            raise ValueError("grid needs at least 2 points with a_max > a_min")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.a_min, self.a_max, self.n_points)

    @property
    def spacing(self) -> float:
        return (self.a_max - self.a_min) / (self.n_points - 1)


@dataclass(frozen=True)
class ActionDistribution:
    """Boltzmann probabilities over the grid plus the log partition value."""

    probabilities: np.ndarray
    log_partition: float


def _state_inputs(s: PerceivedState, lengths):
    gap0 = bumper_gap(s.pred_pos, s.self_pos, lengths)
    return gap0, s.self_vel, s.pred_vel


def _argmax_mild(utilities: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties go to the smallest |a|, then to braking."""
    u = np.asarray(utilities)
    best = u.max(axis=1, keepdims=True)
    tied = u == best
    # rank candidates by (|a|, a); braking sorts before acceleration at equal |a|
    order = np.lexsort((actions, np.abs(actions)))
    return order[tied[:, order].argmax(axis=1)]


def optimal_action(
    s: PerceivedState,
    params: UtilityParams,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> float:
    """Grid point maximizing the anticipated utility for one state."""
    gap0, v_self, v_pred = _state_inputs(s, lengths)
    u = effective_utility_grid(gap0, v_self, v_pred, params, grid.points, cfg)
    idx = _argmax_mild(u, grid.points)[0]
    return float(grid.points[idx])


def _distribution(u_row: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    # max-shift keeps exp() in range: lambda * u spans hundreds of units
    scaled = lam * u_row
    shift = scaled.max()
    w = np.exp(scaled - shift)
    total = w.sum()
    return w / total, float(np.log(total) + shift)


def action_distribution(
    s: PerceivedState,
    params: UtilityParams,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> ActionDistribution:
    """Boltzmann distribution P(a) proportional to exp(lambda * utility)."""
    gap0, v_self, v_pred = _state_inputs(s, lengths)
    u = effective_utility_grid(gap0, v_self, v_pred, params, grid.points, cfg)
    p, log_z = _distribution(u[0], grid.lam)
    return ActionDistribution(probabilities=p, log_partition=log_z)


def mean_action(
    s: PerceivedState,
    params: UtilityParams,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> float:
    """Probability-weighted mean acceleration; smooth in the parameters."""
    dist = action_distribution(s, params, grid, cfg, lengths)
    return float(dist.probabilities @ grid.points)


def optimal_actions_batch(gap0, v_self, v_pred, params, grid: ActionGrid, cfg) -> np.ndarray:
    """Vectorized optimal_action over (B,) state arrays."""
    u = effective_utility_grid(gap0, v_self, v_pred, params, grid.points, cfg)
    return grid.points[_argmax_mild(u, grid.points)]


def mean_actions_batch(gap0, v_self, v_pred, params, grid: ActionGrid, cfg) -> np.ndarray:
    """Vectorized mean_action over (B,) state arrays (fixed summation order)."""
    if utility.HAVE_FAST_SCAN and all(
        np.ndim(getattr(params, name)) == 0
        for name in ("v_star", "kappa1", "kappa_c", "kappa_v", "kappa_d", "omega1", "omega2")
    ):
        return utility._mean_action_scan(
            np.atleast_1d(np.asarray(gap0, dtype=float)),
            np.atleast_1d(np.asarray(v_self, dtype=float)),
            np.atleast_1d(np.asarray(v_pred, dtype=float)),
            grid.points,
            cfg.dt,
            cfg.h,
            float(params.v_star),
            float(params.kappa1),
            float(params.kappa_c),
            float(params.kappa_v),
            float(params.kappa_d),
            float(params.omega1),
            float(params.omega2),
            grid.lam,
            cfg.average_speed_reward,
        )
    u = effective_utility_grid(gap0, v_self, v_pred, params, grid.points, cfg)
    scaled = grid.lam * u
    scaled -= scaled.max(axis=1, keepdims=True)
    w = np.exp(scaled)
    return (w @ grid.points) / w.sum(axis=1)
