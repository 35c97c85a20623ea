"""The two-component driving utility and its anticipated effective value.

A driver scores a candidate acceleration by (1) a moving-forward reward that
peaks at an ideal speed and punishes backward motion hard, and (2) a pairwise
front-collision penalty whose length scale grows with speed and with closing
speed.  Scoring rolls the world forward h steps with the candidate held
constant and every other vehicle coasting at constant speed; the speed reward
is taken at the first anticipated step and the collision penalty as the worst
case over the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import PerceivedState

__all__ = [
    "UtilityParams",
    "AnticipationConfig",
    "AnticipatedRollout",
    "phi1",
    "front_scale",
    "phi2",
    "anticipate",
    "bumper_gap",
    "effective_utility",
    "effective_utility_grid",
]


def _all(cond) -> bool:
    return bool(np.all(cond))


@dataclass(frozen=True)
class UtilityParams:
    """Shape parameters of the driving utility.

    Fields accept scalars or per-agent arrays (broadcast in batch paths).
    omega1 is pinned to 1 by normalization; omega2 must be negative so the
    collision term acts as a penalty.
    """

    v_star: float = 10.26
    kappa1: float = 0.7
    kappa_c: float = 0.4
    kappa_v: float = 0.215
    kappa_d: float = 1.0
    omega1: float = 1.0
    omega2: float = -10.0

    def __post_init__(self):
        if not _all(np.asarray(self.v_star) > 0):
            raise ValueError("v_star must be positive")
        if not _all(np.asarray(self.kappa1) > 0):
            raise ValueError("kappa1 must be positive")
        for name in ("kappa_c", "kappa_v", "kappa_d"):
            if not _all(np.asarray(getattr(self, name)) >= 0):
                raise ValueError(f"{name} must be nonnegative")
        if not _all(np.asarray(self.omega2) < 0):
            raise ValueError("omega2 must be negative")
        if not _all(np.asarray(self.omega1) == 1.0):
            raise ValueError("omega1 is fixed to 1 by normalization")


@dataclass(frozen=True)
class AnticipationConfig:
    """Look-ahead of h steps of dt seconds each.

    average_speed_reward switches the speed-reward aggregation from the
    first anticipated step (default) to the h-step average.
    """

    h: int = 4
    dt: float = 1.0 / 3.0
    average_speed_reward: bool = False

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("anticipation needs h >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class AnticipatedRollout:
    """Ego and predecessor kinematics over the anticipation horizon (tau = 1..h)."""

    ego_pos: np.ndarray
    ego_vel: np.ndarray
    pred_pos: np.ndarray
    pred_vel: np.ndarray


def phi1(v, params: UtilityParams):
    """Moving-forward reward at speed v.

    [1 - exp(-10(v + 0.25))] - [1 - exp(-((v - v*) / (kappa1 v*))^2)]:
    the first bracket turns strongly negative below -0.25 m/s, the second
    subtracts the squared-exponential miss from the ideal speed.
    """
    v = np.asarray(v, dtype=float)
    forward = 1.0 - np.exp(-10.0 * (v + 0.25))
    rel = (v - params.v_star) / (params.kappa1 * params.v_star)
    miss = 1.0 - np.exp(-rel * rel)
    return forward - miss


def front_scale(v_self, v_pred, params: UtilityParams):
    """Speed-dependent length scale of the front-collision penalty.

    sigma = kappa_c + kappa_v |v_self| + kappa_d max(v_self - v_pred, 0).
    """
    v_self = np.asarray(v_self, dtype=float)
    closing = np.maximum(v_self - np.asarray(v_pred, dtype=float), 0.0)
    return params.kappa_c + params.kappa_v * np.abs(v_self) + params.kappa_d * closing


def phi2(gap, sigma):
    """Front-collision penalty magnitude in [0, 1] at bumper-to-bumper gap.

    1 for overlap (gap <= 0), exp(-(gap/sigma)^2 - 2 gap/sigma) otherwise;
    continuous at zero and decaying monotonically with the gap.
    """
    if not _all(np.asarray(sigma) > 0):
        raise ValueError("sigma must be positive")
    gap = np.asarray(gap, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        r = gap / np.asarray(sigma, dtype=float)
        decayed = np.exp(-r * r - 2.0 * r)
        out = np.where(gap <= 0.0, 1.0, decayed)
    if out.ndim == 0:
        return float(out)
    return out


def anticipate(s: PerceivedState, a_candidate: float, cfg: AnticipationConfig) -> AnticipatedRollout:
    """Roll ego and predecessor forward h steps under a constant candidate action.

    Ego velocity integrates the candidate (no clamp at zero; backward motion
    is discouraged by phi1 instead), position integrates the previous step's
    velocity.  The predecessor coasts at constant speed.
    """
    h, dt = cfg.h, cfg.dt
    ego_pos = np.empty(h)
    ego_vel = np.empty(h)
    pred_pos = np.empty(h)
    pred_vel = np.full(h, s.pred_vel)
    x, v = s.self_pos, s.self_vel
    xp = s.pred_pos
    for k in range(h):
        x = x + dt * v
        v = v + dt * a_candidate
        xp = xp + dt * s.pred_vel
        ego_pos[k] = x
        ego_vel[k] = v
        pred_pos[k] = xp
    return AnticipatedRollout(ego_pos=ego_pos, ego_vel=ego_vel, pred_pos=pred_pos, pred_vel=pred_vel)


def bumper_gap(pred_pos, self_pos, lengths) -> float:
    """Bumper-to-bumper distance given center positions on a common axis."""
    l_self, l_pred = lengths
    return (pred_pos - 0.5 * l_pred) - (self_pos + 0.5 * l_self)


def effective_utility(
    a_candidate: float,
    s: PerceivedState,
    params: UtilityParams,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> float:
    """Anticipated utility of one candidate action in one perceived state.

    omega1 * speed reward (first anticipated step, or h-average if
    configured) + omega2 * worst collision penalty over the horizon, with
    the penalty scale recomputed from anticipated speeds at each step.
    Readable scalar reference; effective_utility_grid is the batched path.
    """
    roll = anticipate(s, a_candidate, cfg)
    if cfg.average_speed_reward:
        speed_reward = float(np.mean(phi1(roll.ego_vel, params)))
    else:
        speed_reward = float(phi1(roll.ego_vel[0], params))
    gaps = bumper_gap(roll.pred_pos, roll.ego_pos, lengths)
    sigmas = front_scale(roll.ego_vel, roll.pred_vel, params)
    worst = float(np.max(phi2(gaps, sigmas)))
    return params.omega1 * speed_reward + params.omega2 * worst


def _mean_action_scan(gap0, v0, vp, actions, dt, h, vstar, k1, kc, kv, kd, w1, w2, lam, avg_reward):
    """Fused scalar-parameter mean-action scan (jit target).

    Same arithmetic as effective_utility_grid + Boltzmann averaging, written
    loop-wise so numba can compile it; used only when all utility parameters
    are scalars.
    """
    n_b = gap0.shape[0]
    n_g = actions.shape[0]
    out = np.empty(n_b)
    u = np.empty(n_g)
    for b in range(n_b):
        g0 = gap0[b]
        vb = v0[b]
        vpb = vp[b]
        umax = -1e300
        for gi in range(n_g):
            ab = actions[gi]
            pen = 0.0
            rew = 0.0
            for k in range(1, h + 1):
                vt = vb + ab * dt * k
                gt = g0 + (vpb - vb) * dt * k - ab * 0.5 * dt * dt * k * (k - 1)
                sig = kc + kv * abs(vt) + kd * max(vt - vpb, 0.0)
                if gt <= 0.0:
                    p = 1.0
                else:
                    r = gt / sig
                    p = math.exp(-r * r - 2.0 * r)
                if p > pen:
                    pen = p
                if avg_reward:
                    rel = (vt - vstar) / (k1 * vstar)
                    rew += math.exp(-rel * rel) - math.exp(-10.0 * (vt + 0.25))
                elif k == 1:
                    rel = (vt - vstar) / (k1 * vstar)
                    rew = math.exp(-rel * rel) - math.exp(-10.0 * (vt + 0.25))
            if avg_reward:
                rew /= h
            val = w1 * rew + w2 * pen
            u[gi] = val
            if val > umax:
                umax = val
        num = 0.0
        den = 0.0
        for gi in range(n_g):
            w = math.exp(lam * (u[gi] - umax))
            den += w
            num += w * actions[gi]
        out[b] = num / den
    return out


try:
    from numba import njit as _njit

    _mean_action_scan = _njit(cache=True, fastmath=False)(_mean_action_scan)
    HAVE_FAST_SCAN = True
except ImportError:  # pragma: no cover
    HAVE_FAST_SCAN = False


def effective_utility_grid(
    gap0,
    v_self,
    v_pred,
    params: UtilityParams,
    actions: np.ndarray,
    cfg: AnticipationConfig,
):
    """Effective utilities for a batch of states against a grid of actions.

    gap0 is the initial bumper-to-bumper gap; gap0, v_self, v_pred are
    scalars or (B,) arrays, actions is (G,).  Returns (B, G).  Because the
    predecessor coasts, the gap evolves by the closed-form relative
    displacement and positions never need to be materialized.  Summations
    run in fixed index order, so results do not depend on evaluation order.
    """
    gap0 = np.atleast_1d(np.asarray(gap0, dtype=float))[:, None, None]
    v0 = np.atleast_1d(np.asarray(v_self, dtype=float))[:, None, None]
    vp = np.atleast_1d(np.asarray(v_pred, dtype=float))[:, None, None]
    a = np.asarray(actions, dtype=float)[None, :, None]
    dt = cfg.dt
    tau = np.arange(1, cfg.h + 1, dtype=float)[None, None, :]

    def _p(name, depth=3):
        # per-agent parameter arrays broadcast against (B, G, H) or (B, G)
        val = np.asarray(getattr(params, name), dtype=float)
        if val.ndim == 0:
            return val
        return val[:, None, None] if depth == 3 else val[:, None]

    v_tau = v0 + a * (dt * tau)  # (B, G, H)
    # relative displacement: pred coasts, ego integrates v0 then the candidate
    gap_tau = gap0 + (vp - v0) * (dt * tau) - a * (0.5 * dt * dt) * tau * (tau - 1.0)
    sigma = _p("kappa_c") + _p("kappa_v") * np.abs(v_tau) + _p("kappa_d") * np.maximum(v_tau - vp, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        r = gap_tau / sigma
        pen = np.where(gap_tau <= 0.0, 1.0, np.exp(-r * r - 2.0 * r))
    worst = pen.max(axis=2)  # (B, G)

    def _reward(v):
        rel = (v - _p("v_star", v.ndim)) / (_p("kappa1", v.ndim) * _p("v_star", v.ndim))
        return np.exp(-rel * rel) - np.exp(-10.0 * (v + 0.25))

    if cfg.average_speed_reward:
        speed_reward = _reward(v_tau).mean(axis=2)
    else:
        speed_reward = _reward(v_tau[:, :, 0])

    return _p("omega1", depth=2) * speed_reward + _p("omega2", depth=2) * worst
