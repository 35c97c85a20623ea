"""Linear-Gaussian state space for one vehicle with decision-derived control.

Latent state xi = (x, v, a) follows double-integrator kinematics with an
AR(1) acceleration around the decision model's mean action; only position is
observed, with iid normal noise.  Since the driver-perceived scene states
are treated as exogenous, each vehicle filters independently and the whole
model stays linear: the decision model enters purely through the control
input a_bar_t - rho * a_bar_{t-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decision import ActionGrid, mean_actions_batch
from .ingest import PerceivedSeries
from .utility import AnticipationConfig, UtilityParams

__all__ = [
    "AgentState",
    "NoiseParams",
    "DriverParams",
    "FilterState",
    "Innovation",
    "SystemMatrices",
    "FilteredStates",
    "FilterNumericsError",
    "system_matrices",
    "control_input",
    "init_filter",
    "kalman_step",
    "mean_action_series",
    "log_likelihood",
    "filtered_states",
]


class FilterNumericsError(RuntimeError):
    """A filter quantity became nonfinite or ill-posed at a known step."""

    def __init__(self, message: str, t: int):
        super().__init__(f"{message} (t={t})")
        self.t = t


@dataclass(frozen=True)
class AgentState:
    """Kinematic state of one vehicle: unwrapped position, speed, acceleration."""

    x: float
    v: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.v, self.a])


@dataclass(frozen=True)
class NoiseParams:
    """Process / measurement noise scales and the AR(1) action persistence."""

    sigma_nu: float = 0.263
    sigma_a: float = 0.273
    sigma_x: float = 0.05
    sigma_v: float = 0.1
    rho: float = 0.7

    def __post_init__(self):
        for name in ("sigma_nu", "sigma_a", "sigma_x", "sigma_v"):
            if not np.all(np.asarray(getattr(self, name)) >= 0):
                raise ValueError(f"{name} must be nonnegative")
        if not np.all((np.asarray(self.rho) >= 0) & (np.asarray(self.rho) < 1)):
            raise ValueError("rho must lie in [0, 1)")


#: names of the free parameter subset estimated per driver
FREE_PARAMS = ("sigma_nu", "sigma_a", "v_star", "kappa_v")


@dataclass(frozen=True)
class DriverParams:
    """One driver's utility shape plus noise parameters.

    free_params names the subset exposed to calibration; everything else is
    held fixed at its configured value.
    """

    utility: UtilityParams
    noise: NoiseParams
    free_params: tuple[str, ...] = FREE_PARAMS

    def replace(self, **values) -> "DriverParams":
        """Copy with named utility/noise fields overridden."""
        ufields = {}
        nfields = {}
        for key, val in values.items():
            if hasattr(self.utility, key):
                ufields[key] = val
            elif hasattr(self.noise, key):
                nfields[key] = val
            else:
                raise KeyError(f"unknown driver parameter {key!r}")
        util = self.utility
        noise = self.noise
        if ufields:
            util = UtilityParams(**{**util.__dict__, **ufields})
        if nfields:
            noise = NoiseParams(**{**noise.__dict__, **nfields})
        return DriverParams(utility=util, noise=noise, free_params=self.free_params)

    def value(self, name: str) -> float:
        if hasattr(self.utility, name):
            return getattr(self.utility, name)
        return getattr(self.noise, name)


@dataclass
class FilterState:
    """Gaussian filter belief: mean 3-vector and 3x3 covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.cov = np.asarray(self.cov, dtype=float).reshape(3, 3)


@dataclass(frozen=True)
class Innovation:
    """One-step observation residual and its predictive variance."""

    epsilon: float
    variance: float


@dataclass(frozen=True)
class SystemMatrices:
    """Transition, observation, control selector and process covariance."""

    Phi: np.ndarray
    A: np.ndarray
    Upsilon: np.ndarray
    Omega: np.ndarray
    dt: float
    rho: float


def system_matrices(dt: float, noise: NoiseParams) -> SystemMatrices:
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi = np.array([[1.0, dt, 0.0], [0.0, 1.0, dt], [0.0, 0.0, noise.rho]])
    a = np.array([[1.0, 0.0, 0.0]])
    ups = np.zeros((3, 3))
    ups[2, 2] = 1.0
    omega = np.diag([noise.sigma_x**2, noise.sigma_v**2, noise.sigma_a**2])
    return SystemMatrices(Phi=phi, A=a, Upsilon=ups, Omega=omega, dt=dt, rho=noise.rho)


def control_input(a_star_t: float, a_star_prev: float, rho: float) -> np.ndarray:
    """Control vector (0, 0, a*_t - rho a*_{t-1}) feeding the acceleration line."""
    return np.array([0.0, 0.0, a_star_t - rho * a_star_prev])


def init_filter(z0: float, z1: float, dt: float, sigma_nu: float) -> FilterState:
    """Data-informed start: position and first-difference speed, diffuse acceleration."""
    mean = np.array([z0, (z1 - z0) / dt, 0.0])
    cov = np.diag([sigma_nu**2, (2.0 * sigma_nu / dt) ** 2, 1.0])
    return FilterState(mean=mean, cov=cov)


def kalman_step(
    prior: FilterState,
    z: float,
    c: np.ndarray,
    mats: SystemMatrices,
    sigma_nu: float,
) -> tuple[FilterState, Innovation]:
    """One predict-update cycle against a scalar position observation.

    The covariance update uses the Joseph form, which stays symmetric
    positive semidefinite under roundoff.
    """
    eig_min = float(np.linalg.eigvalsh(prior.cov).min())
    if eig_min < -1e-10:
        raise ValueError(f"prior covariance is not PSD (min eigenvalue {eig_min:.3e})")
    phi = mats.Phi
    mean_pred = phi @ prior.mean + np.asarray(c, dtype=float).reshape(3)
    cov_pred = phi @ prior.cov @ phi.T + mats.Omega

    eps = float(z - mean_pred[0])
    s = float(cov_pred[0, 0] + sigma_nu**2)
    if s <= 0:
        raise ValueError("innovation variance must be positive")
    gain = cov_pred[:, 0] / s
    mean_post = mean_pred + gain * eps
    j = np.eye(3)
    j[:, 0] -= gain
    cov_post = j @ cov_pred @ j.T + sigma_nu**2 * np.outer(gain, gain)
    return FilterState(mean=mean_post, cov=cov_post), Innovation(epsilon=eps, variance=s)


def mean_action_series(
    theta: DriverParams,
    perceived: PerceivedSeries,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> np.ndarray:
    """Mean action at every perceived state of one driver."""
    l_self, l_pred = lengths
    gap0 = (perceived.pred_pos - 0.5 * l_pred) - (perceived.self_pos + 0.5 * l_self)
    return mean_actions_batch(gap0, perceived.self_vel, perceived.pred_vel, theta.utility, grid, cfg)


def _loglik_scan(z, controls, dt, rho, qx, qv, qa, r_nu, m0, m1, m2, p00, p01, p02, p11, p12, p22):
    """Innovation-sum scan (hot path); returns (sum_lnS, sum_e2S, bad_t).

    bad_t is -1 on success, else the step where the recursion became
    ill-posed.  Same algebra as _filter_pass; kept free of Python objects
    so it can be jit-compiled.
    """
    sum_ln = 0.0
    sum_e2 = 0.0
    w = z.shape[0]
    for t in range(1, w):
        n0 = m0 + dt * m1
        n1 = m1 + dt * m2
        n2 = rho * m2 + controls[t]
        q0 = p00 + dt * (2.0 * p01 + dt * p11) + qx
        q1 = p01 + dt * (p11 + p02 + dt * p12)
        q2 = rho * (p02 + dt * p12)
        q3 = p11 + dt * (2.0 * p12 + dt * p22) + qv
        q4 = rho * (p12 + dt * p22)
        q5 = rho * rho * p22 + qa
        s = q0 + r_nu
        if not (s > 0.0) or not math.isfinite(s):
            return (math.nan, math.nan, t)
        e = z[t] - n0
        k0 = q0 / s
        k1 = q1 / s
        k2 = q2 / s
        m0 = n0 + k0 * e
        m1 = n1 + k1 * e
        m2 = n2 + k2 * e
        b00 = q0 - k0 * q0
        b01 = q1 - k0 * q1
        b02 = q2 - k0 * q2
        b10 = q1 - k1 * q0
        b20 = q2 - k2 * q0
        p00 = b00 - k0 * b00 + r_nu * k0 * k0
        p01 = b01 - k1 * b00 + r_nu * k0 * k1
        p02 = b02 - k2 * b00 + r_nu * k0 * k2
        p11 = (q3 - k1 * q1) - k1 * b10 + r_nu * k1 * k1
        p12 = (q4 - k1 * q2) - k2 * b10 + r_nu * k1 * k2
        p22 = (q5 - k2 * q2) - k2 * b20 + r_nu * k2 * k2
        if t >= 2:
            sum_ln += math.log(s)
            sum_e2 += e * e / s
        if not math.isfinite(m0):
            return (math.nan, math.nan, t)
    return (sum_ln, sum_e2, -1)


try:  # jit the scan when numba is around; the plain version is the contract
    from numba import njit

    _loglik_scan = njit(cache=True, fastmath=False)(_loglik_scan)
except ImportError:  # pragma: no cover
    pass


def _filter_pass(z, controls, dt, rho, qx, qv, qa, r_nu, m, p, collect: bool):
    """Shared exact filter loop, scalar-unrolled for speed.

    z, controls: (W,) observation and third-component control (controls[0]
    unused).  m = (m0, m1, m2), p = upper-triangular covariance (p00, p01,
    p02, p11, p12, p22).  Returns (sum_lnS, sum_e2S, n_terms, means, covs);
    the sums skip the first innovation.  means/covs are None unless collect.
    """
    m0, m1, m2 = m
    p00, p01, p02, p11, p12, p22 = p
    w = len(z)
    sum_ln = 0.0
    sum_e2 = 0.0
    means = covs = None
    if collect:
        means = np.empty((w, 3))
        covs = np.empty((w, 6))
        means[0] = (m0, m1, m2)
        covs[0] = (p00, p01, p02, p11, p12, p22)
    for t in range(1, w):
        # predict
        n0 = m0 + dt * m1
        n1 = m1 + dt * m2
        n2 = rho * m2 + controls[t]
        q0 = p00 + dt * (2.0 * p01 + dt * p11) + qx
        q1 = p01 + dt * (p11 + p02 + dt * p12)
        q2 = rho * (p02 + dt * p12)
        q3 = p11 + dt * (2.0 * p12 + dt * p22) + qv
        q4 = rho * (p12 + dt * p22)
        q5 = rho * rho * p22 + qa
        # scalar update with Joseph-form covariance
        s = q0 + r_nu
        if not (s > 0.0) or not math.isfinite(s):
            raise FilterNumericsError("innovation variance not positive", t)
        e = z[t] - n0
        k0 = q0 / s
        k1 = q1 / s
        k2 = q2 / s
        m0 = n0 + k0 * e
        m1 = n1 + k1 * e
        m2 = n2 + k2 * e
        b00 = q0 - k0 * q0
        b01 = q1 - k0 * q1
        b02 = q2 - k0 * q2
        b10 = q1 - k1 * q0
        b20 = q2 - k2 * q0
        p00 = b00 - k0 * b00 + r_nu * k0 * k0
        p01 = b01 - k1 * b00 + r_nu * k0 * k1
        p02 = b02 - k2 * b00 + r_nu * k0 * k2
        p11 = (q3 - k1 * q1) - k1 * b10 + r_nu * k1 * k1
        p12 = (q4 - k1 * q2) - k2 * b10 + r_nu * k1 * k2
        p22 = (q5 - k2 * q2) - k2 * b20 + r_nu * k2 * k2
        if t >= 2:
            sum_ln += math.log(s)
            sum_e2 += e * e / s
        if collect:
            means[t] = (m0, m1, m2)
            covs[t] = (p00, p01, p02, p11, p12, p22)
        if not math.isfinite(m0):
            raise FilterNumericsError("filter mean diverged", t)
    return sum_ln, sum_e2, w - 2, means, covs


def _prepare_filter_inputs(theta, z_series, perceived, grid, cfg, lengths):
    z = np.asarray(z_series, dtype=float)
    if len(z) != len(perceived):
        raise ValueError("observation series and perceived window differ in length")
    if len(z) < 3:
        raise ValueError("need at least 3 aligned samples")
    a_bar = mean_action_series(theta, perceived, grid, cfg, lengths)
    controls = np.empty_like(a_bar)
    controls[0] = 0.0
    controls[1:] = a_bar[1:] - theta.noise.rho * a_bar[:-1]
    start = init_filter(z[0], z[1], cfg.dt, theta.noise.sigma_nu)
    p = start.cov
    p6 = (p[0, 0], p[0, 1], p[0, 2], p[1, 1], p[1, 2], p[2, 2])
    return z, controls, tuple(start.mean), p6


def log_likelihood(
    theta: DriverParams,
    z_series,
    perceived: PerceivedSeries,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> float:
    """Innovation-form Gaussian log likelihood of one vehicle's positions.

    z_series must be unwrapped and aligned with the perceived window.  The
    control sequence comes from the mean action on the exogenous perceived
    states, so vehicles decouple.  The first innovation is left out of the
    sum (initialization is data-informed), and the -n/2 log(2 pi) constant
    is included so the value is a proper log density.
    """
    z, controls, m, p6 = _prepare_filter_inputs(theta, z_series, perceived, grid, cfg, lengths)
    noise = theta.noise
    sum_ln, sum_e2, bad_t = _loglik_scan(
        z,
        controls,
        cfg.dt,
        noise.rho,
        noise.sigma_x**2,
        noise.sigma_v**2,
        noise.sigma_a**2,
        noise.sigma_nu**2,
        m[0],
        m[1],
        m[2],
        *p6,
    )
    if bad_t >= 0:
        raise FilterNumericsError("filter recursion ill-posed", bad_t)
    n_terms = len(z) - 2
    out = -0.5 * (n_terms * math.log(2.0 * math.pi) + sum_ln + sum_e2)
    if not math.isfinite(out):
        raise FilterNumericsError("log likelihood is not finite", len(z) - 1)
    return out


@dataclass(frozen=True)
class FilteredStates:
    """Posterior filter means/covariances at every step of the window."""

    t0: int
    means: np.ndarray  # (W, 3)
    covs: np.ndarray  # (W, 3, 3)

    def __len__(self) -> int:
        return len(self.means)

    def state(self, k: int) -> FilterState:
        return FilterState(mean=self.means[k].copy(), cov=self.covs[k].copy())

    def sds(self) -> np.ndarray:
        """Marginal standard deviations (W, 3)."""
        return np.sqrt(np.maximum(self.covs[:, (0, 1, 2), (0, 1, 2)], 0.0))


def filtered_states(
    theta: DriverParams,
    z_series,
    perceived: PerceivedSeries,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    lengths: tuple[float, float],
) -> FilteredStates:
    """Posterior means and covariances per step for diagnostics and plots."""
    z, controls, m, p6 = _prepare_filter_inputs(theta, z_series, perceived, grid, cfg, lengths)
    noise = theta.noise
    _, _, _, means, covs6 = _filter_pass(
        z,
        controls,
        cfg.dt,
        noise.rho,
        noise.sigma_x**2,
        noise.sigma_v**2,
        noise.sigma_a**2,
        noise.sigma_nu**2,
        m,
        p6,
        collect=True,
    )
    w = len(z)
    covs = np.empty((w, 3, 3))
    covs[:, 0, 0] = covs6[:, 0]
    covs[:, 0, 1] = covs[:, 1, 0] = covs6[:, 1]
    covs[:, 0, 2] = covs[:, 2, 0] = covs6[:, 2]
    covs[:, 1, 1] = covs6[:, 3]
    covs[:, 1, 2] = covs[:, 2, 1] = covs6[:, 4]
    covs[:, 2, 2] = covs6[:, 5]
    return FilteredStates(t0=perceived.t0, means=means, covs=covs)
