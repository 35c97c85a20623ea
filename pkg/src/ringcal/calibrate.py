"""Per-vehicle maximum-likelihood calibration of the free parameter subset.

Four parameters are identifiable in practice (measurement noise, action
noise, ideal speed, speed-dependent risk premium); the rest are held fixed.
The objective is the filter log likelihood plus quadratic pulls of the ideal
speed and risk premium toward fleet-level anchors, maximized by basin
hopping over a bounded, partially log-transformed search space.  Vehicles
calibrate independently and may run in parallel without changing results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .decision import ActionGrid
from .ingest import (
    PerceivedSeries,
    RawTrajectorySet,
    build_perceived_states,
    neighbor_maps,
    unwrap_positions,
)
from .ssm import (
    FREE_PARAMS,
    DriverParams,
    FilterNumericsError,
    FilteredStates,
    NoiseParams,
    filtered_states,
    log_likelihood,
)
from .utility import AnticipationConfig, UtilityParams

__all__ = [
    "RegularizationConfig",
    "CalibrationConfig",
    "VehicleData",
    "CalibrationResult",
    "CalibrationSet",
    "DEFAULT_BOUNDS",
    "regularized_objective",
    "calibrate_vehicle",
    "calibrate_all",
    "hessian_spectrum",
    "likelihood_hessian_spectrum",
    "dataset_from_sim",
    "dataset_from_raw",
]

DEFAULT_BOUNDS = {
    "sigma_nu": (0.02, 1.0),
    "sigma_a": (0.02, 2.0),
    "v_star": (6.0, 15.0),
    "kappa_v": (0.02, 2.0),
}

#: parameters searched in log space (positive scales)
_LOG_SCALE = ("sigma_nu", "sigma_a")

#: full parameter vector order for Hessian diagnostics
ALL_PARAMS = (
    "sigma_nu",
    "sigma_a",
    "v_star",
    "kappa_v",
    "sigma_x",
    "sigma_v",
    "rho",
    "kappa1",
    "kappa_c",
    "kappa_d",
    "omega2",
)


@dataclass(frozen=True)
class RegularizationConfig:
    """Quadratic pulls of v* and kappa_v toward fleet-level anchor values."""

    gamma_v: float = 50.0
    gamma_kappa: float = 500.0
    v_bar: float = 11.0
    kappa_bar: float = 0.5

    def __post_init__(self):
        if self.gamma_v < 0 or self.gamma_kappa < 0:
            raise ValueError("regularization weights must be nonnegative")

    def penalty(self, v_star: float, kappa_v: float) -> float:
        return self.gamma_v * (v_star - self.v_bar) ** 2 + self.gamma_kappa * (
            kappa_v - self.kappa_bar
        ) ** 2


@dataclass(frozen=True)
class CalibrationConfig:
    """Search setup: fixed minor parameters, bounds, and basin-hopping budget."""

    base: DriverParams = field(
        default_factory=lambda: DriverParams(utility=UtilityParams(), noise=NoiseParams())
    )
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    reg: RegularizationConfig = RegularizationConfig()
    grid: ActionGrid = ActionGrid()
    anticipation: AnticipationConfig = AnticipationConfig()
    n_hops: int = 20
    local_max_evals: int = 400
    local_xatol: float = 1e-6
    local_fatol: float = 1e-6
    step_fraction: float = 0.15
    temperature: float = 1.0
    collect_filtered: bool = True


@dataclass(frozen=True)
class VehicleData:
    """One vehicle's calibration input: aligned observations and scene states."""

    vehicle_id: int
    z: np.ndarray
    perceived: PerceivedSeries
    length_self: float
    length_pred: float

    def lengths(self) -> tuple[float, float]:
        return (self.length_self, self.length_pred)


@dataclass(frozen=True)
class CalibrationResult:
    vehicle_id: int
    theta: DriverParams
    estimates: dict
    objective: float
    log_lik: float
    penalty_ratio: float
    n_hops: int
    n_evals: int
    converged: bool
    filtered: FilteredStates | None


@dataclass(frozen=True)
class CalibrationSet:
    """All per-vehicle results plus isolated failures and fleet aggregates."""

    results: tuple[CalibrationResult, ...]
    failures: tuple[tuple[int, str], ...]

    def estimates_table(self) -> dict:
        """Cross-vehicle mean and SD per free parameter."""
        table = {}
        for name in FREE_PARAMS:
            vals = np.array([r.estimates[name] for r in self.results])
            table[name] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=0))}
        return table


def _theta_with(base: DriverParams, free_values: np.ndarray) -> DriverParams:
    return base.replace(**dict(zip(FREE_PARAMS, map(float, free_values))))


def regularized_objective(
    free_values,
    data: VehicleData,
    reg: RegularizationConfig,
    base: DriverParams,
    grid: ActionGrid,
    cfg: AnticipationConfig,
) -> float:
    """Log likelihood minus the anchor penalties, at natural-unit free values.

    free_values follows FREE_PARAMS order: (sigma_nu, sigma_a, v_star,
    kappa_v).
    """
    theta = _theta_with(base, np.asarray(free_values, dtype=float))
    ll = log_likelihood(theta, data.z, data.perceived, grid, cfg, data.lengths())
    return ll - reg.penalty(theta.utility.v_star, theta.utility.kappa_v)


def _to_search(values: np.ndarray) -> np.ndarray:
    out = values.astype(float).copy()
    for k, name in enumerate(FREE_PARAMS):
        if name in _LOG_SCALE:
            out[k] = math.log(out[k])
    return out


def _from_search(x: np.ndarray) -> np.ndarray:
    out = np.asarray(x, dtype=float).copy()
    for k, name in enumerate(FREE_PARAMS):
        if name in _LOG_SCALE:
            out[k] = math.exp(out[k])
    return out


class _BoundedStep:
    """Basin-hopping proposal: per-coordinate uniform kick, clipped to bounds."""

    def __init__(self, scales, lo, hi, rng):
        self.scales = np.asarray(scales)
        self.lo = np.asarray(lo)
        self.hi = np.asarray(hi)
        self.rng = rng

    def __call__(self, x):
        kicked = x + self.rng.uniform(-1.0, 1.0, size=len(x)) * self.scales
        return np.clip(kicked, self.lo, self.hi)


def calibrate_vehicle(
    data: VehicleData,
    config: CalibrationConfig,
    seed,
    init: np.ndarray | None = None,
) -> CalibrationResult:
    """Basin-hopping maximum of the regularized likelihood for one vehicle.

    Deterministic given (data, config, seed).  seed may be an int or a
    numpy SeedSequence.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    step_ss, metro_ss = ss.spawn(2)

    lo = np.array([config.bounds[name][0] for name in FREE_PARAMS])
    hi = np.array([config.bounds[name][1] for name in FREE_PARAMS])
    tlo, thi = _to_search(lo), _to_search(hi)

    if init is None:
        natural = 0.5 * (lo + hi)
        natural[FREE_PARAMS.index("sigma_nu")] = math.sqrt(lo[0] * hi[0])
        natural[FREE_PARAMS.index("sigma_a")] = math.sqrt(lo[1] * hi[1])
        natural[FREE_PARAMS.index("v_star")] = config.reg.v_bar
        natural[FREE_PARAMS.index("kappa_v")] = config.reg.kappa_bar
        init = natural
    x0 = _to_search(np.clip(np.asarray(init, dtype=float), lo, hi))

    n_evals = 0

    def neg_objective(xt):
        nonlocal n_evals
        n_evals += 1
        free = np.clip(_from_search(xt), lo, hi)
        try:
            val = regularized_objective(
                free, data, config.reg, config.base, config.grid, config.anticipation
            )
        except (FilterNumericsError, FloatingPointError):
            return 1e12
        if not math.isfinite(val):
            return 1e12
        return -val

    take_step = _BoundedStep(
        scales=config.step_fraction * (thi - tlo),
        lo=tlo,
        hi=thi,
        rng=np.random.default_rng(step_ss),
    )
    # tolerances are relative: to the objective magnitude at the start and
    # to the (transformed) parameter ranges
    f0 = neg_objective(x0)
    minimizer_kwargs = dict(
        method="Nelder-Mead",
        bounds=list(zip(tlo, thi)),
        options=dict(
            maxfev=config.local_max_evals,
            xatol=config.local_xatol * float(np.max(thi - tlo)),
            fatol=config.local_fatol * max(1.0, abs(f0)),
        ),
    )
    opt = scipy.optimize.basinhopping(
        neg_objective,
        x0,
        niter=config.n_hops,
        T=config.temperature,
        take_step=take_step,
        minimizer_kwargs=minimizer_kwargs,
        seed=np.random.default_rng(metro_ss),
    )
    best = np.clip(_from_search(opt.x), lo, hi)
    theta = _theta_with(config.base, best)
    objective = -float(opt.fun)
    # converged: the search produced a finite objective and improved on (or
    # at least matched a successful local polish of) the starting point
    improved = float(opt.fun) <= f0 + 1e-12
    converged = objective > -1e11 and (improved or bool(opt.lowest_optimization_result.success))

    ll = log_likelihood(
        theta, data.z, data.perceived, config.grid, config.anticipation, data.lengths()
    )
    penalty = config.reg.penalty(theta.utility.v_star, theta.utility.kappa_v)
    ratio = abs(penalty) / max(abs(ll), 1e-12)
    filtered = None
    if config.collect_filtered:
        filtered = filtered_states(
            theta, data.z, data.perceived, config.grid, config.anticipation, data.lengths()
        )
    return CalibrationResult(
        vehicle_id=data.vehicle_id,
        theta=theta,
        estimates=dict(zip(FREE_PARAMS, map(float, best))),
        objective=objective,
        log_lik=float(ll),
        penalty_ratio=float(ratio),
        n_hops=config.n_hops,
        n_evals=n_evals,
        converged=converged,
        filtered=filtered,
    )


def _calibrate_job(args):
    data, config, child_ss = args
    try:
        return data.vehicle_id, calibrate_vehicle(data, config, child_ss), None
    except Exception as exc:  # isolate per-vehicle failures
        return data.vehicle_id, None, f"{type(exc).__name__}: {exc}"


def calibrate_all(
    dataset: list[VehicleData],
    config: CalibrationConfig,
    seed: int,
    jobs: int = 1,
) -> CalibrationSet:
    """Calibrate every vehicle independently; failures are isolated.

    The RNG is split per vehicle from the master seed, so serial and
    parallel runs agree exactly.
    """
    if not dataset:
        return CalibrationSet(results=(), failures=())
    children = np.random.SeedSequence(seed).spawn(len(dataset))
    job_args = [(data, config, child) for data, child in zip(dataset, children)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_calibrate_job, job_args))
    else:
        outcomes = [_calibrate_job(a) for a in job_args]
    results = []
    failures = []
    for vid, res, err in outcomes:
        if err is None:
            results.append(res)
        else:
            failures.append((vid, err))
    return CalibrationSet(results=tuple(results), failures=tuple(failures))


def hessian_spectrum(fn, x0, rel_step: float = 1e-3) -> np.ndarray:
    """Eigenvalues (descending) of the central-difference Hessian of fn at x0.

    Steps are rel_step times the parameter scale (with a unit fallback for
    zero entries).  Raises if any difference is nonfinite.
    """
    x0 = np.asarray(x0, dtype=float)
    p = len(x0)
    steps = rel_step * np.where(np.abs(x0) > 1e-8, np.abs(x0), 1.0)
    hess = np.empty((p, p))
    f0 = fn(x0)
    # diagonal entries
    for i in range(p):
        x_plus = x0.copy()
        x_plus[i] += steps[i]
        x_minus = x0.copy()
        x_minus[i] -= steps[i]
        hess[i, i] = (fn(x_plus) - 2.0 * f0 + fn(x_minus)) / steps[i] ** 2
    # off-diagonal entries
    for i in range(p):
        for j in range(i + 1, p):
            xs = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                x = x0.copy()
                x[i] += si * steps[i]
                x[j] += sj * steps[j]
                xs.append(fn(x))
            val = (xs[0] - xs[1] - xs[2] + xs[3]) / (4.0 * steps[i] * steps[j])
            hess[i, j] = hess[j, i] = val
    if not np.all(np.isfinite(hess)):
        bad = np.argwhere(~np.isfinite(hess))
        raise FloatingPointError(f"nonfinite Hessian entries at {bad.tolist()}")
    hess = 0.5 * (hess + hess.T)
    eig = np.linalg.eigvalsh(hess)
    return eig[::-1]


def likelihood_hessian_spectrum(
    theta: DriverParams,
    data: VehicleData,
    grid: ActionGrid,
    cfg: AnticipationConfig,
    param_names: tuple[str, ...] = ALL_PARAMS,
    rel_step: float = 1e-3,
) -> np.ndarray:
    """Spectrum of the unregularized likelihood Hessian over named parameters."""
    x0 = np.array([theta.value(name) for name in param_names])

    def fn(vec):
        t = theta.replace(**dict(zip(param_names, map(float, vec))))
        return log_likelihood(t, data.z, data.perceived, grid, cfg, data.lengths())

    return hessian_spectrum(fn, x0, rel_step=rel_step)


# ---------------------------------------------------------------------------
# dataset builders
# ---------------------------------------------------------------------------


def dataset_from_sim(out) -> list[VehicleData]:
    """Calibration dataset from a simulation: exact scene states, measured z.

    Uses the simulator's measurement channel when present (otherwise the
    true positions), unwrapped per vehicle over the full run.
    """
    from .sim import true_perceived_states

    cfg = out.config
    c = cfg.ring.circumference
    observed = out.z if out.z is not None else out.x
    perceived = true_perceived_states(out)
    pred, _ = neighbor_maps(out.x[:, 0], c)
    lengths = cfg.ring.lengths
    dataset = []
    for i in range(out.n_vehicles):
        dataset.append(
            VehicleData(
                vehicle_id=i,
                z=unwrap_positions(observed[i], c),
                perceived=perceived[i],
                length_self=float(lengths[i]),
                length_pred=float(lengths[int(pred[i])]),
            )
        )
    return dataset


def dataset_from_raw(raw: RawTrajectorySet) -> list[VehicleData]:
    """Calibration dataset from recorded data: smoothed scene states, raw z.

    Observations are the raw (unwrapped) positions on the perceived window;
    the scene states come from the smoothing pipeline.
    """
    perceived = build_perceived_states(raw)
    z_full = unwrap_positions(raw.positions, raw.circumference)
    pred, _ = neighbor_maps(raw.positions[:, 0], raw.circumference)
    dataset = []
    for i in range(raw.n_vehicles):
        series = perceived[i]
        window = slice(series.t0, series.t0 + len(series))
        dataset.append(
            VehicleData(
                vehicle_id=i,
                z=z_full[i, window].copy(),
                perceived=series,
                length_self=float(raw.vehicle_lengths[i]),
                length_pred=float(raw.vehicle_lengths[int(pred[i])]),
            )
        )
    return dataset
