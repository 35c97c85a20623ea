"""Forward multi-agent simulation on a ring road.

Every step, all agents read the same time-t snapshot, pick their mean (or
argmax) action from the decision model, and realize it through an AR(1)
disturbance; kinematics then advance synchronously.  Scenario builders cover
the standard ring experiment, single-agent overrides (low ideal speed, high
risk premium), a density sweep on a 314 m ring, a 3x-scaled single-lane
highway variant, time-step rescaling, and vehicle reshuffling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .decision import ActionGrid, mean_actions_batch, optimal_actions_batch
from .ingest import PerceivedSeries, neighbor_maps, unwrap_positions
from .ssm import DriverParams, NoiseParams
from .utility import AnticipationConfig, UtilityParams

__all__ = [
    "RingGeometry",
    "ScenarioConfig",
    "WorldState",
    "SimOutput",
    "step",
    "simulate",
    "scenario_low_ideal_speed",
    "scenario_high_risk_premium",
    "scenario_tadaki",
    "scenario_highway",
    "rescale_dt",
    "shuffle_order",
    "average_driver",
    "true_perceived_states",
]


@dataclass(frozen=True)
class RingGeometry:
    """Circular road: circumference, per-vehicle lengths, sampling period."""

    circumference: float
    lengths: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=float))
        if self.circumference <= 0 or self.dt <= 0:
            raise ValueError("circumference and dt must be positive")
        if self.lengths.ndim != 1 or np.any(self.lengths <= 0):
            raise ValueError("lengths must be a positive 1-d array")
        if self.lengths.sum() >= self.circumference:
            raise ValueError("vehicles do not fit on the ring")

    @property
    def n(self) -> int:
        return len(self.lengths)


@dataclass(frozen=True)
class ScenarioConfig:
    """A complete simulation world for one experiment or counterfactual."""

    ring: RingGeometry
    drivers: tuple[DriverParams, ...]
    grid: ActionGrid = ActionGrid()
    anticipation: AnticipationConfig = AnticipationConfig()
    noise_deflation: float = 0.5
    accel_noise_on: bool = True
    process_noise_on: bool = False
    measurement_noise_on: bool = False
    heterogeneity_on: bool = True
    initial_condition: str = "equilibrium"
    initial_speed: float = 6.0
    perturbation_dv: float = 2.0
    initial_x: np.ndarray | None = None
    initial_v: np.ndarray | None = None
    T_steps: int = 750
    seed: int = 0
    burn_in_s: float = 60.0
    use_mean_action: bool = True
    highway_scaled: bool = False

    def __post_init__(self):
        if len(self.drivers) != self.ring.n:
            raise ValueError("one DriverParams per vehicle required")
        if not (0.0 <= self.noise_deflation <= 1.0):
            raise ValueError("noise_deflation must lie in [0, 1]")
        if self.T_steps < 0:
            raise ValueError("T_steps must be nonnegative")
        if self.initial_condition not in ("equilibrium", "perturbed", "from_data"):
            raise ValueError(f"unknown initial condition {self.initial_condition!r}")
        if abs(self.anticipation.dt - self.ring.dt) > 1e-12:
            raise ValueError("anticipation dt must match the ring dt")


@dataclass
class WorldState:
    """Mutable per-step world: wrapped positions, speeds, action memory."""

    x: np.ndarray
    v: np.ndarray
    a_prev: np.ndarray
    mean_a_prev: np.ndarray
    pred: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class SimOutput:
    """Trajectories (snapshots t = 0..T_steps), collisions, and the run recipe.

    a[:, t] is the action realized at snapshot t (the final column is
    decided but never applied); z carries wrapped noisy measurements when
    the scenario includes measurement noise.
    """

    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    z: np.ndarray | None
    collisions: tuple[tuple[int, int], ...]
    config: ScenarioConfig
    seed: int

    @property
    def n_vehicles(self) -> int:
        return self.x.shape[0]

    @property
    def n_samples(self) -> int:
        return self.x.shape[1]

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.config.ring.dt


def average_driver(drivers: Sequence[DriverParams]) -> DriverParams:
    """Fleet-average agent: mean of every numeric utility/noise field."""
    util_fields = {
        name: float(np.mean([getattr(d.utility, name) for d in drivers]))
        for name in ("v_star", "kappa1", "kappa_c", "kappa_v", "kappa_d", "omega2")
    }
    noise_fields = {
        name: float(np.mean([getattr(d.noise, name) for d in drivers]))
        for name in ("sigma_nu", "sigma_a", "sigma_x", "sigma_v", "rho")
    }
    return DriverParams(
        utility=UtilityParams(omega1=1.0, **util_fields),
        noise=NoiseParams(**noise_fields),
    )


@dataclass(frozen=True)
class _Fleet:
    """Per-agent parameters stacked into arrays for the vectorized step."""

    util: UtilityParams
    sigma_a: np.ndarray
    sigma_x: np.ndarray
    sigma_v: np.ndarray
    rho: np.ndarray
    half_gap_lengths: np.ndarray  # (L_self + L_pred)/2 aligned with pred map


def _effective_drivers(cfg: ScenarioConfig) -> tuple[DriverParams, ...]:
    if cfg.heterogeneity_on:
        return tuple(cfg.drivers)
    return (average_driver(cfg.drivers),) * cfg.ring.n


def _stack_fleet(cfg: ScenarioConfig, pred: np.ndarray) -> _Fleet:
    drivers = _effective_drivers(cfg)

    def arr(group, name):
        return np.array([getattr(getattr(d, group), name) for d in drivers])

    util = UtilityParams(
        v_star=arr("utility", "v_star"),
        kappa1=arr("utility", "kappa1"),
        kappa_c=arr("utility", "kappa_c"),
        kappa_v=arr("utility", "kappa_v"),
        kappa_d=arr("utility", "kappa_d"),
        omega1=1.0,
        omega2=arr("utility", "omega2"),
    )
    lengths = cfg.ring.lengths
    return _Fleet(
        util=util,
        sigma_a=arr("noise", "sigma_a"),
        sigma_x=arr("noise", "sigma_x"),
        sigma_v=arr("noise", "sigma_v"),
        rho=arr("noise", "rho"),
        half_gap_lengths=0.5 * (lengths + lengths[pred]),
    )


def _center_gaps(x: np.ndarray, pred: np.ndarray, c: float) -> np.ndarray:
    """Center-to-center distance to the predecessor, in [0, C)."""
    if len(x) == 1:
        return np.array([c])
    return np.mod(x[pred] - x, c)


def _initial_world(cfg: ScenarioConfig) -> WorldState:
    n, c = cfg.ring.n, cfg.ring.circumference
    if cfg.initial_condition == "from_data":
        if cfg.initial_x is None or cfg.initial_v is None:
            raise ValueError("from_data initial condition needs initial_x and initial_v")
        x = np.mod(np.asarray(cfg.initial_x, dtype=float), c)
        v = np.asarray(cfg.initial_v, dtype=float).copy()
    elif n == 0:
        x = np.empty(0)
        v = np.empty(0)
    else:
        # equilibrium: equal bumper-to-bumper gaps (the symmetric state of the
        # dynamics, which see gaps only), vehicle i+1 ahead of vehicle i
        lengths = cfg.ring.lengths
        gap = (c - lengths.sum()) / n
        spacing = gap + 0.5 * (lengths + np.roll(lengths, -1))
        x = np.concatenate(([0.0], np.cumsum(spacing[:-1])))
        v = np.full(n, cfg.initial_speed)
        if cfg.initial_condition == "perturbed":
            v = v.copy()
            v[0] -= cfg.perturbation_dv
    pred, _ = neighbor_maps(x, c)
    return WorldState(
        x=x.astype(float),
        v=v.astype(float),
        a_prev=np.zeros(n),
        mean_a_prev=np.zeros(n),
        pred=pred,
        step_index=0,
    )


def _decide(world: WorldState, cfg: ScenarioConfig, fleet: _Fleet) -> np.ndarray:
    gaps = _center_gaps(world.x, world.pred, cfg.ring.circumference) - fleet.half_gap_lengths
    v_pred = world.v[world.pred]
    if cfg.use_mean_action:
        return mean_actions_batch(gaps, world.v, v_pred, fleet.util, cfg.grid, cfg.anticipation)
    return optimal_actions_batch(gaps, world.v, v_pred, fleet.util, cfg.grid, cfg.anticipation)


def _realize_actions(world, cfg, fleet, rngs) -> tuple[np.ndarray, np.ndarray]:
    mean_a = _decide(world, cfg, fleet)
    a = mean_a + fleet.rho * (world.a_prev - world.mean_a_prev)
    if cfg.accel_noise_on:
        scale = cfg.noise_deflation * fleet.sigma_a
        a = a + np.array([rngs[i].normal(0.0, scale[i]) for i in range(len(a))])
    return a, mean_a


def _step_inner(world, cfg, fleet, rngs) -> tuple[WorldState, np.ndarray, np.ndarray, list]:
    a, mean_a = _realize_actions(world, cfg, fleet, rngs)
    dt, c = cfg.ring.dt, cfg.ring.circumference
    x_new = world.x + dt * world.v
    v_new = world.v + dt * a
    if cfg.process_noise_on:
        for i in range(len(a)):
            x_new[i] += rngs[i].normal(0.0, fleet.sigma_x[i])
            v_new[i] += rngs[i].normal(0.0, fleet.sigma_v[i])
    x_new = np.mod(x_new, c)
    if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(v_new)):
        raise RuntimeError(f"nonfinite state at step {world.step_index + 1}")
    new = WorldState(
        x=x_new,
        v=v_new,
        a_prev=a,
        mean_a_prev=mean_a,
        pred=world.pred,
        step_index=world.step_index + 1,
    )
    bumper = _center_gaps(x_new, world.pred, c) - fleet.half_gap_lengths
    events = [(new.step_index, int(i)) for i in np.flatnonzero(bumper < 0.0)]
    return new, a, mean_a, events


def step(world: WorldState, cfg: ScenarioConfig, rngs: Sequence[np.random.Generator]) -> WorldState:
    """Advance the world one step (synchronous update from the time-t snapshot)."""
    fleet = _stack_fleet(cfg, world.pred)
    new, _, _, _ = _step_inner(world, cfg, fleet, rngs)
    return new


def _spawn_rngs(seed: int, n: int) -> tuple[list, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n + 1)
    agent_rngs = [np.random.default_rng(s) for s in children[:n]]
    return agent_rngs, np.random.default_rng(children[n])


def simulate(cfg: ScenarioConfig) -> SimOutput:
    """Run a scenario for T_steps and record all snapshots.

    Per-agent noise streams are split from the master seed, so the result is
    a pure function of (config, seed) regardless of any internal parallelism.
    """
    n = cfg.ring.n
    world = _initial_world(cfg)
    fleet = _stack_fleet(cfg, world.pred)
    rngs, meas_rng = _spawn_rngs(cfg.seed, n)

    t_total = cfg.T_steps + 1
    x = np.empty((n, t_total))
    v = np.empty((n, t_total))
    a = np.empty((n, t_total))
    x[:, 0] = world.x
    v[:, 0] = world.v
    collisions: list[tuple[int, int]] = []
    bumper0 = _center_gaps(world.x, world.pred, cfg.ring.circumference) - fleet.half_gap_lengths
    collisions.extend((0, int(i)) for i in np.flatnonzero(bumper0 < 0.0))

    for t in range(cfg.T_steps):
        world, a_t, _, events = _step_inner(world, cfg, fleet, rngs)
        a[:, t] = a_t
        x[:, t + 1] = world.x
        v[:, t + 1] = world.v
        collisions.extend(events)
    # final snapshot's action: decided from the last state but never applied
    a_final, _ = _realize_actions(world, cfg, fleet, rngs)
    a[:, cfg.T_steps] = a_final

    z = None
    if cfg.measurement_noise_on:
        sigma_nu = np.array([d.noise.sigma_nu for d in _effective_drivers(cfg)])
        noise = meas_rng.normal(0.0, 1.0, size=(n, t_total)) * sigma_nu[:, None]
        z = np.mod(x + noise, cfg.ring.circumference)
    return SimOutput(
        x=x, v=v, a=a, z=z, collisions=tuple(collisions), config=cfg, seed=cfg.seed
    )


def true_perceived_states(out: SimOutput) -> list[PerceivedSeries]:
    """Perceived-state sequences built from the simulator's exact states.

    This is the no-proxy-error counterpart of the smoothing pipeline: each
    driver sees the true neighbor positions/velocities at every snapshot.
    """
    cfg = out.config
    c = cfg.ring.circumference
    n = out.n_vehicles
    pred, foll = neighbor_maps(out.x[:, 0], c)
    series = []
    for i in range(n):
        p, f = int(pred[i]), int(foll[i])
        self_pos = unwrap_positions(out.x[i], c)
        gap_ahead = np.mod(out.x[p] - out.x[i], c) if n > 1 else np.full(out.n_samples, c)
        gap_behind = np.mod(out.x[i] - out.x[f], c) if n > 1 else np.full(out.n_samples, c)
        series.append(
            PerceivedSeries(
                t0=0,
                pred_pos=self_pos + gap_ahead,
                pred_vel=out.v[p].copy(),
                self_pos=self_pos,
                self_vel=out.v[i].copy(),
                foll_pos=self_pos - gap_behind,
                foll_vel=out.v[f].copy(),
            )
        )
    return series


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------

V_STAR_BOUNDS = (6.0, 15.0)


def _replace_driver(cfg: ScenarioConfig, index: int, **overrides) -> ScenarioConfig:
    drivers = list(cfg.drivers)
    drivers[index] = drivers[index].replace(**overrides)
    return replace(cfg, drivers=tuple(drivers))


def scenario_low_ideal_speed(base: ScenarioConfig, v0_star: float) -> ScenarioConfig:
    """Force vehicle 0 to a lower ideal speed (wave-suppression probe)."""
    if not (V_STAR_BOUNDS[0] <= v0_star <= V_STAR_BOUNDS[1]):
        raise ValueError(f"v0_star {v0_star} outside bounds {V_STAR_BOUNDS}")
    return _replace_driver(base, 0, v_star=v0_star)


def scenario_high_risk_premium(base: ScenarioConfig, kappa0_v: float) -> ScenarioConfig:
    """Force vehicle 0 to a much larger speed-dependent headway scale."""
    if kappa0_v <= 0:
        raise ValueError("kappa0_v must be positive")
    return _replace_driver(base, 0, kappa_v=kappa0_v)


def scenario_tadaki(
    n: int,
    driver: DriverParams,
    circumference: float = 314.0,
    vehicle_length: float = 4.335,
    dt: float = 1.0 / 3.0,
    **overrides,
) -> ScenarioConfig:
    """Identical vehicles on a 314 m ring; density set by the vehicle count."""
    if n < 0:
        raise ValueError("vehicle count must be nonnegative")
    ring = RingGeometry(
        circumference=circumference,
        lengths=np.full(n, vehicle_length),
        dt=dt,
    )
    kwargs = dict(
        ring=ring,
        drivers=(driver,) * n,
        anticipation=AnticipationConfig(dt=dt),
        noise_deflation=1.0,
    )
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


def scenario_highway(base: ScenarioConfig) -> ScenarioConfig:
    """Scale the ring to a single-lane highway: C x3, v* x3, kappa_v x3, kappa_c x5.

    Vehicle count is kept fixed.  The transformation is deliberately not
    idempotent, so configs remember they have been scaled.
    """
    if base.highway_scaled:
        raise ValueError("config is already highway-scaled")
    ring = RingGeometry(
        circumference=3.0 * base.ring.circumference,
        lengths=base.ring.lengths,
        dt=base.ring.dt,
    )
    drivers = tuple(
        d.replace(
            v_star=3.0 * d.utility.v_star,
            kappa_v=3.0 * d.utility.kappa_v,
            kappa_c=5.0 * d.utility.kappa_c,
        )
        for d in base.drivers
    )
    return replace(base, ring=ring, drivers=drivers, highway_scaled=True)


def rescale_dt(cfg: ScenarioConfig, new_dt: float) -> ScenarioConfig:
    """Change the step length, preserving look-ahead time, AR memory, and duration.

    h becomes floor(h dt / new_dt) so the anticipation window never grows;
    rho is re-expressed per new step as rho ** (new_dt / old_dt); T_steps is
    rescaled to keep the simulated time span.
    """
    if new_dt <= 0:
        raise ValueError("new_dt must be positive")
    old_dt = cfg.ring.dt
    if abs(new_dt - old_dt) < 1e-12:
        return cfg
    exponent = new_dt / old_dt
    horizon = cfg.anticipation.h * old_dt
    new_h = int(horizon / new_dt + 1e-9)
    drivers = tuple(d.replace(rho=d.noise.rho**exponent) for d in cfg.drivers)
    ring = replace(cfg.ring, dt=new_dt)
    anticipation = replace(cfg.anticipation, h=new_h, dt=new_dt)
    t_steps = int(round(cfg.T_steps * old_dt / new_dt))
    return replace(
        cfg, ring=ring, drivers=drivers, anticipation=anticipation, T_steps=t_steps
    )


def shuffle_order(
    cfg: ScenarioConfig,
    permutation: Sequence[int] | None = None,
    seed: int | None = None,
) -> ScenarioConfig:
    """Reassign drivers (and their vehicles' lengths) to ring slots."""
    n = cfg.ring.n
    if permutation is None:
        if seed is None:
            raise ValueError("provide a permutation or a seed")
        permutation = np.random.default_rng(seed).permutation(n)
    perm = np.asarray(permutation, dtype=int)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("not a permutation of range(n)")
    drivers = tuple(cfg.drivers[i] for i in perm)
    ring = replace(cfg.ring, lengths=cfg.ring.lengths[perm])
    return replace(cfg, drivers=drivers, ring=ring)
