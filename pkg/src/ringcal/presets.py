"""Canonical configurations for the classic ring-road experiments.

The 22-vehicle, 230 m circular-road setup (with per-vehicle lengths measured
from the original video), the reference driver parameters used in synthetic
ground-truth studies, the calibrated-magnitude driver used for collective
behavior scenarios, and builders for the standard worlds.
"""

from __future__ import annotations

import numpy as np

from .ssm import DriverParams, NoiseParams
from .sim import RingGeometry, ScenarioConfig, simulate
from .utility import AnticipationConfig, UtilityParams

__all__ = [
    "SUGIYAMA_CIRCUMFERENCE",
    "SUGIYAMA_DT",
    "SUGIYAMA_VEHICLE_LENGTHS",
    "TADAKI_CIRCUMFERENCE",
    "reference_driver",
    "calibrated_driver",
    "sugiyama_ring",
    "sugiyama_scenario",
    "recovery_scenario",
    "heterogeneous_fleet",
    "seeded_jam_state",
]

SUGIYAMA_CIRCUMFERENCE = 230.0
SUGIYAMA_DT = 1.0 / 3.0
TADAKI_CIRCUMFERENCE = 314.0

# longitudinal vehicle sizes (m) measured from the experiment video
SUGIYAMA_VEHICLE_LENGTHS = np.array(
    [
        3.52, 4.65, 3.68, 4.54, 3.90, 4.92, 4.87, 5.03, 4.62, 4.81, 4.92,
        3.95, 4.11, 3.95, 4.49, 4.81, 4.81, 3.57, 4.38, 4.06, 3.08, 4.71,
    ]
)


def reference_driver() -> DriverParams:
    """Ground-truth driver for synthetic recovery studies.

    The four free parameters sit at the reference point (sigma_nu=0.263,
    sigma_a=0.273, v*=10.26, kappa_v=0.215); the action noise is the
    deliberately reduced value that makes recovery conclusions unambiguous.
    """
    return DriverParams(
        utility=UtilityParams(
            v_star=10.26, kappa1=0.7, kappa_c=0.4, kappa_v=0.215, kappa_d=1.0,
            omega1=1.0, omega2=-10.0,
        ),
        noise=NoiseParams(sigma_nu=0.263, sigma_a=0.273, sigma_x=0.05, sigma_v=0.1, rho=0.7),
    )


def calibrated_driver() -> DriverParams:
    """Driver at the magnitudes of the individual-level fits on real data.

    Relative to the reduced reference vector, the risk premium and action
    noise sit at estimated-fit scale (kappa_v=0.36, sigma_a=0.6).  At these
    values the uniform flow on the 230 m / 22-vehicle ring is unstable
    enough that action noise nucleates stop-and-go waves within minutes,
    while runs at 0.5 noise deflation stay collision free.
    """
    return reference_driver().replace(kappa_v=0.36, sigma_a=0.6)


def sugiyama_ring() -> RingGeometry:
    return RingGeometry(
        circumference=SUGIYAMA_CIRCUMFERENCE,
        lengths=SUGIYAMA_VEHICLE_LENGTHS.copy(),
        dt=SUGIYAMA_DT,
    )


def sugiyama_scenario(seed: int = 0, T_steps: int = 750, **overrides) -> ScenarioConfig:
    """Baseline 22-vehicle ring scenario producing spontaneous shockwaves.

    Drivers default to the calibrated-magnitude parameters with the action
    noise deflated by 0.5, as in post-calibration forward studies.
    """
    kwargs = dict(
        ring=sugiyama_ring(),
        drivers=(calibrated_driver(),) * 22,
        anticipation=AnticipationConfig(h=4, dt=SUGIYAMA_DT),
        noise_deflation=0.5,
        accel_noise_on=True,
        process_noise_on=False,
        measurement_noise_on=False,
        initial_condition="equilibrium",
        T_steps=T_steps,
        seed=seed,
    )
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


def seeded_jam_state(ring: RingGeometry, n_stopped: int | None = None, free_speed: float = 8.0):
    """A hand-built stop-and-go state: a standing queue plus a moving platoon.

    Returns (x, v) suitable for a from_data initial condition.  Used to
    place synthetic-data runs inside the wave regime, where the reduced
    reference parameters sustain (but do not spontaneously create) waves.
    """
    n = ring.n
    lengths = ring.lengths
    if n_stopped is None:
        n_stopped = min(10, max(3, n // 2))
    x = np.zeros(n)
    v = np.zeros(n)
    pos = 0.0
    for i in range(n_stopped):
        x[i] = pos
        nxt = lengths[(i + 1) % n]
        pos += 0.5 * lengths[i] + 1.0 + 0.5 * nxt
    n_free = n - n_stopped
    spacing = (ring.circumference - pos) / n_free
    for k, i in enumerate(range(n_stopped, n)):
        x[i] = pos + k * spacing
        v[i] = free_speed
    return x, v


def recovery_scenario(seed: int = 0, T_steps: int = 750, warmup_steps: int = 300, **overrides) -> ScenarioConfig:
    """Synthetic data-generation world for the parameter-recovery study.

    Every vehicle carries the reference ground truth; the recorded window
    has all state-evolution noises and the measurement channel on, with the
    acceleration noise at its full (already reduced) reference scale.  The
    run starts inside the wave regime: a seeded queue is first relaxed by a
    deterministic noise-free warmup, because at the reference parameters
    stop-and-go waves sustain but do not self-nucleate, and the inversion
    needs the stop-and-go state variation to separate the ideal speed from
    the risk premium.
    """
    ring = sugiyama_ring()
    x0, v0 = seeded_jam_state(ring)
    warm = ScenarioConfig(
        ring=ring,
        drivers=(reference_driver(),) * 22,
        anticipation=AnticipationConfig(h=4, dt=SUGIYAMA_DT),
        accel_noise_on=False,
        initial_condition="from_data",
        initial_x=x0,
        initial_v=v0,
        T_steps=warmup_steps,
        seed=0,
    )
    out = simulate(warm)
    kwargs = dict(
        ring=ring,
        drivers=(reference_driver(),) * 22,
        anticipation=AnticipationConfig(h=4, dt=SUGIYAMA_DT),
        noise_deflation=1.0,
        accel_noise_on=True,
        process_noise_on=True,
        measurement_noise_on=True,
        initial_condition="from_data",
        initial_x=out.x[:, -1],
        initial_v=out.v[:, -1],
        T_steps=T_steps,
        seed=seed,
    )
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


def heterogeneous_fleet(seed: int, n: int = 22) -> tuple[DriverParams, ...]:
    """Fleet heterogeneous in execution steadiness (the action-noise scale).

    The individual-level fits spread most strongly in sigma_a, so the
    preset varies that dimension; preference parameters stay shared, which
    keeps heterogeneity and noise effects cleanly separable in ablation
    runs (a heterogeneous fleet with noise off behaves identically to the
    homogeneous one).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    base = calibrated_driver()
    fleet = []
    for _ in range(n):
        fleet.append(
            base.replace(sigma_a=float(np.clip(rng.normal(0.6, 0.12), 0.35, 0.95)))
        )
    return tuple(fleet)
