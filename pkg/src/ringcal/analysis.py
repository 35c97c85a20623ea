"""Collective-behavior metrics and post-calibration reporting.

Covers the system-level speed profile, automated reading of stop-and-go
wave features (queue sizes, upstream wave speed, quasi-periodic amplitude of
the average speed), hierarchical driver-type clustering in parameter space,
the flow-density fundamental diagram, and parameter-recovery summaries for
synthetic studies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .ingest import ring_order
from .ssm import FREE_PARAMS

__all__ = [
    "SpeedProfile",
    "WaveMetrics",
    "ClusterResult",
    "FundamentalDiagramPoint",
    "speed_profile",
    "wave_metrics",
    "cluster_drivers",
    "fundamental_diagram",
    "recovery_report",
    "CLUSTER_FEATURES",
]

CLUSTER_FEATURES = ("sigma_a", "v_star", "kappa_v")


@dataclass(frozen=True)
class SpeedProfile:
    """Per-time fleet speed statistics."""

    v_avg: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray

    @property
    def v_range(self) -> np.ndarray:
        return self.v_max - self.v_min


def speed_profile(velocities) -> SpeedProfile:
    """Mean/min/max speed across the fleet at every sample."""
    v = np.asarray(velocities, dtype=float)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError("velocities must be a (N, T) array")
    prof = SpeedProfile(v_avg=v.mean(axis=0), v_min=v.min(axis=0), v_max=v.max(axis=0))
    assert np.all(prof.v_min <= prof.v_avg + 1e-12) and np.all(prof.v_avg <= prof.v_max + 1e-12)
    assert np.all(prof.v_range >= -1e-12)
    return prof


@dataclass(frozen=True)
class WaveMetrics:
    """Stop-and-go wave features; wave speed is None when no wave exists."""

    backward_wave_speed: float | None
    mean_queue_length: float | None
    queue_event_frequency: float
    quasi_period_amplitude: float
    n_tracks: int


def _circular_runs(mask: np.ndarray) -> list[np.ndarray]:
    """Maximal runs of True in a circular boolean array, as index arrays."""
    n = len(mask)
    if mask.all():
        return [np.arange(n)]
    if not mask.any():
        return []
    # rotate so the array starts on a False element, then find linear runs
    start = int(np.flatnonzero(~mask)[0])
    rotated = np.roll(mask, -start)
    edges = np.diff(np.concatenate(([0], rotated.astype(int), [0])))
    begins = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(np.arange(b, e) + start) % n for b, e in zip(begins, ends)]


def _circ_dist(a: float, b: float, c: float) -> float:
    d = (a - b) % c
    return min(d, c - d)


def wave_metrics(
    x,
    v,
    dt: float,
    circumference: float,
    slow_threshold: float = 2.0,
    burn_in_s: float = 0.0,
    min_track_s: float = 5.0,
    match_gate: float | None = None,
) -> WaveMetrics:
    """Read wave features off trajectories (wrapped positions, speeds).

    Slow clusters are maximal contiguous ring segments below the speed
    threshold; their centroids are tracked over time and the wave speed is
    the track-length-weighted least-squares slope of centroid position
    (negative = upstream).  The quasi-period amplitude is the largest DFT
    amplitude of the detrended average speed at periods of 20-100 s.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n, t_total = x.shape
    c = circumference
    skip = int(round(burn_in_s / dt))
    if t_total - skip < 4:
        raise ValueError("too few samples after burn-in")
    x = x[:, skip:]
    v = v[:, skip:]
    t_total = x.shape[1]
    duration = (t_total - 1) * dt

    order = ring_order(x[:, 0], c)
    if match_gate is None:
        match_gate = max(3.0 * c / max(n, 1), 10.0)

    # frame-by-frame clusters and greedy frame-to-frame tracking
    tracks: list[dict] = []
    active: list[dict] = []
    sizes: list[int] = []
    for t in range(t_total):
        slow_ordered = v[order, t] < slow_threshold
        runs = _circular_runs(slow_ordered)
        cents = []
        for run in runs:
            members = order[run]
            rel = np.mod(x[members, t] - x[members[0], t], c)
            cents.append((x[members[0], t] + rel.mean()) % c)
            sizes.append(len(members))
        # match clusters to active tracks by centroid proximity
        pairs = []
        for ci, cent in enumerate(cents):
            for ti, tr in enumerate(active):
                pairs.append((_circ_dist(cent, tr["last"], c), ci, ti))
        pairs.sort(key=lambda p: p[0])
        used_c: set[int] = set()
        used_t: set[int] = set()
        assign = {}
        for d, ci, ti in pairs:
            if d > match_gate or ci in used_c or ti in used_t:
                continue
            assign[ci] = ti
            used_c.add(ci)
            used_t.add(ti)
        survivors = []
        for ci, cent in enumerate(cents):
            if ci in assign:
                tr = active[assign[ci]]
                jump = (cent - tr["last"] + 0.5 * c) % c - 0.5 * c
                tr["pos"].append(tr["pos"][-1] + jump)
                tr["t"].append(t)
                tr["last"] = cent
            else:
                tr = {"pos": [cent], "t": [t], "last": cent}
                tracks.append(tr)
            survivors.append(tr)
        active = survivors

    min_frames = max(int(round(min_track_s / dt)), 2)
    slopes = []
    weights = []
    for tr in tracks:
        if len(tr["t"]) < min_frames:
            continue
        ts = np.asarray(tr["t"], dtype=float) * dt
        ps = np.asarray(tr["pos"], dtype=float)
        slope = np.polyfit(ts, ps, 1)[0]
        slopes.append(slope)
        weights.append(len(ts))
    wave_speed = None
    if slopes:
        wave_speed = float(np.average(slopes, weights=weights))

    prof = speed_profile(v)
    detrended = prof.v_avg - np.polyval(np.polyfit(np.arange(t_total), prof.v_avg, 1), np.arange(t_total))
    spec = np.abs(np.fft.rfft(detrended)) * 2.0 / t_total
    freqs = np.fft.rfftfreq(t_total, d=dt)
    with np.errstate(divide="ignore"):
        periods = np.where(freqs > 0, 1.0 / freqs, np.inf)
    band = (periods >= 20.0) & (periods <= 100.0)
    amplitude = float(spec[band].max()) if band.any() else 0.0

    return WaveMetrics(
        backward_wave_speed=wave_speed,
        mean_queue_length=float(np.mean(sizes)) if sizes else None,
        queue_event_frequency=100.0 * len([t for t in tracks if len(t["t"]) >= min_frames]) / duration,
        quasi_period_amplitude=amplitude,
        n_tracks=len(tracks),
    )


@dataclass(frozen=True)
class ClusterResult:
    """Driver-type clustering in standardized (sigma_a, v*, kappa_v) space."""

    features: np.ndarray
    standardized: np.ndarray
    merge_tree: np.ndarray | None
    labels: np.ndarray
    labels_gap_cut: np.ndarray
    cluster_means: dict

    def n_clusters(self) -> int:
        return len(set(self.labels.tolist()))


def _feature_matrix(results) -> np.ndarray:
    arr = np.asarray(results, dtype=object)
    if arr.ndim == 2:
        return np.asarray(results, dtype=float)
    rows = []
    for r in results:
        rows.append([r.estimates[name] for name in CLUSTER_FEATURES])
    return np.asarray(rows, dtype=float)


def cluster_drivers(results, n_clusters: int = 4) -> ClusterResult:
    """Ward-linkage agglomerative clustering of per-driver parameters.

    Features are standardized to zero mean / unit SD (a zero-variance
    feature standardizes to zeros, with a warning).  Returns the full merge
    tree, labels at the requested cut, and labels at the largest-gap cut.
    """
    feats = _feature_matrix(results)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("need at least 2 drivers to cluster")
    mean = feats.mean(axis=0)
    sd = feats.std(axis=0, ddof=0)
    standardized = np.zeros_like(feats)
    for k in range(feats.shape[1]):
        if sd[k] == 0.0:
            warnings.warn(f"feature {CLUSTER_FEATURES[k]} has zero variance; standardized to zeros")
        else:
            standardized[:, k] = (feats[:, k] - mean[k]) / sd[k]

    if np.allclose(standardized, standardized[0]):
        labels = np.ones(n, dtype=int)
        return ClusterResult(
            features=feats,
            standardized=standardized,
            merge_tree=None,
            labels=labels,
            labels_gap_cut=labels.copy(),
            cluster_means={1: feats.mean(axis=0)},
        )

    tree = linkage(standardized, method="ward")
    labels = fcluster(tree, t=min(n_clusters, n), criterion="maxclust")
    heights = tree[:, 2]
    if len(heights) >= 2:
        gaps = np.diff(heights)
        cut_idx = int(np.argmax(gaps))
        k_gap = n - cut_idx - 1
    else:
        k_gap = 2
    labels_gap = fcluster(tree, t=max(k_gap, 1), criterion="maxclust")
    means = {
        int(lab): feats[labels == lab].mean(axis=0) for lab in sorted(set(labels.tolist()))
    }
    return ClusterResult(
        features=feats,
        standardized=standardized,
        merge_tree=tree,
        labels=np.asarray(labels, dtype=int),
        labels_gap_cut=np.asarray(labels_gap, dtype=int),
        cluster_means=means,
    )


@dataclass(frozen=True)
class FundamentalDiagramPoint:
    """One density sample: veh/km, m/s, veh/h (flow = density * speed * 3.6)."""

    density: float
    mean_speed: float
    flow: float
    n_vehicles: int
    v_range_mean: float


def fundamental_diagram(sweep) -> list[FundamentalDiagramPoint]:
    """Flow-density points from a list of (n_vehicles, SimOutput) runs.

    Speeds are averaged over fleet and time after each run's configured
    burn-in; points come back sorted by density.
    """
    points = []
    for n, out in sweep:
        cfg = out.config
        skip = int(round(cfg.burn_in_s / cfg.ring.dt))
        v = out.v[:, skip:]
        if v.size == 0:
            raise ValueError("run shorter than its burn-in")
        mean_speed = float(v.mean())
        density = 1000.0 * n / cfg.ring.circumference
        prof = speed_profile(v)
        points.append(
            FundamentalDiagramPoint(
                density=density,
                mean_speed=mean_speed,
                flow=density * mean_speed * 3.6,
                n_vehicles=n,
                v_range_mean=float(prof.v_range.mean()),
            )
        )
    return sorted(points, key=lambda p: p.density)


def recovery_report(truth, results) -> dict:
    """Per-parameter recovery errors of a synthetic calibration study.

    truth maps free-parameter names to generating values (a DriverParams is
    accepted too).  For each parameter the report carries the cross-vehicle
    mean error, SD of errors, mean absolute error, and a bias flag raised
    when |mean error| exceeds the SD.
    """
    if hasattr(truth, "value"):
        truth = {name: truth.value(name) for name in FREE_PARAMS}
    report = {}
    for name in FREE_PARAMS:
        if name not in truth:
            continue
        errs = np.array([r.estimates[name] - truth[name] for r in results])
        mean_err = float(errs.mean())
        sd_err = float(errs.std(ddof=0))
        report[name] = {
            "truth": float(truth[name]),
            "mean_error": mean_err,
            "sd_error": sd_err,
            "mean_abs_error": float(np.abs(errs).mean()),
            "biased": bool(abs(mean_err) > sd_err),
        }
    return report
