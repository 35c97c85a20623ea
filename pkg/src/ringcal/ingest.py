"""Loading and preprocessing of circular-road trajectory data.

Raw position records live on a ring of circumference C and are noisy.  This
module unwraps them onto a continuous line, smooths them progressively with a
(1, 2, 1)/4 kernel, differentiates naively, and assembles the per-driver
perceived states (predecessor / self / follower positions and velocities)
that the decision model conditions on.

All downstream code works in meters on an unwrapped axis; the ring topology
is confined to this module (and to the simulator's geometry).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RawTrajectorySet",
    "SmoothedSeries",
    "PerceivedState",
    "PerceivedSeries",
    "DiscontinuityError",
    "smooth_once",
    "naive_derivative",
    "unwrap_positions",
    "wrap_positions",
    "ring_order",
    "neighbor_maps",
    "build_perceived_states",
    "load_trajectory_csv",
    "load_metadata",
    "load_raw_set",
    "write_smoothed_csv",
    "write_trajectory_csv",
    "write_metadata",
]


class DiscontinuityError(ValueError):
    """A wrapped position series jumped by at least half the ring per step."""


@dataclass(frozen=True)
class RawTrajectorySet:
    """Raw wrapped positions for a fleet on a ring.

    positions has shape (N, T) with values in [0, C); vehicle_lengths has
    shape (N,).  Ordering of vehicle ids is the file order; the geometric
    ring order is resolved separately (see ring_order).
    """

    dt: float
    circumference: float
    positions: np.ndarray
    vehicle_lengths: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        lengths = np.asarray(self.vehicle_lengths, dtype=float)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "vehicle_lengths", lengths)
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.circumference <= 0:
            raise ValueError("circumference must be positive")
        if pos.ndim != 2:
            raise ValueError("positions must be a (N, T) array")
        if lengths.shape != (pos.shape[0],):
            raise ValueError("vehicle_lengths must have one entry per vehicle")
        if np.any(lengths <= 0):
            raise ValueError("vehicle lengths must be positive")
        if lengths.sum() >= self.circumference:
            raise ValueError("vehicles do not fit on the ring")
        if np.any(pos < 0) or np.any(pos >= self.circumference):
            raise ValueError("positions must lie in [0, circumference)")

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class SmoothedSeries:
    """A progressively smoothed (or differentiated) series with its valid window.

    values keeps the original time indexing, NaN-padded outside
    [valid_lo, valid_hi] (inclusive).
    """

    level: int
    values: np.ndarray
    valid_lo: int
    valid_hi: int

    def valid(self) -> np.ndarray:
        return self.values[..., self.valid_lo : self.valid_hi + 1]


@dataclass(frozen=True)
class PerceivedState:
    """What one driver sees at one instant: predecessor, self, follower.

    Positions are on a common unwrapped axis with pred_pos >= self_pos >=
    foll_pos; a removed neighbor is represented by an infinite position.
    """

    pred_pos: float
    pred_vel: float
    self_pos: float
    self_vel: float
    foll_pos: float
    foll_vel: float
    t: int = 0


@dataclass(frozen=True)
class PerceivedSeries:
    """Perceived states of one driver over a contiguous time window.

    Arrays share the indexing convention of PerceivedState; t0 is the index
    of the first sample on the original timeline.
    """

    t0: int
    pred_pos: np.ndarray
    pred_vel: np.ndarray
    self_pos: np.ndarray
    self_vel: np.ndarray
    foll_pos: np.ndarray
    foll_vel: np.ndarray

    def __len__(self) -> int:
        return len(self.self_pos)

    def state(self, k: int) -> PerceivedState:
        """The k-th sample (local index) as a scalar PerceivedState."""
        return PerceivedState(
            pred_pos=float(self.pred_pos[k]),
            pred_vel=float(self.pred_vel[k]),
            self_pos=float(self.self_pos[k]),
            self_vel=float(self.self_vel[k]),
            foll_pos=float(self.foll_pos[k]),
            foll_vel=float(self.foll_vel[k]),
            t=self.t0 + k,
        )


def smooth_once(series, wrap: bool = False, circumference: float | None = None) -> np.ndarray:
    """One pass of the (1, 2, 1)/4 smoothing kernel.

    Returns an array with the input's indexing; the two endpoints fall
    outside the smoothing support and are NaN.  With wrap=True the series is
    treated on the circle: unwrapped first, smoothed, and wrapped back.
    """
    x = np.asarray(series, dtype=float)
    if x.shape[-1] < 3:
        raise ValueError("need at least 3 samples to smooth")
    if wrap:
        if circumference is None:
            raise ValueError("wrap smoothing requires the circumference")
        lifted = unwrap_positions(x, circumference)
        out = smooth_once(lifted, wrap=False)
        wrapped = np.mod(out, circumference)
        return np.where(np.isnan(out), np.nan, wrapped)
    out = np.full_like(x, np.nan)
    out[..., 1:-1] = 0.25 * (x[..., :-2] + 2.0 * x[..., 1:-1] + x[..., 2:])
    return out


def naive_derivative(series, dt: float) -> np.ndarray:
    """Forward difference (x[t+1] - x[t]) / dt, NaN at the final sample."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(series, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("need at least 2 samples to differentiate")
    out = np.full_like(x, np.nan)
    out[..., :-1] = (x[..., 1:] - x[..., :-1]) / dt
    return out


def unwrap_positions(series, circumference: float) -> np.ndarray:
    """Lift a wrapped ring series onto a continuous axis.

    Each step is resolved to the shortest displacement, so per-step motion
    must stay below half the circumference; a jump of C/2 or more is
    ambiguous and raises DiscontinuityError.
    """
    c = float(circumference)
    if c <= 0:
        raise ValueError("circumference must be positive")
    x = np.asarray(series, dtype=float)
    diffs = np.diff(x, axis=-1)
    # shortest signed displacement in (-C/2, C/2]
    disp = np.mod(diffs + 0.5 * c, c) - 0.5 * c
    if np.any(np.abs(disp) >= 0.5 * c * (1.0 - 1e-12)):
        raise DiscontinuityError("per-step displacement reached half the ring")
    out = np.empty_like(x)
    out[..., 0] = x[..., 0]
    out[..., 1:] = x[..., :1] + np.cumsum(disp, axis=-1)
    return out


def wrap_positions(series, circumference: float) -> np.ndarray:
    """Map an unwrapped series back onto [0, C)."""
    return np.mod(np.asarray(series, dtype=float), circumference)


def ring_order(positions_t0, circumference: float) -> np.ndarray:
    """Vehicle indices sorted by increasing ring position at one instant.

    On a single lane nobody overtakes, so the order computed at the first
    sample is held fixed: the predecessor of the vehicle at rank r is the
    vehicle at rank r+1 (mod N).
    """
    pos = np.mod(np.asarray(positions_t0, dtype=float), circumference)
    return np.argsort(pos, kind="stable")


def neighbor_maps(positions_t0, circumference: float) -> tuple[np.ndarray, np.ndarray]:
    """(predecessor, follower) index arrays from the ring order at one instant."""
    n = len(positions_t0)
    order = ring_order(positions_t0, circumference)
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    pred = order[(rank + 1) % n]
    foll = order[(rank - 1) % n]
    return pred, foll


def build_perceived_states(raw: RawTrajectorySet) -> list[PerceivedSeries]:
    """Assemble each driver's perceived-state sequence from a raw set.

    Neighbor positions come from once-smoothed data, velocities from the
    naive derivative of twice-smoothed data, intersected on the common valid
    window [2, T-4].  Neighbor assignment is frozen at the first sample.
    Output positions are lifted so that pred >= self >= foll on a common
    axis (center-to-center gaps already reduced mod C).
    """
    n, t_total = raw.positions.shape
    if t_total < 6:
        raise ValueError("too few samples for second-order smoothing")
    c = raw.circumference

    lifted = unwrap_positions(raw.positions, c)
    z1 = smooth_once(lifted)
    z2 = smooth_once(z1)
    v2 = naive_derivative(z2, raw.dt)

    # z1 valid on [1, T-2], z2 on [2, T-3], v2 on [2, T-4]
    lo, hi = 2, t_total - 4
    if hi < lo:
        raise ValueError("too few samples for second-order smoothing")

    pred, foll = neighbor_maps(raw.positions[:, 0], c)

    window = slice(lo, hi + 1)
    out = []
    for i in range(n):
        p, f = int(pred[i]), int(foll[i])
        self_pos = z1[i, window]
        # gaps to neighbors on the ring, attached to the ego's lift
        gap_ahead = np.mod(z1[p, window] - self_pos, c)
        gap_behind = np.mod(self_pos - z1[f, window], c)
        if n == 1:
            gap_ahead = np.full_like(self_pos, c)
            gap_behind = np.full_like(self_pos, c)
        out.append(
            PerceivedSeries(
                t0=lo,
                pred_pos=self_pos + gap_ahead,
                pred_vel=v2[p, window].copy(),
                self_pos=self_pos.copy(),
                self_vel=v2[i, window].copy(),
                foll_pos=self_pos - gap_behind,
                foll_vel=v2[f, window].copy(),
            )
        )
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_TRAJ_HEADERS = ("position_m", "position_rad")


def load_trajectory_csv(path) -> tuple[np.ndarray, bool]:
    """Read a trajectory CSV into a (N, T) position array.

    Expected header: t_index,vehicle_id,position_m (or position_rad; a
    leading `units=rad` line forces radians too).  Returns (positions,
    is_radians).  Vehicle ids must be 0..N-1 and every (t, id) cell present.
    """
    rows = []
    is_rad = False
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for rec in reader:
            if not rec or not "".join(rec).strip():
                continue
            if header is None:
                joined = ",".join(rec).strip()
                if "=" in joined and "," not in joined:
                    key, _, val = joined.partition("=")
                    if key.strip() == "units" and val.strip() == "rad":
                        is_rad = True
                    continue
                header = [h.strip() for h in rec]
                if header[:2] != ["t_index", "vehicle_id"] or header[2] not in _TRAJ_HEADERS:
                    raise ValueError(f"unrecognized trajectory header: {header}")
                if header[2] == "position_rad":
                    is_rad = True
                continue
            rows.append((int(rec[0]), int(rec[1]), float(rec[2])))
    if header is None or not rows:
        raise ValueError(f"no trajectory data in {path}")
    n = max(r[1] for r in rows) + 1
    t = max(r[0] for r in rows) + 1
    pos = np.full((n, t), np.nan)
    for ti, vid, x in rows:
        pos[vid, ti] = x
    if np.any(np.isnan(pos)):
        raise ValueError("trajectory file has missing (t, vehicle) cells")
    return pos, is_rad


def load_metadata(path) -> dict:
    """Read a key=value metadata file (dt, circumference, vehicle_lengths...)."""
    meta: dict = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key == "vehicle_lengths":
                meta[key] = np.array([float(v) for v in val.split(",")])
            elif key in ("dt", "circumference"):
                meta[key] = float(val)
            else:
                meta[key] = val
    for req in ("dt", "circumference", "vehicle_lengths"):
        if req not in meta:
            raise ValueError(f"metadata file {path} is missing '{req}'")
    return meta


def load_raw_set(traj_path, meta_path) -> RawTrajectorySet:
    """Load a trajectory CSV plus its metadata into a RawTrajectorySet.

    Angular data are converted to arc length once here (radians * C / 2pi);
    a metadata line `direction=decreasing` mirrors positions so that motion
    always increases position.
    """
    pos, is_rad = load_trajectory_csv(traj_path)
    meta = load_metadata(meta_path)
    c = meta["circumference"]
    if is_rad:
        pos = pos * (c / (2.0 * math.pi))
    if meta.get("direction", "increasing") == "decreasing":
        pos = np.mod(c - pos, c)
    return RawTrajectorySet(
        dt=meta["dt"],
        circumference=c,
        positions=np.mod(pos, c),
        vehicle_lengths=meta["vehicle_lengths"],
    )


def write_smoothed_csv(path, raw: RawTrajectorySet) -> None:
    """Write once-smoothed positions and naive v/a series as CSV.

    Columns: t_index,vehicle_id,x1,v2,a2 over the window where all three are
    defined (x1 wrapped back to [0, C)).
    """
    lifted = unwrap_positions(raw.positions, raw.circumference)
    z1 = smooth_once(lifted)
    z2 = smooth_once(z1)
    v2 = naive_derivative(z2, raw.dt)
    a2 = naive_derivative(v2, raw.dt)
    x1w = np.mod(z1, raw.circumference)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_index", "vehicle_id", "x1", "v2", "a2"])
        for i in range(raw.n_vehicles):
            for t in range(raw.n_samples):
                if np.isnan(z1[i, t]) or np.isnan(v2[i, t]) or np.isnan(a2[i, t]):
                    continue
                writer.writerow(
                    [t, i, "%.10g" % x1w[i, t], "%.10g" % v2[i, t], "%.10g" % a2[i, t]]
                )


def write_trajectory_csv(path, positions: np.ndarray) -> None:
    """Write wrapped positions (N, T) in the loader's CSV format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_index", "vehicle_id", "position_m"])
        n, t_total = positions.shape
        for t in range(t_total):
            for i in range(n):
                writer.writerow([t, i, "%.10g" % positions[i, t]])


def write_metadata(path, dt: float, circumference: float, vehicle_lengths) -> None:
    with open(path, "w") as fh:
        fh.write(f"dt={dt!r}\n")
        fh.write(f"circumference={circumference!r}\n")
        fh.write("vehicle_lengths=" + ",".join("%.10g" % v for v in vehicle_lengths) + "\n")
