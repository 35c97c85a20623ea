import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringcal.ingest import (
    DiscontinuityError,
    RawTrajectorySet,
    build_perceived_states,
    load_metadata,
    load_raw_set,
    load_trajectory_csv,
    naive_derivative,
    neighbor_maps,
    ring_order,
    smooth_once,
    unwrap_positions,
    wrap_positions,
    write_metadata,
    write_trajectory_csv,
)

series_strategy = st.lists(
    st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=3, max_size=40
)


class TestSmoothOnce:
    def test_constant_is_fixed_point(self):
        out = smooth_once([1.0, 1.0, 1.0])
        assert out[1] == 1.0
        assert np.isnan(out[0]) and np.isnan(out[2])

    def test_spike(self):
        out = smooth_once([0.0, 4.0, 0.0, 0.0, 0.0])
        assert out[1] == pytest.approx(2.0)
        assert out[2] == pytest.approx(1.0)

    def test_affine_series_preserved(self):
        t = np.arange(10.0)
        out = smooth_once(3.0 * t - 2.0)
        assert np.allclose(out[1:-1], (3.0 * t - 2.0)[1:-1])

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            smooth_once([1.0, 2.0])

    def test_wrap_mode(self):
        c = 230.0
        x = np.array([228.0, 229.5, 1.0, 2.5, 4.0])
        out = smooth_once(x, wrap=True, circumference=c)
        # the lift is affine, so interior values reproduce the wrapped input
        assert np.allclose(out[1:-1], x[1:-1])

    @given(series_strategy, series_strategy)
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, f, g):
        n = min(len(f), len(g))
        f, g = np.array(f[:n]), np.array(g[:n])
        lhs = smooth_once(2.0 * f + 3.0 * g)[1:-1]
        rhs = (2.0 * smooth_once(f) + 3.0 * smooth_once(g))[1:-1]
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestNaiveDerivative:
    def test_simple(self):
        out = naive_derivative([0.0, 1.0, 2.0], dt=1.0 / 3.0)
        assert np.allclose(out[:-1], [3.0, 3.0])
        assert np.isnan(out[-1])

    def test_constant_series(self):
        out = naive_derivative(np.full(6, 7.7), dt=0.5)
        assert np.allclose(out[:-1], 0.0)

    def test_linear_motion_exact(self):
        dt, v = 0.25, 4.2
        x = v * np.arange(12) * dt
        out = naive_derivative(x, dt)
        assert np.allclose(out[:-1], v)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            naive_derivative([0.0, 1.0], dt=0.0)


class TestUnwrap:
    def test_forward_wrap(self):
        assert np.allclose(unwrap_positions([229.0, 1.0], 230.0), [229.0, 231.0])

    def test_no_wrap(self):
        assert np.allclose(unwrap_positions([10.0, 12.0, 14.0], 230.0), [10.0, 12.0, 14.0])

    def test_backward_motion(self):
        assert np.allclose(unwrap_positions([1.0, 229.0], 230.0), [1.0, -1.0])

    def test_half_ring_jump_flagged(self):
        with pytest.raises(DiscontinuityError):
            unwrap_positions([0.0, 115.0], 230.0)

    @given(
        st.lists(st.floats(min_value=0, max_value=229.99, allow_nan=False), min_size=2, max_size=30)
    )
    @settings(max_examples=40, deadline=None)
    def test_unwrap_wrap_identity(self, values):
        c = 230.0
        x = np.array(values)
        try:
            lifted = unwrap_positions(x, c)
        except DiscontinuityError:
            return
        # circular comparison: wrapped values may sit on either side of the seam
        diff = np.mod(wrap_positions(lifted, c) - np.mod(x, c) + 0.5 * c, c) - 0.5 * c
        assert np.allclose(diff, 0.0, atol=1e-9)


class TestPerceivedStates:
    def _raw(self, positions, c=230.0, dt=1.0 / 3.0, lengths=None):
        n = positions.shape[0]
        if lengths is None:
            lengths = np.full(n, 4.0)
        return RawTrajectorySet(dt=dt, circumference=c, positions=positions, vehicle_lengths=lengths)

    def test_constant_speed_ring(self):
        c, n, dt, v = 230.0, 3, 1.0 / 3.0, 5.0
        t = np.arange(40)
        pos = np.mod(np.arange(n)[:, None] * (c / n) + v * dt * t[None, :], c)
        series = build_perceived_states(self._raw(pos))
        for s in series:
            gaps = s.pred_pos - s.self_pos
            assert np.allclose(gaps, c / 3, atol=1e-8)
            assert np.allclose(s.self_vel, v, atol=1e-8)
            assert np.allclose(s.pred_vel, v, atol=1e-8)

    def test_neighbor_resolution_on_ring(self):
        # vehicle 21 placed just ahead of vehicle 0 across the wrap point
        c = 230.0
        n = 22
        base = np.linspace(0, c, n, endpoint=False)
        base[0] = 228.0  # vehicle 0 near the seam; vehicle 21 must still be found as predecessor
        order = ring_order(base, c)
        pred, foll = neighbor_maps(base, c)
        ahead = (base[pred] - base) % c
        assert np.all(ahead > 0)
        # each vehicle's predecessor is the nearest one ahead
        for i in range(n):
            others = (base - base[i]) % c
            others[i] = np.inf
            assert pred[i] == np.argmin(others)

    def test_too_short_rejected(self):
        pos = np.mod(np.arange(3)[:, None] * 70.0 + np.zeros(5)[None, :], 230.0)
        with pytest.raises(ValueError):
            build_perceived_states(self._raw(pos))

    def test_window_margins(self):
        c, n = 230.0, 4
        t = np.arange(30)
        pos = np.mod(np.arange(n)[:, None] * (c / n) + 2.0 * t[None, :] / 3.0, c)
        series = build_perceived_states(self._raw(pos))
        assert series[0].t0 == 2
        # valid window is [2, T-4] inclusive
        assert len(series[0]) == 30 - 5


class TestFileFormats:
    def test_round_trip(self, tmp_path):
        pos = np.mod(np.arange(3)[:, None] * 70.0 + np.arange(10)[None, :] * 1.7, 230.0)
        traj = tmp_path / "traj.csv"
        meta = tmp_path / "meta.txt"
        write_trajectory_csv(traj, pos)
        write_metadata(meta, 1.0 / 3.0, 230.0, [4.0, 4.5, 5.0])
        raw = load_raw_set(traj, meta)
        assert raw.n_vehicles == 3 and raw.n_samples == 10
        assert np.allclose(raw.positions, pos, atol=1e-8)
        assert raw.dt == pytest.approx(1.0 / 3.0)

    def test_radians_header(self, tmp_path):
        path = tmp_path / "traj.csv"
        path.write_text(
            "units=rad\nt_index,vehicle_id,position_rad\n0,0,0.0\n1,0,3.141592653589793\n"
        )
        pos, is_rad = load_trajectory_csv(path)
        assert is_rad
        meta = tmp_path / "meta.txt"
        write_metadata(meta, 0.5, 100.0, [4.0])
        raw = load_raw_set(path, meta)
        assert raw.positions[0, 1] == pytest.approx(50.0)

    def test_missing_cell_rejected(self, tmp_path):
        path = tmp_path / "traj.csv"
        path.write_text("t_index,vehicle_id,position_m\n0,0,1.0\n1,1,2.0\n")
        with pytest.raises(ValueError):
            load_trajectory_csv(path)

    def test_metadata_requires_keys(self, tmp_path):
        meta = tmp_path / "meta.txt"
        meta.write_text("dt=0.5\n")
        with pytest.raises(ValueError):
            load_metadata(meta)

    def test_invariants_validated(self):
        with pytest.raises(ValueError):
            RawTrajectorySet(
                dt=0.5,
                circumference=10.0,
                positions=np.zeros((2, 5)),
                vehicle_lengths=np.array([6.0, 6.0]),
            )
