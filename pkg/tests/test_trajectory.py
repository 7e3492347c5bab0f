import numpy as np
import pytest

from cuboidplan.trajectory import (
    CollocationGrid,
    GridMaps,
    Spline,
    TrajectoryBundle,
    basis_matrix,
    boundary_residuals,
    clamped_knots,
    curvature_regularized_cost,
    derivative_matrix,
    dynamics_defects,
    export_trajectory,
    fit_spline_coefficients,
    load_trajectory,
    path_length_cost,
    quaternion_norm_residuals,
    sample_states,
    spline_derivative,
    spline_eval,
)

M = 12
IDENTITY_QUAT = np.array([[1.0], [0.0], [0.0], [0.0]])


def greville(degree=5, m=M):
    knots = clamped_knots(degree, m)
    return np.array([knots[i + 1 : i + degree + 1].mean() for i in range(m)])


def constant_bundle(value=(1.0, 2.0, 3.0), m=M, T_f=2.0, kappa=None):
    return TrajectoryBundle(
        degree=5,
        position=np.tile(np.asarray(value, dtype=float)[:, None], (1, m)),
        quaternion=np.tile(IDENTITY_QUAT, (1, m)),
        speed=np.zeros(m),
        omega=np.zeros((3, m)),
        final_time=T_f,
        kappa=None if kappa is None else np.full(m, kappa),
    )


class TestSplineBasics:
    def test_constant_spline(self):
        s = Spline.from_coefficients(np.full(M, 3.5))
        taus = np.linspace(0, 1, 17)
        assert np.allclose(spline_eval(s, taus), 3.5)
        assert np.allclose(spline_derivative(s, taus), 0.0, atol=1e-12)

    def test_degree_one_line(self):
        s = Spline.from_coefficients(np.array([1.0, 3.0]), degree=1)
        taus = np.linspace(0, 1, 9)
        assert np.allclose(spline_eval(s, taus), 1.0 + 2.0 * taus)

    def test_clamped_endpoint_interpolation(self):
        rng = np.random.default_rng(0)
        c = rng.normal(size=M)
        s = Spline.from_coefficients(c)
        assert spline_eval(s, 0.0) == pytest.approx(c[0], abs=1e-14)
        assert spline_eval(s, 1.0) == pytest.approx(c[-1], abs=1e-14)

    def test_partition_of_unity(self):
        knots = clamped_knots(5, M)
        B = basis_matrix(5, knots, np.linspace(0, 1, 101))
        assert np.abs(B.sum(axis=1) - 1.0).max() < 1e-12

    def test_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        s = Spline.from_coefficients(rng.normal(size=M))
        taus = np.linspace(0.02, 0.98, 31)
        h = 1e-7
        fd = (spline_eval(s, taus + h) - spline_eval(s, taus - h)) / (2 * h)
        assert np.abs(spline_derivative(s, taus) - fd).max() < 1e-6

    def test_coefficient_count_validation(self):
        with pytest.raises(ValueError):
            Spline(5, clamped_knots(5, 12), np.zeros(11))

    def test_fit_pins_endpoints(self):
        taus = np.linspace(0, 1, 40)
        vals = np.sin(2 * np.pi * taus)
        c = fit_spline_coefficients(5, M, taus, vals)
        assert c[0] == vals[0] and c[-1] == vals[-1]


class TestGrid:
    def test_uniform_grid(self):
        g = CollocationGrid.uniform(30)
        assert len(g) == 30
        assert g.taus[0] == 0.0 and g.taus[-1] == 1.0

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            CollocationGrid(np.array([0.0, 0.5, 0.5, 1.0]))
        with pytest.raises(ValueError):
            CollocationGrid(np.array([0.1, 0.5, 1.0]))


class TestDefects:
    def test_stationary_bundle_zero_defects(self):
        grid = CollocationGrid.uniform(30)
        d = dynamics_defects(constant_bundle(), grid)
        assert np.abs(d).max() < 1e-12

    def test_straight_line_constant_speed(self):
        u0, T_f = 1.5, 3.0
        g = greville()
        pos = np.zeros((3, M))
        pos[0] = -1.0 + u0 * T_f * g  # heading +x with identity orientation
        bundle = TrajectoryBundle(degree=5, position=pos,
                                  quaternion=np.tile(IDENTITY_QUAT, (1, M)),
                                  speed=np.full(M, u0), omega=np.zeros((3, M)),
                                  final_time=T_f)
        d = dynamics_defects(bundle, CollocationGrid.uniform(25))
        assert np.abs(d).max() < 1e-12

    def test_norm_violation_not_in_defects(self):
        bundle = constant_bundle()
        bundle.quaternion = bundle.quaternion * 1.1  # breaks the norm only
        grid = CollocationGrid.uniform(20)
        assert np.abs(dynamics_defects(bundle, grid)).max() < 1e-12
        assert np.abs(quaternion_norm_residuals(bundle, grid) - 0.21).max() < 1e-12

    def test_time_scaling_consistency(self):
        rng = np.random.default_rng(3)
        g = greville()
        u0, T_f = 2.0, 1.7
        pos = np.zeros((3, M))
        pos[0] = u0 * T_f * g
        base = TrajectoryBundle(degree=5, position=pos,
                                quaternion=np.tile(IDENTITY_QUAT, (1, M)),
                                speed=np.full(M, u0), omega=np.zeros((3, M)),
                                final_time=T_f)
        grid = CollocationGrid.uniform(20)
        assert np.abs(dynamics_defects(base, grid)).max() < 1e-12
        scaled = TrajectoryBundle(degree=5, position=pos,
                                  quaternion=np.tile(IDENTITY_QUAT, (1, M)),
                                  speed=np.full(M, u0 / 2), omega=np.zeros((3, M)),
                                  final_time=2 * T_f)
        assert np.abs(dynamics_defects(scaled, grid)).max() < 1e-12


class TestBoundary:
    def test_interpolating_bundle_zero(self):
        b = constant_bundle(value=(1.0, 2.0, 3.0))
        r = boundary_residuals(b, [1, 2, 3], [1, 0, 0, 0], [1, 2, 3], [1, 0, 0, 0])
        assert np.abs(r).max() == 0.0

    def test_double_cover(self):
        b = constant_bundle()
        r = boundary_residuals(b, [1, 2, 3], [-1, 0, 0, 0], [1, 2, 3], [1, 0, 0, 0])
        assert np.abs(r).max() == 0.0

    def test_random_bundle_nonzero(self):
        b = constant_bundle()
        r = boundary_residuals(b, [0, 0, 0], [1, 0, 0, 0], [1, 2, 3], [0, 1, 0, 0])
        assert np.abs(r).max() > 0.5

    def test_kappa_endpoints(self):
        b = constant_bundle(kappa=0.5)
        r = boundary_residuals(b, [1, 2, 3], [1, 0, 0, 0], [1, 2, 3], [1, 0, 0, 0],
                               kappa_start=0.5, kappa_end=-0.5)
        assert r[-2] == pytest.approx(0.0)
        assert r[-1] == pytest.approx(1.0)

    def test_kappa_requested_without_trajectory(self):
        with pytest.raises(ValueError):
            boundary_residuals(constant_bundle(), [1, 2, 3], [1, 0, 0, 0],
                               [1, 2, 3], [1, 0, 0, 0], kappa_start=0.1)


class TestCosts:
    def test_straight_line_length(self):
        a = np.array([0.0, 1.0, -1.0])
        b = np.array([3.0, -1.0, 2.0])
        g = greville()
        pos = a[:, None] + (b - a)[:, None] * g[None, :]
        bundle = TrajectoryBundle(degree=5, position=pos,
                                  quaternion=np.tile(IDENTITY_QUAT, (1, M)),
                                  speed=np.zeros(M), omega=np.zeros((3, M)),
                                  final_time=2.0)
        cost = path_length_cost(bundle, CollocationGrid.uniform(50))
        assert cost == pytest.approx(np.linalg.norm(b - a), rel=1e-3)

    def test_stationary_cost_is_smoothing_floor(self):
        bundle = constant_bundle(T_f=4.0)
        cost = path_length_cost(bundle, CollocationGrid.uniform(50))
        assert cost == pytest.approx(np.sqrt(1e-9) * 4.0, rel=1e-6)

    def test_circle_arc_length(self):
        # fit a quarter circle of radius 2 and compare with the exact arc
        taus = np.linspace(0, 1, 80)
        pts = np.stack([2 * np.cos(taus * np.pi / 2), 2 * np.sin(taus * np.pi / 2),
                        np.zeros_like(taus)])
        pos = np.stack([fit_spline_coefficients(5, 16, taus, pts[c]) for c in range(3)])
        bundle = TrajectoryBundle(degree=5, position=pos,
                                  quaternion=np.tile(IDENTITY_QUAT, (1, 16)),
                                  speed=np.zeros(16), omega=np.zeros((3, 16)),
                                  final_time=1.0)
        cost = path_length_cost(bundle, CollocationGrid.uniform(50))
        assert cost == pytest.approx(np.pi, rel=5e-3)

    def test_quadrature_convergence(self):
        taus = np.linspace(0, 1, 80)
        pts = np.stack([np.sin(np.pi * taus), np.cos(np.pi * taus) - 1, taus])
        pos = np.stack([fit_spline_coefficients(5, 14, taus, pts[c]) for c in range(3)])
        bundle = TrajectoryBundle(degree=5, position=pos,
                                  quaternion=np.tile(IDENTITY_QUAT, (1, 14)),
                                  speed=np.zeros(14), omega=np.zeros((3, 14)),
                                  final_time=1.0)
        c1 = path_length_cost(bundle, CollocationGrid.uniform(40))
        c2 = path_length_cost(bundle, CollocationGrid.uniform(80))
        assert abs(c2 - c1) / c2 < 1e-3

    def test_constant_curvature_cost(self):
        bundle = constant_bundle(T_f=1.0, kappa=0.5)
        cost = curvature_regularized_cost(bundle, CollocationGrid.uniform(30), 0.1)
        floor = path_length_cost(bundle, CollocationGrid.uniform(30))
        assert cost - floor == pytest.approx(0.05, rel=1e-4)

    def test_curvature_cost_sign_symmetric(self):
        grid = CollocationGrid.uniform(30)
        c_plus = curvature_regularized_cost(constant_bundle(T_f=1.0, kappa=0.5), grid, 0.1)
        c_minus = curvature_regularized_cost(constant_bundle(T_f=1.0, kappa=-0.5), grid, 0.1)
        assert c_plus == pytest.approx(c_minus, rel=1e-12)

    def test_curvature_cost_requires_kappa(self):
        with pytest.raises(ValueError):
            curvature_regularized_cost(constant_bundle(), CollocationGrid.uniform(10), 0.1)


class TestExport:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(4, M))
        q /= np.linalg.norm(q, axis=0, keepdims=True)
        bundle = TrajectoryBundle(degree=5, position=rng.normal(size=(3, M)),
                                  quaternion=q, speed=rng.normal(size=M),
                                  omega=rng.normal(size=(3, M)), final_time=2.5,
                                  kappa=rng.normal(size=M) * 0.3)
        path = tmp_path / "traj.csv"
        export_trajectory(path, bundle, n_samples=60)
        data = load_trajectory(path)
        assert data["t"].shape == (60,)
        assert data["t"][-1] == pytest.approx(2.5)
        st = sample_states(bundle, data["t"])
        assert np.abs(data["position"] - st["position"]).max() < 1e-9
        assert np.abs(data["kappa"] - st["kappa"]).max() < 1e-9
