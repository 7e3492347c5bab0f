import numpy as np
import pytest

from cuboidplan.collision_constraints import (
    ConstraintBundle,
    ObstacleSpec,
    assemble_bundle,
    corner_inequalities,
    corner_points,
    corner_to_com_diagnostic,
    lagrange_sign_bent,
    necessary_residual_bent,
    necessary_residual_regular,
    obstacle_distance,
    obstacle_distance_batch,
    obstacle_metric_gradient,
    projection_bent,
    projection_regular,
    sufficient_sign_regular,
    surface_gradient_bent,
    surface_gradient_regular,
    transported_obstacle_gradient,
)
from cuboidplan.lp_geometry import (
    BentShape,
    ShapeParams,
    bent_map,
    polar_lp_3d,
    weighted_lp_norm,
)
from cuboidplan.se3_kinematics import Frame, frame_from_axis_angle, quat_from_axis_angle

SHAPE = ShapeParams((2.0, 1.0, 1.0), 8)
BENT = BentShape(SHAPE, 0.3927)


def random_frame(rng, span=3.0):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Frame(rng.uniform(-span, span, 3), q)


def regular_surface_point(rng, shape=SHAPE):
    d = rng.normal(size=3)
    return d / weighted_lp_norm(d, shape.sigma_array, shape.p)


def bent_surface_point(rng, bent=BENT):
    d = rng.normal(size=3)
    d /= weighted_lp_norm(d, np.ones(3), bent.p)
    s1, s2, s3 = bent.sigma
    u = np.array([-d[1] * s1, d[0] * s2])
    planar = bent_map(u, s1, bent.kappa)
    return np.array([planar[0], planar[1], d[2] * s3])


@pytest.fixture
def scene():
    obstacle = ObstacleSpec(frame_from_axis_angle([5.0, 1.0, 0.5], [0, 0, 1], 0.4),
                            (1.5, 1.0, 1.0), 6)
    robot = frame_from_axis_angle([0, 0, 0], [1, 1, 0], 0.3)
    return robot, obstacle


class TestObstacleDistance:
    def test_zero_at_center(self):
        ob = ObstacleSpec(Frame([1.0, 2.0, 3.0], [1, 0, 0, 0]), (2, 1, 1), 8)
        robot = Frame([1.0, 2.0, 3.0], [1, 0, 0, 0])
        assert obstacle_distance(robot, ob, [0.0, 0.0, 0.0]) == 0.0

    def test_face_center_is_one(self):
        ob = ObstacleSpec(Frame([3.0, 0.0, 0.0], [1, 0, 0, 0]), (2, 1, 1), 200)
        robot = Frame.identity()
        assert obstacle_distance(robot, ob, [1.0, 0.0, 0.0]) == pytest.approx(1.0)

    def test_monotone_along_ray(self):
        ob = ObstacleSpec(Frame([0.0, 0.0, 0.0], [1, 0, 0, 0]), (1, 1, 1), 4)
        prev = 0.0
        for x in np.linspace(2.0, 30.0, 15):
            d = obstacle_distance(Frame([x, 0.4, 0.2], [1, 0, 0, 0]), ob, [0.0, 0.0, 0.0])
            assert d > prev
            prev = d

    def test_batch_matches_scalar(self, scene):
        robot, obstacle = scene
        rng = np.random.default_rng(0)
        pts = rng.uniform(-2, 2, (40, 3))
        batch = obstacle_distance_batch(robot, obstacle, pts)
        for i, p in enumerate(pts):
            assert batch[i] == pytest.approx(obstacle_distance(robot, obstacle, p), rel=1e-12)


class TestGradients:
    def test_obstacle_gradient_zero_at_center(self, scene):
        _, obstacle = scene
        assert np.allclose(obstacle_metric_gradient(np.zeros(3), obstacle), 0.0)

    def test_obstacle_gradient_on_axis(self):
        ob = ObstacleSpec(Frame.identity(), (2, 1, 1), 4)
        g = obstacle_metric_gradient(np.array([2.0, 0.0, 0.0]), ob)
        assert np.allclose(g, [0.5, 0.0, 0.0])

    def test_obstacle_gradient_finite_difference(self, scene):
        _, obstacle = scene
        rng = np.random.default_rng(1)
        for _ in range(30):
            w = rng.uniform(0.2, 1.8, 3) * rng.choice([-1.0, 1.0], 3)
            g = obstacle_metric_gradient(w, obstacle)
            fd = np.zeros(3)
            h = 1e-6 * max(1.0, np.linalg.norm(w))
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fp = weighted_lp_norm(w + e, obstacle.sigma_array, obstacle.p) ** obstacle.p / obstacle.p
                fm = weighted_lp_norm(w - e, obstacle.sigma_array, obstacle.p) ** obstacle.p / obstacle.p
                fd[i] = (fp - fm) / (2 * h)
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6

    def test_robot_gradient_identity_on_surface(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            v = regular_surface_point(rng)
            grad = surface_gradient_regular(v, SHAPE)
            assert v @ grad == pytest.approx(1.0, abs=1e-8)

    def test_robot_gradient_face_center(self):
        g = surface_gradient_regular(np.array([2.0, 0.0, 0.0]), SHAPE)
        assert np.allclose(g, [0.5, 0.0, 0.0])
        assert np.array([2.0, 0, 0]) @ g == pytest.approx(1.0)

    def test_bent_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            v = rng.uniform(-1.5, 1.5, 3)
            g = surface_gradient_bent(v, BENT)
            fd = np.zeros(3)
            h = 1e-6 * max(1.0, np.linalg.norm(v))
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fp = polar_lp_3d(v + e, BENT) ** BENT.p / BENT.p
                fm = polar_lp_3d(v - e, BENT) ** BENT.p / BENT.p
                fd[i] = (fp - fm) / (2 * h)
            denom = max(np.linalg.norm(fd), 1e-12)
            assert np.linalg.norm(g - fd) / denom < 1e-6

    def test_bent_pairing_identity_on_surface(self):
        # the deviation vector paired with the raw gradient gives |kappa|^p
        from cuboidplan.collision_constraints import _polar_eval

        rng = np.random.default_rng(4)
        for _ in range(30):
            v = bent_surface_point(rng)
            pe = _polar_eval(v, BENT)
            raw = np.sign(pe.deviation) * np.abs(pe.deviation) ** (BENT.p - 1) / pe.weights**BENT.p
            assert pe.deviation @ raw == pytest.approx(abs(BENT.kappa) ** BENT.p, rel=1e-8)

    def test_transport_is_rotation_only(self, scene):
        # gradient of the composed potential wrt v must equal the transported
        # obstacle gradient direction (this pins the back-transport choice)
        robot, obstacle = scene
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.uniform(-1.5, 1.5, 3)
            t = transported_obstacle_gradient(robot, obstacle, v)
            h = 1e-6
            fd = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd[i] = (obstacle_distance(robot, obstacle, v + e) ** obstacle.p
                         - obstacle_distance(robot, obstacle, v - e) ** obstacle.p) / (2 * h * obstacle.p)
            fd /= np.linalg.norm(fd)
            assert np.linalg.norm(t - fd) < 1e-6


class TestProjections:
    def test_regular_idempotent_trace(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            v = regular_surface_point(rng)
            P = projection_regular(v, SHAPE)
            assert np.abs(P @ P - P).max() < 1e-8
            assert abs(np.trace(P) - 2.0) < 1e-8

    def test_regular_annihilates_gradient(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            v = regular_surface_point(rng)
            P = projection_regular(v, SHAPE)
            g = surface_gradient_regular(v, SHAPE)
            assert np.abs(P @ g).max() < 1e-10

    def test_bent_idempotent_trace(self):
        rng = np.random.default_rng(8)
        for p in (10, 200):
            bent = BentShape(ShapeParams((2, 1, 1), p), 0.3927)
            for _ in range(100):
                v = bent_surface_point(rng, bent)
                P = projection_bent(v, bent)
                assert np.abs(P @ P - P).max() < 1e-8
                assert abs(np.trace(P) - 2.0) < 1e-8

    def test_bent_annihilates_gradient(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            v = bent_surface_point(rng)
            P = projection_bent(v, BENT)
            g = surface_gradient_bent(v, BENT)
            assert np.abs(P @ g).max() / np.linalg.norm(g) < 1e-10

    def test_projector_rejects_center(self):
        with pytest.raises(ValueError):
            projection_regular(np.zeros(3), SHAPE)


def _surface_minimize(fun, x0_list):
    from scipy.optimize import minimize

    best = None
    for x0 in x0_list:
        r = minimize(fun, x0, method="Nelder-Mead",
                     options=dict(xatol=1e-12, fatol=1e-14, maxiter=3000))
        if best is None or r.fun < best.fun:
            best = r
    return best


class TestStationarity:
    def _angles_to_regular(self, ang):
        th, ph = ang
        d = np.array([np.cos(th) * np.cos(ph), np.sin(th) * np.cos(ph), np.sin(ph)])
        return d / weighted_lp_norm(d, SHAPE.sigma_array, SHAPE.p)

    def test_necessary_zero_at_extrema_regular(self, scene):
        robot, obstacle = scene
        seeds = [(th, ph) for th in np.linspace(-np.pi, np.pi, 8, endpoint=False)
                 for ph in (-0.9, 0.0, 0.9)]
        fun = lambda a: obstacle_distance(robot, obstacle, self._angles_to_regular(a))
        mn = _surface_minimize(fun, seeds)
        mx = _surface_minimize(lambda a: -fun(a), seeds)
        v_min = self._angles_to_regular(mn.x)
        v_max = self._angles_to_regular(mx.x)
        assert np.linalg.norm(necessary_residual_regular(robot, obstacle, v_min, SHAPE)) < 1e-6
        assert np.linalg.norm(necessary_residual_regular(robot, obstacle, v_max, SHAPE)) < 1e-6
        assert sufficient_sign_regular(robot, obstacle, v_min) < 0
        assert sufficient_sign_regular(robot, obstacle, v_max) > 0

    def test_nonstationary_points_have_large_residual(self, scene):
        robot, obstacle = scene
        rng = np.random.default_rng(10)
        large = 0
        for _ in range(50):
            v = regular_surface_point(rng)
            if np.linalg.norm(necessary_residual_regular(robot, obstacle, v, SHAPE)) > 1e-3:
                large += 1
        assert large >= 45  # random points are almost never stationary

    def test_face_on_symmetry_sign(self):
        ob = ObstacleSpec(Frame([10.0, 0.0, 0.0], [1, 0, 0, 0]), (1, 1, 1), 8)
        robot = Frame.identity()
        v = np.array([2.0, 0.0, 0.0])
        assert sufficient_sign_regular(robot, ob, v) < 0
        assert np.linalg.norm(necessary_residual_regular(robot, ob, v, SHAPE)) < 1e-10


class TestCorners:
    def test_literal_corners_unbent_limit(self):
        bent = BentShape(SHAPE, 0.0)
        pts = corner_points(bent)
        expected = {(sx * 2.0, sy * 1.0, sz * 1.0)
                    for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
        got = {tuple(np.round(p, 9)) for p in pts}
        assert got == expected

    def test_literal_corners_approach_level_as_p_grows(self):
        from cuboidplan.lp_geometry import normalized_bent_residual

        prev = None
        for p in (10, 50, 200):
            bent = BentShape(ShapeParams((2, 1, 1), p), 0.3927)
            worst = max(abs(normalized_bent_residual(c, bent.sigma, p, bent.kappa))
                        for c in corner_points(bent))
            if prev is not None:
                assert worst < prev
            prev = worst
        assert prev < 1e-2

    def test_top_bottom_symmetry(self):
        pts = corner_points(BENT)
        assert np.allclose(pts[:4, :2], pts[4:, :2])
        assert np.allclose(pts[:4, 2], -pts[4:, 2])

    def test_on_surface_corners_satisfy_level(self):
        from cuboidplan.lp_geometry import normalized_bent_residual

        for c in corner_points(BENT, on_surface=True):
            assert abs(normalized_bent_residual(c, BENT.sigma, BENT.p, BENT.kappa)) < 1e-12

    def test_candidate_at_corner_gives_zero_entry(self, scene):
        robot, obstacle = scene
        c = corner_points(BENT, on_surface=True)[2]
        entries = corner_inequalities(robot, obstacle, c, BENT)
        assert np.min(np.abs(entries)) < 1e-12


class TestBundles:
    def test_rigid_bundle_shape(self, scene):
        robot, obstacle = scene
        b = assemble_bundle(robot, obstacle, [2.0, 0.0, 0.0], SHAPE, "rigid")
        assert b.equalities.shape == (4,)
        assert b.inequalities.shape == (2,)

    def test_bent_bundle_shape(self, scene):
        robot, obstacle = scene
        v = bent_surface_point(np.random.default_rng(0))
        b = assemble_bundle(robot, obstacle, v, SHAPE, "bent", kappa=0.3927)
        assert b.equalities.shape == (4,)
        assert b.inequalities.shape == (10,)

    def test_bundle_rejects_unknown_mode(self, scene):
        robot, obstacle = scene
        with pytest.raises(ValueError):
            assemble_bundle(robot, obstacle, np.ones(3), SHAPE, "soft")

    def test_safe_configuration_feasible(self):
        # face-on separated scene: nearest face center is the closest point
        ob = ObstacleSpec(Frame([10.0, 0.0, 0.0], [1, 0, 0, 0]), (1, 1, 1), 8)
        robot = Frame.identity()
        b = assemble_bundle(robot, ob, [2.0, 0.0, 0.0], SHAPE, "rigid", margin=1e-3)
        assert np.abs(b.equalities).max() < 1e-10
        assert b.feasible

    def test_penetrating_configuration_infeasible(self):
        ob = ObstacleSpec(Frame([2.0, 0.0, 0.0], [1, 0, 0, 0]), (1, 1, 1), 8)
        robot = Frame.identity()  # robot +x face reaches x=2, obstacle spans [1, 3]
        b = assemble_bundle(robot, ob, [2.0, 0.0, 0.0], SHAPE, "rigid", margin=1e-3)
        assert not b.feasible
        assert b.inequalities[-1] < 0  # separation margin violated at the closest point

    def test_frame_invariance(self, scene):
        robot, obstacle = scene
        rng = np.random.default_rng(11)
        v = bent_surface_point(rng)
        base = assemble_bundle(robot, obstacle, v, SHAPE, "bent", kappa=0.3927)
        for _ in range(10):
            g = random_frame(rng)
            robot2 = Frame(g.rotation @ robot.position + g.position,
                           _quat_mul(g.quaternion, robot.quaternion))
            ob2 = ObstacleSpec(
                Frame(g.rotation @ obstacle.frame.position + g.position,
                      _quat_mul(g.quaternion, obstacle.frame.quaternion)),
                obstacle.sigma, obstacle.p)
            moved = assemble_bundle(robot2, ob2, v, SHAPE, "bent", kappa=0.3927)
            assert np.abs(moved.equalities - base.equalities).max() < 1e-10
            assert np.abs(moved.inequalities - base.inequalities).max() < 1e-10

    def test_bent_bundle_reduces_to_regular_below_kappa_floor(self, scene):
        robot, obstacle = scene
        v = np.array([2.0, 0.0, 0.0]) / weighted_lp_norm([2.0, 0, 0], SHAPE.sigma_array, SHAPE.p)
        b_bent = assemble_bundle(robot, obstacle, v, SHAPE, "bent", kappa=1e-5)
        b_rig = assemble_bundle(robot, obstacle, v, SHAPE, "rigid")
        assert np.abs(b_bent.equalities - b_rig.equalities).max() < 1e-12
        assert b_bent.inequalities[0] == pytest.approx(b_rig.inequalities[0])
        assert b_bent.inequalities[-1] == pytest.approx(b_rig.inequalities[-1])


class TestDiagnostic:
    def test_far_obstacle_all_positive(self):
        ob = ObstacleSpec(Frame([50.0, 0.0, 0.0], [1, 0, 0, 0]), (1, 1, 1), 8)
        d = corner_to_com_diagnostic(Frame.identity(), ob, BENT)
        assert np.all(d > 0)

    def test_corner_inside_robot_flagged(self):
        # obstacle corner placed at the robot center
        ob = ObstacleSpec(Frame([1.0, 1.0, 1.0], [1, 0, 0, 0]), (1, 1, 1), 8)
        d = corner_to_com_diagnostic(Frame.identity(), ob, BENT)
        assert d.min() < 0

    def test_unbent_limit_is_box_membership(self):
        bent0 = BentShape(SHAPE, 0.0)
        ob = ObstacleSpec(Frame([2.5, 0.0, 0.0], [1, 0, 0, 0]), (1.0, 0.5, 0.5), 8)
        d = corner_to_com_diagnostic(Frame.identity(), ob, bent0)
        # nearest corners at (1.5, +-0.5, +-0.5) are strictly inside the box
        assert d.min() < 0
        far = ObstacleSpec(Frame([6.0, 0.0, 0.0], [1, 0, 0, 0]), (1.0, 0.5, 0.5), 8)
        assert np.all(corner_to_com_diagnostic(Frame.identity(), far, bent0) > 0)


def _quat_mul(q1, q2):
    from cuboidplan.se3_kinematics import quat_multiply

    return quat_multiply(q1, q2)
