"""Analytic closest-point safety constraints between the robot and L_p obstacles.

The separation test between the robot surface and an obstacle reduces to an
inner minimization: find the robot-surface point closest to the obstacle in
the obstacle's weighted L_p metric and require its distance to exceed one.
This module replaces that inner problem by its stationarity conditions:

* straight body: 4 equalities (a rank-2 projected-gradient residual plus the
  surface membership equation) and 2 inequalities (a multiplier-sign test that
  rejects farthest/saddle points, and the separation margin);
* bent body: 4 equalities and 10 inequalities (sign test, 8 corner-ranking
  tests that reject non-minimal stationary points, and the margin).

Positive scale factors (norm powers, curvature powers) are dropped wherever
only the zero set or the sign matters, so every residual stays O(1) even at
exponents around 200.  The gradient transport between frames is rotation-only
(translations do not act on gradients); both that choice and the angular
orientation of the bent-body algebra are pinned by finite-difference checks
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lp_geometry import (
    DEFAULT_KAPPA_MIN,
    BentShape,
    ShapeParams,
    bent_map,
    normalized_bent_residual,
    polar_transform,
    unit_lp_gradient,
    weighted_lp_gradient,
    weighted_lp_norm,
)
from .se3_kinematics import Frame


@dataclass(frozen=True)
class ObstacleSpec:
    """Obstacle pose, half-lengths and even metric exponent."""

    frame: Frame
    sigma: tuple[float, float, float]
    p: int

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        object.__setattr__(self, "sigma", sigma)
        if len(sigma) != 3 or any(s <= 0 for s in sigma):
            raise ValueError(f"obstacle half-lengths must be positive, got {sigma}")
        if self.p < 2 or self.p % 2 != 0:
            raise ValueError(f"obstacle exponent must be an even integer >= 2, got {self.p}")

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)


@dataclass(frozen=True)
class ConstraintBundle:
    """Safety residuals for one obstacle at one robot state.

    ``equalities`` must vanish at a valid closest point; ``inequalities`` are
    feasible when every entry is strictly positive.
    """

    equalities: np.ndarray
    inequalities: np.ndarray
    mode: str

    def __post_init__(self):
        object.__setattr__(self, "equalities", np.asarray(self.equalities, dtype=float))
        object.__setattr__(self, "inequalities", np.asarray(self.inequalities, dtype=float))
        expected = {"rigid": 2, "bent": 10}[self.mode]
        if self.equalities.shape != (4,) or self.inequalities.shape != (expected,):
            raise ValueError(
                f"bundle for mode {self.mode!r} needs 4 equalities and {expected} "
                f"inequalities, got {self.equalities.shape} / {self.inequalities.shape}"
            )

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.inequalities > 0.0))


def obstacle_local_point(robot_frame: Frame, obstacle: ObstacleSpec, v) -> np.ndarray:
    """Obstacle-frame coordinates of a robot-frame point."""
    world = robot_frame.rotation @ np.asarray(v, dtype=float) + robot_frame.position
    return obstacle.frame.rotation.T @ (world - obstacle.frame.position)


def obstacle_distance(robot_frame: Frame, obstacle: ObstacleSpec, v) -> float:
    """Weighted L_p distance of a robot-frame point in the obstacle's metric.

    Values above 1 are outside the obstacle, below 1 inside.
    """
    w = obstacle_local_point(robot_frame, obstacle, v)
    return weighted_lp_norm(w, obstacle.sigma_array, obstacle.p)


def obstacle_distance_batch(robot_frame: Frame, obstacle: ObstacleSpec, points: np.ndarray) -> np.ndarray:
    """Vectorized ``obstacle_distance`` over an (N, 3) array of robot-frame points."""
    pts = np.asarray(points, dtype=float)
    world = pts @ robot_frame.rotation.T + robot_frame.position
    w = (world - obstacle.frame.position) @ obstacle.frame.rotation
    return weighted_lp_norm(w, obstacle.sigma_array, obstacle.p)


def obstacle_metric_gradient(w, obstacle: ObstacleSpec) -> np.ndarray:
    """Gradient of the obstacle potential ||w||^p / p at an obstacle-frame point."""
    return weighted_lp_gradient(w, obstacle.sigma_array, obstacle.p)


def transported_obstacle_gradient(robot_frame: Frame, obstacle: ObstacleSpec, v) -> np.ndarray:
    """Unit direction, in the robot frame, of the obstacle potential's gradient.

    Rotation-only chain rule: R_robot^T R_obstacle applied to the gradient at
    the obstacle-frame image of ``v``.  Normalized to unit 2-norm; the
    dropped factor is positive so zero sets and signs are unaffected.
    """
    w = obstacle_local_point(robot_frame, obstacle, v)
    ghat = unit_lp_gradient(w, obstacle.sigma_array, obstacle.p)
    return robot_frame.rotation.T @ (obstacle.frame.rotation @ ghat)


# ---------------------------------------------------------------------------
# Straight body
# ---------------------------------------------------------------------------


def surface_gradient_regular(v, shape: ShapeParams) -> np.ndarray:
    """Gradient of the robot potential ||v||^p / p, elementwise v_i^(p-1)/sigma_i^p."""
    return weighted_lp_gradient(v, shape.sigma_array, shape.p)


def projection_regular(v, shape: ShapeParams) -> np.ndarray:
    """Oblique tangent-space projector I - grad * v^T at a surface point.

    Idempotent with trace 2 whenever ``v`` satisfies the surface equation;
    computed from level-normalized coordinates so it stays exactly idempotent
    (and bounded) even slightly off the surface.
    """
    sigma = shape.sigma_array
    r = np.asarray(v, dtype=float) / sigma
    s = weighted_lp_norm(r, np.ones(3), shape.p)
    if s == 0.0:
        raise ValueError("projector undefined at the body center")
    r = r / s
    grad = np.sign(r) * np.abs(r) ** (shape.p - 1) / sigma
    return np.eye(3) - np.outer(grad, r * sigma)


def necessary_residual_regular(robot_frame: Frame, obstacle: ObstacleSpec, v, shape: ShapeParams) -> np.ndarray:
    """Projected transported gradient; zero exactly at inner-problem stationary points."""
    t = transported_obstacle_gradient(robot_frame, obstacle, v)
    return projection_regular(v, shape) @ t


def sufficient_sign_regular(robot_frame: Frame, obstacle: ObstacleSpec, v) -> float:
    """Inner product of the transported gradient with the surface point.

    Negative exactly when the stationary point is the global minimum of the
    obstacle distance over the (convex) straight body; equivalently the
    eliminated multiplier is positive.
    """
    t = transported_obstacle_gradient(robot_frame, obstacle, v)
    return float(t @ np.asarray(v, dtype=float))


# ---------------------------------------------------------------------------
# Bent body
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _PolarEval:
    """Shared polar quantities at one robot-frame point of a bent body."""

    radius: float
    theta: float
    deviation: np.ndarray  # (radius-1, theta0-theta, |k| v_z), angularly oriented
    ratios: np.ndarray  # deviation / (weights * |kappa|); unit L_p norm on surface
    level: float  # L_p norm of ratios (1 on the surface)
    qbar: np.ndarray
    qbar_inv_t: np.ndarray
    weights: np.ndarray  # (sigma_2, sigma_1, sigma_3)


def _polar_eval(v, bent: BentShape) -> _PolarEval:
    if bent.kappa == 0.0:
        raise ValueError("bent-body constraints require kappa != 0")
    v = np.asarray(v, dtype=float)
    s1, s2, s3 = bent.sigma
    ak = abs(bent.kappa)
    r, theta = polar_transform(v[:2], bent.kappa)
    # The angular deviation is measured as theta0 - theta: with the
    # two-argument arctangent used here this orientation makes the polar
    # Jacobian equal |kappa| * Qbar^{-1}, which finite differences confirm.
    dev = np.array([r - 1.0, bent.theta0 - theta, ak * v[2]])
    weights = np.array([s2, s1, s3])
    ratios = dev / (weights * ak)
    level = weighted_lp_norm(ratios, np.ones(3), bent.p)
    ct, st = math.cos(theta), math.sin(theta)
    qbar = np.array([[ct, r * st, 0.0], [st, -r * ct, 0.0], [0.0, 0.0, 1.0]])
    qbar_inv = np.array([[ct, st, 0.0], [st / r, -ct / r, 0.0], [0.0, 0.0, 1.0]])
    return _PolarEval(r, theta, dev, ratios, level, qbar, qbar_inv.T, weights)


def surface_gradient_bent(v, bent: BentShape) -> np.ndarray:
    """Gradient of the bent-body potential (field^p / p) with respect to v."""
    pe = _polar_eval(v, bent)
    grad_dev = np.sign(pe.deviation) * np.abs(pe.deviation) ** (bent.p - 1) / pe.weights**bent.p
    return abs(bent.kappa) * (pe.qbar_inv_t @ grad_dev)


def projection_bent(v, bent: BentShape) -> np.ndarray:
    """Oblique tangent-space projector of the bent surface at a surface point.

    Same structure as the straight case but conjugated by the polar Jacobian;
    curvature powers cancel in the level-normalized form used here, keeping
    entries O(1) at any admissible kappa and exponent.
    """
    pe = _polar_eval(v, bent)
    if pe.level == 0.0:
        raise ValueError("projector undefined at the body center")
    rho = pe.ratios / pe.level
    ghat = np.sign(rho) * np.abs(rho) ** (bent.p - 1) / pe.weights
    nu_hat = rho * pe.weights
    return np.eye(3) - np.outer(pe.qbar_inv_t @ ghat, pe.qbar @ nu_hat)


def necessary_residual_bent(robot_frame: Frame, obstacle: ObstacleSpec, v, bent: BentShape) -> np.ndarray:
    """Projected transported gradient on the bent surface; zero at stationary points."""
    t = transported_obstacle_gradient(robot_frame, obstacle, v)
    return projection_bent(v, bent) @ t


def lagrange_sign_bent(robot_frame: Frame, obstacle: ObstacleSpec, v, bent: BentShape) -> float:
    """Sign test rejecting farthest points on the bent body.

    Inner product of the transported gradient with the polar image of the
    deviation vector (positive scale factors dropped).  Negative is required
    at the global minimum; positive identifies parallel-normal stationary
    points such as the farthest one.
    """
    pe = _polar_eval(v, bent)
    t = transported_obstacle_gradient(robot_frame, obstacle, v)
    nu_hat = pe.ratios * pe.weights
    return float(t @ (pe.qbar @ nu_hat))


def corner_points(
    bent: BentShape, kappa_min: float = DEFAULT_KAPPA_MIN, on_surface: bool = False
) -> np.ndarray:
    """The eight corner points of the (possibly bent) body in the robot frame.

    Below ``kappa_min`` these are the straight-box corners; otherwise the
    planar corners are pushed through the bending map and extruded to +-
    the vertical half-length.  With ``on_surface`` the corners are scaled
    onto the body's own level set (by 3^(-1/p) in parameter space): the true
    corners protrude beyond the modeled surface by exactly that factor, and
    the protruding versions would out-rank a legitimately minimal surface
    point whenever the closest approach is corner-on.
    """
    s1, s2, s3 = bent.sigma
    scale = 3.0 ** (-1.0 / bent.p) if on_surface else 1.0
    planar = scale * np.array([[s1, s2], [s1, -s2], [-s1, s2], [-s1, -s2]])
    if abs(bent.kappa) >= kappa_min:
        planar = bent_map(planar, s1, bent.kappa)
    z = scale * s3
    top = np.column_stack([planar, np.full(4, z)])
    bottom = np.column_stack([planar, np.full(4, -z)])
    return np.vstack([top, bottom])


def corner_inequalities(
    robot_frame: Frame,
    obstacle: ObstacleSpec,
    v,
    bent: BentShape,
    kappa_min: float = DEFAULT_KAPPA_MIN,
    on_surface: bool = True,
) -> np.ndarray:
    """Distance rank tests: each body corner must be farther than the candidate.

    All eight entries nonnegative at the global minimum; the farthest
    stationary point always violates at least one, which is what lets the
    planner keep only minimum-distance solutions on the nonconvex bent body.
    Ranking is against the on-surface corners by default, which makes the
    minimum-selection property exact at any finite exponent; the raw corners
    recover it only in the p -> inf limit.
    """
    corners = corner_points(bent, kappa_min, on_surface=on_surface)
    d_corners = obstacle_distance_batch(robot_frame, obstacle, corners)
    d_v = obstacle_distance(robot_frame, obstacle, v)
    return d_corners - d_v


def corner_to_com_diagnostic(
    robot_frame: Frame,
    obstacle: ObstacleSpec,
    bent: BentShape,
    kappa_min: float = DEFAULT_KAPPA_MIN,
) -> np.ndarray:
    """Membership of each obstacle box corner against the robot body surface.

    Returns the normalized surface residual of the robot's field at the eight
    obstacle corners expressed in the robot frame: positive entries lie
    outside the robot and support non-penetration through the concave face.
    Diagnostic only; never part of the planner's constraint set.
    """
    so = obstacle.sigma_array
    signs = np.array([[i, j, k] for i in (1, -1) for j in (1, -1) for k in (1, -1)], dtype=float)
    corners_world = (signs * so) @ obstacle.frame.rotation.T + obstacle.frame.position
    corners_robot = (corners_world - robot_frame.position) @ robot_frame.rotation
    return np.array(
        [
            normalized_bent_residual(c, bent.sigma, bent.p, bent.kappa, kappa_min)
            for c in corners_robot
        ]
    )


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------


def assemble_bundle(
    robot_frame: Frame,
    obstacle: ObstacleSpec,
    v,
    shape: ShapeParams,
    mode: str,
    kappa: float = 0.0,
    margin: float = 1e-3,
    kappa_min: float = DEFAULT_KAPPA_MIN,
) -> ConstraintBundle:
    """Full safety constraint set for one obstacle at one robot state.

    ``mode`` is "rigid" (straight body: 4 equalities, 2 inequalities) or
    "bent" (4 equalities, 10 inequalities).  In bent mode with |kappa| below
    ``kappa_min`` the straight-body stationarity algebra is used while the
    corner tests keep their bent form, which is the analytic limit.
    """
    v = np.asarray(v, dtype=float)
    if mode == "rigid":
        res = necessary_residual_regular(robot_frame, obstacle, v, shape)
        surface = weighted_lp_norm(v, shape.sigma_array, shape.p) - 1.0
        sign = sufficient_sign_regular(robot_frame, obstacle, v)
        dist = obstacle_distance(robot_frame, obstacle, v)
        return ConstraintBundle(
            np.concatenate([res, [surface]]),
            np.array([-sign, dist - (1.0 + margin)]),
            "rigid",
        )
    if mode != "bent":
        raise ValueError(f"mode must be 'rigid' or 'bent', got {mode!r}")
    bent = BentShape(shape, kappa)
    if abs(kappa) >= kappa_min:
        res = necessary_residual_bent(robot_frame, obstacle, v, bent)
        sign = lagrange_sign_bent(robot_frame, obstacle, v, bent)
    else:
        res = necessary_residual_regular(robot_frame, obstacle, v, shape)
        sign = sufficient_sign_regular(robot_frame, obstacle, v)
    surface = normalized_bent_residual(v, shape.sigma_array, shape.p, kappa, kappa_min)
    corners = corner_inequalities(robot_frame, obstacle, v, bent, kappa_min)
    dist = obstacle_distance(robot_frame, obstacle, v)
    return ConstraintBundle(
        np.concatenate([res, [surface]]),
        np.concatenate([[-sign], corners, [dist - (1.0 + margin)]]),
        "bent",
    )
