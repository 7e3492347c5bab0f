"""Brute-force closest-point solver used to validate the analytic constraints.

Independent of the planner: the robot surface is sampled densely through its
exact parameterization, obstacle distances are evaluated directly, and the
best candidates are polished by a damped Gauss-Newton iteration on the
stationarity residual.  The projection matrices are deliberately shared with
the constraint module (a defect there would show up against the grid-only
minima, whose convergence is checked separately); everything else is plain
enumeration.  Used to certify planned trajectories after the fact; never
called inside the optimization loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lp_geometry import (
    DEFAULT_KAPPA_MIN,
    BentShape,
    ShapeParams,
    bent_map,
    weighted_lp_norm,
)
from .collision_constraints import (
    ObstacleSpec,
    necessary_residual_bent,
    necessary_residual_regular,
    obstacle_distance_batch,
)
from .se3_kinematics import Frame


@dataclass
class OracleResult:
    """Extremal distances and refined stationary points for one scene."""

    v_min: np.ndarray
    v_max: np.ndarray
    d_min: float
    d_max: float
    stationary_points: list[tuple[np.ndarray, float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _cube_direction_grid(n: int) -> np.ndarray:
    """Points covering the surface of the cube [-1,1]^3, one (n x n) grid per face."""
    lin = np.linspace(-1.0, 1.0, n)
    blocks = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a, b = np.meshgrid(lin, lin, indexing="ij")
            cols: list[np.ndarray] = [None, None, None]  # type: ignore[list-item]
            cols[axis] = np.full_like(a, sign)
            cols[(axis + 1) % 3] = a
            cols[(axis + 2) % 3] = b
            blocks.append(np.column_stack([c.ravel() for c in cols]))
    return np.vstack(blocks)


def surface_chart(
    directions: np.ndarray,
    shape: ShapeParams,
    kappa: float = 0.0,
    kappa_min: float = DEFAULT_KAPPA_MIN,
) -> np.ndarray:
    """Map raw direction vectors onto the body surface (straight or bent).

    Directions are normalized to the unit L_p sphere and interpreted as the
    level-set coordinates of the body, so every returned point satisfies the
    surface equation to roundoff.  Scale-invariant in the input.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    norms = weighted_lp_norm(d, np.ones(3), shape.p)
    r = d / norms[:, None]
    s1, s2, s3 = shape.sigma
    if abs(kappa) < kappa_min:
        pts = r * np.array([s1, s2, s3])
    else:
        u = np.column_stack([-r[:, 1] * s1, r[:, 0] * s2])
        planar = bent_map(u, s1, kappa)
        pts = np.column_stack([planar, r[:, 2] * s3])
    return pts if np.asarray(directions).ndim > 1 else pts[0]


def _residual(robot_frame, obstacle, v, shape, kappa, kappa_min) -> np.ndarray:
    if abs(kappa) < kappa_min:
        return necessary_residual_regular(robot_frame, obstacle, v, shape)
    return necessary_residual_bent(robot_frame, obstacle, v, BentShape(shape, kappa))


def _refine_stationary(
    robot_frame: Frame,
    obstacle: ObstacleSpec,
    shape: ShapeParams,
    kappa: float,
    kappa_min: float,
    direction: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> tuple[np.ndarray, np.ndarray, float] | None:
    """Damped Gauss-Newton on the stationarity residual over chart directions.

    Returns (direction, surface point, residual norm) or None on failure.
    The chart is scale-invariant so the 3-parameter iteration has a benign
    rank-2 Jacobian; Levenberg damping handles it.
    """

    def res(c: np.ndarray) -> np.ndarray:
        v = surface_chart(c, shape, kappa, kappa_min)
        return _residual(robot_frame, obstacle, v, shape, kappa, kappa_min)

    c = np.asarray(direction, dtype=float)
    c = c / np.max(np.abs(c))
    r = res(c)
    lam = 1e-8
    for _ in range(max_iter):
        rn = np.linalg.norm(r)
        if rn < tol:
            break
        h = 1e-7
        J = np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            J[:, j] = (res(c + e) - r) / h
        for _ in range(12):
            step = np.linalg.solve(J.T @ J + lam * np.eye(3), -J.T @ r)
            c_new = c + step
            if np.max(np.abs(c_new)) < 1e-12:
                lam *= 10.0
                continue
            r_new = res(c_new)
            if np.linalg.norm(r_new) < rn:
                c, r = c_new, r_new
                c = c / np.max(np.abs(c))
                lam = max(lam * 0.3, 1e-12)
                break
            lam *= 10.0
        else:
            return None
    if np.linalg.norm(r) >= 1e-8:
        return None
    v = surface_chart(c, shape, kappa, kappa_min)
    return c, v, float(np.linalg.norm(r))


def _grid_local_extrema(values: np.ndarray, n: int) -> list[int]:
    """Indices of per-face local minima/maxima of a face-blocked grid scan."""
    out: list[int] = []
    per_face = n * n
    for face in range(6):
        block = values[face * per_face : (face + 1) * per_face].reshape(n, n)
        for i in range(n):
            for j in range(n):
                lo = max(i - 1, 0), max(j - 1, 0)
                hi = min(i + 2, n), min(j + 2, n)
                patch = block[lo[0] : hi[0], lo[1] : hi[1]]
                if block[i, j] <= patch.min() or block[i, j] >= patch.max():
                    out.append(face * per_face + i * n + j)
    return out


def _fd_tangent_gradient_norm(values: np.ndarray, n: int) -> np.ndarray:
    """Finite-difference gradient magnitude of the scan along each face grid."""
    per_face = n * n
    out = np.empty_like(values)
    for face in range(6):
        block = values[face * per_face : (face + 1) * per_face].reshape(n, n)
        gi, gj = np.gradient(block)
        out[face * per_face : (face + 1) * per_face] = np.hypot(gi, gj).ravel()
    return out


def brute_force_closest(
    robot_frame: Frame,
    obstacle: ObstacleSpec,
    shape: ShapeParams,
    kappa: float = 0.0,
    grid_n: int = 32,
    kappa_min: float = DEFAULT_KAPPA_MIN,
    refine: bool = True,
    dedup_tol: float = 1e-4,
) -> OracleResult:
    """Dense scan of the robot surface for extremal obstacle distances.

    Seeds the polish stage from grid extrema of the distance scan and from
    grid minima of its finite-difference tangential gradient (which catches
    saddle-type stationary points the extrema miss).  Stationary points
    closer than ``dedup_tol`` in robot coordinates are merged.
    """
    if grid_n < 32:
        raise ValueError("grid_n must be >= 32 for a trustworthy scan")
    dirs = _cube_direction_grid(grid_n)
    pts = surface_chart(dirs, shape, kappa, kappa_min)
    dists = obstacle_distance_batch(robot_frame, obstacle, pts)
    i_min = int(np.argmin(dists))
    i_max = int(np.argmax(dists))
    result = OracleResult(
        v_min=pts[i_min].copy(),
        v_max=pts[i_max].copy(),
        d_min=float(dists[i_min]),
        d_max=float(dists[i_max]),
    )
    if not refine:
        return result

    seeds = set(_grid_local_extrema(dists, grid_n))
    grad_norm = _fd_tangent_gradient_norm(dists, grid_n)
    # gradient-norm minima catch saddle-type stationary points (including the
    # corner-band alignments) that the distance extrema miss; cap the count
    # rather than thresholding, since chart compression near corners distorts
    # the gradient scale
    saddle_seeds = sorted(_grid_local_extrema(grad_norm, grid_n), key=lambda i: grad_norm[i])
    seeds.update(saddle_seeds[:64])
    seeds.update((i_min, i_max))

    refined: list[tuple[np.ndarray, float]] = []
    for idx in sorted(seeds):
        out = _refine_stationary(robot_frame, obstacle, shape, kappa, kappa_min, dirs[idx])
        if out is None:
            result.warnings.append(f"refinement did not converge from grid seed {idx}")
            continue
        _, v, rn = out
        if all(np.linalg.norm(v - w) > dedup_tol for w, _ in refined):
            refined.append((v, rn))
    result.stationary_points = refined

    if refined:
        ref_d = obstacle_distance_batch(robot_frame, obstacle, np.array([v for v, _ in refined]))
        j_min = int(np.argmin(ref_d))
        j_max = int(np.argmax(ref_d))
        if ref_d[j_min] <= result.d_min:
            result.d_min, result.v_min = float(ref_d[j_min]), refined[j_min][0].copy()
        if ref_d[j_max] >= result.d_max:
            result.d_max, result.v_max = float(ref_d[j_max]), refined[j_max][0].copy()
    return result


@dataclass
class VerificationRecord:
    time: float
    obstacle_index: int
    d_min: float
    arg_point: np.ndarray


@dataclass
class VerificationReport:
    """Independent certification of a trajectory against every obstacle."""

    records: list[VerificationRecord]
    threshold: float
    passed: bool

    def text(self) -> str:
        lines = [
            f"# trajectory verification: {'PASS' if self.passed else 'FAIL'}",
            f"# threshold: d_min >= {self.threshold:.6g}",
            "# t  obstacle  d_min  arg_x  arg_y  arg_z",
        ]
        for r in self.records:
            a = r.arg_point
            lines.append(
                f"{r.time:.6f}  {r.obstacle_index}  {r.d_min:.8f}  {a[0]:.6f}  {a[1]:.6f}  {a[2]:.6f}"
            )
        return "\n".join(lines) + "\n"

    @property
    def worst(self) -> float:
        return min((r.d_min for r in self.records), default=np.inf)


def verify_trajectory(
    frames: list[Frame],
    times: list[float],
    obstacles: list[ObstacleSpec],
    shape: ShapeParams,
    kappas: list[float] | None = None,
    grid_n: int = 64,
    threshold: float = 1.0 - 1e-3,
    kappa_min: float = DEFAULT_KAPPA_MIN,
) -> VerificationReport:
    """Certify sampled robot states: minimum obstacle distance at every time.

    PASS requires the per-time, per-obstacle surface minimum to stay at or
    above ``threshold``.  The scan grid is refreshed per state because the
    bent surface changes with curvature.
    """
    records: list[VerificationRecord] = []
    dirs = _cube_direction_grid(grid_n)
    fixed_pts = surface_chart(dirs, shape, 0.0, kappa_min) if kappas is None else None
    for k, (frame, t) in enumerate(zip(frames, times)):
        kappa = 0.0 if kappas is None else float(kappas[k])
        pts = fixed_pts if fixed_pts is not None else surface_chart(dirs, shape, kappa, kappa_min)
        for j, obstacle in enumerate(obstacles):
            dists = obstacle_distance_batch(frame, obstacle, pts)
            i = int(np.argmin(dists))
            records.append(VerificationRecord(float(t), j, float(dists[i]), pts[i].copy()))
    passed = all(r.d_min >= threshold for r in records)
    return VerificationReport(records, threshold, passed)
