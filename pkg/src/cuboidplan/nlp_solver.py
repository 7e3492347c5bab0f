"""Transcription of the planning problem into an NLP and its solver.

The decision vector stacks B-spline coefficients for every trajectory
(position, quaternion, speed, body rates, optionally curvature, one
closest-point block per obstacle) plus the free final time.  Residuals are
evaluated at a fixed collocation grid; because spline values are linear in
the coefficients, the constraint Jacobian is assembled exactly from small
pointwise-core derivative stencils (vectorized forward differences over the
sampled values) chained through the constant basis matrices.

The solver is an augmented-Lagrangian outer loop: inequalities get
nonnegative slacks, every constraint is driven to feasibility by multiplier
updates and penalty growth, and each inner subproblem is a bound-constrained
quasi-Newton minimization (L-BFGS-B).  Safety equalities are rank-deficient
by construction (the projected-gradient residual has rank 2), which the
method tolerates since it never factors the constraint Jacobian.
Reported violations are always recomputed from scratch at the final point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


from . import trajectory as tj
from .collision_constraints import ObstacleSpec
from .lp_geometry import DEFAULT_KAPPA_MIN, ShapeParams, unit_lp_gradient, weighted_lp_norm
from .se3_kinematics import E0_DEFAULT, Frame
from .closest_point_oracle import brute_force_closest


@dataclass(frozen=True)
class SolverConfig:
    tol_constraint: float = 1e-6
    tol_stationarity: float = 1e-4
    max_outer: int = 40
    max_inner: int = 250
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    fd_step: float = 1e-7
    seed: int = 0
    restarts: int = 3
    verbose: bool = False

    def __post_init__(self):
        if self.tol_constraint <= 0 or self.tol_stationarity <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolverResult:
    status: str  # converged | max_iter | infeasible
    x: np.ndarray
    cost: float
    max_equality_violation: float
    min_inequality_margin: float
    trace: list[dict] = field(default_factory=list)
    multipliers_eq: np.ndarray | None = None
    multipliers_ineq: np.ndarray | None = None
    projected_gradient: float = math.nan

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def trace_text(self) -> str:
        lines = ["# iter  cost  max_violation  step_norm  penalty  inner_iters"]
        for t in self.trace:
            lines.append(
                f"{t['outer']:4d}  {t['cost']:.8e}  {t['max_violation']:.3e}  "
                f"{t['step_norm']:.3e}  {t['penalty']:.3e}  {t['inner_iters']:4d}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DecisionLayout:
    """Named, disjoint slices covering the flat decision vector."""

    slices: dict[str, slice]
    size: int
    n_coeffs: int
    degree: int

    def block(self, x: np.ndarray, name: str) -> np.ndarray:
        return x[self.slices[name]]

    @staticmethod
    def build(n_coeffs: int, degree: int, n_obstacles: int, with_kappa: bool) -> "DecisionLayout":
        names = ["position", "quaternion", "speed", "omega"]
        dims = [3, 4, 1, 3]
        if with_kappa:
            names.append("kappa")
            dims.append(1)
        for j in range(n_obstacles):
            names.append(f"vbar_{j}")
            dims.append(3)
        slices = {}
        offset = 0
        for name, dim in zip(names, dims):
            slices[name] = slice(offset, offset + dim * n_coeffs)
            offset += dim * n_coeffs
        slices["T_f"] = slice(offset, offset + 1)
        return DecisionLayout(slices, offset + 1, n_coeffs, degree)


@dataclass
class NlpProblem:
    """Cost, residual callables, bounds and layout of one NLP.

    ``inequalities`` are feasible when positive.  ``eq_jacobian`` /
    ``ineq_jacobian`` return dense matrices; for transcription-backed
    problems these come from the structured pointwise-core path.
    """

    n: int
    cost: callable
    cost_gradient: callable
    equalities: callable
    inequalities: callable
    eq_jacobian: callable
    ineq_jacobian: callable
    lower: np.ndarray
    upper: np.ndarray
    layout: DecisionLayout | None = None
    transcription: "Transcription | None" = None
    cost_hessian: "callable | None" = None  # PSD curvature model, optional

    def violation(self, x: np.ndarray) -> float:
        ce = self.equalities(x)
        ci = self.inequalities(x)
        v_eq = float(np.max(np.abs(ce))) if ce.size else 0.0
        v_in = float(np.max(np.maximum(-ci, 0.0))) if ci.size else 0.0
        return max(v_eq, v_in)


def fd_gradients(problem: NlpProblem, x: np.ndarray, step: float = 1e-7):
    """Plain forward-difference cost gradient and constraint Jacobians.

    Reference implementation of the derivative contract; the structured
    evaluators must agree with this (and with central differences) to the
    tolerances asserted in the tests.
    """
    x = np.asarray(x, dtype=float)
    f0 = problem.cost(x)
    ce0 = problem.equalities(x)
    ci0 = problem.inequalities(x)
    g = np.empty_like(x)
    J_eq = np.empty((ce0.size, x.size))
    J_in = np.empty((ci0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        g[i] = (problem.cost(xp) - f0) / h
        J_eq[:, i] = (problem.equalities(xp) - ce0) / h
        J_in[:, i] = (problem.inequalities(xp) - ci0) / h
    return g, J_eq, J_in


# ---------------------------------------------------------------------------
# Transcription
# ---------------------------------------------------------------------------


def _rot_from_quat_batch(q: np.ndarray) -> np.ndarray:
    """(4, N) quaternions -> (N, 3, 3) rotation matrices (normalization folded in)."""
    w, x, y, z = q
    n2 = w * w + x * x + y * y + z * z
    s = 2.0 / np.where(n2 > 0, n2, 1.0)
    R = np.empty((q.shape[1], 3, 3))
    R[:, 0, 0] = 1 - s * (y * y + z * z)
    R[:, 0, 1] = s * (x * y - w * z)
    R[:, 0, 2] = s * (x * z + w * y)
    R[:, 1, 0] = s * (x * y + w * z)
    R[:, 1, 1] = 1 - s * (x * x + z * z)
    R[:, 1, 2] = s * (y * z - w * x)
    R[:, 2, 0] = s * (x * z - w * y)
    R[:, 2, 1] = s * (y * z + w * x)
    R[:, 2, 2] = 1 - s * (x * x + y * y)
    return R


def _unit_lp_gradient_rows(w: np.ndarray, sigma: np.ndarray, p: int) -> np.ndarray:
    """Unit-norm weighted-L_p potential gradient for (N, 3) rows, overflow-safe."""
    ratios = np.abs(w) / sigma
    m = ratios.max(axis=1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    g = np.sign(w) * (ratios / safe) ** (p - 1) / sigma
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(nrm > 0, g / np.where(nrm > 0, nrm, 1.0), 0.0)


class Transcription:
    """Residual/cost evaluator over the collocation grid for one scenario."""

    def __init__(
        self,
        mode: str,
        shape: ShapeParams,
        obstacles: list[ObstacleSpec],
        start: Frame,
        goal: Frame,
        degree: int = 5,
        n_coeffs: int = 30,
        n_collocation: int = 30,
        fixed_kappa: float = 0.0,
        kappa_start: float | None = None,
        kappa_end: float | None = None,
        margin: float = 1e-3,
        kappa_min: float = DEFAULT_KAPPA_MIN,
        e0: np.ndarray = E0_DEFAULT,
        bend_weight: float = 0.0,
        fd_step: float = 1e-7,
    ):
        if mode not in ("rigid-regular", "rigid-bent", "bendable"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.shape = shape
        self.obstacles = obstacles
        self.start = start
        self.goal = goal
        self.with_kappa = mode == "bendable"
        self.fixed_kappa = float(fixed_kappa)
        self.kappa_start = kappa_start
        self.kappa_end = kappa_end
        self.margin = float(margin)
        self.kappa_min = float(kappa_min)
        self.e0 = np.asarray(e0, dtype=float)
        self.bend_weight = float(bend_weight)
        self.fd_step = float(fd_step)
        self.grid = tj.CollocationGrid.uniform(n_collocation)
        self.maps = tj.GridMaps.build(degree, n_coeffs, self.grid)
        self.layout = DecisionLayout.build(n_coeffs, degree, len(obstacles), self.with_kappa)
        self.N = n_collocation
        # cost quadrature on a 4x refined grid: with as many collocation
        # points as coefficients, a coarse quadrature has null directions the
        # optimizer would exploit (spline wiggles invisible to the cost)
        self.cost_grid = tj.CollocationGrid.uniform(4 * n_collocation + 1)
        self.cost_maps = tj.GridMaps.build(degree, n_coeffs, self.cost_grid)
        taus = self.cost_grid.taus
        w = np.empty_like(taus)
        w[0] = (taus[1] - taus[0]) / 2
        w[-1] = (taus[-1] - taus[-2]) / 2
        w[1:-1] = (taus[2:] - taus[:-2]) / 2
        self.quad_w = w
        # residual bookkeeping: ordered (name, rows) pairs
        self.eq_families = [("defect_x", self.N), ("defect_y", self.N), ("defect_z", self.N),
                            ("defect_qw", self.N), ("defect_qx", self.N), ("defect_qy", self.N),
                            ("defect_qz", self.N), ("quat_norm", self.N)]
        for j in range(len(obstacles)):
            for c in ("x", "y", "z"):
                self.eq_families.append((f"stationarity_{c}_{j}", self.N))
            self.eq_families.append((f"surface_{j}", self.N))
        self.n_boundary = 14 + (2 if self.with_kappa else 0)
        self.ineq_per_obstacle = 10 if self._bent_mode else 2
        self.n_eq = sum(r for _, r in self.eq_families) + self.n_boundary
        self.n_ineq = self.ineq_per_obstacle * self.N * len(obstacles)

    @property
    def _bent_mode(self) -> bool:
        return self.mode in ("rigid-bent", "bendable")

    # -- decision vector helpers ------------------------------------------

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        m = self.layout.n_coeffs
        out = {}
        for name, sl in self.layout.slices.items():
            if name == "T_f":
                out[name] = float(x[sl][0])
            else:
                block = x[sl]
                out[name] = block.reshape(-1, m)
        return out

    def join(self, parts: dict) -> np.ndarray:
        x = np.empty(self.layout.size)
        for name, sl in self.layout.slices.items():
            if name == "T_f":
                x[sl] = parts[name]
            else:
                x[sl] = np.asarray(parts[name], dtype=float).reshape(-1)
        return x

    def core_values(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Sampled values/derivatives of every spline at the grid."""
        p = self.split(x)
        B, D = self.maps.values, self.maps.derivs
        core = {
            "pos": p["position"] @ B.T,
            "pos_d": p["position"] @ D.T,
            "quat": p["quaternion"] @ B.T,
            "quat_d": p["quaternion"] @ D.T,
            "u": p["speed"] @ B.T,
            "om": p["omega"] @ B.T,
        }
        if self.with_kappa:
            core["kappa"] = p["kappa"] @ B.T
        for j in range(len(self.obstacles)):
            core[f"vbar_{j}"] = p[f"vbar_{j}"] @ B.T
        core["T_f"] = p["T_f"]
        return core

    # -- pointwise residual stacks ----------------------------------------

    def _kappa_at_grid(self, core: dict) -> np.ndarray:
        if self.with_kappa:
            return core["kappa"][0]
        return np.full(self.N, self.fixed_kappa)

    def _safety_stacks(self, core: dict) -> tuple[np.ndarray, np.ndarray]:
        """Equality (4 families) and inequality (2/10 families) stacks per obstacle.

        Vectorized mirror of collision_constraints.assemble_bundle; the test
        suite asserts pointwise agreement with that module.
        """
        pos = core["pos"].T  # (N, 3)
        Rb = _rot_from_quat_batch(core["quat"])
        kap = self._kappa_at_grid(core)
        eq_blocks, ineq_blocks = [], []
        sr = self.shape.sigma_array
        p_r = self.shape.p
        for j, obstacle in enumerate(self.obstacles):
            vbar = core[f"vbar_{j}"].T  # (N, 3)
            Ro = obstacle.frame.rotation
            world = np.einsum("nij,nj->ni", Rb, vbar) + pos
            w = (world - obstacle.frame.position) @ Ro
            dist = weighted_lp_norm(w, obstacle.sigma_array, obstacle.p)
            ghat_w = _unit_lp_gradient_rows(w, obstacle.sigma_array, obstacle.p)
            t = np.einsum("nji,nj->ni", Rb, ghat_w @ Ro.T)
            if self._bent_mode:
                res, surface, sign_ip, corners = self._bent_pointwise(vbar, kap, t, sr, p_r)
                d_corners = self._corner_distances(corners, Rb, pos, obstacle)
                # mirror-pair symmetrization keeps indexed entries continuous
                # through the kappa sign flip; the feasible set is unchanged
                # because the corner set is closed under the body's x-mirror
                d_corners = np.minimum(d_corners, d_corners[:, self._MIRROR])
                ineq = np.vstack([-sign_ip, (d_corners - dist[:, None]).T, dist - (1.0 + self.margin)])
            else:
                res, surface, sign_ip = self._rigid_pointwise(vbar, t, sr, p_r)
                ineq = np.vstack([-sign_ip, dist - (1.0 + self.margin)])
            eq_blocks.append(np.vstack([res.T, surface]))
            ineq_blocks.append(ineq)
        return np.concatenate(eq_blocks), np.concatenate(ineq_blocks)

    @staticmethod
    def _rigid_pointwise(vbar, t, sigma, p):
        r = vbar / sigma
        s = weighted_lp_norm(r, np.ones(3), p)
        s_safe = np.where(s > 0, s, 1.0)
        rt = r / s_safe[:, None]
        ghat = np.sign(rt) * np.abs(rt) ** (p - 1) / sigma
        vt = rt * sigma
        res = t - ghat * np.sum(vt * t, axis=1)[:, None]
        sign_ip = np.sum(t * vbar, axis=1)
        return res, s - 1.0, sign_ip

    def _bent_pointwise(self, vbar, kap, t, sigma, p):
        """Stationarity residual, surface residual, sign test, corner points.

        The straight-body algebra is the |kappa| -> 0 limit of the polar one,
        but the two differ by O(kappa) at any finite floor and the bending
        map mirror-flips across kappa = 0, so a hard switch leaves O(floor)
        jumps that wedge the solver (measured).  The rows are therefore
        blended smoothly from straight to polar over the band
        [kappa_min, 2*kappa_min]; corner points always use the polar map at
        the floor-clamped curvature and are ranked mirror-symmetrized, which
        is continuous through the sign flip.
        """
        s1, s2, s3 = sigma
        ak = np.abs(kap)
        ks = np.where(ak >= self.kappa_min, kap,
                      np.where(kap >= 0, self.kappa_min, -self.kappa_min))
        aks = np.abs(ks)
        alpha = np.where(ks >= 0, 1.0, -1.0)
        X = ks * vbar[:, 0]
        Y = ks * vbar[:, 1] + 1.0
        R = np.hypot(X, Y)
        R_safe = np.where(R > 0, R, 1.0)
        theta0 = alpha * (np.pi / 2)
        theta = np.arctan2(alpha * Y, alpha * X)
        theta -= 2 * np.pi * np.round((theta - theta0) / (2 * np.pi))
        weights = np.array([s2, s1, s3])
        dev = np.stack([R - 1.0, theta0 - theta, aks * vbar[:, 2]], axis=1)
        ratios = dev / (weights * aks[:, None])
        s = weighted_lp_norm(ratios, np.ones(3), p)
        s_safe = np.where(s > 0, s, 1.0)
        rho = ratios / s_safe[:, None]
        ghat = np.sign(rho) * np.abs(rho) ** (p - 1) / weights
        nu = rho * weights
        ct, st = np.cos(theta), np.sin(theta)
        a = np.stack([ct * ghat[:, 0] + st * ghat[:, 1] / R_safe,
                      st * ghat[:, 0] - ct * ghat[:, 1] / R_safe,
                      ghat[:, 2]], axis=1)
        b = np.stack([ct * nu[:, 0] + R * st * nu[:, 1],
                      st * nu[:, 0] - R * ct * nu[:, 1],
                      nu[:, 2]], axis=1)
        res_bent = t - a * np.sum(b * t, axis=1)[:, None]
        sign_bent = np.sum(t * b, axis=1)
        surface_bent = s - 1.0
        res_reg, surface_reg, sign_reg = self._rigid_pointwise(vbar, t, sigma, p)
        w = np.clip((ak - self.kappa_min) / self.kappa_min, 0.0, 1.0)
        wc = w[:, None]
        res = (1.0 - wc) * res_reg + wc * res_bent
        surface = (1.0 - w) * surface_reg + w * surface_bent
        sign_ip = (1.0 - w) * sign_reg + w * sign_bent
        corners = self._corner_array(ks, sigma, p)
        return res, surface, sign_ip, corners

    def _corner_array(self, ks, sigma, p):
        """On-surface corner points per collocation point, (N, 8, 3).

        Always through the bending map at the floor-clamped curvature; the
        planar order is [( s1, s2), ( s1,-s2), (-s1, s2), (-s1,-s2)], so the
        x-mirror pairs are (0, 2) and (1, 3).
        """
        s1, s2, s3 = sigma
        scale = 3.0 ** (-1.0 / p)
        ux = scale * np.array([s1, s1, -s1, -s1])
        uy = scale * np.array([s2, -s2, s2, -s2])
        aks = np.abs(ks)[:, None]
        alpha = np.where(ks >= 0, 1.0, -1.0)[:, None]
        radius = 1.0 / aks
        phi = alpha * (np.pi / 2) + aks * ux[None, :]
        rad = radius + uy[None, :]
        cx = rad * np.cos(phi)
        cy = rad * np.sin(phi) - alpha * radius
        corners = np.empty((len(ks), 8, 3))
        corners[:, :4, 0] = cx
        corners[:, :4, 1] = cy
        corners[:, :4, 2] = scale * s3
        corners[:, 4:, 0] = cx
        corners[:, 4:, 1] = cy
        corners[:, 4:, 2] = -scale * s3
        return corners

    _MIRROR = np.array([2, 3, 0, 1, 6, 7, 4, 5])

    @staticmethod
    def _corner_distances(corners, Rb, pos, obstacle):
        world = np.einsum("nij,nkj->nki", Rb, corners) + pos[:, None, :]
        w = np.einsum("nki,ij->nkj", world - obstacle.frame.position, obstacle.frame.rotation)
        return weighted_lp_norm(w, obstacle.sigma_array, obstacle.p)

    def _pointwise_equalities(self, core: dict) -> np.ndarray:
        defects = tj.pointwise_defects(
            core["pos_d"], core["quat"], core["quat_d"], core["u"][0], core["om"],
            core["T_f"], self.e0, tangent_quaternion=True,
        )
        quat = core["quat"]
        norms = np.sum(quat * quat, axis=0) - 1.0
        if self.obstacles:
            saf_eq, _ = self._safety_stacks(core)
            return np.concatenate([defects, norms, saf_eq.ravel()])
        return np.concatenate([defects, norms])

    def _pointwise_inequalities(self, core: dict) -> np.ndarray:
        if not self.obstacles:
            return np.zeros(0)
        _, saf_in = self._safety_stacks(core)
        return saf_in.ravel()

    # -- public residuals ---------------------------------------------------

    def boundary(self, x: np.ndarray) -> np.ndarray:
        p = self.split(x)
        bundle_like = tj.TrajectoryBundle(
            degree=self.layout.degree,
            position=p["position"],
            quaternion=p["quaternion"],
            speed=p["speed"][0],
            omega=p["omega"],
            final_time=max(p["T_f"], 1e-9),
            kappa=p["kappa"][0] if self.with_kappa else None,
        )
        return tj.boundary_residuals(
            bundle_like, self.start.position, self.start.quaternion,
            self.goal.position, self.goal.quaternion,
            self.kappa_start if self.with_kappa else None,
            self.kappa_end if self.with_kappa else None,
        )

    def equalities(self, x: np.ndarray) -> np.ndarray:
        core = self.core_values(x)
        return np.concatenate([self._pointwise_equalities(core), self.boundary(x)])

    def inequalities(self, x: np.ndarray) -> np.ndarray:
        return self._pointwise_inequalities(self.core_values(x))

    def cost(self, x: np.ndarray) -> float:
        p = self.split(x)
        T_f = p["T_f"]
        pos_d = p["position"] @ self.cost_maps.derivs.T
        speed2 = np.sum(pos_d**2, axis=0)
        integrand = np.sqrt(speed2 + tj.EPS_SPEED * T_f**2)
        val = float(self.quad_w @ integrand)
        if self.bend_weight != 0.0 and self.with_kappa:
            kap = p["kappa"][0] @ self.cost_maps.values.T
            val += self.bend_weight * T_f * float(self.quad_w @ np.sqrt(kap**2 + tj.EPS_BEND))
        return val

    def cost_gradient(self, x: np.ndarray) -> np.ndarray:
        p = self.split(x)
        T_f = p["T_f"]
        g = np.zeros(self.layout.size)
        pos_d = p["position"] @ self.cost_maps.derivs.T
        speed2 = np.sum(pos_d**2, axis=0)
        root = np.sqrt(speed2 + tj.EPS_SPEED * T_f**2)
        root_safe = np.where(root > 0, root, 1.0)
        d_posd = (self.quad_w / root_safe)[None, :] * pos_d
        g[self.layout.slices["position"]] = (d_posd @ self.cost_maps.derivs).ravel()
        dT = float(np.sum(self.quad_w * tj.EPS_SPEED * T_f / root_safe))
        if self.bend_weight != 0.0 and self.with_kappa:
            kap = p["kappa"][0] @ self.cost_maps.values.T
            broot = np.sqrt(kap**2 + tj.EPS_BEND)
            g[self.layout.slices["kappa"]] = (
                self.bend_weight * T_f * ((self.quad_w * kap / broot) @ self.cost_maps.values)
            )
            dT += self.bend_weight * float(self.quad_w @ broot)
        g[self.layout.slices["T_f"]] = dT
        return g

    def cost_hessian_model(self, x: np.ndarray) -> np.ndarray:
        """Positive semidefinite curvature model of the cost.

        Supplies the inner solver with the curvature the penalty term lacks
        along the constraint null space.  Uses the diagonal-in-points upper
        model w/root * I for the speed integrand (true block is
        w/root * (I - u u^T)) and the analogous term for the bend part.
        """
        p = self.split(x)
        T_f = p["T_f"]
        H = np.zeros((self.layout.size, self.layout.size))
        pos_d = p["position"] @ self.cost_maps.derivs.T
        speed2 = np.sum(pos_d**2, axis=0)
        root = np.sqrt(speed2 + tj.EPS_SPEED * T_f**2)
        D = self.cost_maps.derivs
        block = D.T @ (D * (self.quad_w / np.where(root > 0, root, 1.0))[:, None])
        sl = self.layout.slices["position"]
        m = self.layout.n_coeffs
        for c in range(3):
            H[sl.start + c * m : sl.start + (c + 1) * m,
              sl.start + c * m : sl.start + (c + 1) * m] = block
        if self.bend_weight != 0.0 and self.with_kappa:
            kap = p["kappa"][0] @ self.cost_maps.values.T
            broot = np.sqrt(kap**2 + tj.EPS_BEND)
            B = self.cost_maps.values
            kblock = B.T @ (B * (self.bend_weight * T_f * self.quad_w
                                 * tj.EPS_BEND / broot**3)[:, None])
            slk = self.layout.slices["kappa"]
            H[slk, slk] = kblock
        return H

    # -- structured Jacobians -----------------------------------------------

    _CORE_GROUPS = (
        ("pos", "position", "values"),
        ("pos_d", "position", "derivs"),
        ("quat", "quaternion", "values"),
        ("quat_d", "quaternion", "derivs"),
        ("u", "speed", "values"),
        ("om", "omega", "values"),
        ("kappa", "kappa", "values"),
    )

    def jacobians(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Dense equality/inequality Jacobians via the pointwise-core chain.

        Forward differences perturb each sampled core channel at all grid
        points simultaneously (each residual row depends on exactly one grid
        point), then the sensitivity is folded through the basis matrix of
        the owning spline.  The T_f column of the defects is analytic.
        """
        core = self.core_values(x)
        eq0 = self._pointwise_equalities(core)
        in0 = self._pointwise_inequalities(core)
        n = self.layout.size
        J_eq = np.zeros((eq0.size + self.n_boundary, n))
        J_in = np.zeros((in0.size, n))

        groups = [g for g in self._CORE_GROUPS if g[0] in core]
        for j in range(len(self.obstacles)):
            groups.append((f"vbar_{j}", f"vbar_{j}", "values"))
        for key, spline, basis_kind in groups:
            basis = self.maps.values if basis_kind == "values" else self.maps.derivs
            block = core[key]
            for comp in range(block.shape[0]):
                h = self.fd_step * np.maximum(1.0, np.abs(block[comp]))
                pert = {k: v for k, v in core.items()}
                pb = block.copy()
                pb[comp] = pb[comp] + h
                pert[key] = pb
                d_eq = (self._pointwise_equalities(pert) - eq0).reshape(-1, self.N) / h
                d_in = None
                if in0.size:
                    d_in = (self._pointwise_inequalities(pert) - in0).reshape(-1, self.N) / h
                sl = self.layout.slices[spline]
                cols = slice(sl.start + comp * self.layout.n_coeffs,
                             sl.start + (comp + 1) * self.layout.n_coeffs)
                for fam in range(d_eq.shape[0]):
                    nz = np.nonzero(d_eq[fam])[0]
                    if nz.size:
                        J_eq[fam * self.N + nz, cols] += d_eq[fam, nz, None] * basis[nz, :]
                if d_in is not None:
                    for fam in range(d_in.shape[0]):
                        nz = np.nonzero(d_in[fam])[0]
                        if nz.size:
                            J_in[fam * self.N + nz, cols] += d_in[fam, nz, None] * basis[nz, :]

        # analytic T_f column: defects scale as -deriv/T_f^2 (quaternion rows
        # carry the same tangent projection as the residuals themselves)
        T_f = core["T_f"]
        tcol = self.layout.slices["T_f"].start
        J_eq[: 3 * self.N, tcol] = (-core["pos_d"] / T_f**2).ravel()
        quat = core["quat"]
        n2 = np.sum(quat * quat, axis=0)
        n2 = np.where(n2 > 0, n2, 1.0)
        radial = np.sum(quat * core["quat_d"], axis=0) / n2
        quat_d_t = core["quat_d"] - quat * radial
        J_eq[3 * self.N : 7 * self.N, tcol] = (-quat_d_t / T_f**2).ravel()

        # boundary rows are linear in endpoint coefficients
        J_eq[eq0.size :, :] = self._boundary_rows()
        return J_eq, J_in

    def _boundary_rows(self) -> np.ndarray:
        m = self.layout.n_coeffs
        rows = np.zeros((self.n_boundary, self.layout.size))
        r = 0
        for comp in range(3):
            rows[r, self.layout.slices["position"].start + comp * m] = 1.0
            r += 1
        for comp in range(4):
            rows[r, self.layout.slices["quaternion"].start + comp * m] = 1.0
            r += 1
        for comp in range(3):
            rows[r, self.layout.slices["position"].start + comp * m + m - 1] = 1.0
            r += 1
        for comp in range(4):
            rows[r, self.layout.slices["quaternion"].start + comp * m + m - 1] = 1.0
            r += 1
        if self.with_kappa:
            rows[r, self.layout.slices["kappa"].start] = 1.0
            r += 1
            rows[r, self.layout.slices["kappa"].start + m - 1] = 1.0
            r += 1
        return rows

    # -- bounds ---------------------------------------------------------------

    def bounds(
        self,
        speed_bounds: tuple[float, float],
        omega_bounds: tuple[float, float],
        kappa_bounds: tuple[float, float] | None,
        time_bounds: tuple[float, float],
    ) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds on the decision vector.

        Control bounds are imposed on the spline coefficients, which by the
        convex-hull property enforces them along the whole trajectory.
        """
        lo = np.full(self.layout.size, -np.inf)
        hi = np.full(self.layout.size, np.inf)
        m = self.layout.n_coeffs

        def set_block(name, lo_v, hi_v):
            sl = self.layout.slices[name]
            lo[sl] = lo_v
            hi[sl] = hi_v

        set_block("speed", speed_bounds[0], speed_bounds[1])
        set_block("omega", omega_bounds[0], omega_bounds[1])
        set_block("quaternion", -1.5, 1.5)
        if self.with_kappa:
            if kappa_bounds is None:
                raise ValueError("bendable mode needs kappa bounds")
            set_block("kappa", kappa_bounds[0], kappa_bounds[1])
        extent = 1.5 * sum(self.shape.sigma)
        for j in range(len(self.obstacles)):
            set_block(f"vbar_{j}", -extent, extent)
        sl = self.layout.slices["T_f"]
        lo[sl], hi[sl] = time_bounds
        return lo, hi


def assemble(scenario) -> NlpProblem:
    """Build the NLP for a scenario object (see planner_cli.Scenario)."""
    tr = Transcription(
        mode=scenario.mode,
        shape=scenario.robot_shape,
        obstacles=scenario.obstacles,
        start=scenario.start_frame,
        goal=scenario.goal_frame,
        degree=scenario.degree,
        n_coeffs=scenario.n_coeffs,
        n_collocation=scenario.n_collocation,
        fixed_kappa=scenario.robot_kappa,
        kappa_start=scenario.kappa_start,
        kappa_end=scenario.kappa_end,
        margin=scenario.margin,
        kappa_min=scenario.kappa_min,
        bend_weight=scenario.bend_weight,
        fd_step=scenario.solver.fd_step,
    )
    lo, hi = tr.bounds(scenario.speed_bounds, scenario.omega_bounds,
                       scenario.kappa_bounds if tr.with_kappa else None,
                       scenario.time_bounds)
    return NlpProblem(
        n=tr.layout.size,
        cost=tr.cost,
        cost_gradient=tr.cost_gradient,
        equalities=tr.equalities,
        inequalities=tr.inequalities,
        eq_jacobian=lambda x: tr.jacobians(x)[0],
        ineq_jacobian=lambda x: tr.jacobians(x)[1],
        lower=lo,
        upper=hi,
        layout=tr.layout,
        transcription=tr,
        cost_hessian=tr.cost_hessian_model,
    )


def _point_clearance(point: np.ndarray, obstacles: list[ObstacleSpec], body_radius: float) -> float:
    """Smallest scaled obstacle clearance of a center point (>=0 means clear)."""
    worst = math.inf
    for ob in obstacles:
        w = ob.frame.rotation.T @ (point - ob.frame.position)
        d = weighted_lp_norm(w, ob.sigma_array, ob.p)
        worst = min(worst, (d - 1.0) * min(ob.sigma) - body_radius)
    return worst


def _bow_clear(path: np.ndarray, taus: np.ndarray, obstacles: list[ObstacleSpec],
               body_radius: float, chord: np.ndarray) -> np.ndarray:
    """Bow a center path away from obstacles until the samples clear.

    Repeatedly adds a sin^2 bump (zero value and slope at the endpoints)
    along the outward obstacle direction at the worst sample.  Plumbing for
    the initial guess only; the solver is free to move the path afterwards.
    """
    if not obstacles:
        return path
    axis = chord / max(np.linalg.norm(chord), 1e-12)
    bump = np.sin(np.pi * taus) ** 2
    for _ in range(60):
        clear = np.array([_point_clearance(p, obstacles, body_radius) for p in path])
        k = int(np.argmin(clear))
        if clear[k] > 0.2 * body_radius:
            return path
        point = path[k]
        blocker = min(obstacles, key=lambda ob: _point_clearance(point, [ob], body_radius))
        w = blocker.frame.rotation.T @ (point - blocker.frame.position)
        away = blocker.frame.rotation @ unit_lp_gradient(w, blocker.sigma_array, blocker.p)
        away = away - axis * (away @ axis)
        if np.linalg.norm(away) < 1e-9:
            j = int(np.argmin(blocker.sigma))
            away = blocker.frame.rotation[:, j]
            away = away - axis * (away @ axis)
        away = away / max(np.linalg.norm(away), 1e-12)
        path = path + (0.5 * body_radius) * bump[:, None] * away[None, :]
    return path


def _minimal_arc_quat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a to unit vector b."""
    from .se3_kinematics import quat_from_axis_angle

    c = np.cross(a, b)
    d = float(a @ b)
    nc = float(np.linalg.norm(c))
    if nc < 1e-12:
        if d > 0:
            return np.array([1.0, 0.0, 0.0, 0.0])
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        return quat_from_axis_angle(axis, math.pi)
    return quat_from_axis_angle(c, math.atan2(nc, d))


def _consistent_pose_samples(start: Frame, goal: Frame, obstacles, body_radius: float,
                             taus: np.ndarray, e0: np.ndarray):
    """Sampled path/orientation/control curves satisfying the heading kinematics.

    The path is a Hermite arc leaving along the start heading and arriving
    along the goal heading, bowed clear of obstacles; orientations transport
    the start frame so the heading axis tracks the path tangent, with the
    leftover twist about the heading distributed linearly so the goal frame
    is met.  Along these samples the pose kinematics hold exactly with
    u = |path'| / T_f and the matching body rates, so the initial defects are
    only spline-fit error.  Returns None for degenerate (zero-length) moves.
    """
    from .se3_kinematics import quat_conjugate, quat_from_axis_angle, quat_multiply, quat_to_matrix

    chord = goal.position - start.position
    L = float(np.linalg.norm(chord))
    if L < 1e-9:
        return None
    h0 = start.rotation @ e0
    h1 = goal.rotation @ e0
    t0v, t1v = 0.8 * L * h0, 0.8 * L * h1
    tt = taus
    h00 = 2 * tt**3 - 3 * tt**2 + 1
    h10 = tt**3 - 2 * tt**2 + tt
    h01 = -2 * tt**3 + 3 * tt**2
    h11 = tt**3 - tt**2
    path = (h00[:, None] * start.position + h10[:, None] * t0v
            + h01[:, None] * goal.position + h11[:, None] * t1v)
    path = _bow_clear(path, taus, obstacles, body_radius, chord)
    d_tau = np.gradient(path, taus, axis=0)
    speeds = np.linalg.norm(d_tau, axis=1)
    if speeds.min() < 1e-6 * L:
        return None
    heading = d_tau / speeds[:, None]

    qa = np.array([quat_multiply(_minimal_arc_quat(h0, h), start.quaternion) for h in heading])
    rel = quat_multiply(goal.quaternion, quat_conjugate(qa[-1]))
    rel = rel / np.linalg.norm(rel)
    vec = rel[1:]
    if np.linalg.norm(vec) > 1e-12:
        angle = 2.0 * math.atan2(float(np.linalg.norm(vec)), float(rel[0]))
        sign = 1.0 if float(vec / np.linalg.norm(vec) @ h1) >= 0 else -1.0
        twist = sign * angle
    else:
        twist = 0.0
    quats = np.array([
        quat_multiply(quat_from_axis_angle(heading[k], twist * tt[k]), qa[k])
        for k in range(len(tt))
    ])
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    for k in range(1, len(quats)):
        if quats[k] @ quats[k - 1] < 0:
            quats[k] = -quats[k]
    q_dot = np.gradient(quats, taus, axis=0)
    omega_tau = np.array([
        2.0 * quat_multiply(quat_conjugate(quats[k]), q_dot[k])[1:] for k in range(len(tt))
    ])
    return path, quats, speeds, omega_tau


def initial_guess(scenario, problem: NlpProblem, rng: np.random.Generator | None = None,
                  perturbation: float = 0.0) -> np.ndarray:
    """Near-feasible starting point.

    Builds pose samples that satisfy the heading kinematics along an
    obstacle-avoiding arc (see ``_consistent_pose_samples``), picks the final
    time so the implied controls sit inside their bounds, least-squares fits
    every spline with endpoints pinned, interpolates curvature between its
    endpoints, and seeds each closest-point block from the oracle at a few
    key times.  Degenerate zero-length moves fall back to a constant pose
    with spherical orientation interpolation.
    """
    from .se3_kinematics import quat_slerp

    tr: Transcription = problem.transcription
    m = tr.layout.n_coeffs
    degree = tr.layout.degree
    knots = tj.clamped_knots(degree, m)
    greville = np.array([knots[i + 1 : i + degree + 1].mean() for i in range(m)])

    start, goal = scenario.start_frame, scenario.goal_frame
    # clearance scale for the seed path: the thin body dimension plus slack;
    # the full circumradius would force absurd detours for elongated bodies
    body_radius = 1.5 * float(min(tr.shape.sigma))
    fit_taus = np.linspace(0.0, 1.0, max(4 * m, 48))
    u_max = scenario.speed_bounds[1]
    om_max = scenario.omega_bounds[1]

    samples = _consistent_pose_samples(start, goal, tr.obstacles, body_radius, fit_taus, tr.e0)
    if samples is not None:
        path, quats, speeds, omega_tau = samples
        T_f = 2.0 * float(np.linalg.norm(goal.position - start.position)) / max(u_max, 1e-9)
        if u_max > 0:
            T_f = max(T_f, float(speeds.max()) / (0.8 * u_max))
        if om_max > 0:
            T_f = max(T_f, float(np.abs(omega_tau).max()) / (0.8 * om_max))
        T_f = float(np.clip(T_f, scenario.time_bounds[0], scenario.time_bounds[1]))
        u_samples = speeds / T_f
        om_samples = omega_tau / T_f
    else:
        path = np.tile(start.position, (len(fit_taus), 1))
        quats = np.array([quat_slerp(start.quaternion, goal.quaternion, t) for t in fit_taus])
        T_f = float(np.clip(1.0, scenario.time_bounds[0], scenario.time_bounds[1]))
        u_samples = np.zeros(len(fit_taus))
        om_samples = np.zeros((len(fit_taus), 3))

    position = np.stack([
        tj.fit_spline_coefficients(degree, m, fit_taus, path[:, c]) for c in range(3)
    ])
    quaternion = np.stack([
        tj.fit_spline_coefficients(degree, m, fit_taus, quats[:, c]) for c in range(4)
    ])
    speed = tj.fit_spline_coefficients(degree, m, fit_taus, u_samples)
    speed = np.clip(speed, scenario.speed_bounds[0], scenario.speed_bounds[1])
    omega = np.stack([
        np.clip(tj.fit_spline_coefficients(degree, m, fit_taus, om_samples[:, c]),
                scenario.omega_bounds[0], scenario.omega_bounds[1])
        for c in range(3)
    ])

    parts = {
        "position": position,
        "quaternion": quaternion,
        "speed": speed,
        "omega": omega,
        "T_f": T_f,
    }
    if tr.with_kappa:
        k0, k1 = scenario.kappa_start, scenario.kappa_end
        parts["kappa"] = k0 + (k1 - k0) * greville

    key_taus = np.linspace(0.0, 1.0, 9)
    key_idx = [int(round(t * (len(fit_taus) - 1))) for t in key_taus]
    for j, obstacle in enumerate(tr.obstacles):
        seeds = []
        for t, i in zip(key_taus, key_idx):
            q = quats[i] / np.linalg.norm(quats[i])
            kappa_t = 0.0
            if tr.with_kappa:
                kappa_t = scenario.kappa_start + (scenario.kappa_end - scenario.kappa_start) * t
            elif tr.mode == "rigid-bent":
                kappa_t = tr.fixed_kappa
            res = brute_force_closest(Frame(path[i], q), obstacle, tr.shape,
                                      kappa=kappa_t, grid_n=32, refine=False)
            seeds.append(res.v_min)
        seeds = np.array(seeds)
        parts[f"vbar_{j}"] = np.stack([
            tj.fit_spline_coefficients(degree, m, key_taus, seeds[:, c]) for c in range(3)
        ])

    x0 = tr.join(parts)
    if perturbation > 0.0 and rng is not None:
        noise = rng.normal(scale=perturbation, size=x0.shape)
        noise[tr.layout.slices["T_f"]] = 0.0
        x0 = x0 + noise
    return np.clip(x0, problem.lower, problem.upper)


def gradients(problem: NlpProblem, x: np.ndarray, method: str = "structured"):
    """Cost gradient and constraint Jacobians at a point.

    ``structured`` uses the transcription's exact-chain evaluators (or the
    problem's own callables); ``fd`` falls back to plain forward differences
    on the public residual functions.
    """
    if method == "fd":
        return fd_gradients(problem, x)
    if method != "structured":
        raise ValueError(f"unknown gradient method {method!r}")
    if problem.transcription is not None:
        J_eq, J_in = problem.transcription.jacobians(x)
        return problem.cost_gradient(x), J_eq, J_in
    return problem.cost_gradient(x), problem.eq_jacobian(x), problem.ineq_jacobian(x)


# ---------------------------------------------------------------------------
# Augmented-Lagrangian solver
# ---------------------------------------------------------------------------


class _AlSubproblem:
    """Augmented Lagrangian of one outer iteration over (x, slacks)."""

    def __init__(self, problem: NlpProblem, y_eq, y_in, rho):
        self.problem = problem
        self.y_eq, self.y_in, self.rho = y_eq, y_in, rho
        self.n = problem.n
        self.n_in = y_in.size

    def residuals(self, z):
        x, s = z[: self.n], z[self.n :]
        r_eq = self.problem.equalities(x)
        r_in = self.problem.inequalities(x) - s
        return r_eq, r_in

    def value(self, z, residuals=None):
        r_eq, r_in = self.residuals(z) if residuals is None else residuals
        x = z[: self.n]
        return (self.problem.cost(x) - self.y_eq @ r_eq + 0.5 * self.rho * r_eq @ r_eq
                - self.y_in @ r_in + 0.5 * self.rho * r_in @ r_in)

    def gradient_with(self, z, J_eq, J_in, residuals=None):
        """AL gradient from fresh residuals and (possibly stale) Jacobians."""
        r_eq, r_in = self.residuals(z) if residuals is None else residuals
        gx = self.problem.cost_gradient(z[: self.n]) - J_eq.T @ (self.y_eq - self.rho * r_eq)
        if self.n_in:
            gx -= J_in.T @ (self.y_in - self.rho * r_in)
        gs = self.y_in - self.rho * r_in
        return np.concatenate([gx, gs])

    def jacobians(self, z):
        _, J_eq, J_in = gradients(self.problem, z[: self.n])
        return J_eq, J_in


def _inner_lm(sub: _AlSubproblem, z0, lower, upper, maxiter: int, gtol: float,
              lam0: float = 1e-3) -> tuple[np.ndarray, int, float]:
    """Projected Levenberg/Gauss-Newton minimization of the AL subproblem.

    The Hessian model is rho * J^T J (Gauss-Newton on the penalized
    residuals) with Marquardt diagonal damping, which handles the
    rank-deficient stationarity rows by construction.  Coordinates pressed
    against their bound by the gradient are frozen each iteration; trial
    points are projected back into the box.  Jacobians (and the cached
    normal matrix) are refreshed lazily: kept while the quadratic model
    predicts well, rebuilt when it degrades, which makes most iterations
    cost only residual evaluations.
    """
    n, n_in = sub.n, sub.n_in
    z = np.clip(z0, lower, upper)
    J_eq = J_in = None
    H_xx_full = None
    res = sub.residuals(z)
    f = sub.value(z, res)
    g = None
    lam = lam0
    it = 0
    pg_norm = math.inf
    stale = 0
    refresh = True
    while it < maxiter:
        it += 1
        if refresh:
            J_eq, J_in = sub.jacobians(z)
            if n_in:
                H_xx_full = sub.rho * (J_eq.T @ J_eq + J_in.T @ J_in)
            else:
                H_xx_full = sub.rho * (J_eq.T @ J_eq)
            if sub.problem.cost_hessian is not None:
                H_xx_full = H_xx_full + sub.problem.cost_hessian(z[:n])
            stale = 0
            refresh = False
        g = sub.gradient_with(z, J_eq, J_in, res)
        pg = z - np.clip(z - g, lower, upper)
        pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
        if pg_norm < gtol:
            break
        at_lower = (z <= lower + 1e-12) & (g > 0)
        at_upper = (z >= upper - 1e-12) & (g < 0)
        free = ~(at_lower | at_upper)
        nf = int(np.count_nonzero(free))
        if nf == 0:
            break
        fx_idx = np.nonzero(free[:n])[0]
        fs_idx = np.nonzero(free[n:])[0]
        nx = len(fx_idx)
        H = np.zeros((nf, nf))
        H[:nx, :nx] = H_xx_full[np.ix_(fx_idx, fx_idx)]
        if n_in and len(fs_idx):
            H_xs = -sub.rho * J_in[np.ix_(fs_idx, fx_idx)].T
            H[:nx, nx:] = H_xs
            H[nx:, :nx] = H_xs.T
            H[nx:, nx:] = sub.rho * np.eye(len(fs_idx))
        gf = g[free]
        # plain Levenberg damping: diagonal-proportional damping would scale
        # with rho and crush the constraint-null-space (cost descent) steps
        eye = np.eye(nf)
        accepted = False
        for _ in range(30):
            try:
                step_f = np.linalg.solve(H + lam * eye, -gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            z_new = z.copy()
            z_new[free] += step_f
            z_new = np.clip(z_new, lower, upper)
            res_new = sub.residuals(z_new)
            f_new = sub.value(z_new, res_new)
            if f_new < f - 1e-14 * max(1.0, abs(f)):
                step_full = z_new - z
                predicted = -(g @ step_full + 0.5 * step_full[free] @ (H @ step_full[free]))
                ratio = (f - f_new) / predicted if predicted > 0 else -1.0
                z, f, res = z_new, f_new, res_new
                lam = max(lam / 3.0, 1e-10)
                stale += 1
                if ratio < 0.25 or ratio > 4.0 or stale >= 10:
                    refresh = True
                accepted = True
                break
            lam *= 4.0
            if lam > 1e13:
                break
        if not accepted:
            if stale > 0:
                # the stale model may be the blocker: rebuild and try again
                refresh = True
                lam = max(lam / 16.0, 1e-8)
                continue
            break
    return z, it, pg_norm


def _restore_feasibility(problem: NlpProblem, z: np.ndarray, lower, upper,
                         tol: float, max_iter: int = 12) -> np.ndarray:
    """Damped Gauss-Newton projection onto the constraint manifold.

    Minimum-norm correction of (x, slacks) driving the stacked residuals
    [equalities; inequalities - slacks] to zero; quadratically convergent
    near the manifold, so it finishes the last decade of feasibility the
    first-order multiplier updates grind through.
    """
    n = problem.n
    for _ in range(max_iter):
        x, s = z[:n], z[n:]
        r_eq = problem.equalities(x)
        r_in = problem.inequalities(x) - s
        r = np.concatenate([r_eq, r_in])
        rnorm = float(np.max(np.abs(r))) if r.size else 0.0
        if rnorm < 0.2 * tol:
            break
        _, J_eq, J_in = gradients(problem, x)
        n_in = r_in.size
        J = np.zeros((r.size, n + n_in))
        J[: r_eq.size, :n] = J_eq
        if n_in:
            J[r_eq.size :, :n] = J_in
            J[r_eq.size :, n:] = -np.eye(n_in)
        # freeze coordinates whose least-squares pull points out of the box
        # (negative slacks of active inequalities, saturated controls)
        pull = J.T @ r
        frozen = ((z <= lower + 1e-12) & (pull > 0)) | ((z >= upper - 1e-12) & (pull < 0))
        free = np.nonzero(~frozen)[0]
        if free.size == 0:
            break
        Jf = J[:, free]
        lam = 1e-10 * max(1.0, float(np.max(np.abs(Jf))) ** 2)
        Hf = Jf.T @ Jf + lam * np.eye(free.size)
        step_f = np.linalg.solve(Hf, -Jf.T @ r)
        # guard against joyrides along near-null directions; productive
        # restoration steps in this normalized problem are well below this
        norm_step = float(np.linalg.norm(step_f))
        if norm_step > 1.0:
            step_f *= 1.0 / norm_step
        r2 = float(r @ r)
        improved = False
        for _ in range(10):
            z_new = z.copy()
            z_new[free] += step_f
            z_new = np.clip(z_new, lower, upper)
            x_new, s_new = z_new[:n], z_new[n:]
            r_new = np.concatenate([problem.equalities(x_new),
                                    problem.inequalities(x_new) - s_new])
            if float(r_new @ r_new) < r2:
                z = z_new
                improved = True
                break
            step_f = step_f * 0.5
        if not improved:
            break
    return z


def _ls_stationarity(problem: NlpProblem, x: np.ndarray, active_tol: float = 1e-5):
    """KKT residual with least-squares multiplier estimates.

    Fits equality multipliers (free sign), near-active inequality multipliers
    (nonnegative; sign convention feasible ⇔ positive residual) and bound
    multipliers for variables pinned at their box (one-sided), then returns
    the infinity norm of the remaining Lagrangian gradient.  This
    self-corrects the multiplier error the first-order updates leave in the
    rank-deficient constraint rows.
    """
    from scipy.optimize import lsq_linear

    g_cost, J_eq, J_in = gradients(problem, x)
    ci = problem.inequalities(x)
    active = np.nonzero(ci < active_tol)[0]
    m_eq = J_eq.shape[0]
    at_lb = np.nonzero(x <= problem.lower + 1e-12)[0]
    at_ub = np.nonzero(x >= problem.upper - 1e-12)[0]
    cols = [J_eq.T]
    if active.size:
        cols.append(J_in[active].T)
    n = x.size
    if at_lb.size:
        E = np.zeros((n, at_lb.size))
        E[at_lb, np.arange(at_lb.size)] = 1.0
        cols.append(E)
    if at_ub.size:
        E = np.zeros((n, at_ub.size))
        E[at_ub, np.arange(at_ub.size)] = -1.0
        cols.append(E)
    M = np.hstack(cols)
    n_signed = active.size + at_lb.size + at_ub.size
    lb = np.concatenate([np.full(m_eq, -np.inf), np.zeros(n_signed)])
    ub = np.full(m_eq + n_signed, np.inf)
    try:
        fit = lsq_linear(M, g_cost, bounds=(lb, ub), method="bvls", max_iter=80)
        y_fit = fit.x
    except Exception:
        y_fit, *_ = np.linalg.lstsq(M, g_cost, rcond=None)
    g_lag = g_cost - M @ y_fit
    pg_norm = float(np.max(np.abs(g_lag))) if g_lag.size else 0.0
    return pg_norm, y_fit[:m_eq], active, y_fit[m_eq : m_eq + active.size]


def solve(problem: NlpProblem, config: SolverConfig, x0: np.ndarray) -> SolverResult:
    """Augmented-Lagrangian loop with slack inequalities.

    Inner subproblems are solved by a projected Levenberg/Gauss-Newton
    method built on the structured constraint Jacobians (quasi-Newton with
    regularized normal equations, so rank-deficient stationarity rows are
    harmless).  Deterministic given the starting point.  Convergence
    requires the recomputed constraint violation below ``tol_constraint``
    and the projected Lagrangian gradient below ``tol_stationarity``.
    """
    x = np.clip(np.asarray(x0, dtype=float), problem.lower, problem.upper)
    ce = problem.equalities(x)
    ci = problem.inequalities(x)
    n_eq, n_in = ce.size, ci.size
    s = np.maximum(ci, 0.0)
    y_eq = np.zeros(n_eq)
    y_in = np.zeros(n_in)
    rho = config.penalty_init

    lower = np.concatenate([problem.lower, np.zeros(n_in)])
    upper = np.concatenate([problem.upper, np.full(n_in, np.inf)])

    def viol(xs, ss):
        r = [problem.equalities(xs)]
        if n_in:
            r.append(problem.inequalities(xs) - ss)
        return float(max(np.max(np.abs(v)) if v.size else 0.0 for v in r))

    trace: list[dict] = []
    status = "max_iter"
    gtol_k = 1e-3
    gtol_floor = 0.5 * config.tol_stationarity
    z = np.concatenate([x, s])
    prev_z = z.copy()
    viol_ref = math.inf
    pg_inner = math.nan
    last_cost = math.inf
    stagnant = 0
    for outer in range(1, config.max_outer + 1):
        sub = _AlSubproblem(problem, y_eq, y_in, rho)
        z, inner_its, pg_inner = _inner_lm(sub, z, lower, upper, config.max_inner,
                                           max(gtol_k, gtol_floor))
        x, s = z[: problem.n], z[problem.n :]
        v = viol(x, s)
        step = float(np.linalg.norm(z - prev_z))
        prev_z = z.copy()
        trace.append(dict(outer=outer, cost=float(problem.cost(x)), max_violation=v,
                          step_norm=step, penalty=float(rho), inner_iters=inner_its))
        if config.verbose:
            t = trace[-1]
            print(f"[al] {outer:3d} cost={t['cost']:.6e} viol={v:.3e} "
                  f"rho={rho:.1e} inner={inner_its} pg={pg_inner:.1e}")
        ce_v = problem.equalities(x)
        ci_v = problem.inequalities(x)
        r_eq, r_in = ce_v, ci_v - s
        # first-order multiplier update whenever feasibility improves enough;
        # otherwise tighten the penalty, capped low enough that the inner
        # subproblems stay solvable (the multipliers and the restoration
        # step finish the last mile at fixed penalty)
        rho_cap = 1e6
        if v <= max(0.4 * viol_ref, config.tol_constraint):
            y_eq = y_eq - rho * r_eq
            y_in = y_in - rho * r_in
            viol_ref = v
            gtol_k = max(min(gtol_k * 0.3, 0.1 * v), 1e-9)
        elif rho >= rho_cap:
            if v <= viol_ref:
                y_eq = y_eq - rho * r_eq
                y_in = y_in - rho * r_in
                viol_ref = v
            gtol_k = max(gtol_k * 0.5, 1e-9)
        else:
            rho *= config.penalty_growth
        # endgame: once close to the manifold, project onto it; convergence
        # requires independently recomputed feasibility plus the inner
        # solver's projected Lagrangian gradient below tolerance
        if problem.violation(x) < 3e-3:
            z_res = _restore_feasibility(problem, z, lower, upper, config.tol_constraint)
            x_res = z_res[: problem.n]
            if problem.violation(x_res) <= problem.violation(x) + config.tol_constraint:
                z = z_res
                prev_z = z.copy()
                x, s = z[: problem.n], z[problem.n :]
            if problem.violation(x) < config.tol_constraint:
                pg_gate = pg_inner
                if pg_gate >= config.tol_stationarity:
                    pg_gate, *_ = _ls_stationarity(problem, x)
                if pg_gate < config.tol_stationarity:
                    status = "converged"
                    pg_inner = pg_gate
                    break
                cost_now = float(problem.cost(x))
                if abs(cost_now - last_cost) < 1e-9 * max(1.0, abs(cost_now)):
                    stagnant += 1
                else:
                    stagnant = 0
                last_cost = cost_now
                if stagnant >= 3:
                    break  # feasible and stalled: stop grinding, report honestly
        if outer >= 8 and v > 0.5 and viol_ref > 0.5:
            status = "infeasible"
            break

    ce_v = problem.equalities(x)
    ci_v = problem.inequalities(x)
    max_eq = float(np.max(np.abs(ce_v))) if n_eq else 0.0
    min_in = float(np.min(ci_v)) if n_in else math.inf
    if status != "converged":
        status = "infeasible" if problem.violation(x) > 1e-3 else "max_iter"
    return SolverResult(
        status=status,
        x=x,
        cost=float(problem.cost(x)),
        max_equality_violation=max_eq,
        min_inequality_margin=min_in,
        trace=trace,
        multipliers_eq=y_eq,
        multipliers_ineq=y_in,
        projected_gradient=pg_inner if trace else math.nan,
    )


def solve_with_restarts(problem: NlpProblem, config: SolverConfig, scenario=None,
                        x0: np.ndarray | None = None) -> SolverResult:
    """Run ``solve`` and retry from perturbed guesses on failure."""
    rng = np.random.default_rng(config.seed)
    if x0 is None:
        x0 = initial_guess(scenario, problem, rng)
    best = solve(problem, config, x0)
    attempts = 0
    while not best.converged and attempts < config.restarts:
        attempts += 1
        xr = initial_guess(scenario, problem, rng, perturbation=0.05 * attempts) \
            if scenario is not None else x0 + rng.normal(scale=0.05 * attempts, size=x0.shape)
        cand = solve(problem, config, np.clip(xr, problem.lower, problem.upper))
        if cand.converged or cand.max_equality_violation < best.max_equality_violation:
            best = cand
        if best.converged:
            break
    return best


def kkt_report(problem: NlpProblem, x: np.ndarray, active_tol: float = 1e-6) -> dict:
    """Named violation summary, active set and per-collocation safety margins."""
    ce = problem.equalities(x)
    ci = problem.inequalities(x)
    report = {
        "cost": float(problem.cost(x)),
        "max_equality_violation": float(np.max(np.abs(ce))) if ce.size else 0.0,
        "min_inequality_margin": float(np.min(ci)) if ci.size else math.inf,
        "violations": [],
        "active_set": [],
        "collocation_margins": [],
    }
    tr: Transcription | None = problem.transcription
    if tr is not None:
        idx = 0
        for name, rows in tr.eq_families:
            block = ce[idx : idx + rows]
            worst = int(np.argmax(np.abs(block)))
            if np.max(np.abs(block)) > active_tol:
                report["violations"].append(
                    dict(constraint=name, max_abs=float(np.max(np.abs(block))), at_point=worst))
            idx += rows
        bnd = ce[idx:]
        if bnd.size and np.max(np.abs(bnd)) > active_tol:
            report["violations"].append(dict(constraint="boundary", max_abs=float(np.max(np.abs(bnd))), at_point=-1))
        n_fam = tr.ineq_per_obstacle
        for j in range(len(tr.obstacles)):
            block = ci[j * n_fam * tr.N : (j + 1) * n_fam * tr.N].reshape(n_fam, tr.N)
            dist_margin = block[-1]
            report["collocation_margins"].append(dist_margin.tolist())
            for fam in range(n_fam):
                for k in np.nonzero(np.abs(block[fam]) <= active_tol)[0]:
                    report["active_set"].append(dict(obstacle=j, family=fam, point=int(k)))
                for k in np.nonzero(block[fam] < -active_tol)[0]:
                    report["violations"].append(
                        dict(constraint=f"inequality_{fam}_obstacle_{j}", max_abs=float(-block[fam][k]), at_point=int(k)))
    return report
