"""B-spline trajectory parameterization, collocation residuals and costs.

Every decision trajectory (position, quaternion, controls, curvature,
per-obstacle closest points) is one clamped B-spline on normalized time
tau in [0, 1]; the free final time enters as a scalar that scales the
derivatives.  Constraint and cost evaluation happens at a fixed collocation
grid, so basis values and derivative rows can be precomputed once and every
evaluation becomes a dense matrix product in the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_SPEED = 1e-9  # smoothing inside the path-length integrand
EPS_BEND = 1e-6  # smoothing inside the |kappa| regularizer


def clamped_knots(degree: int, n_coeffs: int) -> np.ndarray:
    """Clamped knot vector on [0, 1] with uniformly spaced interior knots."""
    if n_coeffs <= degree:
        raise ValueError("need more coefficients than the degree")
    interior = n_coeffs - degree - 1
    inner = np.linspace(0.0, 1.0, interior + 2)[1:-1]
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


@dataclass(frozen=True)
class Spline:
    """Scalar clamped B-spline: degree, knots on [0,1], coefficient vector."""

    degree: int
    knots: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        if np.any(np.diff(self.knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if len(self.coefficients) != len(self.knots) - self.degree - 1:
            raise ValueError("coefficient count must equal knot count - degree - 1")

    @staticmethod
    def from_coefficients(coefficients, degree: int = 5) -> "Spline":
        c = np.asarray(coefficients, dtype=float)
        return Spline(degree, clamped_knots(degree, len(c)), c)


def basis_matrix(degree: int, knots: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Cox-de-Boor basis values: rows are evaluation points, columns basis functions."""
    knots = np.asarray(knots, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    n = len(knots) - degree - 1
    out = np.zeros((len(taus), n))
    t_max = knots[-1]
    for row, t in enumerate(taus):
        if t >= t_max:  # clamp the right endpoint into the last span
            t = t_max
            span = np.searchsorted(knots, t_max, side="left") - 1
            while knots[span] == knots[span + 1]:
                span -= 1
        else:
            span = int(np.searchsorted(knots, t, side="right")) - 1
        # de Boor triangle for the nonzero basis values on this span
        vals = np.zeros(degree + 1)
        vals[0] = 1.0
        left = np.zeros(degree + 1)
        right = np.zeros(degree + 1)
        for j in range(1, degree + 1):
            left[j] = t - knots[span + 1 - j]
            right[j] = knots[span + j] - t
            saved = 0.0
            for r in range(j):
                denom = right[r + 1] + left[j - r]
                term = vals[r] / denom if denom != 0.0 else 0.0
                vals[r] = saved + right[r + 1] * term
                saved = left[j - r] * term
            vals[j] = saved
        out[row, span - degree : span + 1] = vals
    return out


def derivative_matrix(degree: int, knots: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """First-derivative counterpart of ``basis_matrix`` (same shape).

    The derivative of a clamped spline is the degree-(k-1) spline on the
    trimmed knot vector whose coefficients are scaled first differences; the
    matrix below folds that difference into the lower-degree basis.
    """
    knots = np.asarray(knots, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    n = len(knots) - degree - 1
    if degree == 0:
        return np.zeros((len(taus), n))
    lower = basis_matrix(degree - 1, knots[1:-1], taus)  # (N, n-1)
    diff = np.zeros((n - 1, n))
    for i in range(n - 1):
        dt = knots[i + degree + 1] - knots[i + 1]
        if dt > 0:
            diff[i, i] = -degree / dt
            diff[i, i + 1] = degree / dt
    return lower @ diff


def spline_eval(s: Spline, tau) -> float | np.ndarray:
    """Value of the spline at tau in [0, 1]."""
    out = basis_matrix(s.degree, s.knots, np.atleast_1d(tau)) @ s.coefficients
    return float(out[0]) if np.isscalar(tau) else out


def spline_derivative(s: Spline, tau) -> float | np.ndarray:
    """First derivative of the spline with respect to tau."""
    out = derivative_matrix(s.degree, s.knots, np.atleast_1d(tau)) @ s.coefficients
    return float(out[0]) if np.isscalar(tau) else out


def fit_spline_coefficients(degree: int, n_coeffs: int, taus, values) -> np.ndarray:
    """Least-squares coefficients reproducing samples, endpoints pinned exactly.

    Clamped splines interpolate their first/last coefficients, so pinning the
    endpoint coefficients to the endpoint samples preserves boundary values.
    """
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    knots = clamped_knots(degree, n_coeffs)
    B = basis_matrix(degree, knots, taus)
    coeffs, *_ = np.linalg.lstsq(B, values, rcond=None)
    coeffs[0] = values[0]
    coeffs[-1] = values[-1]
    return coeffs


@dataclass(frozen=True)
class CollocationGrid:
    """Strictly increasing normalized times including both endpoints."""

    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        object.__setattr__(self, "taus", taus)
        if len(taus) < 2 or taus[0] != 0.0 or taus[-1] != 1.0 or np.any(np.diff(taus) <= 0):
            raise ValueError("grid must strictly increase from 0 to 1")

    @staticmethod
    def uniform(n: int) -> "CollocationGrid":
        return CollocationGrid(np.linspace(0.0, 1.0, n))

    def __len__(self) -> int:
        return len(self.taus)


@dataclass
class TrajectoryBundle:
    """All decision trajectories of one planning problem plus the final time.

    ``position`` is (3, m) coefficients, ``quaternion`` (4, m), ``speed``
    (m,), ``omega`` (3, m), optional ``kappa`` (m,), and ``closest_points``
    one (3, m) block per obstacle.  Every spline shares a degree and knots.
    """

    degree: int
    position: np.ndarray
    quaternion: np.ndarray
    speed: np.ndarray
    omega: np.ndarray
    final_time: float
    kappa: np.ndarray | None = None
    closest_points: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.quaternion = np.asarray(self.quaternion, dtype=float)
        self.speed = np.asarray(self.speed, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        if self.kappa is not None:
            self.kappa = np.asarray(self.kappa, dtype=float)
        self.closest_points = [np.asarray(c, dtype=float) for c in self.closest_points]
        m = self.n_coeffs
        shapes = [self.position.shape == (3, m), self.quaternion.shape == (4, m),
                  self.speed.shape == (m,), self.omega.shape == (3, m)]
        if self.kappa is not None:
            shapes.append(self.kappa.shape == (m,))
        shapes.extend(c.shape == (3, m) for c in self.closest_points)
        if not all(shapes):
            raise ValueError("all trajectories must share one coefficient count")
        if self.final_time <= 0:
            raise ValueError("final time must be positive")

    @property
    def n_coeffs(self) -> int:
        return self.position.shape[1]

    @property
    def knots(self) -> np.ndarray:
        return clamped_knots(self.degree, self.n_coeffs)


@dataclass(frozen=True)
class GridMaps:
    """Precomputed basis/derivative matrices of one grid for one knot setup."""

    values: np.ndarray
    derivs: np.ndarray

    @staticmethod
    def build(degree: int, n_coeffs: int, grid: CollocationGrid) -> "GridMaps":
        knots = clamped_knots(degree, n_coeffs)
        return GridMaps(
            basis_matrix(degree, knots, grid.taus),
            derivative_matrix(degree, knots, grid.taus),
        )


def dynamics_defects(bundle: TrajectoryBundle, grid: CollocationGrid,
                     maps: GridMaps | None = None, e0=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Stacked pose-rate residuals at every collocation point.

    Position block: d(position)/dtau / T_f - R(q) e0 u; quaternion block:
    d(q)/dtau / T_f - q*(0, omega)/2.  Unit quaternion norm is a separate
    residual family, not folded in here.
    """
    if maps is None:
        maps = GridMaps.build(bundle.degree, bundle.n_coeffs, grid)
    pos = bundle.position @ maps.values.T  # (3, N)
    pos_d = bundle.position @ maps.derivs.T
    quat = bundle.quaternion @ maps.values.T  # (4, N)
    quat_d = bundle.quaternion @ maps.derivs.T
    u = bundle.speed @ maps.values.T  # (N,)
    om = bundle.omega @ maps.values.T  # (3, N)
    return pointwise_defects(pos_d, quat, quat_d, u, om, bundle.final_time, e0)


def pointwise_defects(pos_d, quat, quat_d, u, om, final_time, e0=(1.0, 0.0, 0.0),
                      tangent_quaternion: bool = False) -> np.ndarray:
    """Defect residuals from sampled values/derivatives (vectorized over points).

    With ``tangent_quaternion`` the quaternion defect is projected onto the
    tangent space of the unit sphere at q.  A non-constant polynomial spline
    cannot keep exactly unit norm between collocation points, so its norm
    function crosses zero at the constrained points with nonzero slope; that
    slope is precisely the radial defect component, which carries no
    rotational information (q^T (q x (0, omega)) = 0 identically) but makes
    the raw defect jointly infeasible with the norm constraints.
    """
    w, x, y, z = quat
    e0 = np.asarray(e0, dtype=float)
    # columns of R(q) combined with e0; quaternions need not be unit here,
    # the norm residuals take care of that separately
    n2 = w * w + x * x + y * y + z * z
    s = 2.0 / np.where(n2 > 0, n2, 1.0)
    rx = 1 - s * (y * y + z * z), s * (x * y + w * z), s * (x * z - w * y)
    ry = s * (x * y - w * z), 1 - s * (x * x + z * z), s * (y * z + w * x)
    rz = s * (x * z + w * y), s * (y * z - w * x), 1 - s * (x * x + y * y)
    head = np.stack([
        rx[0] * e0[0] + ry[0] * e0[1] + rz[0] * e0[2],
        rx[1] * e0[0] + ry[1] * e0[1] + rz[1] * e0[2],
        rx[2] * e0[0] + ry[2] * e0[1] + rz[2] * e0[2],
    ])
    pos_def = pos_d / final_time - head * u
    w1, w2, w3 = om
    quat_def = quat_d / final_time - 0.5 * np.stack([
        -x * w1 - y * w2 - z * w3,
        w * w1 + y * w3 - z * w2,
        w * w2 - x * w3 + z * w1,
        w * w3 + x * w2 - y * w1,
    ])
    if tangent_quaternion:
        radial = (w * quat_def[0] + x * quat_def[1] + y * quat_def[2] + z * quat_def[3])
        quat_def = quat_def - quat * (radial / np.where(n2 > 0, n2, 1.0))
    return np.concatenate([pos_def.ravel(), quat_def.ravel()])


def quaternion_norm_residuals(bundle: TrajectoryBundle, grid: CollocationGrid,
                              maps: GridMaps | None = None) -> np.ndarray:
    """||q||^2 - 1 at every collocation point."""
    if maps is None:
        maps = GridMaps.build(bundle.degree, bundle.n_coeffs, grid)
    quat = bundle.quaternion @ maps.values.T
    return np.sum(quat * quat, axis=0) - 1.0


def quaternion_error(q, q_target) -> np.ndarray:
    """Componentwise endpoint error handling the double cover: min over +-q."""
    q = np.asarray(q, dtype=float)
    q_target = np.asarray(q_target, dtype=float)
    e_plus = q - q_target
    e_minus = q + q_target
    return e_plus if np.linalg.norm(e_plus) <= np.linalg.norm(e_minus) else e_minus


def boundary_residuals(bundle: TrajectoryBundle, start_position, start_quaternion,
                       goal_position, goal_quaternion,
                       kappa_start: float | None = None,
                       kappa_end: float | None = None) -> np.ndarray:
    """Endpoint pose (and curvature) mismatches.

    Clamped splines interpolate their end coefficients, so endpoints are read
    directly off the coefficient blocks.
    """
    res = [
        bundle.position[:, 0] - np.asarray(start_position, dtype=float),
        quaternion_error(bundle.quaternion[:, 0], start_quaternion),
        bundle.position[:, -1] - np.asarray(goal_position, dtype=float),
        quaternion_error(bundle.quaternion[:, -1], goal_quaternion),
    ]
    if kappa_start is not None:
        if bundle.kappa is None:
            raise ValueError("bundle has no curvature trajectory")
        res.append(np.array([bundle.kappa[0] - kappa_start]))
    if kappa_end is not None:
        res.append(np.array([bundle.kappa[-1] - kappa_end]))
    return np.concatenate(res)


def path_length_cost(bundle: TrajectoryBundle, grid: CollocationGrid,
                     maps: GridMaps | None = None) -> float:
    """Trapezoid quadrature of the center speed over [0, T_f].

    The integrand is smoothed as sqrt(|v|^2 + eps) to stay twice
    differentiable through zero speed.
    """
    if maps is None:
        maps = GridMaps.build(bundle.degree, bundle.n_coeffs, grid)
    pos_d = bundle.position @ maps.derivs.T
    # d(pos)/dt = pos_d / T_f; integral over t in [0, T_f] of |d pos/dt|
    integrand = np.sqrt(np.sum(pos_d * pos_d, axis=0) + EPS_SPEED * bundle.final_time**2)
    return float(np.trapezoid(integrand, grid.taus))


def curvature_regularized_cost(bundle: TrajectoryBundle, grid: CollocationGrid,
                               bend_weight: float, maps: GridMaps | None = None) -> float:
    """Path length plus bend_weight * integral of smoothed |kappa| over time."""
    if maps is None:
        maps = GridMaps.build(bundle.degree, bundle.n_coeffs, grid)
    if bundle.kappa is None:
        raise ValueError("bundle has no curvature trajectory")
    base = path_length_cost(bundle, grid, maps)
    kap = bundle.kappa @ maps.values.T
    integrand = np.sqrt(kap * kap + EPS_BEND)
    return base + bend_weight * bundle.final_time * float(np.trapezoid(integrand, grid.taus))


def sample_states(bundle: TrajectoryBundle, times: np.ndarray):
    """Evaluate the bundle at absolute times; returns a dict of arrays.

    Quaternions are returned as evaluated (not normalized); consumers that
    need rotations should normalize.
    """
    taus = np.clip(np.asarray(times, dtype=float) / bundle.final_time, 0.0, 1.0)
    knots = bundle.knots
    B = basis_matrix(bundle.degree, knots, taus)
    out = {
        "t": np.asarray(times, dtype=float),
        "position": (bundle.position @ B.T).T,
        "quaternion": (bundle.quaternion @ B.T).T,
        "speed": bundle.speed @ B.T,
        "omega": (bundle.omega @ B.T).T,
    }
    out["kappa"] = bundle.kappa @ B.T if bundle.kappa is not None else np.zeros(len(taus))
    out["closest_points"] = [(c @ B.T).T for c in bundle.closest_points]
    return out


TRAJECTORY_COLUMNS = "t,x,y,z,qw,qx,qy,qz,u,w1,w2,w3,kappa"


def export_trajectory(path, bundle: TrajectoryBundle, n_samples: int = 200) -> None:
    """Write a delimited text export, one row per sample time."""
    times = np.linspace(0.0, bundle.final_time, n_samples)
    st = sample_states(bundle, times)
    rows = np.column_stack([
        st["t"], st["position"], st["quaternion"], st["speed"], st["omega"], st["kappa"],
    ])
    np.savetxt(path, rows, delimiter=",", header=TRAJECTORY_COLUMNS, comments="")


def load_trajectory(path) -> dict:
    """Read a trajectory export back into arrays (inverse of export_trajectory)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    return {
        "t": data[:, 0],
        "position": data[:, 1:4],
        "quaternion": data[:, 4:8],
        "speed": data[:, 8],
        "omega": data[:, 9:12],
        "kappa": data[:, 12],
    }
