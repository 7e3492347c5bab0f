"""Command-line front end: parse scenarios, plan, verify, export geometry.

Scenario files are JSON with a documented schema (see README; extension
``.scn`` by convention).  Exit codes: 0 success, 1 solver failure,
2 verification failure, 3 input error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nlp_solver
from .closest_point_oracle import brute_force_closest, verify_trajectory
from .collision_constraints import ObstacleSpec, assemble_bundle
from .lp_geometry import DEFAULT_KAPPA_MIN, ShapeParams, sample_surface, save_obj
from .nlp_solver import SolverConfig
from .se3_kinematics import Frame, frame_from_axis_angle
from .trajectory import export_trajectory, load_trajectory, sample_states, TrajectoryBundle

MODES = ("rigid-regular", "rigid-bent", "bendable")

_DEFAULT_TRANSCRIPTION = {"degree": 5, "coefficients": 12, "collocation": 30}
_DEFAULT_SOLVER = {
    "seed": 0,
    "max_outer": 40,
    "max_inner": 250,
    "tol_constraint": 1e-6,
    "tol_stationarity": 1e-4,
    "penalty_init": 10.0,
    "penalty_growth": 10.0,
    "fd_step": 1e-7,
    "restarts": 3,
}
_DEFAULT_BOUNDS = {"speed": [-30.0, 30.0], "omega": [-math.pi / 2, math.pi / 2],
                   "final_time": [0.1, 100.0]}


@dataclass
class Scenario:
    """Validated planning scenario; field names mirror the file schema."""

    name: str
    mode: str
    robot_shape: ShapeParams
    robot_kappa: float
    kappa_bounds: tuple[float, float] | None
    kappa_start: float | None
    kappa_end: float | None
    obstacles: list[ObstacleSpec]
    obstacle_raw: list[dict]
    start_frame: Frame
    goal_frame: Frame
    start_raw: dict
    goal_raw: dict
    speed_bounds: tuple[float, float]
    omega_bounds: tuple[float, float]
    time_bounds: tuple[float, float]
    cost_kind: str
    bend_weight: float
    margin: float
    kappa_min: float
    degree: int
    n_coeffs: int
    n_collocation: int
    solver: SolverConfig = field(default_factory=SolverConfig)


class ScenarioError(ValueError):
    pass


def _check_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ScenarioError(f"unknown key(s) {sorted(unknown)} in {where}")


def _pose_from(block: dict, where: str) -> tuple[Frame, dict]:
    _check_keys(block, {"position", "axis", "angle"}, where)
    try:
        pos = [float(v) for v in block["position"]]
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing key 'position'") from exc
    axis = [float(v) for v in block.get("axis", [0.0, 0.0, 1.0])]
    angle = float(block.get("angle", 0.0))
    if len(pos) != 3 or len(axis) != 3:
        raise ScenarioError(f"{where}: position and axis must have three entries")
    if angle != 0.0 and np.linalg.norm(axis) == 0.0:
        raise ScenarioError(f"{where}: axis must be nonzero when angle is nonzero")
    frame = frame_from_axis_angle(pos, axis if np.linalg.norm(axis) > 0 else [0, 0, 1], angle)
    return frame, {"position": pos, "axis": axis, "angle": angle}


def scenario_from_dict(data: dict) -> Scenario:
    _check_keys(data, {"name", "mode", "robot", "obstacles", "start", "goal", "bounds",
                       "cost", "margin", "kappa_min", "transcription", "solver"}, "scenario")
    for key in ("mode", "robot", "start", "goal"):
        if key not in data:
            raise ScenarioError(f"scenario: missing key '{key}'")
    mode = data["mode"]
    if mode not in MODES:
        raise ScenarioError(f"mode must be one of {MODES}, got {mode!r}")

    robot = data["robot"]
    _check_keys(robot, {"sigma", "p", "kappa", "kappa_bounds", "kappa_start", "kappa_end"}, "robot")
    try:
        shape = ShapeParams(tuple(float(s) for s in robot["sigma"]), int(robot.get("p", 10)))
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"robot: {exc}") from exc
    sigma2 = shape.sigma[1]

    kappa = float(robot.get("kappa", 0.0))
    kappa_bounds = None
    kappa_start = kappa_end = None
    if mode == "rigid-bent":
        if abs(kappa) < DEFAULT_KAPPA_MIN:
            raise ScenarioError("robot: rigid-bent mode needs a nonzero 'kappa'")
        if abs(kappa) * sigma2 >= 1.0:
            raise ScenarioError("robot: |kappa|*sigma_2 must be < 1")
    elif mode == "bendable":
        if "kappa_start" not in robot or "kappa_end" not in robot:
            raise ScenarioError("robot: bendable mode needs 'kappa_start' and 'kappa_end'")
        kappa_start = float(robot["kappa_start"])
        kappa_end = float(robot["kappa_end"])
        kb = robot.get("kappa_bounds", [-1.0 / sigma2, 1.0 / sigma2])
        kappa_bounds = (float(kb[0]), float(kb[1]))
        if kappa_bounds[0] >= kappa_bounds[1]:
            raise ScenarioError("robot: kappa_bounds must be increasing")
        for k, label in ((kappa_start, "kappa_start"), (kappa_end, "kappa_end")):
            if abs(k) * sigma2 >= 1.0:
                raise ScenarioError(f"robot: |{label}|*sigma_2 must be < 1")
            if not kappa_bounds[0] <= k <= kappa_bounds[1]:
                raise ScenarioError(f"robot: {label} outside kappa_bounds")
        if max(abs(kappa_bounds[0]), abs(kappa_bounds[1])) * sigma2 > 1.0:
            raise ScenarioError("robot: kappa_bounds exceed 1/sigma_2")

    obstacles = []
    obstacle_raw = []
    for i, ob in enumerate(data.get("obstacles", [])):
        where = f"obstacles[{i}]"
        _check_keys(ob, {"sigma", "p", "position", "axis", "angle"}, where)
        frame, raw_pose = _pose_from(
            {k: ob[k] for k in ("position", "axis", "angle") if k in ob}, where)
        try:
            spec = ObstacleSpec(frame, tuple(float(s) for s in ob["sigma"]), int(ob.get("p", 10)))
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
        obstacles.append(spec)
        obstacle_raw.append({"sigma": [float(s) for s in ob["sigma"]],
                             "p": int(ob.get("p", 10)), **raw_pose})

    start_frame, start_raw = _pose_from(data["start"], "start")
    goal_frame, goal_raw = _pose_from(data["goal"], "goal")

    bounds = dict(_DEFAULT_BOUNDS)
    bounds.update(data.get("bounds", {}))
    _check_keys(bounds, {"speed", "omega", "final_time"}, "bounds")
    for key in ("speed", "omega", "final_time"):
        lo, hi = (float(v) for v in bounds[key])
        if lo >= hi:
            raise ScenarioError(f"bounds.{key} must be increasing")
        bounds[key] = [lo, hi]
    if bounds["final_time"][0] <= 0:
        raise ScenarioError("bounds.final_time must be positive")

    cost = {"kind": "path-length", "bend_weight": 0.1}
    cost.update(data.get("cost", {}))
    _check_keys(cost, {"kind", "bend_weight"}, "cost")
    if cost["kind"] not in ("path-length", "path-length+bend"):
        raise ScenarioError(f"cost.kind must be 'path-length' or 'path-length+bend', got {cost['kind']!r}")
    bend_weight = float(cost["bend_weight"]) if cost["kind"] == "path-length+bend" else 0.0

    transcription = dict(_DEFAULT_TRANSCRIPTION)
    transcription.update(data.get("transcription", {}))
    _check_keys(transcription, {"degree", "coefficients", "collocation"}, "transcription")

    solver_block = dict(_DEFAULT_SOLVER)
    solver_block.update(data.get("solver", {}))
    _check_keys(solver_block, set(_DEFAULT_SOLVER), "solver")
    solver = SolverConfig(
        tol_constraint=float(solver_block["tol_constraint"]),
        tol_stationarity=float(solver_block["tol_stationarity"]),
        max_outer=int(solver_block["max_outer"]),
        max_inner=int(solver_block["max_inner"]),
        penalty_init=float(solver_block["penalty_init"]),
        penalty_growth=float(solver_block["penalty_growth"]),
        fd_step=float(solver_block["fd_step"]),
        seed=int(solver_block["seed"]),
        restarts=int(solver_block["restarts"]),
    )

    return Scenario(
        name=str(data.get("name", "scenario")),
        mode=mode,
        robot_shape=shape,
        robot_kappa=kappa,
        kappa_bounds=kappa_bounds,
        kappa_start=kappa_start,
        kappa_end=kappa_end,
        obstacles=obstacles,
        obstacle_raw=obstacle_raw,
        start_frame=start_frame,
        goal_frame=goal_frame,
        start_raw=start_raw,
        goal_raw=goal_raw,
        speed_bounds=tuple(bounds["speed"]),
        omega_bounds=tuple(bounds["omega"]),
        time_bounds=tuple(bounds["final_time"]),
        cost_kind=cost["kind"],
        bend_weight=bend_weight,
        margin=float(data.get("margin", 1e-3)),
        kappa_min=float(data.get("kappa_min", DEFAULT_KAPPA_MIN)),
        degree=int(transcription["degree"]),
        n_coeffs=int(transcription["coefficients"]),
        n_collocation=int(transcription["collocation"]),
        solver=solver,
    )


def scenario_to_dict(s: Scenario) -> dict:
    robot: dict = {"sigma": list(s.robot_shape.sigma), "p": s.robot_shape.p, "kappa": s.robot_kappa}
    if s.mode == "bendable":
        robot.update(kappa_bounds=list(s.kappa_bounds), kappa_start=s.kappa_start,
                     kappa_end=s.kappa_end)
    return {
        "name": s.name,
        "mode": s.mode,
        "robot": robot,
        "obstacles": [dict(o) for o in s.obstacle_raw],
        "start": dict(s.start_raw),
        "goal": dict(s.goal_raw),
        "bounds": {"speed": list(s.speed_bounds), "omega": list(s.omega_bounds),
                   "final_time": list(s.time_bounds)},
        "cost": {"kind": s.cost_kind, "bend_weight": s.bend_weight},
        "margin": s.margin,
        "kappa_min": s.kappa_min,
        "transcription": {"degree": s.degree, "coefficients": s.n_coeffs,
                          "collocation": s.n_collocation},
        "solver": {
            "seed": s.solver.seed, "max_outer": s.solver.max_outer,
            "max_inner": s.solver.max_inner, "tol_constraint": s.solver.tol_constraint,
            "tol_stationarity": s.solver.tol_stationarity,
            "penalty_init": s.solver.penalty_init, "penalty_growth": s.solver.penalty_growth,
            "fd_step": s.solver.fd_step, "restarts": s.solver.restarts,
        },
    }


def parse_scenario(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed scenario file {path}: {exc}") from exc
    return scenario_from_dict(data)


def serialize_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _bundle_from_solution(scenario: Scenario, tr, x: np.ndarray) -> TrajectoryBundle:
    parts = tr.split(x)
    return TrajectoryBundle(
        degree=scenario.degree,
        position=parts["position"],
        quaternion=parts["quaternion"],
        speed=parts["speed"][0],
        omega=parts["omega"],
        final_time=parts["T_f"],
        kappa=parts["kappa"][0] if tr.with_kappa else None,
        closest_points=[parts[f"vbar_{j}"] for j in range(len(scenario.obstacles))],
    )


def _frames_from_states(states: dict) -> list[Frame]:
    frames = []
    for pos, quat in zip(states["position"], states["quaternion"]):
        q = np.asarray(quat, dtype=float)
        q = q / np.linalg.norm(q)
        frames.append(Frame(pos, q))
    return frames


def _kappa_list(scenario: Scenario, states: dict) -> list[float] | None:
    if scenario.mode == "bendable":
        return list(states["kappa"])
    if scenario.mode == "rigid-bent":
        return [scenario.robot_kappa] * len(states["t"])
    return None


def _preflight(scenario: Scenario) -> list[str]:
    """Cheap provable-infeasibility checks on the boundary poses."""
    problems = []
    for label, frame in (("start", scenario.start_frame), ("goal", scenario.goal_frame)):
        kappa = {"rigid-regular": 0.0, "rigid-bent": scenario.robot_kappa}.get(scenario.mode)
        if kappa is None:
            kappa = scenario.kappa_start if label == "start" else scenario.kappa_end
        for j, obstacle in enumerate(scenario.obstacles):
            res = brute_force_closest(frame, obstacle, scenario.robot_shape,
                                      kappa=kappa, grid_n=32, refine=False)
            if res.d_min < 1.0:
                problems.append(
                    f"{label} pose intersects obstacle {j}: min distance {res.d_min:.4f} < 1")
    return problems


def plan(scenario: Scenario, out_dir) -> int:
    """Solve the scenario, write all artifacts, independently verify.

    Returns the process exit code (0 only if the solver converged and the
    verifier passed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = scenario.name

    problems = _preflight(scenario)
    if problems:
        (out / f"{name}_diagnostics.txt").write_text(
            "infeasible scenario:\n" + "\n".join(problems) + "\n", encoding="utf-8")
        print("provably infeasible:", "; ".join(problems))
        return 1

    problem = nlp_solver.assemble(scenario)
    result = nlp_solver.solve_with_restarts(problem, scenario.solver, scenario)
    (out / f"{name}_solver_trace.txt").write_text(result.trace_text(), encoding="utf-8")

    report = nlp_solver.kkt_report(problem, result.x)
    lines = [
        f"status: {result.status}",
        f"cost: {result.cost:.8f}",
        f"max equality violation: {result.max_equality_violation:.3e}",
        f"min inequality margin: {result.min_inequality_margin:.3e}",
        f"projected gradient: {result.projected_gradient:.3e}",
        "violations: " + json.dumps(report["violations"]),
        "active_set_size: " + str(len(report["active_set"])),
    ]
    for j, margins in enumerate(report["collocation_margins"]):
        lines.append(f"obstacle {j} distance margins per collocation point: "
                     + " ".join(f"{m:.5f}" for m in margins))
    (out / f"{name}_constraints.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if not result.converged:
        print(f"solver failed: {result.status} "
              f"(violation {result.max_equality_violation:.2e})")
        return 1

    tr = problem.transcription
    bundle = _bundle_from_solution(scenario, tr, result.x)
    traj_path = out / f"{name}_trajectory.csv"
    export_trajectory(traj_path, bundle, n_samples=200)

    times = np.linspace(0.0, bundle.final_time, 200)
    states = sample_states(bundle, times)
    rep = verify_trajectory(
        _frames_from_states(states), list(states["t"]), scenario.obstacles,
        scenario.robot_shape, kappas=_kappa_list(scenario, states), grid_n=64,
        kappa_min=scenario.kappa_min,
    )
    (out / f"{name}_verification.txt").write_text(rep.text(), encoding="utf-8")

    _write_meshes(scenario, out, bundle)

    if not rep.passed:
        print(f"verification FAILED: worst distance {rep.worst:.6f}")
        return 2
    print(f"plan ok: cost {result.cost:.6f}, final time {bundle.final_time:.4f}, "
          f"worst verified distance {rep.worst:.6f}")
    return 0


def _write_meshes(scenario: Scenario, out: Path, bundle: TrajectoryBundle,
                  n_snapshots: int = 9, resolution: int = 12) -> None:
    name = scenario.name
    for j, (obstacle, raw) in enumerate(zip(scenario.obstacles, scenario.obstacle_raw)):
        shape = ShapeParams(tuple(raw["sigma"]), raw["p"])
        verts, faces = sample_surface(shape, resolution)
        verts = verts @ obstacle.frame.rotation.T + obstacle.frame.position
        save_obj(out / f"{name}_obstacle_{j}.obj", verts, faces,
                 comment=f"obstacle {j} of scenario {name}")
    times = np.linspace(0.0, bundle.final_time, n_snapshots)
    states = sample_states(bundle, times)
    frames = _frames_from_states(states)
    kappas = _kappa_list(scenario, states) or [0.0] * n_snapshots
    for k, frame in enumerate(frames):
        verts, faces = sample_surface(scenario.robot_shape, resolution, kappa=kappas[k],
                                      kappa_min=scenario.kappa_min)
        verts = verts @ frame.rotation.T + frame.position
        save_obj(out / f"{name}_robot_t{k:03d}.obj", verts, faces,
                 comment=f"robot snapshot {k} at t={times[k]:.4f}")


def verify(scenario: Scenario, trajectory_path, out_dir=None, n_times: int = 200,
           grid_n: int = 64) -> int:
    """Certify a trajectory export against the scenario's obstacles."""
    try:
        data = load_trajectory(trajectory_path)
    except OSError as exc:
        print(f"cannot read trajectory: {exc}")
        return 3
    idx = np.linspace(0, len(data["t"]) - 1, min(n_times, len(data["t"]))).astype(int)
    frames = []
    for i in idx:
        q = data["quaternion"][i]
        nq = np.linalg.norm(q)
        if nq == 0:
            print(f"row {i}: zero quaternion")
            return 3
        frames.append(Frame(data["position"][i], q / nq))
    kappas = None
    if scenario.mode == "bendable":
        kappas = [float(data["kappa"][i]) for i in idx]
    elif scenario.mode == "rigid-bent":
        kappas = [scenario.robot_kappa] * len(idx)
    rep = verify_trajectory(frames, [float(data["t"][i]) for i in idx], scenario.obstacles,
                            scenario.robot_shape, kappas=kappas, grid_n=grid_n,
                            kappa_min=scenario.kappa_min)

    boundary_lines = []
    for label, frame, row in (("start", scenario.start_frame, 0),
                              ("goal", scenario.goal_frame, len(data["t"]) - 1)):
        dp = float(np.linalg.norm(data["position"][row] - frame.position))
        q = data["quaternion"][row] / np.linalg.norm(data["quaternion"][row])
        dq = min(float(np.linalg.norm(q - frame.quaternion)),
                 float(np.linalg.norm(q + frame.quaternion)))
        boundary_lines.append(f"# boundary {label}: position error {dp:.3e}, "
                              f"orientation error {dq:.3e}")
    text = "\n".join(boundary_lines) + "\n" + rep.text()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{scenario.name}_verification.txt").write_text(text, encoding="utf-8")
    print(text if len(rep.records) <= 40 else "\n".join(text.splitlines()[:5] + ["..."]))
    print(f"verification {'PASS' if rep.passed else 'FAIL'}: worst distance {rep.worst:.6f}")
    return 0 if rep.passed else 2


def export_geometry(scenario: Scenario, out_dir, resolution: int = 16) -> int:
    """Robot surface meshes at representative curvatures plus all obstacles."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = scenario.name
    if scenario.mode == "bendable":
        kappas = sorted({scenario.kappa_start, 0.0, scenario.kappa_end})
    elif scenario.mode == "rigid-bent":
        kappas = [scenario.robot_kappa]
    else:
        kappas = [0.0]
    for kappa in kappas:
        verts, faces = sample_surface(scenario.robot_shape, resolution, kappa=kappa,
                                      kappa_min=scenario.kappa_min)
        save_obj(out / f"{name}_robot_kappa{kappa:+.3f}.obj", verts, faces,
                 comment=f"robot body at curvature {kappa:+.4f}")
    for j, raw in enumerate(scenario.obstacle_raw):
        shape = ShapeParams(tuple(raw["sigma"]), raw["p"])
        verts, faces = sample_surface(shape, resolution)
        frame = scenario.obstacles[j].frame
        verts = verts @ frame.rotation.T + frame.position
        save_obj(out / f"{name}_obstacle_{j}.obj", verts, faces)
    return 0


def check_constraints(scenario: Scenario, state_path) -> int:
    """Evaluate the safety bundles at one user-supplied state (debug aid)."""
    try:
        with open(state_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read state file: {exc}")
        return 3
    try:
        frame, _ = _pose_from({k: state[k] for k in ("position", "axis", "angle") if k in state},
                              "state")
        kappa = float(state.get("kappa", scenario.robot_kappa))
        vbars = [np.asarray(v, dtype=float) for v in state["vbar"]]
    except (KeyError, ValueError, ScenarioError) as exc:
        print(f"invalid state file: {exc}")
        return 3
    if len(vbars) != len(scenario.obstacles):
        print(f"state file has {len(vbars)} vbar entries for {len(scenario.obstacles)} obstacles")
        return 3
    mode = "rigid" if scenario.mode == "rigid-regular" else "bent"
    for j, obstacle in enumerate(scenario.obstacles):
        bundle = assemble_bundle(frame, obstacle, vbars[j], scenario.robot_shape, mode,
                                 kappa=kappa, margin=scenario.margin,
                                 kappa_min=scenario.kappa_min)
        print(f"obstacle {j}:")
        print("  equalities:  ", " ".join(f"{v:+.6e}" for v in bundle.equalities))
        print("  inequalities:", " ".join(f"{v:+.6e}" for v in bundle.inequalities))
        print(f"  feasible: {bundle.feasible}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cuboidplan",
        description="Collision-free SE(3) planning for rigid and bendable cuboid robots",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="solve a scenario and export all artifacts")
    p_plan.add_argument("scenario")
    p_plan.add_argument("--out", default="out")
    p_plan.add_argument("--seed", type=int, default=None)
    p_plan.add_argument("--collocation", type=int, default=None)
    p_plan.add_argument("--margin", type=float, default=None)

    p_ver = sub.add_parser("verify", help="certify a trajectory export")
    p_ver.add_argument("scenario")
    p_ver.add_argument("trajectory")
    p_ver.add_argument("--out", default=None)
    p_ver.add_argument("--times", type=int, default=200)
    p_ver.add_argument("--grid", type=int, default=64)

    p_geo = sub.add_parser("export-geometry", help="write robot/obstacle OBJ meshes")
    p_geo.add_argument("scenario")
    p_geo.add_argument("--out", default="out")
    p_geo.add_argument("--resolution", type=int, default=16)

    p_chk = sub.add_parser("check-constraints", help="evaluate safety bundles at one state")
    p_chk.add_argument("scenario")
    p_chk.add_argument("--state", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = parse_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"scenario error: {exc}")
        return 3
    if getattr(args, "seed", None) is not None:
        scenario.solver = replace(scenario.solver, seed=args.seed)
    if getattr(args, "collocation", None) is not None:
        scenario.n_collocation = args.collocation
    if getattr(args, "margin", None) is not None:
        scenario.margin = args.margin

    if args.command == "plan":
        return plan(scenario, args.out)
    if args.command == "verify":
        return verify(scenario, args.trajectory, args.out, args.times, args.grid)
    if args.command == "export-geometry":
        return export_geometry(scenario, args.out, args.resolution)
    if args.command == "check-constraints":
        return check_constraints(scenario, args.state)
    return 3


if __name__ == "__main__":
    sys.exit(main())
