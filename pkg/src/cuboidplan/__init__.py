"""Collision-free SE(3) trajectory optimization for rigid and bendable cuboid robots."""

from .lp_geometry import (
    BentShape,
    PolarCoords,
    ShapeParams,
    bending_angle,
    bent_map,
    bent_map_inverse,
    centerline,
    normalized_bent_residual,
    polar_lp_2d,
    polar_lp_3d,
    polar_transform,
    sample_surface,
    save_obj,
    volumes,
    weighted_lp_gradient,
    weighted_lp_norm,
)
from .se3_kinematics import (
    Frame,
    Twist,
    frame_from_axis_angle,
    inverse_transform,
    kinematics_rhs,
    rotate_vector,
    transform_point,
)
from .collision_constraints import (
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
    projection_bent,
    projection_regular,
    sufficient_sign_regular,
    surface_gradient_bent,
    surface_gradient_regular,
)
from .closest_point_oracle import OracleResult, brute_force_closest, verify_trajectory
from .trajectory import (
    CollocationGrid,
    Spline,
    TrajectoryBundle,
    boundary_residuals,
    curvature_regularized_cost,
    dynamics_defects,
    path_length_cost,
    spline_derivative,
    spline_eval,
)
from .nlp_solver import (
    NlpProblem,
    SolverConfig,
    SolverResult,
    assemble,
    gradients,
    initial_guess,
    kkt_report,
    solve,
    solve_with_restarts,
)
from .planner_cli import Scenario, parse_scenario

__version__ = "0.1.0"
