"""Linear state-feedback synthesis under chance CBF and CLF constraints.

Polytopic safe sets are turned into convex quadratic constraints on the
gain through a Chebyshev bound on each noisy barrier condition and the
vertex reduction of robust constraints; an interior-point solver returns
the gain, and simulation tools check it empirically.
"""

from .chance import AffineRandomScalar, NoiseModel, chebyshev_residual, monte_carlo_probability, relax_chance_ge
from .compiler import QcqpProblem, SquaredAffineConstraint, SynthesisParams, SynthesisSetup, assemble
from .geometry import Polytope, distance_to_faces, enumerate_vertices, eta, gamma_for, polytope_from_halfspaces
from .scenario import Controller, Scenario, load_scenario, synthesize
from .simulate import SimConfig, Trajectory, invariant_set_estimate, rollout, verify_chance_field, violation_stats
from .solvers import SolverConfig, SynthesisResult, find_P, solve_qcqp, verify_lyapunov
from .systems import LinearSystem, double_integrator_2d, lift_position_constraints, relative_degree

__version__ = "0.1.0"

__all__ = [
    "AffineRandomScalar",
    "Controller",
    "LinearSystem",
    "NoiseModel",
    "Polytope",
    "QcqpProblem",
    "Scenario",
    "SimConfig",
    "SolverConfig",
    "SquaredAffineConstraint",
    "SynthesisParams",
    "SynthesisResult",
    "SynthesisSetup",
    "Trajectory",
    "assemble",
    "chebyshev_residual",
    "distance_to_faces",
    "double_integrator_2d",
    "enumerate_vertices",
    "eta",
    "find_P",
    "gamma_for",
    "invariant_set_estimate",
    "lift_position_constraints",
    "load_scenario",
    "monte_carlo_probability",
    "polytope_from_halfspaces",
    "relative_degree",
    "relax_chance_ge",
    "rollout",
    "solve_qcqp",
    "synthesize",
    "verify_chance_field",
    "verify_lyapunov",
    "violation_stats",
]
