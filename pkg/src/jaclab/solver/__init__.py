"""Finite element discretization, linear solves and pointwise evaluation."""
from .mesh import Mesh, MeshError, build_annulus_mesh, build_mesh
from .fem import (DirichletProblem, SolutionField, assemble, combination, h1_norm, l2_error,
                  solve_dirichlet, solve_transmission, transmission_flux_residual)
from .evaluate import EvaluationError, Sampler, field_eval
from .eigen import annulus_coercivity, annulus_eigenvalue, find_eta0
from .linalg import LinearSolver, SingularSystemError, pcg

__all__ = [
    "Mesh", "MeshError", "build_mesh", "build_annulus_mesh", "DirichletProblem", "SolutionField",
    "assemble", "combination", "h1_norm", "l2_error", "solve_dirichlet", "solve_transmission",
    "transmission_flux_residual", "EvaluationError", "Sampler", "field_eval", "annulus_eigenvalue",
    "annulus_coercivity", "find_eta0", "LinearSolver", "SingularSystemError", "pcg",
]
