"""Unbalanced optimal transport between nonnegative discrete measures.

Static semi-coupling programs with duality certificates, the dynamic
continuity-equation-with-source formulation, cone-geometry utilities and a
command-line front end.
"""

from . import errors
from .cone_cost import (
    CostFunction,
    DualSetPoint,
    cone_distance,
    in_Q,
    partial_ot_cost,
    project_Q,
    truncated_cos,
    two_chunk_regularize,
    wf_cost,
    wf_path_cost,
)
from .measures import (
    DiscreteMeasure,
    DomainBox,
    GridDensity,
    load_measure,
    new_discrete_measure,
    rasterize,
    save_measure,
    total_mass,
)
from .static_solver import (
    DualCertificate,
    SemiCouplingPlan,
    SolverConfig,
    brute_force_CK,
    check_triangle,
    check_weakstar_continuity,
    gamma_functional,
    gamma_limit_functional,
    partial_lagrangian_value,
    solve_static,
    sqrt_measure,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "CostFunction",
    "DualSetPoint",
    "cone_distance",
    "in_Q",
    "partial_ot_cost",
    "project_Q",
    "truncated_cos",
    "two_chunk_regularize",
    "wf_cost",
    "wf_path_cost",
    "DiscreteMeasure",
    "DomainBox",
    "GridDensity",
    "load_measure",
    "new_discrete_measure",
    "rasterize",
    "save_measure",
    "total_mass",
    "DualCertificate",
    "SemiCouplingPlan",
    "SolverConfig",
    "brute_force_CK",
    "check_triangle",
    "check_weakstar_continuity",
    "gamma_functional",
    "gamma_limit_functional",
    "partial_lagrangian_value",
    "solve_static",
    "sqrt_measure",
]
