"""Numerical laboratory for scalar reaction-diffusion equations
``u_t = Δu + f(x, u, ∇u)`` on intervals, circles and rectangles."""

from __future__ import annotations

from .critical import (Equilibrium, PeriodicOrbit, SpectrumReport, classify, equilibrium_spectrum,
                       find_equilibrium, find_periodic_orbit, fourier_mode_multipliers, period_map_spectrum)
from .errors import (BlowUp, ColinearEverywhere, ConfigError, NoGoodPoint, NonConvergence, NotFound,
                     NumericalFailure, ParabolaxError)
from .grid import DomainSpec, Grid, build_grid, gradient, laplacian
from .manifolds import (ConnectingOrbit, TransversalityReport, adjoint_stable_normal_frame, grow_unstable,
                        shoot_connection, transversality_report, unstable_frame)
from .nodal import (SampledFamily, injectivity_scan, period_observability, singular_nodal_scan,
                    tns_estimate, vanishing_order)
from .nonlinearity import (NonlinearField, PerturbationBump, chafee_infante, compose_perturbed,
                           field_from_spec, linear_rotating, polynomial, zero_field)
from .perturbation import (build_bump, colinear_avoiding_perturbation, flow_derivative_wrt_f,
                           pairing_integral)
from .semiflow import TrajectorySegment, evaluation_map, integrate, semigroup_defect
from .tangent import CoefficientField, duality_defect, linearize_along, propagate, propagate_adjoint

__version__ = "0.1.0"

__all__ = [
    "BlowUp",
    "CoefficientField",
    "ColinearEverywhere",
    "ConfigError",
    "ConnectingOrbit",
    "DomainSpec",
    "Equilibrium",
    "Grid",
    "NoGoodPoint",
    "NonConvergence",
    "NonlinearField",
    "NotFound",
    "NumericalFailure",
    "ParabolaxError",
    "PeriodicOrbit",
    "PerturbationBump",
    "SampledFamily",
    "SpectrumReport",
    "TrajectorySegment",
    "TransversalityReport",
    "adjoint_stable_normal_frame",
    "annotations",
    "build_bump",
    "build_grid",
    "chafee_infante",
    "classify",
    "colinear_avoiding_perturbation",
    "compose_perturbed",
    "duality_defect",
    "equilibrium_spectrum",
    "evaluation_map",
    "field_from_spec",
    "find_equilibrium",
    "find_periodic_orbit",
    "flow_derivative_wrt_f",
    "fourier_mode_multipliers",
    "gradient",
    "grow_unstable",
    "injectivity_scan",
    "integrate",
    "laplacian",
    "linear_rotating",
    "linearize_along",
    "pairing_integral",
    "period_map_spectrum",
    "period_observability",
    "polynomial",
    "propagate",
    "propagate_adjoint",
    "semigroup_defect",
    "shoot_connection",
    "singular_nodal_scan",
    "tns_estimate",
    "transversality_report",
    "unstable_frame",
    "vanishing_order",
    "zero_field",
]
