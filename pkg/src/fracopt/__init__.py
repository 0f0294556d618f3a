"""Adaptive finite elements for sparse optimal control of the spectral
fractional Laplacian, posed on a truncated extension cylinder."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .mesh import (BaseMesh, ExtrudedMesh, IntervalMesh, check_grading, bisect, extrude,
                   graded_interval, initial_mesh, star, uniform_refine)
from .assembly import (TensorP1Space, assemble_stiffness, assemble_trace_load, ds_constant,
                       trace, weighted_moment)
from .optimizer import (ActiveSets, ControlQuadruple, DiscreteSystem, ProblemData,
                        active_set_solve, objective, solve_adjoint, solve_state)
from .estimator import EstimatorResult, StarReport, estimate
from .afem import AfemConfig, AfemTrace, fit_rate, mark_maximum, run_afem
