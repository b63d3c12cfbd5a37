"""Solvers for nonlocal parabolic equations on the time triangle ``s <= t``.

The unknown ``u(t, s, y)`` depends on an external time ``t``, a running time
``s`` and a periodic space variable ``y``; its right-hand side may involve
the diagonal values ``u(s, s, y)``.  Modules:

* :mod:`.grid`       triangle grids, fields and stencils
* :mod:`.norms`      discrete Hölder norms on the triangle
* :mod:`.local`      the classical (parameterised) theta-scheme
* :mod:`.linear`     nonlocal linear solver by windowed Picard iteration
* :mod:`.nonlinear`  fully nonlinear solver by linearisation
* :mod:`.hjb`        equilibrium HJB for time-inconsistent control
* :mod:`.fbsde`      Monte Carlo check of the stochastic representation
* :mod:`.cli`        configuration and batch runs
"""

from .config import RunConfig, load_problem_config
from .errors import (
    ArgumentError,
    ConfigurationError,
    ConsistencyError,
    ConvergenceError,
    GridIndexError,
    ManufactureError,
    ModelError,
    NonlocalPDEError,
    NumericalError,
)
from .expr import ExprFn, manufacture_source
from .fbsde import BackwardField, bsde_residual_stats, evaluate_fk_fields, simulate_forward
from .grid import DiagField, TriangleGrid, TriField, build_grid, restrict_diagonal
from .hjb import ControlProblem, argmin_control, classical_hjb_policy, hamiltonian, solve_equilibrium_hjb
from .linear import LinearCoefficients, check_equivalence, schauder_ratio, solve_linear, stability_probe
from .local import LocalOperatorSlice, solve_parameterized_local
from .nonlinear import NonlinearProblem, solve_nonlinear
from .norms import HolderConfig, NormReport, holder_norm_alpha, tri_norms

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
