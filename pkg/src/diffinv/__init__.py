"""Recovery of spatially varying diffusion coefficients from noisy data.

Galerkin P1 finite elements for the elliptic and parabolic forward
problems, box-constrained Tikhonov-regularized output least squares with
exact discrete-adjoint gradients, and a sweep driver that reproduces the
noise-level convergence studies.
"""

__version__ = "0.1.0"

from .fem import (
    FeFunction,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    constant_field,
    l2_project,
    lagrange_interpolate,
    norm_l2,
    norm_linf,
    seminorm_h1,
)
from .forward import TimeGrid, TimeSeriesFe, solve_elliptic, solve_parabolic
from .inverse import (
    AdmissibleBox,
    EllipticInverseProblem,
    OptimizeResult,
    OptimizerOptions,
    ParabolicInverseProblem,
    gradient_elliptic,
    gradient_parabolic,
    ncg_minimize,
    objective_elliptic,
    objective_parabolic,
    project_box,
)
from .linalg import CgNonConvergence, CgOptions, SparseMatrix, cg_solve, matvec
from .mesh import (
    Mesh,
    build_interval_mesh,
    build_unit_square_mesh,
    dist_to_boundary,
    transfer_nodal,
)
from .experiment import (
    NoiseSpec,
    SweepConfig,
    SweepRow,
    error_q,
    error_u_elliptic,
    error_u_parabolic,
    fit_rate,
    positivity_profile,
    run_sweep,
    synthesize_elliptic,
    synthesize_parabolic,
    weighted_error_elliptic,
)
from .problems import BUILTIN_EXAMPLES, ProblemDef, get_example

__all__ = [name for name in dir() if not name.startswith("_")]
