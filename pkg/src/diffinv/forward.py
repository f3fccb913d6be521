"""Forward solvers: discrete elliptic problem and backward Euler in time.

The elliptic solve finds u_h in X_h with (q grad u_h, grad v) = (f, v);
the parabolic solve steps (M + tau K(q)) U^n = M U^{n-1} + tau b(f(t_n))
from U^0 = P_h u_0 on a uniform time grid.  Time-dependent sources are
callables ``f(points, t)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .linalg import cg_solve

__all__ = ["TimeGrid", "TimeSeriesFe", "solve_elliptic", "solve_parabolic"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of [0, T] with N steps and observation window (T-sigma, T].

    ``n_sigma`` is the first observed step index.  (T-sigma)/tau must be an
    integer; for sigma = 0 the window degenerates to the single final
    interval (t_{N-1}, t_N], i.e. n_sigma = N.
    """

    T: float
    N: int
    sigma: float = 0.0

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ValueError("need T > 0 and N >= 1")
        if not 0.0 <= self.sigma < self.T:
            raise ValueError("need 0 <= sigma < T")
        s = (self.T - self.sigma) / self.tau
        if abs(s - round(s)) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(
                f"(T - sigma)/tau = {s} is not an integer; adjust sigma or N"
            )

    @property
    def tau(self):
        return self.T / self.N

    @property
    def n_sigma(self):
        return min(self.N, int(round((self.T - self.sigma) / self.tau)) + 1)

    def times(self):
        return np.arange(self.N + 1) * self.tau


@dataclass
class TimeSeriesFe:
    """States U^0..U^N of one parabolic solve, all zero-trace on one mesh."""

    mesh: object
    grid: TimeGrid
    values: np.ndarray = field(repr=False)  # (N+1, n_nodes)

    def __post_init__(self):
        if self.values.shape != (self.grid.N + 1, self.mesh.n_nodes):
            raise ValueError("state array shape does not match grid/mesh")

    def state(self, n):
        return fem.FeFunction(self.mesh, self.values[n], fem.ZERO_TRACE)

    def __getitem__(self, n):
        return self.state(n)

    def __len__(self):
        return self.grid.N + 1


def solve_elliptic(mesh, q, f, cg_opts=None):
    """Solve (q grad u, grad v) = (f, v) on X_h; returns zero-trace u."""
    K = fem.stiffness_interior(mesh, q)
    b = fem.assemble_load(mesh, f)[mesh.interior]
    x = cg_solve(K, b, cg_opts)
    values = np.zeros(mesh.n_nodes)
    values[mesh.interior] = x
    return fem.FeFunction(mesh, values, fem.ZERO_TRACE)


def solve_parabolic(mesh, q, f, u0, grid, cg_opts=None, on_state=None):
    """Backward Euler solve of the heat problem with coefficient q.

    ``f(points, t)`` is sampled at the grid times t_n; ``u0`` is imposed
    through its L^2 projection.  When ``on_state(n, values)`` is given it
    is invoked for every step (including n = 0) and the trajectory is not
    stored; otherwise the full TimeSeriesFe is returned.
    """
    fem._check_coefficient(mesh, q)
    st = fem.structures(mesh)
    tau = grid.tau
    M = fem.mass_interior(mesh)
    step_data = st.mass_data + tau * st.stiffness_data(q.values)
    A = st.interior_matrix(step_data)
    interior = mesh.interior
    coords = mesh.node_coords
    lumped_int = st.lumped[interior]
    coords_int = coords[interior]

    u = fem.l2_project(mesh, u0, cg_opts).values
    u_int = u[interior]
    store = on_state is None
    if store:
        states = np.zeros((grid.N + 1, mesh.n_nodes))
        states[0] = u
    else:
        on_state(0, u)

    for n in range(1, grid.N + 1):
        b = M @ u_int + tau * (
            lumped_int * np.asarray(f(coords_int, n * tau), dtype=float)
        )
        u_int = cg_solve(A, b, cg_opts, x0=u_int)
        if store:
            states[n, interior] = u_int
        else:
            full = np.zeros(mesh.n_nodes)
            full[interior] = u_int
            on_state(n, full)
    if store:
        return TimeSeriesFe(mesh, grid, states)
    return None
