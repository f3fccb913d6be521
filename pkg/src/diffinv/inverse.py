"""Tikhonov-regularized output least squares and its exact discrete adjoint.

The elliptic objective is J(q) = 1/2 ||u_h(q) - z||^2 + gamma/2 |q|_H1^2;
the parabolic one carries the fidelity sum tau * sum_n ||U^n(q) - z_n||^2
(coefficient 1 on the sum) over the observed steps plus the same penalty.
Gradients with respect to the nodal values of q come from the discrete
adjoint equations, so they are exact derivatives of the discrete
objectives up to linear-solver tolerance; the finite-difference tests are
the arbiter of the sign conventions below.

Minimization uses projected Polak-Ribiere+ nonlinear CG with Armijo
backtracking on box-projected trial points.  The line search seeds its
step size adaptively (a fraction of the box width initially, then the
usual directional-derivative carryover): the objective is so flat in q
that a fixed unit step would make no visible progress.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .forward import TimeGrid
from .linalg import cg_solve

__all__ = [
    "AdmissibleBox",
    "EllipticInverseProblem",
    "ParabolicInverseProblem",
    "OptimizerOptions",
    "OptimizeResult",
    "project_box",
    "objective_elliptic",
    "gradient_elliptic",
    "objective_parabolic",
    "gradient_parabolic",
    "ncg_minimize",
]


@dataclass(frozen=True)
class AdmissibleBox:
    """Pointwise bounds c0 <= q <= c1 of the admissible set."""

    c0: float = 0.5
    c1: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.c0 < self.c1:
            raise ValueError("need 0 < c0 < c1")

    @property
    def width(self):
        return self.c1 - self.c0

    def clip(self, values):
        return np.clip(values, self.c0, self.c1)

    def contains(self, values):
        return bool(np.all(values >= self.c0) and np.all(values <= self.c1))


def project_box(q, box):
    """Nodal clamp of a full-space coefficient to [c0, c1]."""
    return fem.FeFunction(q.mesh, box.clip(q.values), fem.FULL)


@dataclass
class EllipticInverseProblem:
    mesh: object
    z: fem.FeFunction
    f: object
    gamma: float
    box: AdmissibleBox = field(default_factory=AdmissibleBox)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.z.mesh is not self.mesh:
            raise ValueError("data must live on the problem mesh")
        if self.z.space != fem.ZERO_TRACE:
            raise ValueError("data must be zero-trace")


@dataclass
class ParabolicInverseProblem:
    mesh: object
    grid: TimeGrid
    z_seq: list  # FeFunction per observed step n = n_sigma..N
    f: object  # source f(points, t)
    u0: object
    gamma: float
    box: AdmissibleBox = field(default_factory=AdmissibleBox)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        n_obs = self.grid.N - self.grid.n_sigma + 1
        if len(self.z_seq) != n_obs:
            raise ValueError(
                f"expected {n_obs} observed snapshots (n = "
                f"{self.grid.n_sigma}..{self.grid.N}), got {len(self.z_seq)}"
            )
        for z in self.z_seq:
            if z.mesh is not self.mesh:
                raise ValueError("all data snapshots must live on the problem mesh")


@dataclass
class OptimizerOptions:
    max_iters: int = 100
    grad_rel_tol: float = 1e-6
    obj_rel_tol: float = 1e-10
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        if min(
            self.max_iters,
            self.grad_rel_tol,
            self.obj_rel_tol,
            self.armijo_c,
            self.max_backtracks,
        ) <= 0:
            raise ValueError("optimizer options must be positive")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass
class OptimizeResult:
    q_star: fem.FeFunction
    objective_history: list
    grad_norm_history: list
    iterations: int
    termination: str


def _elem_gradients(st, padded, buf=None):
    """Per-element gradient vectors of a zero-padded interior vector."""
    return np.einsum("ei,eid->ed", padded[st.elem_int], st.mesh.grads, out=buf)


def _fidelity_scatter(st, acc_elem):
    """Scatter per-element (grad u . grad p)|T contributions to vertices."""
    mesh = st.mesh
    nv = mesh.dim + 1
    return np.bincount(
        mesh.elements.ravel(),
        weights=np.repeat(acc_elem * (mesh.measures / nv), nv),
        minlength=mesh.n_nodes,
    )


class _EllipticEval:
    """Shared state for repeated objective/gradient evaluations."""

    def __init__(self, p):
        self.p = p
        mesh = p.mesh
        self.st = fem.structures(mesh)
        self.M_int = fem.mass_interior(mesh)
        self.K1 = fem.unit_stiffness(mesh)
        self.b_int = fem.assemble_load(mesh, p.f)[mesh.interior]
        self.z_int = p.z.values[mesh.interior]

    def value(self, qvals, warm=None):
        K = self.st.interior_matrix(self.st.stiffness_data(qvals))
        u_int = cg_solve(K, self.b_int, x0=warm)
        r = u_int - self.z_int
        J = 0.5 * (r @ (self.M_int @ r)) + 0.5 * self.p.gamma * (
            qvals @ (self.K1 @ qvals)
        )
        return float(J), (qvals, K, u_int)

    def gradient(self, state):
        qvals, K, u_int = state
        st = self.st
        rhs = self.M_int @ (u_int - self.z_int)
        p_adj = cg_solve(K, rhs)
        pad_u = np.append(u_int, 0.0)
        pad_p = np.append(p_adj, 0.0)
        dots = (_elem_gradients(st, pad_u) * _elem_gradients(st, pad_p)).sum(axis=1)
        return -_fidelity_scatter(st, dots) + self.p.gamma * (self.K1 @ qvals)

    def warm_hint(self, state):
        return state[2]


class _ParabolicEval:
    def __init__(self, p):
        self.p = p
        mesh, grid = p.mesh, p.grid
        self.st = fem.structures(mesh)
        self.M_int = fem.mass_interior(mesh)
        self.K1 = fem.unit_stiffness(mesh)
        self.tau = grid.tau
        self.n_sigma = grid.n_sigma
        self.N = grid.N
        interior = mesh.interior
        coords_int = mesh.node_coords[interior]
        lumped_int = self.st.lumped[interior]
        self.loads = np.empty((grid.N, interior.shape[0]))
        for n in range(1, grid.N + 1):
            self.loads[n - 1] = lumped_int * np.asarray(
                p.f(coords_int, n * self.tau), dtype=float
            )
        self.u0_int = fem.l2_project(mesh, p.u0).values[interior]
        self.z_int = np.array([z.values[interior] for z in p.z_seq])

    def value(self, qvals, warm=None):
        st = self.st
        tau = self.tau
        A = st.interior_matrix(st.mass_data + tau * st.stiffness_data(qvals))
        states = np.empty((self.N + 1, self.u0_int.shape[0]))
        states[0] = self.u0_int
        u = self.u0_int
        J_fid = 0.0
        for n in range(1, self.N + 1):
            b = self.M_int @ u + tau * self.loads[n - 1]
            u = cg_solve(A, b, x0=u)
            states[n] = u
            if n >= self.n_sigma:
                r = u - self.z_int[n - self.n_sigma]
                J_fid += r @ (self.M_int @ r)
        J = tau * J_fid + 0.5 * self.p.gamma * (qvals @ (self.K1 @ qvals))
        return float(J), (qvals, A, states)

    def gradient(self, state):
        qvals, A, states = state
        st = self.st
        tau = self.tau
        n_el = st.mesh.n_elements
        acc = np.zeros(n_el)
        p_adj = np.zeros(self.u0_int.shape[0])  # P^{N+1} = 0
        pad_u = np.empty(self.u0_int.shape[0] + 1)
        pad_p = np.empty_like(pad_u)
        pad_u[-1] = pad_p[-1] = 0.0
        gu = np.empty((n_el, st.mesh.dim))
        gp = np.empty_like(gu)
        for n in range(self.N, 0, -1):
            if n >= self.n_sigma:
                r = states[n] - self.z_int[n - self.n_sigma]
                rhs = self.M_int @ (p_adj + 2.0 * tau * r)
            else:
                rhs = self.M_int @ p_adj
            p_adj = cg_solve(A, rhs, x0=p_adj)
            pad_u[:-1] = states[n]
            pad_p[:-1] = p_adj
            _elem_gradients(st, pad_u, buf=gu)
            _elem_gradients(st, pad_p, buf=gp)
            acc += (gu * gp).sum(axis=1)
        return -tau * _fidelity_scatter(st, acc) + self.p.gamma * (self.K1 @ qvals)

    def warm_hint(self, state):
        return None  # per-step warm starts happen inside value()


def _evaluator(problem):
    ev = problem.__dict__.get("_eval")
    if ev is None:
        if isinstance(problem, EllipticInverseProblem):
            ev = _EllipticEval(problem)
        elif isinstance(problem, ParabolicInverseProblem):
            ev = _ParabolicEval(problem)
        else:
            raise TypeError(f"unsupported problem type {type(problem)!r}")
        problem.__dict__["_eval"] = ev
    return ev


def _check_iterate(problem, q):
    if not isinstance(q, fem.FeFunction) or q.mesh is not problem.mesh:
        raise ValueError("q must be an FeFunction on the problem mesh")
    if q.space != fem.FULL:
        raise ValueError("q must live in the full space")
    if not problem.box.contains(q.values):
        raise ValueError("q violates the admissible box")


def objective_elliptic(p, q):
    _check_iterate(p, q)
    return _evaluator(p).value(q.values)[0]


def gradient_elliptic(p, q):
    """Exact gradient of the discrete elliptic objective w.r.t. nodal q."""
    _check_iterate(p, q)
    ev = _evaluator(p)
    _, state = ev.value(q.values)
    return ev.gradient(state)


def objective_parabolic(p, q):
    _check_iterate(p, q)
    return _evaluator(p).value(q.values)[0]


def gradient_parabolic(p, q):
    """Exact gradient of the discrete parabolic objective w.r.t. nodal q."""
    _check_iterate(p, q)
    ev = _evaluator(p)
    _, state = ev.value(q.values)
    return ev.gradient(state)


def _line_search(evaluator, box, q, d, g, gd, J, alpha, opts, warm):
    """Armijo-gated search along d with projected trial points.

    Evaluates the seeded step, adds one quadratic-interpolation candidate
    (fit through J, the slope gd and the first trial), then backtracks.
    Returns the best (alpha, J, trial, state) satisfying strict descent
    plus the Armijo condition on the projected step, or None.
    """
    cands = []

    def try_alpha(a):
        trial = box.clip(q + a * d)
        step = trial - q
        if not step.any():
            return None  # direction blocked by the active box
        J_t, state = evaluator.value(trial, warm=warm)
        cands.append((J_t, a, trial, state, float(g @ step)))
        return J_t

    budget = opts.max_backtracks
    J_1 = try_alpha(alpha)
    budget -= 1
    if J_1 is not None and budget > 0:
        denom = 2.0 * (J_1 - J - gd * alpha)
        if denom > 0.0:  # 1D quadratic model is convex: jump to its minimum
            a_q = -gd * alpha * alpha / denom
            a_q = min(max(a_q, 0.1 * alpha), 10.0 * alpha)
            if abs(a_q - alpha) > 0.05 * alpha:
                try_alpha(a_q)
                budget -= 1
    a = alpha
    while True:
        ok = [
            (J_t, a_t, trial, state)
            for (J_t, a_t, trial, state, pred) in cands
            if J_t < J and J_t <= J + opts.armijo_c * min(pred, 0.0)
        ]
        if ok:
            J_t, a_t, trial, state = min(ok)
            return a_t, J_t, trial, state
        if budget <= 0:
            return None
        a *= opts.backtrack_factor
        if try_alpha(a) is None:
            return None
        budget -= 1


def _ncg_core(evaluator, box, q0, opts, callback=None):
    """Projected PR+ nonlinear CG on nodal coefficient vectors."""
    q = np.array(q0, dtype=float)
    J, state = evaluator.value(q)
    g = evaluator.gradient(state)
    warm = evaluator.warm_hint(state)
    obj_hist = [J]
    gn_hist = [float(np.linalg.norm(g))]
    if callback is not None:
        callback(q)
    g0_norm = gn_hist[0]
    if g0_norm == 0.0:
        return q, obj_hist, gn_hist, 0, "gradient"

    d = -g
    gd = float(g @ d)
    alpha_prev = gd_prev = None
    termination = "max_iters"
    iterations = 0
    for _ in range(opts.max_iters):
        found = None
        for attempt in range(2):
            if attempt == 1:
                # fall back to steepest descent with a fresh step scale
                if np.array_equal(d, -g):
                    break
                d = -g
                gd = float(g @ d)
                alpha_prev = gd_prev = None
            d_inf = float(np.max(np.abs(d)))
            if d_inf == 0.0:
                break
            alpha_cap = 10.0 * box.width / d_inf
            if alpha_prev is None:
                alpha = min(0.05 * box.width / d_inf, alpha_cap)
            else:
                alpha = min(2.0 * alpha_prev * (gd_prev / gd), alpha_cap)
            found = _line_search(evaluator, box, q, d, g, gd, J, alpha, opts, warm)
            if found is not None:
                break
        if found is None:
            termination = "stagnation"
            break
        alpha, J_t, trial, state_t = found

        g_new = evaluator.gradient(state_t)
        warm = evaluator.warm_hint(state_t)
        iterations += 1
        obj_hist.append(J_t)
        gn_hist.append(float(np.linalg.norm(g_new)))
        if callback is not None:
            callback(trial)
        alpha_prev, gd_prev = alpha, gd
        J_old, g_old = J, g
        q, J, g = trial, J_t, g_new
        if gn_hist[-1] <= opts.grad_rel_tol * g0_norm:
            termination = "gradient"
            break
        if (J_old - J) <= opts.obj_rel_tol * max(abs(J_old), 1e-300):
            termination = "objective"
            break
        beta = max(0.0, float(g @ (g - g_old)) / float(g_old @ g_old))
        d = -g + beta * d
        gd = float(g @ d)
        if gd >= 0.0:  # restart when conjugacy breaks down
            d = -g
            gd = float(g @ d)
    return q, obj_hist, gn_hist, iterations, termination


def ncg_minimize(problem, q0, opts=None, callback=None):
    """Minimize the regularized objective over the admissible box.

    ``callback(values)``, when given, is invoked with the nodal values of
    every accepted iterate (including the initial point).
    """
    if opts is None:
        opts = OptimizerOptions()
    _check_iterate(problem, q0)
    ev = _evaluator(problem)
    qv, obj_hist, gn_hist, iters, termination = _ncg_core(
        ev, problem.box, q0.values, opts, callback
    )
    return OptimizeResult(
        q_star=fem.FeFunction(problem.mesh, qv, fem.FULL),
        objective_history=obj_hist,
        grad_norm_history=gn_hist,
        iterations=iters,
        termination=termination,
    )
