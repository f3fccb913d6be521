"""Noise synthesis, error metrics, diagnostics, and noise-level sweeps.

Synthetic data follows the relative-noise model: the forward problem is
solved on a declared fine grid with the interpolated exact coefficient,
per-node Gaussian noise scaled by epsilon * sup|u| is added (per fine
time step in the parabolic case, before interval averaging), and the
result is subsampled to the inversion mesh.  Sweeps couple the
regularization and grids to the noise level through gamma ~ eps^2,
h ~ sqrt(eps) and tau ~ eps, rounded to grid sizes nested in the fine
grid so that every transfer stays exact.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from time import perf_counter

import numpy as np

from . import fem, forward, inverse
from .mesh import (
    build_interval_mesh,
    build_unit_square_mesh,
    dist_to_boundary_points,
    subsample_indices,
    transfer_nodal,
)

__all__ = [
    "NoiseSpec",
    "SweepConfig",
    "SweepRow",
    "synthesize_elliptic",
    "synthesize_parabolic",
    "error_q",
    "error_u_elliptic",
    "error_u_parabolic",
    "weighted_error_elliptic",
    "weighted_error_parabolic",
    "positivity_profile",
    "fit_rate",
    "run_sweep",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Relative noise level and RNG seed (int or tuple of ints)."""

    epsilon: float
    seed: object = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    def rng(self):
        seed = self.seed
        if isinstance(seed, tuple):
            seed = list(seed)
        return np.random.default_rng(seed)


def _build_mesh(dim, n):
    return build_interval_mesh(n) if dim == 1 else build_unit_square_mesh(n)


# ---------------------------------------------------------------------------
# reference (fine-grid) forward solutions


@dataclass
class EllipticReference:
    mesh: object
    u: fem.FeFunction
    sup: float


def elliptic_reference(q_dag, f, fine_n, dim):
    mesh = _build_mesh(dim, fine_n)
    u = forward.solve_elliptic(mesh, fem.lagrange_interpolate(mesh, q_dag), f)
    return EllipticReference(mesh, u, fem.norm_linf(u))


@dataclass
class ParabolicReference:
    """Fine space-time solution: sup over the trajectory plus the states
    at a recorded subset of fine step indices."""

    mesh: object
    grid: forward.TimeGrid
    states: dict
    sup: float


def parabolic_reference(q_dag, f, u0, fine_n, fine_steps, T, dim, record):
    mesh = _build_mesh(dim, fine_n)
    grid = forward.TimeGrid(T, fine_steps)
    record = set(int(r) for r in record)
    states = {}
    sup = 0.0

    def on_state(n, values):
        nonlocal sup
        sup = max(sup, float(np.max(np.abs(values))))
        if n in record:
            states[n] = values.copy()

    forward.solve_parabolic(
        mesh, fem.lagrange_interpolate(mesh, q_dag), f, u0, grid, on_state=on_state
    )
    return ParabolicReference(mesh, grid, states, sup)


def _window_steps(grid, m):
    """Fine step indices inside the observed coarse intervals."""
    steps = []
    for n in range(grid.n_sigma, grid.N + 1):
        steps.extend(range((n - 1) * m + 1, n * m + 1))
    return steps


# ---------------------------------------------------------------------------
# noisy data


def synthesize_elliptic(q_dag, f, fine_n, coarse, noise, ref=None):
    """Noisy elliptic observation on the inversion mesh.

    Solves on the fine mesh, adds per-node Gaussian noise of amplitude
    epsilon * sup|u|, subsamples to the coarse mesh and zeroes the
    boundary values.
    """
    if ref is None:
        ref = elliptic_reference(q_dag, f, fine_n, coarse.dim)
    rng = noise.rng()
    z_fine = ref.u.values + noise.epsilon * ref.sup * rng.standard_normal(
        ref.mesh.n_nodes
    )
    vals = z_fine[subsample_indices(ref.mesh, coarse)]
    vals[coarse.is_boundary] = 0.0
    return fem.FeFunction(coarse, vals, fem.ZERO_TRACE)


def synthesize_parabolic(q_dag, f, u0, fine_n, fine_steps, coarse, grid, noise, ref=None):
    """Noisy time-averaged parabolic observations z_n, n = n_sigma..N.

    Noise is added per fine time step before averaging over each observed
    coarse interval (t_{n-1}, t_n]; the averages are then subsampled in
    space.  The coarse grids must nest in the fine ones.
    """
    if fine_steps % grid.N != 0:
        raise ValueError(
            f"coarse step count {grid.N} does not divide fine count {fine_steps}"
        )
    m = fine_steps // grid.N
    if ref is None:
        ref = parabolic_reference(
            q_dag, f, u0, fine_n, fine_steps, grid.T, coarse.dim, _window_steps(grid, m)
        )
    idx = subsample_indices(ref.mesh, coarse)
    rng = noise.rng()
    amp = noise.epsilon * ref.sup
    out = []
    for n in range(grid.n_sigma, grid.N + 1):
        acc = np.zeros(ref.mesh.n_nodes)
        for s in range((n - 1) * m + 1, n * m + 1):
            acc += ref.states[s] + amp * rng.standard_normal(ref.mesh.n_nodes)
        vals = (acc / m)[idx]
        vals[coarse.is_boundary] = 0.0
        out.append(fem.FeFunction(coarse, vals, fem.ZERO_TRACE))
    return out


# ---------------------------------------------------------------------------
# error metrics


def error_q(q_star, q_dag):
    """e_q = || q* - I_h q_dag || in the coarse mass-matrix norm."""
    mesh = q_star.mesh
    diff = q_star.values - np.asarray(q_dag(mesh.node_coords), dtype=float)
    return fem.norm_l2(fem.FeFunction(mesh, diff, fem.FULL))


def error_u_elliptic(q_star, q_dag, f, fine_n, ref=None):
    """State error against the fine-mesh forward solution at shared nodes."""
    mesh = q_star.mesh
    if ref is None:
        ref = elliptic_reference(q_dag, f, fine_n, mesh.dim)
    u = forward.solve_elliptic(mesh, q_star, f)
    diff = u.values - transfer_nodal(ref.u, mesh).values
    return fem.norm_l2(fem.FeFunction(mesh, diff, fem.FULL))


def error_u_parabolic(q_star, q_dag, f, u0, grid, fine_n, fine_steps, ref=None):
    """e_u = sqrt(tau * sum_{n>=n_sigma} ||U^n(q*) - u_ref(t_n)||^2)."""
    mesh = q_star.mesh
    if fine_steps % grid.N != 0:
        raise ValueError("coarse step count does not divide fine count")
    m = fine_steps // grid.N
    if ref is None:
        obs = [n * m for n in range(grid.n_sigma, grid.N + 1)]
        ref = parabolic_reference(q_dag, f, u0, fine_n, fine_steps, grid.T, mesh.dim, obs)
    sol = forward.solve_parabolic(mesh, q_star, f, u0, grid)
    idx = subsample_indices(ref.mesh, mesh)
    M = fem.assemble_mass(mesh)
    total = 0.0
    for n in range(grid.n_sigma, grid.N + 1):
        r = sol.values[n] - ref.states[n * m][idx]
        total += r @ (M @ r)
    return math.sqrt(grid.tau * total)


# ---------------------------------------------------------------------------
# weighted-error and positivity diagnostics


def _vertex_weights_elliptic(q_dag, f, ref_mesh, u_ref):
    """Per-element per-vertex values of q|grad u|^2 + f u on the reference mesh."""
    elems = ref_mesh.elements
    qd = np.asarray(q_dag(ref_mesh.node_coords), dtype=float)
    fv = np.asarray(f(ref_mesh.node_coords), dtype=float)
    gu = np.einsum("ei,eid->ed", u_ref.values[elems], ref_mesh.grads)
    grad_sq = (gu * gu).sum(axis=1)
    return qd[elems] * grad_sq[:, None] + (fv * u_ref.values)[elems]


def _weighted_integral(q_star, q_dag, ref_mesh, weights):
    qd = np.asarray(q_dag(ref_mesh.node_coords), dtype=float)
    dq = qd - fem.evaluate(q_star, ref_mesh.node_coords)
    d2 = (dq**2)[ref_mesh.elements]
    nv = ref_mesh.dim + 1
    return float(((ref_mesh.measures / nv)[:, None] * d2 * weights).sum())


def weighted_error_elliptic(q_star, q_dag, f, ref_mesh, u_ref=None):
    """int (q_dag - q*)^2 (q_dag |grad u|^2 + f u) dx on the reference mesh.

    The state gradient is elementwise constant from the reference P1
    solution; the remaining factors use vertex quadrature.
    """
    if u_ref is None:
        u_ref = forward.solve_elliptic(
            ref_mesh, fem.lagrange_interpolate(ref_mesh, q_dag), f
        )
    w = _vertex_weights_elliptic(q_dag, f, ref_mesh, u_ref)
    return _weighted_integral(q_star, q_dag, ref_mesh, w)


def _vertex_weights_parabolic(q_dag, f, ref_mesh, u_now, u_prev, tau, t):
    elems = ref_mesh.elements
    qd = np.asarray(q_dag(ref_mesh.node_coords), dtype=float)
    fv = np.asarray(f(ref_mesh.node_coords, t), dtype=float)
    dudt = (u_now - u_prev) / tau
    gu = np.einsum("ei,eid->ed", u_now[elems], ref_mesh.grads)
    grad_sq = (gu * gu).sum(axis=1)
    return qd[elems] * grad_sq[:, None] + ((fv - dudt) * u_now)[elems]


def weighted_error_parabolic(
    q_star, q_dag, f, u0, ref_mesh, ref_grid, ref=None
):
    """Final-time analogue of the weighted elliptic error.

    Uses the weight q|grad u(T)|^2 + (f(T) - du/dt(T)) u(T) with the time
    derivative approximated by the backward difference of the reference
    trajectory.
    """
    if ref is None:
        ref = parabolic_reference(
            q_dag,
            f,
            u0,
            ref_mesh.n_cells,
            ref_grid.N,
            ref_grid.T,
            ref_mesh.dim,
            [ref_grid.N - 1, ref_grid.N],
        )
    w = _vertex_weights_parabolic(
        q_dag,
        f,
        ref.mesh,
        ref.states[ref.grid.N],
        ref.states[ref.grid.N - 1],
        ref.grid.tau,
        ref.grid.T,
    )
    return _weighted_integral(q_star, q_dag, ref.mesh, w)


@dataclass(frozen=True)
class PositivityProfile:
    min_ratio: float
    min_weight: float
    argmin_weight: int  # element index of the weight minimum


def positivity_profile(q_dag, f, ref_mesh, beta, u0=None, grid=None):
    """Element-centroid weight profile and its distance-weighted ratio.

    Elliptic weight q|grad u|^2 + f u by default; passing ``u0`` and
    ``grid`` switches to the parabolic weight at the observed times, with
    du/dt from the backward difference of the reference trajectory.
    Returns minima over elements of w_T and w_T / dist(centroid)^beta.
    """
    centroids = ref_mesh.centroids()
    qd_c = np.asarray(q_dag(centroids), dtype=float)
    if u0 is None:
        u_ref = forward.solve_elliptic(
            ref_mesh, fem.lagrange_interpolate(ref_mesh, q_dag), f
        )
        gu = np.einsum(
            "ei,eid->ed", u_ref.values[ref_mesh.elements], ref_mesh.grads
        )
        u_c = u_ref.values[ref_mesh.elements].mean(axis=1)
        w = qd_c * (gu * gu).sum(axis=1) + np.asarray(f(centroids), dtype=float) * u_c
    else:
        record = range(max(grid.n_sigma - 1, 0), grid.N + 1)
        ref = parabolic_reference(
            q_dag, f, u0, ref_mesh.n_cells, grid.N, grid.T, ref_mesh.dim, record
        )
        w = None
        for n in range(grid.n_sigma, grid.N + 1):
            u_now = ref.states[n]
            dudt = (u_now - ref.states[n - 1]) / grid.tau
            gu = np.einsum(
                "ei,eid->ed", u_now[ref_mesh.elements], ref_mesh.grads
            )
            u_c = u_now[ref_mesh.elements].mean(axis=1)
            dudt_c = dudt[ref_mesh.elements].mean(axis=1)
            f_c = np.asarray(f(centroids, n * grid.tau), dtype=float)
            w_n = qd_c * (gu * gu).sum(axis=1) + (f_c - dudt_c) * u_c
            w = w_n if w is None else np.minimum(w, w_n)
    dist = dist_to_boundary_points(centroids)
    ratio = w / dist**beta
    k = int(np.argmin(w))
    return PositivityProfile(float(ratio.min()), float(w[k]), k)


def fit_rate(points):
    """Least-squares slope of log(e) against log(eps)."""
    pts = [(float(e), float(v)) for e, v in points]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a rate")
    if any(e <= 0 or v <= 0 for e, v in pts):
        raise ValueError("rate fit requires positive noise levels and errors")
    x = np.log([e for e, _ in pts])
    y = np.log([v for _, v in pts])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepConfig:
    """One noise-level sweep of a builtin or custom problem."""

    problem: object  # problems.ProblemDef
    epsilons: tuple
    epsilon0: float
    gamma0: float
    h0: float
    tau0: float = None
    fine_n: int = 0
    fine_steps: int = None
    seed: int = 0
    q0_value: float = None
    box: inverse.AdmissibleBox = field(default_factory=inverse.AdmissibleBox)
    optimizer: inverse.OptimizerOptions = field(
        default_factory=inverse.OptimizerOptions
    )
    continuation: bool = True
    jobs: int = 1
    timings_in_csv: bool = False

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise ValueError("epsilon list must not be empty")
        if any(e <= 0 for e in eps):
            raise ValueError("epsilon values must be positive")
        if list(eps) != sorted(eps, reverse=True):
            raise ValueError("epsilon values must be sorted in decreasing order")
        object.__setattr__(self, "epsilons", eps)
        if min(self.epsilon0, self.gamma0, self.h0) <= 0:
            raise ValueError("anchors must be positive")
        if self.fine_n < 2:
            raise ValueError("fine_n must be at least 2")
        if self.problem.kind == "parabolic":
            if self.tau0 is None or self.fine_steps is None:
                raise ValueError("parabolic sweeps need tau0 and fine_steps")

    @property
    def start_value(self):
        if self.q0_value is not None:
            return self.q0_value
        return 0.5 * (self.box.c0 + self.box.c1)


@dataclass
class SweepRow:
    epsilon: float
    gamma: float
    n_space: int
    n_time: int
    e_q: float
    e_u: float
    weighted_error: float
    iterations: int
    wall_time: float
    status: str = "ok"
    termination: str = ""
    objective_history: list = field(default_factory=list, repr=False)
    iterates_feasible: bool = True


def _divisors(n):
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out


def nearest_divisor(total, target, minimum=1, prefer_larger=True):
    """Divisor of ``total`` (>= minimum) closest to ``target``."""
    cands = [d for d in _divisors(total) if d >= minimum]
    if not cands:
        raise ValueError(f"{total} has no divisor >= {minimum}")
    best = None
    for d in cands:
        gap = abs(d - target)
        if (
            best is None
            or gap < best[0] - 1e-12
            or (abs(gap - best[0]) <= 1e-12 and prefer_larger and d > best[1])
        ):
            best = (gap, d)
    return best[1]


@dataclass(frozen=True)
class _PointPlan:
    index: int
    epsilon: float
    gamma: float
    n_space: int
    n_time: int  # coarse steps; 0 for elliptic
    m: int = 0  # fine steps per coarse step


def resolve_plan(config):
    """Apply the gamma ~ eps^2, h ~ sqrt(eps), tau ~ eps couplings with
    rounding to grid sizes nested in the fine grids."""
    prob = config.problem
    n0 = round(1.0 / config.h0)
    plans = []
    for k, eps in enumerate(config.epsilons):
        gamma = config.gamma0 * (eps / config.epsilon0) ** 2
        n = nearest_divisor(
            config.fine_n, n0 * math.sqrt(config.epsilon0 / eps), minimum=2
        )
        if prob.kind == "elliptic":
            plans.append(_PointPlan(k, eps, gamma, n, 0))
            continue
        tau_f = prob.T / config.fine_steps
        m_target = config.tau0 * (eps / config.epsilon0) / tau_f
        if prob.sigma > 0:
            s_f = (prob.T - prob.sigma) / tau_f
            if abs(s_f - round(s_f)) > 1e-9:
                raise ValueError("(T - sigma) must be a multiple of the fine step")
            total = math.gcd(config.fine_steps, int(round(s_f)))
        else:
            total = config.fine_steps
        m = nearest_divisor(total, m_target, minimum=1, prefer_larger=False)
        plans.append(_PointPlan(k, eps, gamma, n, config.fine_steps // m, m))
    return plans


def _failed_row(plan, exc, wall):
    return SweepRow(
        epsilon=plan.epsilon,
        gamma=plan.gamma,
        n_space=plan.n_space,
        n_time=plan.n_time,
        e_q=math.nan,
        e_u=math.nan,
        weighted_error=math.nan,
        iterations=0,
        wall_time=wall,
        status=f"failed: {exc}",
    )


def _initial_guess(config, mesh, q_warm):
    """Constant start, or the previous reconstruction carried over."""
    if q_warm is None:
        values = np.full(mesh.n_nodes, config.start_value)
    else:
        values = config.box.clip(fem.evaluate(q_warm, mesh.node_coords))
    return fem.FeFunction(mesh, values, fem.FULL)


def _run_point_elliptic(config, plan, ref, q_warm):
    prob = config.problem
    mesh = _build_mesh(prob.dim, plan.n_space)
    z = synthesize_elliptic(
        prob.q_dag,
        prob.f,
        config.fine_n,
        mesh,
        NoiseSpec(plan.epsilon, (config.seed, plan.index)),
        ref=ref,
    )
    problem = inverse.EllipticInverseProblem(mesh, z, prob.f, plan.gamma, config.box)
    q0 = _initial_guess(config, mesh, q_warm)
    feasible = [True]

    def watch(values):
        if not config.box.contains(values):
            feasible[0] = False

    res = inverse.ncg_minimize(problem, q0, config.optimizer, callback=watch)
    e_q = error_q(res.q_star, prob.q_dag)
    e_u = error_u_elliptic(res.q_star, prob.q_dag, prob.f, config.fine_n, ref=ref)
    weighted = weighted_error_elliptic(
        res.q_star, prob.q_dag, prob.f, ref.mesh, u_ref=ref.u
    )
    return res, e_q, e_u, weighted, feasible[0]


def _run_point_parabolic(config, plan, ref, q_warm):
    prob = config.problem
    mesh = _build_mesh(prob.dim, plan.n_space)
    grid = forward.TimeGrid(prob.T, plan.n_time, prob.sigma)
    z_seq = synthesize_parabolic(
        prob.q_dag,
        prob.f,
        prob.u0,
        config.fine_n,
        config.fine_steps,
        mesh,
        grid,
        NoiseSpec(plan.epsilon, (config.seed, plan.index)),
        ref=ref,
    )
    problem = inverse.ParabolicInverseProblem(
        mesh, grid, z_seq, prob.f, prob.u0, plan.gamma, config.box
    )
    q0 = _initial_guess(config, mesh, q_warm)
    feasible = [True]

    def watch(values):
        if not config.box.contains(values):
            feasible[0] = False

    res = inverse.ncg_minimize(problem, q0, config.optimizer, callback=watch)
    e_q = error_q(res.q_star, prob.q_dag)
    e_u = error_u_parabolic(
        res.q_star,
        prob.q_dag,
        prob.f,
        prob.u0,
        grid,
        config.fine_n,
        config.fine_steps,
        ref=ref,
    )
    weighted = weighted_error_parabolic(
        res.q_star, prob.q_dag, prob.f, prob.u0, ref.mesh, ref.grid, ref=ref
    )
    return res, e_q, e_u, weighted, feasible[0]


def _run_point(config, plan, ref, q_warm=None):
    start = perf_counter()
    try:
        if config.problem.kind == "elliptic":
            res, e_q, e_u, weighted, feasible = _run_point_elliptic(
                config, plan, ref, q_warm
            )
        else:
            res, e_q, e_u, weighted, feasible = _run_point_parabolic(
                config, plan, ref, q_warm
            )
    except Exception as exc:  # noqa: BLE001 - row failures must not kill the sweep
        return _failed_row(plan, exc, perf_counter() - start), None
    row = SweepRow(
        epsilon=plan.epsilon,
        gamma=plan.gamma,
        n_space=plan.n_space,
        n_time=plan.n_time,
        e_q=e_q,
        e_u=e_u,
        weighted_error=weighted,
        iterations=res.iterations,
        wall_time=perf_counter() - start,
        termination=res.termination,
        objective_history=res.objective_history,
        iterates_feasible=feasible,
    )
    return row, res.q_star


def _shared_reference(config, plans):
    prob = config.problem
    if prob.kind == "elliptic":
        return elliptic_reference(prob.q_dag, prob.f, config.fine_n, prob.dim)
    record = {config.fine_steps - 1, config.fine_steps}
    for plan in plans:
        grid = forward.TimeGrid(prob.T, plan.n_time, prob.sigma)
        record.update(_window_steps(grid, plan.m))
    return parabolic_reference(
        prob.q_dag,
        prob.f,
        prob.u0,
        config.fine_n,
        config.fine_steps,
        prob.T,
        prob.dim,
        record,
    )


def run_sweep(config, jobs=None):
    """Run every sweep point; failures become tagged rows, never raise.

    Points share a read-only fine-grid reference.  By default each point
    starts from the previous reconstruction (continuation in the noise
    level, in decreasing order), which is what lets the optimizer reach
    the per-point minimizers within its iteration budget; rows are then
    computed sequentially.  With ``continuation=False`` every point
    starts cold from the constant guess and points run on a thread pool.
    Either way the rows are bit-identical for identical configs
    regardless of the worker count.
    """
    plans = resolve_plan(config)
    ref = _shared_reference(config, plans)
    if config.continuation:
        rows = []
        q_warm = None
        for plan in plans:
            row, q_star = _run_point(config, plan, ref, q_warm)
            rows.append(row)
            if q_star is not None:
                q_warm = q_star
        return rows
    jobs = jobs if jobs is not None else config.jobs
    if jobs is None or jobs <= 1:
        return [_run_point(config, plan, ref)[0] for plan in plans]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_point, config, plan, ref) for plan in plans]
        return [f.result()[0] for f in futures]
