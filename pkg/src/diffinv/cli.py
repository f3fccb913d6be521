"""Configuration-driven command line interface.

Subcommands:

* ``run <config.toml> --out <dir> [--jobs N]`` executes a noise-level
  sweep and writes rows.csv, rates.csv and manifest.json.
* ``verify`` runs the built-in verification suite (gradient checks,
  forward orders, projection, noise statistics) and prints a table.
* ``list-examples`` prints the builtin example ids.

Configs are TOML; ``run`` also accepts a previously written
manifest.json, which replays the exact resolved configuration.  The
worker count comes from --jobs, else the DIFFINV_JOBS environment
variable, else the CPU count.  rows.csv is byte-reproducible for a fixed
seed; measured timings therefore live in manifest.json, and the CSV
wall_seconds column stays zero unless ``timings_in_csv = true``.
"""

import argparse
import json
import math
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import __version__, fem, forward, inverse
from .experiment import (
    NoiseSpec,
    SweepConfig,
    fit_rate,
    run_sweep,
    synthesize_elliptic,
)
from .mesh import build_interval_mesh
from .problems import BUILTIN_EXAMPLES, ProblemDef, get_example

__all__ = ["ConfigError", "parse_config", "cmd_run", "cmd_verify", "cmd_list_examples", "main"]

EXIT_OK = 0
EXIT_ROW_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3

_ROW_COLUMNS = (
    "epsilon",
    "gamma",
    "n_space",
    "n_time",
    "e_q",
    "e_u",
    "weighted_error",
    "iterations",
    "wall_seconds",
)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration, with the offending key."""


# ---------------------------------------------------------------------------
# field expressions for custom problems

_EXPR_NAMES = {
    "pi": np.pi,
    "e": np.e,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "minimum": np.minimum,
    "maximum": np.maximum,
}


def _compile_field(expr, key, time_dependent=False):
    try:
        code = compile(str(expr), f"<config {key}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"{key}: invalid expression {expr!r} ({exc.msg})") from None

    def _eval(points, t=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ns = dict(_EXPR_NAMES)
        ns["x"] = ns["x1"] = pts[:, 0]
        ns["x2"] = pts[:, 1] if pts.shape[1] > 1 else None
        ns["y"] = ns["x2"]
        if t is not None:
            ns["t"] = t
        try:
            out = eval(code, {"__builtins__": {}}, ns)  # noqa: S307 - sandboxed names
        except Exception as exc:
            raise ConfigError(f"{key}: expression failed to evaluate ({exc})") from None
        out = np.asarray(out, dtype=float)
        if out.ndim == 0:
            out = np.full(pts.shape[0], float(out))
        return out

    if time_dependent:
        return lambda points, t: _eval(points, t)
    return lambda points: _eval(points)


# ---------------------------------------------------------------------------
# config parsing


def _section(data, name):
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _get(sec, section, key, kind, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{section}].{key}: missing required key")
        return default
    val = sec[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(
            f"[{section}].{key}: expected {kind.__name__}, got {type(val).__name__}"
        )
    return val


def _problem_from_config(prob_sec):
    example = _get(prob_sec, "problem", "example", str, default="custom")
    if example != "custom":
        try:
            return get_example(example)
        except KeyError as exc:
            raise ConfigError(f"[problem].example: {exc.args[0]}") from None
    kind = _get(prob_sec, "problem", "kind", str, required=True)
    if kind not in ("elliptic", "parabolic"):
        raise ConfigError(f"[problem].kind: must be 'elliptic' or 'parabolic', got {kind!r}")
    dim = _get(prob_sec, "problem", "dim", int, required=True)
    if dim not in (1, 2):
        raise ConfigError(f"[problem].dim: must be 1 or 2, got {dim}")
    q_expr = _get(prob_sec, "problem", "q_exact", str, required=True)
    f_expr = _get(prob_sec, "problem", "f", str, required=True)
    q_dag = _compile_field(q_expr, "[problem].q_exact")
    if kind == "elliptic":
        return ProblemDef(
            name="custom",
            kind=kind,
            dim=dim,
            q_dag=q_dag,
            f=_compile_field(f_expr, "[problem].f"),
            description=f"q = {q_expr}, f = {f_expr}",
        )
    u0_expr = _get(prob_sec, "problem", "u0", str, required=True)
    T = _get(prob_sec, "problem", "T", float, required=True)
    sigma = _get(prob_sec, "problem", "sigma", float, default=0.0)
    return ProblemDef(
        name="custom",
        kind=kind,
        dim=dim,
        q_dag=q_dag,
        f=_compile_field(f_expr, "[problem].f", time_dependent=True),
        u0=_compile_field(u0_expr, "[problem].u0"),
        T=T,
        sigma=sigma,
        description=f"q = {q_expr}, f = {f_expr}, u0 = {u0_expr}, T = {T}, sigma = {sigma}",
    )


def _config_from_dict(data):
    prob_sec = _section(data, "problem")
    sweep = _section(data, "sweep")
    box_sec = _section(data, "box")
    opt_sec = _section(data, "optimizer")

    prob = _problem_from_config(prob_sec)
    anchors = prob.anchors or (None, None, None, None)

    epsilons = sweep.get("epsilons", list(prob.epsilons))
    if not isinstance(epsilons, list) or not epsilons:
        raise ConfigError("[sweep].epsilons: must be a non-empty list")
    epsilon0 = _get(sweep, "sweep", "epsilon0", float, default=anchors[0])
    gamma0 = _get(sweep, "sweep", "gamma0", float, default=anchors[1])
    h0 = _get(sweep, "sweep", "h0", float, default=anchors[2])
    tau0 = _get(sweep, "sweep", "tau0", float, default=anchors[3])
    fine_n = _get(sweep, "sweep", "fine_n", int, default=prob.fine_n)
    fine_steps = _get(sweep, "sweep", "fine_steps", int, default=prob.fine_steps)
    seed = _get(sweep, "sweep", "seed", int, default=0)
    q0_value = _get(sweep, "sweep", "initial_guess", float, default=prob.q0_value)
    jobs = _get(sweep, "sweep", "jobs", int, default=1)
    timings = _get(sweep, "sweep", "timings_in_csv", bool, default=False)
    continuation = _get(sweep, "sweep", "continuation", bool, default=True)
    for key, val in (
        ("epsilon0", epsilon0),
        ("gamma0", gamma0),
        ("h0", h0),
        ("fine_n", fine_n),
    ):
        if val is None:
            raise ConfigError(f"[sweep].{key}: required for custom problems")

    box = inverse.AdmissibleBox(
        _get(box_sec, "box", "lower", float, default=0.5),
        _get(box_sec, "box", "upper", float, default=5.0),
    )
    optimizer = inverse.OptimizerOptions(
        max_iters=_get(opt_sec, "optimizer", "max_iters", int, default=100),
        grad_rel_tol=_get(opt_sec, "optimizer", "grad_rel_tol", float, default=1e-6),
        obj_rel_tol=_get(opt_sec, "optimizer", "obj_rel_tol", float, default=1e-10),
        armijo_c=_get(opt_sec, "optimizer", "armijo_c", float, default=1e-4),
        backtrack_factor=_get(
            opt_sec, "optimizer", "backtrack_factor", float, default=0.5
        ),
        max_backtracks=_get(opt_sec, "optimizer", "max_backtracks", int, default=40),
    )
    try:
        return SweepConfig(
            problem=prob,
            epsilons=tuple(float(e) for e in epsilons),
            epsilon0=epsilon0,
            gamma0=gamma0,
            h0=h0,
            tau0=tau0,
            fine_n=fine_n,
            fine_steps=fine_steps,
            seed=seed,
            q0_value=q0_value,
            box=box,
            optimizer=optimizer,
            continuation=continuation,
            jobs=jobs,
            timings_in_csv=timings,
        ), _snapshot_dict(data, prob)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _snapshot_dict(data, prob):
    """Raw config dict with the problem section fully resolved."""
    snap = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    snap.setdefault("problem", {})
    if prob.name != "custom":
        snap["problem"]["example"] = prob.name
    return snap


def parse_config(path):
    """Parse a TOML config (or a manifest.json) into a SweepConfig."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if str(path).endswith(".json"):
        try:
            data = json.loads(raw.decode("utf-8"))
        except ValueError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        data = data.get("config", data)
    else:
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    config, snapshot = _config_from_dict(data)
    return config, snapshot


# ---------------------------------------------------------------------------
# output writers


def _fmt(x):
    if isinstance(x, int):
        return str(x)
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.6e}"


def _write_rows_csv(path, rows, timings_in_csv):
    lines = [",".join(_ROW_COLUMNS)]
    for r in rows:
        wall = r.wall_time if timings_in_csv else 0.0
        lines.append(
            ",".join(
                [
                    _fmt(r.epsilon),
                    _fmt(r.gamma),
                    str(r.n_space),
                    str(r.n_time),
                    _fmt(r.e_q),
                    _fmt(r.e_u),
                    _fmt(r.weighted_error),
                    str(r.iterations),
                    _fmt(wall),
                ]
            )
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _compute_rates(rows):
    rates = {}
    for metric in ("e_q", "e_u"):
        pts = [
            (r.epsilon, getattr(r, metric))
            for r in rows
            if r.status == "ok" and math.isfinite(getattr(r, metric)) and getattr(r, metric) > 0
        ]
        rates[metric] = fit_rate(pts) if len(pts) >= 2 else math.nan
    return rates


def _write_rates_csv(path, rates):
    lines = ["metric,rate"]
    for metric in ("e_q", "e_u"):
        lines.append(f"{metric},{_fmt(rates[metric])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_manifest(path, snapshot, config, rows, rates, jobs):
    manifest = {
        "tool": "diffinv",
        "version": __version__,
        "seed": config.seed,
        "jobs": jobs,
        "config": snapshot,
        "rows": [
            {
                "epsilon": r.epsilon,
                "gamma": r.gamma,
                "n_space": r.n_space,
                "n_time": r.n_time,
                "e_q": None if math.isnan(r.e_q) else r.e_q,
                "e_u": None if math.isnan(r.e_u) else r.e_u,
                "weighted_error": None
                if math.isnan(r.weighted_error)
                else r.weighted_error,
                "iterations": r.iterations,
                "wall_seconds": r.wall_time,
                "status": r.status,
                "termination": r.termination,
            }
            for r in rows
        ],
        "rates": {k: (None if math.isnan(v) else v) for k, v in rates.items()},
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(config_path, out_dir, jobs=None):
    try:
        config, snapshot = parse_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if jobs is None:
        jobs = int(os.environ.get("DIFFINV_JOBS", 0)) or config.jobs or os.cpu_count()
    rows = run_sweep(config, jobs=jobs)
    rates = _compute_rates(rows)
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write_rows_csv(os.path.join(out_dir, "rows.csv"), rows, config.timings_in_csv)
        _write_rates_csv(os.path.join(out_dir, "rates.csv"), rates)
        _write_manifest(
            os.path.join(out_dir, "manifest.json"), snapshot, config, rows, rates, jobs
        )
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR
    failed = [r for r in rows if r.status != "ok"]
    for r in rows:
        print(
            f"eps={r.epsilon:.2e} n={r.n_space} e_q={_fmt(r.e_q)} "
            f"e_u={_fmt(r.e_u)} iters={r.iterations} [{r.status}]"
        )
    print(f"rates: e_q={_fmt(rates['e_q'])} e_u={_fmt(rates['e_u'])}")
    if failed:
        print(f"error: {len(failed)} sweep point(s) failed", file=sys.stderr)
        return EXIT_ROW_FAILURE
    return EXIT_OK


def cmd_list_examples():
    for name, prob in BUILTIN_EXAMPLES.items():
        print(f"{name}: {prob.description}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification suite


def _fd_mismatch(value, grad_dot, q0, direction, steps):
    """Best relative mismatch between grad.dot(d) and central differences."""
    best = math.inf
    for eps in steps:
        fd = (value(q0 + eps * direction) - value(q0 - eps * direction)) / (2 * eps)
        denom = max(abs(fd), abs(grad_dot), 1e-300)
        best = min(best, abs(fd - grad_dot) / denom)
    return best


def _verify_gradient_elliptic(corrupt):
    mesh = build_interval_mesh(20)
    prob_def = get_example("ell1d")
    z = synthesize_elliptic(prob_def.q_dag, prob_def.f, 100, mesh, NoiseSpec(1e-2, 7))
    problem = inverse.EllipticInverseProblem(mesh, z, prob_def.f, 1e-8)
    rng = np.random.default_rng(11)
    qv = 2.0 + 0.3 * np.sin(2 * np.pi * mesh.node_coords[:, 0])
    q = fem.FeFunction(mesh, qv, fem.FULL)
    g = inverse.gradient_elliptic(problem, q)
    if corrupt:
        g = -g
    worst = 0.0
    steps = [10.0**-k for k in range(3, 9)]
    for _ in range(5):
        d = rng.standard_normal(mesh.n_nodes)
        d /= np.max(np.abs(d))
        dot = float(g @ d)
        val = lambda v: inverse.objective_elliptic(
            problem, fem.FeFunction(mesh, v, fem.FULL)
        )
        worst = max(worst, _fd_mismatch(val, dot, qv, d, steps))
    return worst


def _verify_gradient_parabolic(corrupt):
    mesh = build_interval_mesh(12)
    prob_def = get_example("par1d")
    grid = forward.TimeGrid(prob_def.T, 20, prob_def.sigma)
    from .experiment import synthesize_parabolic

    z_seq = synthesize_parabolic(
        prob_def.q_dag, prob_def.f, prob_def.u0, 48, 100, mesh, grid, NoiseSpec(1e-2, 3)
    )
    problem = inverse.ParabolicInverseProblem(
        mesh, grid, z_seq, prob_def.f, prob_def.u0, 1e-8
    )
    rng = np.random.default_rng(13)
    qv = 2.0 + 0.3 * np.cos(np.pi * mesh.node_coords[:, 0])
    q = fem.FeFunction(mesh, qv, fem.FULL)
    g = inverse.gradient_parabolic(problem, q)
    if corrupt:
        g = -g
    worst = 0.0
    steps = [10.0**-k for k in range(3, 9)]
    for _ in range(5):
        d = rng.standard_normal(mesh.n_nodes)
        d /= np.max(np.abs(d))
        dot = float(g @ d)
        val = lambda v: inverse.objective_parabolic(
            problem, fem.FeFunction(mesh, v, fem.FULL)
        )
        worst = max(worst, _fd_mismatch(val, dot, qv, d, steps))
    return worst


def _verify_elliptic_order():
    errs = []
    hs = []
    for n in (8, 16, 32, 64):
        mesh = build_interval_mesh(n)
        q = fem.lagrange_interpolate(mesh, lambda p: np.ones(p.shape[0]))
        u = forward.solve_elliptic(mesh, q, lambda p: np.ones(p.shape[0]))
        # 4-point Gauss quadrature of the true L2 distance to x(1-x)/2
        gauss_x = np.array(
            [-0.861136311594053, -0.339981043584856, 0.339981043584856, 0.861136311594053]
        )
        gauss_w = np.array(
            [0.347854845137454, 0.652145154862546, 0.652145154862546, 0.347854845137454]
        )
        h = 1.0 / n
        left = np.arange(n) * h
        total = 0.0
        for xi, wi in zip(gauss_x, gauss_w):
            xq = left + 0.5 * h * (xi + 1.0)
            uh = fem.evaluate(u, xq[:, None])
            exact = 0.5 * xq * (1.0 - xq)
            total += wi * 0.5 * h * np.sum((uh - exact) ** 2)
        errs.append(math.sqrt(total))
        hs.append(h)
    return fit_rate(list(zip(hs, errs)))


def _verify_parabolic_order():
    mesh = build_interval_mesh(64)
    q = fem.lagrange_interpolate(mesh, lambda p: np.ones(p.shape[0]))
    T = 0.2
    x = mesh.node_coords[:, 0]
    target = math.exp(-np.pi**2 * T) * np.sin(np.pi * x)
    errs = []
    taus = []
    for N in (2, 4, 8, 16, 32):
        grid = forward.TimeGrid(T, N)
        sol = forward.solve_parabolic(
            mesh,
            q,
            lambda p, t: np.zeros(p.shape[0]),
            lambda p: np.sin(np.pi * p[:, 0]),
            grid,
        )
        diff = fem.FeFunction(mesh, sol.values[N] - target, fem.FULL)
        errs.append(fem.norm_l2(diff))
        taus.append(grid.tau)
    return fit_rate(list(zip(taus, errs)))


def _verify_projection():
    rng = np.random.default_rng(5)
    mesh = build_interval_mesh(16)
    box = inverse.AdmissibleBox(0.5, 5.0)
    q = fem.FeFunction(mesh, rng.uniform(-3, 9, mesh.n_nodes), fem.FULL)
    p1 = inverse.project_box(q, box)
    p2 = inverse.project_box(p1, box)
    ok = (
        box.contains(p1.values)
        and np.array_equal(p1.values, p2.values)
        and np.all(p1.values[q.values > 5.0] == 5.0)
        and np.all(p1.values[q.values < 0.5] == 0.5)
    )
    return ok


def _verify_noise_stats():
    prob_def = get_example("ell1d")
    mesh = build_interval_mesh(3200)
    from .experiment import elliptic_reference

    ref = elliptic_reference(prob_def.q_dag, prob_def.f, 3200, 1)
    z = synthesize_elliptic(prob_def.q_dag, prob_def.f, 3200, mesh, NoiseSpec(5e-2, 42), ref=ref)
    inner = ~mesh.is_boundary
    resid = z.values[inner] - ref.u.values[inner]
    target = 5e-2 * ref.sup
    return abs(float(np.std(resid)) / target - 1.0)


def _verify_cg_contract():
    mesh = build_interval_mesh(50)
    q = fem.lagrange_interpolate(mesh, lambda p: 1.0 + p[:, 0])
    K = fem.stiffness_interior(mesh, q)
    rng = np.random.default_rng(1)
    b = rng.standard_normal(K.n)
    from .linalg import cg_solve, matvec

    x = cg_solve(K, b)
    return float(np.linalg.norm(matvec(K, x) - b) / np.linalg.norm(b))


def cmd_verify(corrupt_gradient=False):
    checks = []
    rel = _verify_gradient_elliptic(corrupt_gradient)
    checks.append(("elliptic-gradient-fd", rel <= 1e-5, f"max rel mismatch {rel:.2e}"))
    rel = _verify_gradient_parabolic(corrupt_gradient)
    checks.append(("parabolic-gradient-fd", rel <= 1e-5, f"max rel mismatch {rel:.2e}"))
    rate = _verify_elliptic_order()
    checks.append(("elliptic-order-h2", abs(rate - 2.0) <= 0.1, f"rate {rate:.3f}"))
    rate = _verify_parabolic_order()
    checks.append(("parabolic-order-tau1", abs(rate - 1.0) <= 0.1, f"rate {rate:.3f}"))
    ok = _verify_projection()
    checks.append(("projection-idempotent", ok, "clamp and idempotence"))
    dev = _verify_noise_stats()
    checks.append(("noise-statistics", dev <= 0.1, f"std deviation {dev:.2%} off target"))
    res = _verify_cg_contract()
    checks.append(("cg-residual-contract", res <= 1e-9, f"rel residual {res:.2e}"))

    width = max(len(name) for name, _, _ in checks)
    all_ok = True
    for name, passed, detail in checks:
        tag = "PASS" if passed else "FAIL"
        all_ok &= passed
        print(f"[{tag}] {name:<{width}}  {detail}")
    return EXIT_OK if all_ok else EXIT_ROW_FAILURE


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="diffinv",
        description="Diffusion-coefficient recovery from noisy PDE observations.",
    )
    parser.add_argument("--version", action="version", version=f"diffinv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a sweep from a TOML config or manifest.json")
    p_run.add_argument("config", help="path to config.toml or manifest.json")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--jobs", type=int, default=None, help="worker threads")

    p_verify = sub.add_parser("verify", help="run the built-in verification suite")
    p_verify.add_argument(
        "--self-test-corrupt-gradient",
        action="store_true",
        help=argparse.SUPPRESS,  # negative control for the FD checks
    )

    sub.add_parser("list-examples", help="list builtin example problems")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.jobs)
    if args.command == "verify":
        return cmd_verify(corrupt_gradient=args.self_test_corrupt_gradient)
    if args.command == "list-examples":
        return cmd_list_examples()
    return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
