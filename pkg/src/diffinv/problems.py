"""Builtin benchmark problems with their exact coefficients and anchors.

Four configurations are shipped, matching the convergence studies this
package reproduces: two elliptic (1D/2D) and two parabolic (1D/2D)
coefficient-recovery problems on the unit domains, each with the fine
data grids, noise ladder and parameter anchors used by the tables.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["ProblemDef", "BUILTIN_EXAMPLES", "get_example"]

EPSILONS = (5e-2, 3e-2, 1e-2, 5e-3, 3e-3, 1e-3, 5e-4)


@dataclass(frozen=True)
class ProblemDef:
    """Exact problem data for one recovery benchmark.

    ``f`` maps points to values for elliptic problems and (points, t) for
    parabolic ones.  ``anchors`` is (epsilon0, gamma0, h0, tau0).
    """

    name: str
    kind: str  # "elliptic" | "parabolic"
    dim: int
    q_dag: object
    f: object
    description: str
    u0: object = None
    T: float = None
    sigma: float = None
    fine_n: int = 0
    fine_steps: int = None
    anchors: tuple = ()
    epsilons: tuple = EPSILONS
    q0_value: float = None


def _q_ell1d(p):
    x = p[:, 0]
    return 2.0 + np.sin(2.0 * np.pi * x)


def _q_ell2d(p):
    x1, x2 = p[:, 0], p[:, 1]
    return 1.0 + x2 * (1.0 - x2) * np.sin(np.pi * x1)


def _q_par1d(p):
    x = p[:, 0]
    return 2.0 + np.sin(2.0 * np.pi * x) * np.exp(-2.0 * (1.0 - x))


def _q_par2d(p):
    x1, x2 = p[:, 0], p[:, 1]
    return 1.0 + (1.0 - x1) * x1 * np.sin(np.pi * x2)


def _one(p):
    return np.ones(np.asarray(p).shape[0])


def _one_t(p, t):
    return np.ones(np.asarray(p).shape[0])


def _f_par1d(p, t):
    x = p[:, 0]
    return 4.0 * x * (1.0 - x)


def _u0_par1d(p):
    return np.sin(np.pi * p[:, 0])


def _u0_par2d(p):
    x1 = p[:, 0]
    return 4.0 * x1 * (1.0 - x1)


BUILTIN_EXAMPLES = {
    "ell1d": ProblemDef(
        name="ell1d",
        kind="elliptic",
        dim=1,
        q_dag=_q_ell1d,
        f=_one,
        description="q(x) = 2 + sin(2*pi*x), f = 1 on (0,1)",
        fine_n=3200,
        anchors=(5e-2, 5e-8, 2.5e-2, None),
        q0_value=2.0,
    ),
    "ell2d": ProblemDef(
        name="ell2d",
        kind="elliptic",
        dim=2,
        q_dag=_q_ell2d,
        f=_one,
        description="q(x1,x2) = 1 + x2*(1-x2)*sin(pi*x1), f = 1 on (0,1)^2",
        fine_n=200,
        anchors=(5e-2, 5e-6, 8.33e-2, None),
        q0_value=1.5,
    ),
    "par1d": ProblemDef(
        name="par1d",
        kind="parabolic",
        dim=1,
        q_dag=_q_par1d,
        f=_f_par1d,
        u0=_u0_par1d,
        T=0.1,
        sigma=0.0,
        description=(
            "q(x) = 2 + sin(2*pi*x)*exp(-2*(1-x)), u0 = sin(pi*x), "
            "f = 4*x*(1-x), T = 0.1, sigma = 0"
        ),
        fine_n=1600,
        fine_steps=800,
        anchors=(5e-2, 1e-7, 2.5e-2, 1.0 / 400.0),
        q0_value=2.0,
    ),
    "par2d": ProblemDef(
        name="par2d",
        kind="parabolic",
        dim=2,
        q_dag=_q_par2d,
        f=_one_t,
        u0=_u0_par2d,
        T=0.1,
        sigma=0.0,
        description=(
            "q(x1,x2) = 1 + (1-x1)*x1*sin(pi*x2), u0 = 4*x1*(1-x1), "
            "f = 1, T = 0.1, sigma = 0"
        ),
        fine_n=200,
        fine_steps=1280,
        anchors=(5e-2, 1e-6, 8.33e-2, 1.0 / 1600.0),
        q0_value=1.5,
    ),
}


def get_example(name):
    try:
        return BUILTIN_EXAMPLES[name]
    except KeyError:
        raise KeyError(
            f"unknown example {name!r}; available: {', '.join(BUILTIN_EXAMPLES)}"
        ) from None


def default_sweep_config(name, **overrides):
    """SweepConfig for a builtin example, with optional field overrides."""
    from .experiment import SweepConfig

    prob = get_example(name)
    eps0, gamma0, h0, tau0 = prob.anchors
    kwargs = dict(
        problem=prob,
        epsilons=prob.epsilons,
        epsilon0=eps0,
        gamma0=gamma0,
        h0=h0,
        tau0=tau0,
        fine_n=prob.fine_n,
        fine_steps=prob.fine_steps,
        q0_value=prob.q0_value,
    )
    kwargs.update(overrides)
    return SweepConfig(**kwargs)
