"""Small problems shared by the tests."""

import numpy as np

from echocp.activity import ActivityReport
from echocp.ipm import DenseNlp
from echocp.problem import OcpProblem


def scalar_problem(rhs, t0=0.0, tf=1.0, **kw):
    """One-state, one-input problem with dynamics ``rhs(x, u, t)``."""
    return OcpProblem(state_dim=1, input_dim=1, dynamics=lambda x, u, t, p: rhs(x, u, t),
                      t0=t0, tf=tf, **kw)


def double_integrator(**kw):
    def f(x, u, t, p):
        return np.stack([x[..., 1], u[..., 0]], axis=-1)

    return OcpProblem(state_dim=2, input_dim=1, dynamics=f, **kw)


def activity_report(intervals, status, horizon=(0.0, 1000.0), fixed_time=True):
    """Report with one row per set; ``intervals[k]`` and ``status[k]`` describe set ``k``."""
    n = len(intervals)
    return ActivityReport(times=np.zeros(0), node_active=np.zeros((0, n), bool), by_violation=None,
                          by_multiplier=None, intervals=[list(iv) for iv in intervals],
                          set_status={k: status[k] for k in range(n)}, set_rows={k: [k] for k in range(n)},
                          set_labels={k: f"S{k}" for k in range(n)}, profiles=[], horizon=horizon,
                          fixed_time=fixed_time)


def random_interior(nlp, rng):
    lo = np.where(np.isfinite(nlp.lb), nlp.lb, -5.0)
    hi = np.where(np.isfinite(nlp.ub), nlp.ub, 5.0)
    return lo + (hi - lo) * rng.uniform(0.05, 0.95, size=nlp.n)


def bounded_square():
    """min x^2 s.t. 1 - x <= 0."""
    return DenseNlp(1, lambda z: z[0] ** 2, lambda z: 2 * z, lambda z: np.array([[2.0]]),
                    ineq=lambda z: np.array([1.0 - z[0]]), ineq_jac=lambda z: np.array([[-1.0]]),
                    ineq_hess=lambda z, lam: np.zeros((1, 1)), x0=[3.0])


def shifted_quadratic():
    return DenseNlp(2, lambda z: (z[0] - 2) ** 2 + (z[1] - 1) ** 2, lambda z: 2 * (z - [2.0, 1.0]),
                    lambda z: 2 * np.eye(2))


def linear_on_box():
    """min -x on [0, 3]."""
    return DenseNlp(1, lambda z: -z[0], lambda z: np.array([-1.0]), lambda z: np.zeros((1, 1)),
                    lb=[0.0], ub=[3.0], x0=[1.0])


def circle_equality():
    """min x^2 + y^2 s.t. x + y = 1."""
    return DenseNlp(2, lambda z: z @ z, lambda z: 2 * z, lambda z: 2 * np.eye(2),
                    eq=lambda z: np.array([z[0] + z[1] - 1.0]), eq_jac=lambda z: np.array([[1.0, 1.0]]),
                    eq_hess=lambda z, lam: np.zeros((2, 2)), x0=[2.0, -1.0])
