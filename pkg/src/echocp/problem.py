"""Continuous-time Bolza optimal control problems.

User functions are written against numpy broadcasting: every callable
receives ``x``, ``u`` with the component on the last axis and ``t`` as an
array of node times, so the same function serves a single point and a
batch of collocation nodes.  Derivatives are taken with respect to the
stacked node argument ``w = (x, u, p, t)`` of width ``n + m + s + 1``;
endpoint functions use ``e = (x0, t0, xf, tf, p)`` of width ``2n + s + 2``.
Any derivative the author does not supply is obtained by central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FD_STEP = 1e-6
FD_HESS_STEP = 1e-4


class EvaluationError(ValueError):
    """A user function returned a non-finite value.

    ``index`` locates the first offending entry in the returned array.
    """

    def __init__(self, what: str, index):
        super().__init__(f"non-finite value in {what} at index {index}")
        self.what = what
        self.index = index


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    """A group of path-constraint rows forming one logical constraint."""

    set_id: int
    row_indices: tuple[int, ...]
    label: str = ""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EvaluationError(what, idx if len(idx) != 1 else idx[0])
    return arr


def _bounds_pair(b, dim: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    if b is None:
        return np.full(dim, -np.inf), np.full(dim, np.inf)
    lo = np.broadcast_to(np.asarray(b[0], dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(b[1], dtype=float), (dim,)).copy()
    if np.any(lo > hi):
        raise ValueError(f"{name}: lower bound exceeds upper bound")
    return lo, hi


class NodeFunction:
    """Vector function of ``(x, u, t, p)`` evaluated over node batches."""

    def __init__(self, fun, out_dim, dims, jac=None, hess=None, name="function"):
        self.fun = fun
        self.out_dim = out_dim
        self.n, self.m, self.s = dims
        self.jac_fun = jac
        self.hess_fun = hess
        self.name = name

    @property
    def nw(self) -> int:
        return self.n + self.m + self.s + 1

    def value(self, x, u, t, p) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.fun(x, u, t, p), dtype=float)
        batch = x.shape[:-1]
        if out.shape != batch + (self.out_dim,):
            try:
                out = np.broadcast_to(out, batch + (self.out_dim,))
            except ValueError:
                raise DimensionError(
                    f"{self.name} returned shape {out.shape}, expected {batch + (self.out_dim,)}"
                ) from None
        return _check_finite(out, self.name)

    def _stack(self, x, u, t, p):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        return x, u, t, np.asarray(p, dtype=float).reshape(self.s)

    def jacobian(self, x, u, t, p) -> np.ndarray:
        """Jacobian with respect to ``(x, u, p, t)``; shape ``(N, q, nw)``."""
        x, u, t, p = self._stack(x, u, t, p)
        if self.jac_fun is not None:
            J = np.asarray(self.jac_fun(x, u, t, p), dtype=float)
            return _check_finite(np.broadcast_to(J, (x.shape[0], self.out_dim, self.nw)), self.name)
        return self._fd_jacobian(x, u, t, p)

    def _fd_jacobian(self, x, u, t, p):
        N = x.shape[0]
        n, m, s = self.n, self.m, self.s
        J = np.empty((N, self.out_dim, self.nw))
        for j in range(self.nw):
            xp, xm, up, um, tp, tm, pp, pm = x.copy(), x.copy(), u.copy(), u.copy(), t.copy(), t.copy(), p.copy(), p.copy()
            if j < n:
                h = FD_STEP * np.maximum(1.0, np.abs(x[:, j]))
                xp[:, j] += h
                xm[:, j] -= h
            elif j < n + m:
                k = j - n
                h = FD_STEP * np.maximum(1.0, np.abs(u[:, k]))
                up[:, k] += h
                um[:, k] -= h
            elif j < n + m + s:
                k = j - n - m
                h = np.full(N, FD_STEP * max(1.0, abs(p[k])))
                pp[k] += h[0]
                pm[k] -= h[0]
            else:
                h = FD_STEP * np.maximum(1.0, np.abs(t))
                tp = t + h
                tm = t - h
            fp = self.value(xp, up, tp, pp)
            fm = self.value(xm, um, tm, pm)
            J[:, :, j] = (fp - fm) / (2.0 * h[:, None])
        return J

    def weighted_hessian(self, x, u, t, p, weights) -> np.ndarray:
        """Hessian of ``sum_k weights[:, k] * g_k`` per node; shape ``(N, nw, nw)``."""
        x, u, t, p = self._stack(x, u, t, p)
        weights = np.asarray(weights, dtype=float).reshape(x.shape[0], self.out_dim)
        if self.hess_fun is not None:
            H = np.asarray(self.hess_fun(x, u, t, p, weights), dtype=float)
            return _check_finite(np.broadcast_to(H, (x.shape[0], self.nw, self.nw)), self.name)
        N = x.shape[0]
        n, m, s = self.n, self.m, self.s
        H = np.empty((N, self.nw, self.nw))
        for j in range(self.nw):
            xp, xm, up, um, tp, tm, pp, pm = x.copy(), x.copy(), u.copy(), u.copy(), t.copy(), t.copy(), p.copy(), p.copy()
            if j < n:
                h = FD_HESS_STEP * np.maximum(1.0, np.abs(x[:, j]))
                xp[:, j] += h
                xm[:, j] -= h
            elif j < n + m:
                k = j - n
                h = FD_HESS_STEP * np.maximum(1.0, np.abs(u[:, k]))
                up[:, k] += h
                um[:, k] -= h
            elif j < n + m + s:
                k = j - n - m
                h = np.full(N, FD_HESS_STEP * max(1.0, abs(p[k])))
                pp[k] += h[0]
                pm[k] -= h[0]
            else:
                h = FD_HESS_STEP * np.maximum(1.0, np.abs(t))
                tp = t + h
                tm = t - h
            gp = np.einsum("nq,nqw->nw", weights, self.jacobian(xp, up, tp, pp))
            gm = np.einsum("nq,nqw->nw", weights, self.jacobian(xm, um, tm, pm))
            H[:, j, :] = (gp - gm) / (2.0 * h[:, None])
        return 0.5 * (H + np.transpose(H, (0, 2, 1)))


class EndpointFunction:
    """Vector function of ``(x0, t0, xf, tf, p)``."""

    def __init__(self, fun, out_dim, n, s, jac=None, hess=None, name="endpoint"):
        self.fun = fun
        self.out_dim = out_dim
        self.n, self.s = n, s
        self.jac_fun = jac
        self.hess_fun = hess
        self.name = name

    @property
    def ne(self) -> int:
        return 2 * self.n + self.s + 2

    def _unpack(self, e):
        n = self.n
        return e[:n], e[n], e[n + 1:2 * n + 1], e[2 * n + 1], e[2 * n + 2:]

    def value_e(self, e) -> np.ndarray:
        out = np.atleast_1d(np.asarray(self.fun(*self._unpack(e)), dtype=float))
        if out.shape != (self.out_dim,):
            raise DimensionError(f"{self.name} returned shape {out.shape}, expected ({self.out_dim},)")
        return _check_finite(out, self.name)

    def jacobian_e(self, e) -> np.ndarray:
        if self.jac_fun is not None:
            J = np.asarray(self.jac_fun(*self._unpack(e)), dtype=float).reshape(self.out_dim, self.ne)
            return _check_finite(J, self.name)
        J = np.empty((self.out_dim, self.ne))
        for j in range(self.ne):
            h = FD_STEP * max(1.0, abs(e[j]))
            ep, em = e.copy(), e.copy()
            ep[j] += h
            em[j] -= h
            J[:, j] = (self.value_e(ep) - self.value_e(em)) / (2 * h)
        return J

    def weighted_hessian_e(self, e, weights) -> np.ndarray:
        weights = np.asarray(weights, dtype=float).reshape(self.out_dim)
        if self.hess_fun is not None:
            H = np.asarray(self.hess_fun(*self._unpack(e), weights), dtype=float)
            return _check_finite(H.reshape(self.ne, self.ne), self.name)
        H = np.empty((self.ne, self.ne))
        for j in range(self.ne):
            h = FD_HESS_STEP * max(1.0, abs(e[j]))
            ep, em = e.copy(), e.copy()
            ep[j] += h
            em[j] -= h
            H[j] = weights @ (self.jacobian_e(ep) - self.jacobian_e(em)) / (2 * h)
        return 0.5 * (H + H.T)


def _zero_lagrange(x, u, t, p):
    return np.zeros(np.shape(x)[:-1] + (1,))


@dataclass(frozen=True)
class OcpProblem:
    """Bolza optimal control problem with ``c(x, u, t, p) <= 0`` path constraints.

    Derivative callables are optional.  ``dynamics_jac`` returns
    ``(..., n, nw)``, ``dynamics_hess(x, u, t, p, weights)`` returns the
    weighted Hessian ``(..., nw, nw)``; ``path_jac``/``path_hess`` play the
    same role for the stacked path-constraint vector, ``lagrange_grad``
    returns ``(..., nw)`` and ``lagrange_hess(x, u, t, p, weight)``
    ``(..., nw, nw)``.  Endpoint derivatives are with respect to ``e``.
    """

    state_dim: int
    input_dim: int
    dynamics: Callable
    param_dim: int = 0
    path_constraints: Sequence[Callable] = ()
    mayer_cost: Optional[Callable] = None
    lagrange_cost: Optional[Callable] = None
    boundary: Optional[Callable] = None
    boundary_dim: int = 0
    x_bounds: Optional[tuple] = None
    u_bounds: Optional[tuple] = None
    p_bounds: Optional[tuple] = None
    t0_bounds: Optional[tuple] = None
    tf_bounds: Optional[tuple] = None
    t0: float = 0.0
    tf: float = 1.0
    fixed_time: bool = True
    constraint_sets: Optional[Sequence[ConstraintSet]] = None
    initial_guess: Optional[Callable] = None
    dynamics_jac: Optional[Callable] = None
    dynamics_hess: Optional[Callable] = None
    path_jac: Optional[Callable] = None
    path_hess: Optional[Callable] = None
    lagrange_grad: Optional[Callable] = None
    lagrange_hess: Optional[Callable] = None
    mayer_grad: Optional[Callable] = None
    mayer_hess: Optional[Callable] = None
    boundary_jac: Optional[Callable] = None
    boundary_hess: Optional[Callable] = None
    name: str = "ocp"

    _f: NodeFunction = field(init=False, repr=False, compare=False)
    _c: NodeFunction = field(init=False, repr=False, compare=False)
    _L: NodeFunction = field(init=False, repr=False, compare=False)
    _mayer: EndpointFunction = field(init=False, repr=False, compare=False)
    _phi: EndpointFunction = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n, m, s = self.state_dim, self.input_dim, self.param_dim
        if n < 1 or m < 1 or s < 0:
            raise ValueError("state_dim and input_dim must be positive, param_dim nonnegative")
        if not self.tf > self.t0:
            raise ValueError("tf must exceed t0")
        set_ = object.__setattr__
        for name, b, dim in (("x_bounds", self.x_bounds, n), ("u_bounds", self.u_bounds, m),
                             ("p_bounds", self.p_bounds, s), ("t0_bounds", self.t0_bounds, 1),
                             ("tf_bounds", self.tf_bounds, 1)):
            set_(self, name, _bounds_pair(b, dim, name))
        dims = (n, m, s)
        cs = tuple(self.path_constraints)
        set_(self, "path_constraints", cs)

        def stacked_c(x, u, t, p):
            if not cs:
                return np.zeros(np.shape(x)[:-1] + (0,))
            return np.stack([np.broadcast_to(np.asarray(c(x, u, t, p), dtype=float), np.shape(x)[:-1])
                             for c in cs], axis=-1)

        set_(self, "_f", NodeFunction(self.dynamics, n, dims, self.dynamics_jac, self.dynamics_hess, "dynamics"))
        set_(self, "_c", NodeFunction(stacked_c, len(cs), dims, self.path_jac, self.path_hess, "path constraints"))
        if self.lagrange_cost is None:
            L = NodeFunction(_zero_lagrange, 1, dims, lambda x, u, t, p: np.zeros(x.shape[:-1] + (1, n + m + s + 1)),
                             lambda x, u, t, p, w: np.zeros(x.shape[:-1] + (n + m + s + 1,) * 2), "lagrange cost")
        else:
            lg, lh = self.lagrange_grad, self.lagrange_hess

            def lfun(x, u, t, p):
                return np.asarray(self.lagrange_cost(x, u, t, p), dtype=float)[..., None]

            ljac = None if lg is None else (lambda x, u, t, p: np.asarray(lg(x, u, t, p))[..., None, :])
            lhess = None if lh is None else (lambda x, u, t, p, w: np.asarray(lh(x, u, t, p, w[..., 0])))
            L = NodeFunction(lfun, 1, dims, ljac, lhess, "lagrange cost")
        set_(self, "_L", L)
        ne = 2 * n + s + 2
        if self.mayer_cost is None:
            mayer = EndpointFunction(lambda *a: np.zeros(1), 1, n, s, lambda *a: np.zeros((1, ne)),
                                     lambda *a: np.zeros((ne, ne)), "mayer cost")
        else:
            mg = self.mayer_grad
            mh = self.mayer_hess
            mayer = EndpointFunction(
                lambda *a: np.atleast_1d(self.mayer_cost(*a)), 1, n, s,
                None if mg is None else (lambda *a: np.asarray(mg(*a)).reshape(1, ne)),
                None if mh is None else (lambda *a: np.asarray(mh(*a[:-1])) * a[-1][0]),
                "mayer cost")
        set_(self, "_mayer", mayer)
        if self.boundary is None:
            set_(self, "boundary_dim", 0)
            phi = EndpointFunction(lambda *a: np.zeros(0), 0, n, s, lambda *a: np.zeros((0, ne)),
                                   lambda *a: np.zeros((ne, ne)), "boundary")
        else:
            phi = EndpointFunction(self.boundary, self.boundary_dim, n, s, self.boundary_jac,
                                   self.boundary_hess, "boundary")
        set_(self, "_phi", phi)
        if self.constraint_sets is None:
            sets = tuple(ConstraintSet(l, (l,), f"c{l + 1}") for l in range(len(cs)))
        else:
            sets = tuple(self.constraint_sets)
            rows = sorted(r for cset in sets for r in cset.row_indices)
            if rows != list(range(len(cs))):
                raise ValueError("constraint sets must partition the path-constraint rows")
        set_(self, "constraint_sets", sets)

    @property
    def n_path(self) -> int:
        return len(self.path_constraints)

    @property
    def horizon(self) -> tuple[float, float]:
        return (self.t0, self.tf)

    def set_of_row(self) -> np.ndarray:
        out = np.empty(self.n_path, dtype=int)
        for k, cset in enumerate(self.constraint_sets):
            out[list(cset.row_indices)] = k
        return out

    def _check_point(self, x, u, p):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = np.asarray(p if p is not None else np.zeros(self.param_dim), dtype=float)
        if x.shape[-1:] != (self.state_dim,) or u.shape[-1:] != (self.input_dim,) or p.shape != (self.param_dim,):
            raise DimensionError(
                f"expected x[..., {self.state_dim}], u[..., {self.input_dim}], p[{self.param_dim}]; "
                f"got {x.shape}, {u.shape}, {p.shape}")
        _check_finite(x, "state")
        _check_finite(u, "input")
        _check_finite(p, "parameters")
        return x, u, p


def evaluate_dynamics(prob: OcpProblem, x, u, t, p=None) -> np.ndarray:
    """Return ``f(x, u, t, p)``; batches along leading axes are allowed."""
    x, u, p = prob._check_point(x, u, p)
    return prob._f.value(x, u, np.asarray(t, dtype=float), p)


def evaluate_path_constraints(prob: OcpProblem, x, u, t, p=None) -> np.ndarray:
    """Return the stacked path-constraint values ``(c_1, ..., c_ng)``."""
    x, u, p = prob._check_point(x, u, p)
    if prob.n_path == 0:
        return np.zeros(x.shape[:-1] + (0,))
    return prob._c.value(x, u, np.asarray(t, dtype=float), p)
