"""Continuous interpolation of collocation solutions, error analysis and mesh refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mesh import Mesh, MeshError
from .problem import OcpProblem


class RefinementOverflow(RuntimeError):
    """Raised when refinement would exceed the allowed interval count."""


@dataclass
class DiscreteSolution:
    """Node values of a collocation solution plus the path-row multipliers.

    ``row_constraint[j]`` and ``row_node[j]`` say which constraint and node
    the multiplier ``multipliers[j]`` belongs to.  ``F`` holds the dynamics
    at the nodes; when present the state interpolant is the Hermite cubic.
    """

    mesh: Mesh
    X: np.ndarray
    U: np.ndarray
    p: np.ndarray
    t0: float
    tf: float
    F: Optional[np.ndarray] = None
    row_constraint: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    row_node: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.p = np.asarray(self.p, dtype=float).ravel()
        N = self.mesh.N
        if self.X.shape[0] != N or self.U.shape[0] != N:
            raise ValueError(f"node arrays must have {N} rows, got {self.X.shape[0]} and {self.U.shape[0]}")
        if self.F is not None:
            self.F = np.asarray(self.F, dtype=float)
            if self.F.shape != self.X.shape:
                raise ValueError("F must match the shape of X")
        self.row_constraint = np.asarray(self.row_constraint, dtype=int)
        self.row_node = np.asarray(self.row_node, dtype=int)
        self.multipliers = np.asarray(self.multipliers, dtype=float)
        if not (self.row_constraint.size == self.row_node.size == self.multipliers.size):
            raise ValueError("row map and multipliers must have equal length")

    @property
    def times(self) -> np.ndarray:
        return self.mesh.node_times(self.t0, self.tf)

    @classmethod
    def from_nlp(cls, nlp, solution) -> "DiscreteSolution":
        """Unpack an :class:`~echocp.ipm.NlpSolution` of a transcribed problem."""
        z = solution.z_star
        X, U, p, t0, tf = nlp.unpack(z)
        t = nlp.mesh.node_times(t0, tf)
        F = nlp.prob._f.value(X, U, t, p)
        return cls(nlp.mesh, X, U, p, t0, tf, F, nlp.row_constraint.copy(), nlp.row_node.copy(),
                   np.asarray(solution.ineq_multipliers, dtype=float).copy(), solution.objective_value)

    def multiplier_matrix(self, n_path: int) -> np.ndarray:
        """``(N, n_path)`` array of multipliers, NaN where no row was implemented."""
        M = np.full((self.mesh.N, n_path), np.nan)
        M[self.row_node, self.row_constraint] = self.multipliers
        return M


def _quadratic(a, m, b, h):
    """Coefficients of ``a + B s + C s^2`` through ``(0, a), (h/2, m), (h, b)``."""
    C = 2.0 * (a - 2.0 * m + b) / h ** 2
    B = (b - a) / h - C * h
    return B, C


class Interpolant:
    """Piecewise state and input interpolant of a :class:`DiscreteSolution`.

    On each interval the state is the quadratic through the three nodes plus
    a cubic term vanishing at all of them whose size matches the average
    endpoint slope to the dynamics.  For Hermite-Simpson feasible data this
    is the Hermite cubic.  Inputs are the quadratic through the three nodes.
    """

    def __init__(self, sol: DiscreteSolution):
        self.sol = sol
        self.t0, self.tf = float(sol.t0), float(sol.tf)
        D = self.tf - self.t0
        h = sol.mesh.dtau * D
        if np.any(h <= 0):
            raise MeshError("degenerate mesh interval")
        self.h = h
        self.tb = self.t0 + sol.mesh.boundaries * D
        X, U = sol.X, sol.U
        xa, xm, xb = X[0:-1:2], X[1::2], X[2::2]
        hh = h[:, None]
        self._x0 = xa
        self._xB, self._xC = _quadratic(xa, xm, xb, hh)
        if sol.F is not None:
            fa, fb = sol.F[0:-1:2], sol.F[2::2]
            self._xA = (fa + fb - 2.0 * (xb - xa) / hh) / hh ** 2
        else:
            self._xA = np.zeros_like(xa)
        ua, um, ub = U[0:-1:2], U[1::2], U[2::2]
        self._u0 = ua
        self._uB, self._uC = _quadratic(ua, um, ub, hh)

    @property
    def horizon(self) -> tuple[float, float]:
        return self.t0, self.tf

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.tb, t, side="right") - 1, 0, self.h.size - 1)
        return k, t - self.tb[k]

    def state(self, t) -> np.ndarray:
        k, s = self._locate(t)
        s_ = s[..., None]
        h = self.h[k][..., None]
        cub = s_ * (s_ - 0.5 * h) * (s_ - h)
        return self._x0[k] + self._xB[k] * s_ + self._xC[k] * s_ ** 2 + self._xA[k] * cub

    def state_derivative(self, t) -> np.ndarray:
        k, s = self._locate(t)
        s_ = s[..., None]
        h = self.h[k][..., None]
        dcub = 3.0 * s_ ** 2 - 3.0 * h * s_ + 0.5 * h ** 2
        return self._xB[k] + 2.0 * self._xC[k] * s_ + self._xA[k] * dcub

    def input(self, t) -> np.ndarray:
        k, s = self._locate(t)
        s_ = s[..., None]
        return self._u0[k] + self._uB[k] * s_ + self._uC[k] * s_ ** 2

    def sample_grid(self, samples_per_interval: int) -> np.ndarray:
        """``(K, S + 1)`` equally spaced times covering each interval."""
        frac = np.linspace(0.0, 1.0, samples_per_interval + 1)
        return self.tb[:-1, None] + self.h[:, None] * frac[None, :]


def interpolate(sol: DiscreteSolution) -> Interpolant:
    return Interpolant(sol)


@dataclass
class ErrorReport:
    """Local dynamics error per interval and sampled constraint violation.

    ``eta`` is ``(K, n)``; ``times``/``c_values``/``eps_c`` are sampled on a
    ``(K, S + 1)`` grid, the last two with a trailing constraint axis.
    """

    eta: np.ndarray
    times: np.ndarray
    c_values: np.ndarray
    eps_c: np.ndarray
    eta_tol: float
    eps_c_tol: float

    @property
    def eta_interval(self) -> np.ndarray:
        return self.eta.max(axis=1) if self.eta.size else np.zeros(self.eta.shape[0])

    @property
    def eps_interval(self) -> np.ndarray:
        K = self.eps_c.shape[0]
        return self.eps_c.reshape(K, -1).max(axis=1, initial=0.0)

    @property
    def max_eta(self) -> float:
        return float(np.max(self.eta, initial=0.0))

    @property
    def max_eps_c(self) -> float:
        return float(np.max(self.eps_c, initial=0.0))

    @property
    def eta_ok(self) -> bool:
        return self.max_eta <= self.eta_tol

    @property
    def eps_ok(self) -> bool:
        return self.max_eps_c <= self.eps_c_tol

    @property
    def passed(self) -> bool:
        return self.eta_ok and self.eps_ok

    def to_text(self) -> str:
        lines = [f"intervals\t{self.eta.shape[0]}",
                 f"max_eta\t{self.max_eta:.6e}\ttol\t{self.eta_tol:.1e}",
                 f"max_eps_c\t{self.max_eps_c:.6e}\ttol\t{self.eps_c_tol:.1e}",
                 "interval\tt_start\tt_end\teta\teps_c"]
        for k in range(self.eta.shape[0]):
            lines.append(f"{k}\t{self.times[k, 0]:.6f}\t{self.times[k, -1]:.6f}\t"
                         f"{self.eta_interval[k]:.6e}\t{self.eps_interval[k]:.6e}")
        return "\n".join(lines) + "\n"


def _simpson(values, dt):
    """Composite Simpson rule along axis 1 for an even number of subintervals."""
    w = np.ones(values.shape[1])
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return np.einsum("ks...,s->k...", values, w) * (dt / 3.0)[:, None]


def error_analysis(prob: OcpProblem, sol: DiscreteSolution, interp: Interpolant,
                   samples_per_interval: int = 10, eta_tol: float = 1e-5,
                   eps_c_tol: float = 1e-4) -> ErrorReport:
    """Integrated dynamics residual per interval and constraint violation samples."""
    S = int(samples_per_interval)
    if S < 2 or S % 2:
        raise ValueError("samples_per_interval must be an even integer >= 2")
    T = interp.sample_grid(S)
    K = T.shape[0]
    flat = T.ravel()
    x = interp.state(flat)
    u = interp.input(flat)
    dx = interp.state_derivative(flat)
    f = prob._f.value(x, u, flat, sol.p)
    resid = np.abs(dx - f).reshape(K, S + 1, -1)
    eta = _simpson(resid, interp.h / S)
    if prob.n_path:
        c = prob._c.value(x, u, flat, sol.p).reshape(K, S + 1, prob.n_path)
    else:
        c = np.zeros((K, S + 1, 0))
    return ErrorReport(eta, T, c, np.maximum(c, 0.0), eta_tol, eps_c_tol)


@dataclass(frozen=True)
class RefineOptions:
    max_split: int = 4
    max_total_intervals: int = 2000
    eta_order: float = 5.0
    eps_order: float = 2.0


def split_counts(report: ErrorReport, opts: RefineOptions = RefineOptions()) -> np.ndarray:
    """Number of equal parts for each interval (1 keeps it)."""
    counts = np.ones(report.eta.shape[0], dtype=int)
    for err, tol, order in ((report.eta_interval, report.eta_tol, opts.eta_order),
                            (report.eps_interval, report.eps_c_tol, opts.eps_order)):
        bad = err > tol
        if np.any(bad):
            parts = np.array([math.ceil((e / tol) ** (1.0 / order)) for e in err[bad]])
            parts = np.clip(parts, 2, max(2, opts.max_split))
            counts[bad] = np.maximum(counts[bad], parts)
    return counts


def refine_mesh(mesh: Mesh, report: ErrorReport, opts: RefineOptions = RefineOptions()) -> Mesh:
    """Subdivide intervals whose local error or constraint violation is too large."""
    counts = split_counts(report, opts)
    if counts.sum() > opts.max_total_intervals:
        raise RefinementOverflow(
            f"refinement needs {counts.sum()} intervals, limit is {opts.max_total_intervals}")
    b = mesh.boundaries
    pieces = [np.linspace(b[k], b[k + 1], c + 1)[:-1] for k, c in enumerate(counts)]
    new = np.concatenate(pieces + [[1.0]])
    new[0] = 0.0
    return Mesh(new)


def resample(interp: Interpolant, new_mesh: Mesh, prob: Optional[OcpProblem] = None):
    """Interpolant values at the nodes of ``new_mesh``, clipped into the simple bounds."""
    t = new_mesh.node_times(interp.t0, interp.tf)
    X = interp.state(t)
    U = interp.input(t)
    if prob is not None:
        X = np.clip(X, prob.x_bounds[0], prob.x_bounds[1])
        U = np.clip(U, prob.u_bounds[0], prob.u_bounds[1])
    return X, U
