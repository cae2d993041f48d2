"""Primal-dual interior-point solver for sparse nonlinear programs.

Problems have the form::

    min f(z)  s.t.  eq(z) = 0,  ineq(z) <= 0,  lb <= z <= ub

Inequalities get slacks ``ineq(z) + s = 0, s > 0`` and all bounds are
handled by log barriers.  Each iteration takes a Newton step on the
perturbed KKT conditions, factorizing the augmented system with inertia
correction, and backtracks on an l1 exact-penalty merit function.

Multiplier convention: ``grad f + J_eq^T lam_eq + J_ineq^T lam_ineq - z_L + z_U = 0``
with ``lam_ineq, z_L, z_U >= 0``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .kkt import LDLFactor, SingularKKT

log = logging.getLogger(__name__)

LOG_HEADER = "iter\tobjective\tinf_pr\tinf_du\tcompl\tmu\talpha_pr\talpha_du\treg"


class Status(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    RESTORATION_FAILED = "Restoration-Failed"
    INFEASIBLE = "Infeasible-Detected"


@dataclass(frozen=True)
class SolverOptions:
    tol_kkt: float = 1e-8
    tol_primal: float = 1e-8
    max_iter: int = 500
    mu_init: float = 0.1
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau_min: float = 0.995
    slack_min: float = 1e-2
    bound_frac: float = 1e-2
    mult_min: float = 1e-6
    mult_init_max: float = 1e3
    ls_damping: float = 1e-8
    reg_init: float = 1e-8
    reg_factor: float = 10.0
    reg_max: float = 1e20
    static_reg: float = 1e-10
    kkt_residual_tol: float = 1e-8
    armijo: float = 1e-4
    alpha_min: float = 1e-12
    restoration_trigger: int = 3
    stall_window: int = 25
    stall_floor: float = 1e-6
    kappa_sigma: float = 1e10
    s_max: float = 100.0
    allow_restoration: bool = True
    log_callback: Optional[Callable[[str], None]] = None

    @property
    def mu_min(self) -> float:
        return self.tol_kkt / 10.0


@dataclass
class WarmStart:
    """Primal guess plus optional dual and slack guesses.

    ``ineq_multipliers`` may contain NaN entries; those rows are
    initialized by the least-squares fit like a cold start.
    """

    primal: np.ndarray
    eq_multipliers: Optional[np.ndarray] = None
    ineq_multipliers: Optional[np.ndarray] = None
    slacks: Optional[np.ndarray] = None
    bound_lower: Optional[np.ndarray] = None
    bound_upper: Optional[np.ndarray] = None
    mu: Optional[float] = None

    @classmethod
    def from_solution(cls, sol: "NlpSolution", mu: Optional[float] = None) -> "WarmStart":
        """Full primal-dual warm start from a previous solution of the same NLP."""
        return cls(sol.z_star.copy(), sol.eq_multipliers.copy(), sol.ineq_multipliers.copy(),
                   sol.slacks.copy(), sol.bound_lower.copy(), sol.bound_upper.copy(),
                   sol.mu_history[-1] if mu is None and sol.mu_history else mu)


@dataclass
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def as_tuple(self):
        return (self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass
class NlpSolution:
    z_star: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    bound_lower: np.ndarray
    bound_upper: np.ndarray
    slacks: np.ndarray
    objective_value: float
    status: Status
    kkt_residuals: KktResiduals
    iteration_count: int
    wall_time: float
    mu_history: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)
    restorations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class InteriorPoint:
    z: np.ndarray
    s: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    mu: float


class DenseNlp:
    """Small NLP from plain callables; missing Hessians are finite-differenced."""

    def __init__(self, n, f, grad, hess=None, eq=None, eq_jac=None, eq_hess=None,
                 ineq=None, ineq_jac=None, ineq_hess=None, lb=None, ub=None, x0=None):
        self.n = n
        self._f, self._g, self._h = f, grad, hess
        self._eq, self._eqj, self._eqh = eq, eq_jac, eq_hess
        self._in, self._inj, self._inh = ineq, ineq_jac, ineq_hess
        self.lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, float)
        self.ub = np.full(n, np.inf) if ub is None else np.asarray(ub, float)
        self.x0 = np.zeros(n) if x0 is None else np.asarray(x0, float)
        self.n_eq = 0 if eq is None else len(eq(self.x0))
        self.n_ineq = 0 if ineq is None else len(ineq(self.x0))

    def initial_point(self):
        return self.x0.copy()

    def objective(self, z):
        return float(self._f(z))

    def gradient(self, z):
        return np.asarray(self._g(z), float)

    def eq_constraints(self, z):
        return np.zeros(0) if self._eq is None else np.asarray(self._eq(z), float)

    def ineq_constraints(self, z):
        return np.zeros(0) if self._in is None else np.asarray(self._in(z), float)

    def eq_jacobian(self, z):
        if self._eq is None:
            return sp.csr_matrix((0, self.n))
        return sp.csr_matrix(np.atleast_2d(self._eqj(z)))

    def ineq_jacobian(self, z):
        if self._in is None:
            return sp.csr_matrix((0, self.n))
        return sp.csr_matrix(np.atleast_2d(self._inj(z)))

    def _fd_hess(self, grad, z):
        H = np.empty((self.n, self.n))
        for j in range(self.n):
            h = 1e-5 * max(1.0, abs(z[j]))
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            H[j] = (grad(zp) - grad(zm)) / (2 * h)
        return 0.5 * (H + H.T)

    def hessian(self, z, lam_eq, lam_ineq, obj_factor=1.0):
        H = obj_factor * (self._h(z) if self._h is not None else self._fd_hess(self.gradient, z))
        for jac, hess, lam in ((self._eqj, self._eqh, lam_eq), (self._inj, self._inh, lam_ineq)):
            if jac is None or len(lam) == 0:
                continue
            if hess is not None:
                H = H + hess(z, lam)
            else:
                H = H + self._fd_hess(lambda x: np.atleast_2d(jac(x)).T @ lam, z)
        return sp.csr_matrix(np.atleast_2d(H))


class _RestorationNlp:
    """``min 1/2 |eq|^2 + 1/2 |max(0, ineq)|^2 + rho/2 |W (z - z_ref)|^2`` over the bounds."""

    def __init__(self, nlp, z_ref, rho=1e-6):
        self.nlp = nlp
        self.n = nlp.n
        self.lb, self.ub = nlp.lb, nlp.ub
        self.n_eq = 0
        self.n_ineq = 0
        self.z_ref = z_ref.copy()
        self.rho = rho
        self.w2 = 1.0 / np.maximum(1.0, np.abs(z_ref)) ** 2

    def initial_point(self):
        return self.z_ref.copy()

    def _parts(self, z):
        ce = self.nlp.eq_constraints(z)
        ci = np.maximum(0.0, self.nlp.ineq_constraints(z))
        return ce, ci

    def infeasibility(self, z):
        ce, ci = self._parts(z)
        return float(np.sum(np.abs(ce)) + np.sum(ci))

    def objective(self, z):
        ce, ci = self._parts(z)
        d = z - self.z_ref
        return 0.5 * (ce @ ce + ci @ ci) + 0.5 * self.rho * np.sum(self.w2 * d * d)

    def gradient(self, z):
        ce, ci = self._parts(z)
        return (self.nlp.eq_jacobian(z).T @ ce + self.nlp.ineq_jacobian(z).T @ ci
                + self.rho * self.w2 * (z - self.z_ref))

    def eq_constraints(self, z):
        return np.zeros(0)

    ineq_constraints = eq_constraints

    def eq_jacobian(self, z):
        return sp.csr_matrix((0, self.n))

    ineq_jacobian = eq_jacobian

    def hessian(self, z, lam_eq, lam_ineq, obj_factor=1.0):
        Je = self.nlp.eq_jacobian(z)
        Ji = self.nlp.ineq_jacobian(z)
        act = (self.nlp.ineq_constraints(z) > 0).astype(float)
        H = Je.T @ Je + Ji.T @ sp.diags(act) @ Ji + sp.diags(self.rho * self.w2)
        return sp.csr_matrix(obj_factor * H)


# ---------------------------------------------------------------------------
# initialization

def _bound_masks(nlp):
    return _masks(nlp.lb, nlp.ub)


def _masks(lb, ub):
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 1e-14 * np.maximum(1.0, np.abs(lb)))
    hasL = np.isfinite(lb) & ~fixed
    hasU = np.isfinite(ub) & ~fixed
    return lb, ub, hasL, hasU, fixed


def push_into_bounds(z, lb, ub, push, frac):
    """Move ``z`` at least ``push * max(1, |bound|)`` inside each finite bound."""
    z = np.clip(np.asarray(z, dtype=float), lb, ub)
    lb, ub, hasL, hasU, fixed = _masks(lb, ub)
    lbf = np.where(hasL, lb, 0.0)
    ubf = np.where(hasU, ub, 0.0)
    width = np.where(hasL & hasU, ubf - lbf, np.inf)
    pL = np.minimum(push * np.maximum(1.0, np.abs(lbf)), frac * width)
    pU = np.minimum(push * np.maximum(1.0, np.abs(ubf)), frac * width)
    z = np.where(hasL, np.maximum(z, lbf + pL), z)
    z = np.where(hasU, np.minimum(z, ubf - pU), z)
    z = np.where(fixed, lb, z)
    return z


def least_squares_multipliers(nlp, z, zl=None, zu=None, fixed_ineq=None, damping=1e-8):
    """Damped least-squares fit of the stationarity condition.

    Minimizes ``|grad f - z_L + z_U + J_eq^T lam_eq + J_ineq^T lam_ineq|^2 +
    damping |lam|^2`` over the equality multipliers and the inequality
    multipliers not given in ``fixed_ineq`` (NaN marks a free entry).
    """
    g = np.asarray(nlp.gradient(z), float).copy()
    if zl is not None:
        g -= zl
    if zu is not None:
        g += zu
    Je = nlp.eq_jacobian(z)
    Ji = nlp.ineq_jacobian(z)
    n_in = Ji.shape[0]
    free = np.ones(n_in, dtype=bool)
    lam_in = np.zeros(n_in)
    if fixed_ineq is not None and n_in:
        fixed_ineq = np.asarray(fixed_ineq, float)
        free = np.isnan(fixed_ineq)
        lam_in[~free] = fixed_ineq[~free]
        g += Ji[~free].T @ lam_in[~free]
    lb, ub, hasL, hasU, fixed = _bound_masks(nlp)
    keep = ~fixed
    A = sp.vstack([Je, Ji[free]]).tocsr()[:, keep]
    m = A.shape[0]
    if m == 0:
        return np.zeros(Je.shape[0]), lam_in
    K = sp.bmat([[sp.identity(int(keep.sum())), A.T], [A, -damping * sp.identity(m)]], format="csc")
    rhs = np.concatenate([-g[keep], np.zeros(m)])
    try:
        sol = LDLFactor(K).solve(rhs)
    except SingularKKT:
        return np.zeros(Je.shape[0]), lam_in
    # the second block solves (A A^T + damping I) lam = -A g
    lam = sol[int(keep.sum()):]
    lam_eq = lam[:Je.shape[0]]
    lam_in[free] = lam[Je.shape[0]:]
    return lam_eq, lam_in


def initialize(nlp, warm: Optional[WarmStart] = None, opts: Optional[SolverOptions] = None) -> InteriorPoint:
    """Strictly interior starting point for :func:`solve`."""
    opts = opts or SolverOptions()
    lb, ub, hasL, hasU, fixed = _bound_masks(nlp)
    z0 = nlp.initial_point() if warm is None else np.asarray(warm.primal, float)
    z = push_into_bounds(z0, lb, ub, opts.slack_min, opts.bound_frac)
    ci = np.asarray(nlp.ineq_constraints(z), float)
    s = -ci if warm is None or warm.slacks is None else np.asarray(warm.slacks, float).copy()
    s = np.maximum(s, opts.slack_min * np.maximum(1.0, np.abs(ci)))
    mu = opts.mu_init
    if warm is not None and warm.mu is not None:
        mu = warm.mu
    dl = np.where(hasL, z - lb, 1.0)
    du = np.where(hasU, ub - z, 1.0)
    if warm is not None and warm.bound_lower is not None:
        zl = np.where(hasL, np.maximum(warm.bound_lower, opts.mult_min), 0.0)
    else:
        zl = np.where(hasL, mu / dl, 0.0)
    if warm is not None and warm.bound_upper is not None:
        zu = np.where(hasU, np.maximum(warm.bound_upper, opts.mult_min), 0.0)
    else:
        zu = np.where(hasU, mu / du, 0.0)
    given_in = None if warm is None else warm.ineq_multipliers
    given_eq = None if warm is None else warm.eq_multipliers
    need_ls = given_eq is None or given_in is None or np.any(np.isnan(given_in))
    if need_ls:
        lam_eq, lam_in = least_squares_multipliers(nlp, z, zl, zu, given_in, opts.ls_damping)
        if np.max(np.abs(np.concatenate([lam_eq, lam_in, [0.0]]))) > opts.mult_init_max:
            lam_eq = np.zeros_like(lam_eq)
            if given_in is None:
                lam_in = np.zeros_like(lam_in)
            else:
                lam_in = np.where(np.isnan(given_in), 0.0, given_in)
        if given_eq is not None:
            lam_eq = np.asarray(given_eq, float).copy()
    else:
        lam_eq = np.asarray(given_eq, float).copy()
        lam_in = np.asarray(given_in, float).copy()
    lam_in = np.maximum(lam_in, opts.mult_min)
    # rows without a guess start no closer to zero than the central path
    fresh = np.ones(lam_in.size, bool) if given_in is None else np.isnan(given_in)
    lam_in[fresh] = np.maximum(lam_in[fresh], mu / s[fresh])
    return InteriorPoint(z, s, lam_eq, lam_in, zl, zu, mu)


# ---------------------------------------------------------------------------
# main loop

class _Eval:
    def __init__(self, nlp, z):
        self.z = z
        self.f = nlp.objective(z)
        self.ce = np.asarray(nlp.eq_constraints(z), float)
        self.ci = np.asarray(nlp.ineq_constraints(z), float)


def _merit(ev: _Eval, s, dl, du, hasL, hasU, mu, nu):
    with np.errstate(divide="ignore", invalid="ignore"):
        barrier = -mu * (np.sum(np.log(s)) + np.sum(np.log(dl[hasL])) + np.sum(np.log(du[hasU])))
    theta = np.sum(np.abs(ev.ce)) + np.sum(np.abs(ev.ci + s))
    return ev.f + barrier + nu * theta, theta


def _ftb(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def solve(nlp, warm: Optional[WarmStart] = None, opts: Optional[SolverOptions] = None,
          _restoration: bool = False) -> NlpSolution:
    """Solve ``nlp`` from ``warm`` (or the NLP's own initial point)."""
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    lb, ub, hasL, hasU, fixed = _bound_masks(nlp)
    n, n_eq, n_in = nlp.n, nlp.n_eq, nlp.n_ineq
    pt = initialize(nlp, warm, opts)
    z, s, le, li, zl, zu, mu = pt.z, pt.s, pt.lam_eq, pt.lam_ineq, pt.zl, pt.zu, pt.mu
    mu = max(mu, opts.mu_min)
    nu = max(1.0, float(np.max(np.abs(np.concatenate([le, li, [0.0]])))))
    reg_last = 0.0
    force_reg = 0.0
    ls_fail = 0
    restorations = 0
    mu_hist: list[float] = []
    lines: list[str] = []
    best = None
    status = Status.MAX_ITER
    it = 0
    alpha_p = alpha_d = 0.0
    reg = 0.0
    ev = _Eval(nlp, z)

    def emit(line):
        lines.append(line)
        if opts.log_callback is not None:
            opts.log_callback(line)
        log.debug(line)

    def restore() -> bool:
        """Run feasibility restoration; False means the solve must stop with ``status``."""
        nonlocal z, s, le, li, zl, zu, ev, ls_fail, force_reg, restorations, status, stall_ref, stall_count
        res = _restore(nlp, z, opts, _restoration)
        restorations += 1
        if res is None or isinstance(res, Status):
            status = Status.RESTORATION_FAILED if res is None else res
            return False
        z, s, le, li, zl, zu = _reset_after_restoration(nlp, res, mu, opts)
        ev = _Eval(nlp, z)
        ls_fail = 0
        force_reg = 0.0
        stall_ref, stall_count = np.inf, 0
        return True

    stall_ref, stall_count = np.inf, 0
    emit(LOG_HEADER)
    while True:
        dl = np.where(hasL, z - lb, 1.0)
        du = np.where(hasU, ub - z, 1.0)
        if np.any(s <= 0) or np.any(dl[hasL] <= 0) or np.any(du[hasU] <= 0):
            raise AssertionError("iterate left the strict interior")
        g = np.asarray(nlp.gradient(z), float)
        Je = nlp.eq_jacobian(z)
        Ji = nlp.ineq_jacobian(z)
        rd = g + Je.T @ le + Ji.T @ li - zl + zu
        rd[fixed] = 0.0
        n_mult = n_eq + n_in + int(hasL.sum()) + int(hasU.sum())
        s_d = max(opts.s_max, (np.sum(np.abs(le)) + np.sum(np.abs(li)) + np.sum(zl) + np.sum(zu))
                  / max(1, n_mult)) / opts.s_max
        stat = float(np.max(np.abs(rd), initial=0.0)) / s_d
        prim = float(max(np.max(np.abs(ev.ce), initial=0.0), np.max(np.abs(ev.ci + s), initial=0.0)))
        comp = np.concatenate([s * li, (dl * zl)[hasL], (du * zu)[hasU]])
        comp0 = float(np.max(comp, initial=0.0))
        dual_inf = float(max(0.0, -min(np.min(li, initial=0.0), np.min(zl, initial=0.0), np.min(zu, initial=0.0))))
        err0 = max(stat, prim, comp0)
        emit(f"{it}\t{ev.f:.10e}\t{prim:.3e}\t{stat:.3e}\t{comp0:.3e}\t{mu:.3e}\t{alpha_p:.3e}\t{alpha_d:.3e}\t{reg:.1e}")
        if best is None or err0 < best[0]:
            best = (err0, z.copy(), s.copy(), le.copy(), li.copy(), zl.copy(), zu.copy(), ev.f,
                    KktResiduals(stat, prim, dual_inf, comp0))
        if stat <= opts.tol_kkt and prim <= opts.tol_primal and comp0 <= opts.tol_kkt:
            status = Status.OPTIMAL
            best = (err0, z.copy(), s.copy(), le.copy(), li.copy(), zl.copy(), zu.copy(), ev.f,
                    KktResiduals(stat, prim, dual_inf, comp0))
            break
        if it >= opts.max_iter:
            status = Status.MAX_ITER
            break
        # restoration also starts when primal infeasibility stops improving
        if prim <= 0.99 * stall_ref or prim <= opts.stall_floor:
            stall_ref, stall_count = prim, 0
        else:
            stall_count += 1
        if stall_count >= opts.stall_window:
            if not restore():
                break
            it += 1
            continue
        # barrier update (monotone Fiacco-McCormick)
        while mu > opts.mu_min:
            comp_mu = float(np.max(np.abs(comp - mu), initial=0.0))
            if max(stat, prim, comp_mu) > opts.kappa_eps * mu:
                break
            mu = max(opts.mu_min, min(opts.kappa_mu * mu, mu ** opts.theta_mu))
        mu_hist.append(mu)
        tau = max(opts.tau_min, 1.0 - mu)

        # Newton system
        W = nlp.hessian(z, le, li, 1.0)
        sig_x = np.where(hasL, zl / dl, 0.0) + np.where(hasU, zu / du, 0.0)
        inv_dl = np.where(hasL, 1.0 / dl, 0.0)
        inv_du = np.where(hasU, 1.0 / du, 0.0)
        rx = -(g + Je.T @ le + Ji.T @ li - mu * inv_dl + mu * inv_du)
        rx[fixed] = 0.0
        re = -ev.ce
        ri = -(ev.ci + mu / li)
        rhs = np.concatenate([rx, re, ri])
        try:
            step, reg = _solve_kkt(W, sig_x, Je, Ji, s / li, fixed, rhs, reg_last, force_reg, mu, opts)
        except SingularKKT:
            step = None
        if step is None:
            ls_fail += 1
            force_reg = max(1e-4, force_reg * 100)
            if ls_fail >= opts.restoration_trigger and not restore():
                break
            it += 1
            continue
        reg_last = reg if reg > 0 else reg_last / 3.0
        dz = step[:n]
        dle = step[n:n + n_eq]
        dli = step[n + n_eq:]
        dz[fixed] = 0.0
        ds = -(ev.ci + s) - Ji @ dz
        dzl = np.where(hasL, mu * inv_dl - zl - zl * inv_dl * dz, 0.0)
        dzu = np.where(hasU, mu * inv_du - zu + zu * inv_du * dz, 0.0)

        ap_max = min(_ftb(s, ds, tau), _ftb(dl[hasL], dz[hasL], tau), _ftb(du[hasU], -dz[hasU], tau))
        ad_max = min(_ftb(li, dli, tau), _ftb(zl[hasL], dzl[hasL], tau), _ftb(zu[hasU], dzu[hasU], tau))

        # merit function and penalty update
        phi0, theta0 = _merit(ev, s, dl, du, hasL, hasU, mu, nu)
        gb = g - mu * inv_dl + mu * inv_du
        gb[fixed] = 0.0
        dphi_smooth = float(gb @ dz - np.sum(mu / s * ds))
        lam_new = np.concatenate([le + dle, li + dli, [0.0]])
        nu_req = float(np.max(np.abs(lam_new)))
        if theta0 > 0:
            curv = float(dz @ (W @ dz) + dz @ (sig_x * dz) + np.sum(li / s * ds * ds))
            nu_req = max(nu_req, (dphi_smooth + 0.5 * max(curv, 0.0)) / (0.9 * theta0))
        if nu < nu_req:
            nu = 1.2 * nu_req + 1e-8
            phi0, theta0 = _merit(ev, s, dl, du, hasL, hasU, mu, nu)
        dphi = dphi_smooth - nu * theta0

        alpha = ap_max
        accepted = False
        small_step = float(np.max(np.abs(dz) / np.maximum(1.0, np.abs(z)), initial=0.0)) < 1e-14
        if small_step:
            accepted = True
            ev_t = ev
        else:
            while alpha >= opts.alpha_min:
                zt = z + alpha * dz
                try:
                    ev_t = _Eval(nlp, zt)
                    # slack reset: absorb over-satisfied rows
                    st = np.maximum(s + alpha * ds, -ev_t.ci)
                    dlt = np.where(hasL, zt - lb, 1.0)
                    dut = np.where(hasU, ub - zt, 1.0)
                    phit, _ = _merit(ev_t, st, dlt, dut, hasL, hasU, mu, nu)
                except (ValueError, FloatingPointError):
                    phit = np.inf
                if np.isfinite(phit) and phit <= phi0 + opts.armijo * alpha * min(dphi, 0.0) + 1e-14 * abs(phi0):
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            ls_fail += 1
            force_reg = max(1e-4, force_reg * 100)
            alpha_p = alpha_d = 0.0
            if ls_fail >= opts.restoration_trigger and not restore():
                break
            it += 1
            continue
        ls_fail = 0
        force_reg = 0.0
        alpha_p, alpha_d = alpha, ad_max
        if not small_step:
            z = z + alpha * dz
            s = st
        le = le + alpha * dle
        li = li + ad_max * dli
        zl = zl + ad_max * dzl
        zu = zu + ad_max * dzu
        ev = ev_t
        # keep multipliers within a bounded distance of the central path
        dl = np.where(hasL, z - lb, 1.0)
        du = np.where(hasU, ub - z, 1.0)
        ks = opts.kappa_sigma
        li = np.clip(li, mu / (ks * s), ks * mu / s)
        zl = np.where(hasL, np.clip(zl, mu / (ks * dl), ks * mu / dl), 0.0)
        zu = np.where(hasU, np.clip(zu, mu / (ks * du), ks * mu / du), 0.0)
        it += 1

    _, z, s, le, li, zl, zu, fval, kkt = best
    return NlpSolution(z_star=z, eq_multipliers=le, ineq_multipliers=li, bound_lower=zl, bound_upper=zu,
                       slacks=s, objective_value=float(fval), status=status, kkt_residuals=kkt,
                       iteration_count=it, wall_time=time.perf_counter() - t_start, mu_history=mu_hist,
                       log_lines=lines, restorations=restorations)


def _solve_kkt(W, sig_x, Je, Ji, sig_s_inv, fixed, rhs, reg_last, force_reg, mu, opts):
    """Newton step from the augmented system with inertia correction.

    The factorized matrix carries a small static regularization ``-delta_c I``
    on the equality block, which makes it quasi-definite once the primal
    block is positive definite; refinement against the exact system
    removes the perturbation from the step.
    """
    n = W.shape[0]
    n_eq, n_in = Je.shape[0], Ji.shape[0]
    keep = (~fixed).astype(float)
    Wk = sp.diags(keep) @ W @ sp.diags(keep)
    Jek = Je @ sp.diags(keep)
    Jik = Ji @ sp.diags(keep)
    base_diag = sig_x * keep + fixed.astype(float)
    expected = (n, n_eq + n_in, 0)
    delta_c = opts.static_reg
    reg = force_reg
    I_eq = sp.identity(n_eq, format="csc")
    tries = 0
    while True:
        tries += 1
        H = Wk + sp.diags(base_diag + reg * keep)
        blocks = [[H, Jek.T, Jik.T],
                  [Jek, None, None],
                  [Jik, None, sp.diags(-sig_s_inv) if n_in else None]]
        K = sp.bmat(blocks, format="csc")
        Kf = K - sp.block_diag([sp.csc_matrix((n, n)), delta_c * I_eq, sp.csc_matrix((n_in, n_in))], format="csc")
        step = None
        try:
            fac = LDLFactor(Kf)
            if fac.inertia is None and delta_c < 1e3 * opts.static_reg:
                # a non-symmetric pivot sequence hides the inertia; perturb and refactor
                delta_c *= 10.0
                continue
            if fac.inertia is None or fac.inertia == expected:
                x, res = fac.refined_solve(K, rhs)
                if res <= opts.kkt_residual_tol:
                    step = x
        except SingularKKT:
            pass
        if step is not None:
            return step, reg
        if reg == 0.0:
            reg = opts.reg_init if reg_last == 0.0 else max(opts.reg_init, reg_last / 3.0)
        else:
            reg *= opts.reg_factor
        if reg > opts.reg_max or tries > 60:
            raise SingularKKT("inertia correction failed")


def _restore(nlp, z, opts, nested):
    if nested or not opts.allow_restoration:
        return None
    rnlp = _RestorationNlp(nlp, z)
    theta0 = rnlp.infeasibility(z)
    ropts = replace(opts, allow_restoration=False, max_iter=200, mu_init=1e-2, log_callback=None)
    sol = solve(rnlp, WarmStart(z), ropts, _restoration=True)
    theta1 = rnlp.infeasibility(sol.z_star)
    if theta1 <= 0.9 * theta0 or theta1 <= opts.tol_primal:
        return sol.z_star
    if sol.status is Status.OPTIMAL and theta1 > opts.tol_primal:
        return Status.INFEASIBLE
    return None


def _reset_after_restoration(nlp, z, mu, opts):
    pt = initialize(nlp, WarmStart(z, mu=mu), replace(opts, slack_min=min(opts.slack_min, 1e-4)))
    return pt.z, pt.s, pt.lam_eq, pt.lam_ineq, pt.zl, pt.zu
