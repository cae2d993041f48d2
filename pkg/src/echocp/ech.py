"""External constraint handling across mesh-refinement iterations.

The first iteration solves the full problem.  Afterwards every iteration
analyses the current solution, refines the mesh, drops constraint sets
that look redundant, restricts the remaining rows to buffered activation
intervals and re-solves from the interpolated solution.  When removed
constraints come back, or under the strict policy whenever the warm start
violates an implemented row, an auxiliary feasibility problem (AFP) first
moves the warm start onto the feasible set.
"""

from __future__ import annotations

import hashlib
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .activity import ActivityConfig, ActivityReport, SetStatus, buffer_intervals, classify
from .interp import (DiscreteSolution, ErrorReport, RefineOptions, error_analysis, interpolate,
                     refine_mesh, resample)
from .ipm import NlpSolution, SolverOptions, Status, WarmStart, solve
from .mesh import Mesh
from .problem import OcpProblem
from .transcription import ALL, NONE, ActivationFilter, DiscretizedNlp, transcribe

log = logging.getLogger(__name__)

PRACTICAL = "practical"
STRICT = "strict"
FIXED = "fixed"
ADAPTIVE = "adaptive"
ADAPTIVE_BETA_FLOOR = 0.01


class EchAbort(RuntimeError):
    """A solve the loop cannot recover from; carries the state so far."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class AfpInfeasible(EchAbort):
    """The feasibility problem ended with positive total slack."""


class Reactivation(str, Enum):
    NO_CHANGE = "NoChange"
    WITHIN_BUFFER = "WithinBuffer"
    AFP_REQUIRED = "AfpRequired"


@dataclass
class ReactivationResult:
    kind: Reactivation
    reasons: list = field(default_factory=list)


@dataclass(frozen=True)
class EchConfig:
    zeta: float = 0.1
    beta: Optional[float] = None
    beta_mode: str = FIXED
    eps_c_tol: float = 1e-4
    eta_tol: float = 1e-5
    max_mr_iterations: int = 8
    afp_policy: str = PRACTICAL
    samples_per_interval: int = 10
    penalty: Optional[float] = None
    feas_tol: float = 1e-6
    handling: bool = True
    warm_duals: bool = True
    solver: SolverOptions = SolverOptions()
    warm_solver: SolverOptions = SolverOptions(slack_min=1e-6, bound_frac=1e-6)
    refine: RefineOptions = RefineOptions()

    def __post_init__(self):
        if min(self.zeta, self.eps_c_tol, self.eta_tol, self.feas_tol) <= 0:
            raise ValueError("tolerances and zeta must be positive")
        if self.max_mr_iterations < 1:
            raise ValueError("max_mr_iterations must be at least 1")
        if self.afp_policy not in (PRACTICAL, STRICT):
            raise ValueError(f"afp_policy must be {PRACTICAL!r} or {STRICT!r}")
        if self.beta_mode not in (FIXED, ADAPTIVE):
            raise ValueError(f"beta_mode must be {FIXED!r} or {ADAPTIVE!r}")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def activity(self) -> ActivityConfig:
        return ActivityConfig(zeta=self.zeta, eps_c_tol=self.eps_c_tol, penalty=self.penalty,
                              samples_per_interval=self.samples_per_interval)

    def initial_beta(self, horizon) -> float:
        return 0.1 * (horizon[1] - horizon[0]) if self.beta is None else float(self.beta)


@dataclass
class IterationRecord:
    iteration: int
    K: int
    N: int
    filter: dict
    n_ineq: int
    row_digest: str
    nlp_status: str
    nlp_iterations: int
    nlp_time: float
    objective: float
    afp: bool = False
    afp_reasons: list = field(default_factory=list)
    afp_objective: Optional[float] = None
    afp_iterations: int = 0
    afp_time: float = 0.0
    reactivation: str = Reactivation.NO_CHANGE.value
    beta: float = 0.0
    warm_violation: Optional[float] = None
    afp_warm_violation: Optional[float] = None
    max_eta: Optional[float] = None
    max_eps_c: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(**d)


@dataclass
class EchState:
    iteration: int = 0
    mesh: Optional[Mesh] = None
    filter: Optional[ActivationFilter] = None
    previous_filter: Optional[ActivationFilter] = None
    solution: Optional[DiscreteSolution] = None
    error_report: Optional[ErrorReport] = None
    activity: Optional[ActivityReport] = None
    afp_invocations: int = 0
    beta: float = 0.0
    history: list = field(default_factory=list)
    converged: bool = False
    total_time: float = 0.0
    last_nlp: Optional[DiscretizedNlp] = None
    last_warm: Optional[WarmStart] = None
    last_options: Optional[SolverOptions] = None


@dataclass
class EchResult:
    solution: DiscreteSolution
    state: EchState


# ---------------------------------------------------------------------------
# auxiliary feasibility problem

@dataclass(eq=False)
class AfpProblem:
    """``min sum(sigma)`` s.t. the OCP's defects and boundary rows, ``c_l - sigma_l <= 0``, ``sigma >= 0``.

    One slack per path-constraint function, shared by all of its rows.  A
    small proximal term ``proximal/2 * |z - z_warm|^2`` keeps the solver
    near the warm start instead of drifting to the centre of the feasible
    set; it is not part of the reported total slack.
    """

    nlp: DiscretizedNlp
    z_warm: np.ndarray
    s_hat: np.ndarray
    s_bar: np.ndarray
    proximal: float = 1e-4

    def __post_init__(self):
        self.ng = self.nlp.prob.n_path
        self.n = self.nlp.n + self.ng
        self.n_eq = self.nlp.n_eq
        self.n_ineq = self.nlp.n_ineq
        self.lb = np.concatenate([self.nlp.lb, np.zeros(self.ng)])
        self.ub = np.concatenate([self.nlp.ub, np.full(self.ng, np.inf)])
        rows = np.arange(self.n_ineq)
        self._E = sp.csr_matrix((np.ones(self.n_ineq), (rows, self.nlp.row_constraint)),
                                shape=(self.n_ineq, self.ng))

    def initial_point(self) -> np.ndarray:
        return np.concatenate([self.z_warm, self.s_bar])

    def split(self, w):
        return w[:self.nlp.n], w[self.nlp.n:]

    def objective(self, w):
        d = w[:self.nlp.n] - self.z_warm
        return float(np.sum(w[self.nlp.n:]) + 0.5 * self.proximal * d @ d)

    def gradient(self, w):
        return np.concatenate([self.proximal * (w[:self.nlp.n] - self.z_warm), np.ones(self.ng)])

    def eq_constraints(self, w):
        return self.nlp.eq_constraints(w[:self.nlp.n])

    def eq_jacobian(self, w):
        return sp.hstack([self.nlp.eq_jacobian(w[:self.nlp.n]), sp.csr_matrix((self.n_eq, self.ng))]).tocsr()

    def ineq_constraints(self, w):
        z, sig = self.split(w)
        return self.nlp.ineq_constraints(z) - sig[self.nlp.row_constraint]

    def ineq_jacobian(self, w):
        return sp.hstack([self.nlp.ineq_jacobian(w[:self.nlp.n]), -self._E]).tocsr()

    def hessian(self, w, lam_eq, lam_ineq, obj_factor=1.0):
        H = self.nlp.hessian(w[:self.nlp.n], lam_eq, lam_ineq, 0.0)
        H = H + obj_factor * self.proximal * sp.eye(self.nlp.n, format="csr")
        return sp.block_diag([H, sp.csr_matrix((self.ng, self.ng))], format="csr")

    def relaxed_rows_strict(self) -> bool:
        """Every relaxed row is strictly satisfied at the initial point."""
        return bool(np.all(self.ineq_constraints(self.initial_point()) < 0.0))


def build_afp(prob: OcpProblem, mesh: Mesh, filter: ActivationFilter, z_warm,
              padding: float = 1e-2, proximal: float = 1e-4) -> AfpProblem:
    """AFP on ``mesh`` for the rows admitted by ``filter``, started from ``z_warm``.

    Each row's needed slack is ``|min(-c, 0)|`` at the warm start; every
    function's slack starts at its largest row value plus ``padding``.
    """
    nlp = transcribe(prob, mesh, filter)
    z_warm = np.clip(np.asarray(z_warm, dtype=float), nlp.lb, nlp.ub)
    c = nlp.ineq_constraints(z_warm)
    s_hat = np.abs(np.minimum(-c, 0.0))
    s_bar = np.zeros(prob.n_path)
    if c.size:
        np.maximum.at(s_bar, nlp.row_constraint, s_hat)
    s_bar = s_bar + padding
    afp = AfpProblem(nlp, z_warm, s_hat, s_bar, proximal)
    if not afp.relaxed_rows_strict():
        raise AssertionError("AFP initial point is not strictly feasible for the relaxed rows")
    return afp


@dataclass
class AfpResult:
    z: np.ndarray
    slacks: np.ndarray
    objective: float
    feasible: bool
    solution: NlpSolution
    max_violation: float


def solve_afp(afp: AfpProblem, opts: Optional[SolverOptions] = None, feas_tol: float = 1e-6) -> AfpResult:
    """Solve the AFP from its strictly feasible initial point."""
    opts = opts or SolverOptions()
    sol = solve(afp, WarmStart(afp.initial_point()), opts)
    z, sig = afp.split(sol.z_star)
    J = float(np.sum(sig))
    viol = float(np.max(afp.nlp.ineq_constraints(z), initial=0.0))
    feasible = sol.status is Status.OPTIMAL and J <= feas_tol
    return AfpResult(z, sig, J, feasible, sol, max(viol, 0.0))


# ---------------------------------------------------------------------------
# reactivation

def detect_reactivation(prev: ActivationFilter, new_report: ActivityReport, beta: float) -> ReactivationResult:
    """Decide whether the changes in activity need an AFP restart.

    A restart is needed when a set with no implemented rows becomes
    potentially enforced, or when a new activation interval leaves the
    previous (buffered) intervals of its row.
    """
    reasons = []
    for sid, rows in new_report.set_rows.items():
        if new_report.set_status[sid] is not SetStatus.ENFORCED:
            continue
        if all(prev[l] == NONE for l in rows):
            reasons.append(f"set {new_report.set_labels[sid]} reactivated")
            continue
        for l in rows:
            old = prev.intervals(l)
            for a, b in new_report.intervals[l]:
                if not any(lo - 1e-12 <= a and b <= hi + 1e-12 for lo, hi in old):
                    reasons.append(f"row {l} interval [{a:g}, {b:g}] leaves the buffered intervals")
    if reasons:
        return ReactivationResult(Reactivation.AFP_REQUIRED, reasons)
    new_filter = buffer_intervals(new_report, beta, prev.horizon)
    if new_filter.entries == prev.entries:
        return ReactivationResult(Reactivation.NO_CHANGE)
    return ReactivationResult(Reactivation.WITHIN_BUFFER)


# ---------------------------------------------------------------------------
# warm starts

def inject_multipliers(prev: DiscreteSolution, nlp: DiscretizedNlp) -> np.ndarray:
    """Multiplier guesses for the rows of ``nlp`` from a previous solution.

    Multipliers are divided by the node quadrature weights to get a density
    in time, interpolated linearly between the previous implemented nodes
    of the same constraint and scaled by the new weights.  Rows outside the
    span of previously implemented nodes get NaN (fresh initialization).
    """
    out = np.full(nlp.n_ineq, np.nan)
    if nlp.n_ineq == 0 or prev.multipliers.size == 0:
        return out
    w_old = prev.mesh.simpson_weights()
    w_new = nlp.mesh.simpson_weights()
    t_old = prev.times
    t_new = nlp.node_times()
    for l in np.unique(nlp.row_constraint):
        sel_old = np.flatnonzero(prev.row_constraint == l)
        if sel_old.size == 0:
            continue
        nodes = prev.row_node[sel_old]
        order = np.argsort(nodes)
        nodes = nodes[order]
        dens = prev.multipliers[sel_old[order]] / w_old[nodes]
        tt = t_old[nodes]
        sel_new = np.flatnonzero(nlp.row_constraint == l)
        tn = t_new[nlp.row_node[sel_new]]
        # only inside runs of consecutive previous nodes
        run_id = np.concatenate([[0], np.cumsum(np.diff(nodes) > 1)])
        for r in np.unique(run_id):
            m = run_id == r
            lo, hi = tt[m][0], tt[m][-1]
            inside = (tn >= lo) & (tn <= hi)
            if np.any(inside):
                vals = np.interp(tn[inside], tt[m], dens[m])
                out[sel_new[inside]] = vals * w_new[nlp.row_node[sel_new[inside]]]
    return out


def row_digest(nlp: DiscretizedNlp) -> str:
    h = hashlib.sha1()
    h.update(nlp.row_constraint.astype(np.int64).tobytes())
    h.update(nlp.row_node.astype(np.int64).tobytes())
    return h.hexdigest()


def _filter_summary(prob: OcpProblem, filt: ActivationFilter) -> dict:
    out = {}
    for cset in prob.constraint_sets:
        ivs = []
        entries = [filt[l] for l in cset.row_indices]
        if all(e == ALL for e in entries):
            out[cset.label] = ALL
            continue
        for l in cset.row_indices:
            ivs.extend(filt.intervals(l))
        out[cset.label] = NONE if not ivs else [list(iv) for iv in ActivationFilter({0: ivs}, filt.horizon).intervals(0)]
    return out


# ---------------------------------------------------------------------------
# main loop

def _warm_mu(s, lam, opts: SolverOptions) -> float:
    if lam.size == 0:
        return opts.mu_init
    return float(np.clip(np.mean(s * lam), opts.mu_min, opts.mu_init))


def run(prob: OcpProblem, initial_mesh: Mesh, cfg: EchConfig = EchConfig()) -> EchResult:
    """Mesh refinement with external constraint handling; returns the final solution and state."""
    t_start = time.perf_counter()
    horizon = prob.horizon
    state = EchState(mesh=initial_mesh, beta=cfg.initial_beta(horizon))
    ng = prob.n_path
    filt = ActivationFilter.all(ng, horizon)
    handling = cfg.handling and ng > 0
    act_cfg = cfg.activity()

    nlp = transcribe(prob, initial_mesh, filt)
    t0 = time.perf_counter()
    nsol = solve(nlp, None, cfg.solver)
    nlp_time = time.perf_counter() - t0
    state.iteration = 1
    state.filter = filt
    state.last_nlp, state.last_warm, state.last_options = nlp, None, cfg.solver
    state.history.append(IterationRecord(
        1, initial_mesh.K, initial_mesh.N, _filter_summary(prob, filt), nlp.n_ineq, row_digest(nlp),
        nsol.status.value, nsol.iteration_count, nlp_time, nsol.objective_value, beta=state.beta))
    if not nsol.ok:
        state.total_time = time.perf_counter() - t_start
        raise EchAbort(f"initial solve failed with status {nsol.status.value}", state)

    mesh = initial_mesh
    while True:
        dsol = DiscreteSolution.from_nlp(nlp, nsol)
        interp = interpolate(dsol)
        report = error_analysis(prob, dsol, interp, cfg.samples_per_interval, cfg.eta_tol, cfg.eps_c_tol)
        state.solution, state.error_report = dsol, report
        rec = state.history[-1]
        rec.max_eta, rec.max_eps_c = report.max_eta, report.max_eps_c
        if report.passed:
            state.converged = True
            break
        if state.iteration >= cfg.max_mr_iterations:
            break
        new_mesh = refine_mesh(mesh, report, cfg.refine)
        react = ReactivationResult(Reactivation.NO_CHANGE)
        if handling:
            act = classify(prob, dsol, interp, act_cfg)
            state.activity = act
            react = detect_reactivation(filt, act, state.beta)
            if react.kind is Reactivation.AFP_REQUIRED and cfg.beta_mode == ADAPTIVE:
                # doubling zero would never widen the buffer
                state.beta = max(2.0 * state.beta, ADAPTIVE_BETA_FLOOR * (horizon[1] - horizon[0]))
            new_filt = buffer_intervals(act, state.beta, horizon)
        else:
            new_filt = filt
        if new_mesh == mesh and new_filt.entries == filt.entries:
            break
        X, U = resample(interp, new_mesh, prob)
        new_nlp = transcribe(prob, new_mesh, new_filt)
        z_warm = new_nlp.layout.pack(X, U, dsol.p, dsol.t0, dsol.tf)
        z_warm = np.clip(z_warm, new_nlp.lb, new_nlp.ub)
        warm_viol = float(np.max(new_nlp.ineq_constraints(z_warm), initial=0.0))

        afp_reasons = []
        if handling and react.kind is Reactivation.AFP_REQUIRED:
            afp_reasons = list(react.reasons)
        if handling and cfg.afp_policy == STRICT and warm_viol > cfg.solver.tol_primal:
            afp_reasons.append(f"warm start violates implemented rows by {warm_viol:.3e}")
        rec = IterationRecord(state.iteration + 1, new_mesh.K, new_mesh.N, _filter_summary(prob, new_filt),
                              new_nlp.n_ineq, row_digest(new_nlp), "", 0, 0.0, float("nan"),
                              reactivation=react.kind.value, beta=state.beta)
        if afp_reasons:
            afp = build_afp(prob, new_mesh, new_filt, z_warm, cfg.solver.slack_min)
            rec.afp_warm_violation = float(np.max(afp.ineq_constraints(afp.initial_point()), initial=-np.inf))
            t0 = time.perf_counter()
            ares = solve_afp(afp, cfg.solver, cfg.feas_tol)
            rec.afp, rec.afp_reasons = True, afp_reasons
            rec.afp_objective, rec.afp_iterations = ares.objective, ares.solution.iteration_count
            rec.afp_time = time.perf_counter() - t0
            state.afp_invocations += 1
            if not ares.feasible:
                state.history.append(rec)
                state.total_time = time.perf_counter() - t_start
                raise AfpInfeasible(
                    f"auxiliary feasibility problem ended with total slack {ares.objective:.3e} "
                    f"(status {ares.solution.status.value}); the problem looks infeasible on this mesh", state)
            z_warm = ares.z
            warm_viol = float(np.max(new_nlp.ineq_constraints(z_warm), initial=0.0))
        rec.warm_violation = warm_viol

        warm, opts = _warm_start(cfg, dsol, new_nlp, z_warm)
        t0 = time.perf_counter()
        nsol = solve(new_nlp, warm, opts)
        rec.nlp_time = time.perf_counter() - t0
        rec.nlp_status, rec.nlp_iterations, rec.objective = (nsol.status.value, nsol.iteration_count,
                                                             nsol.objective_value)
        state.history.append(rec)
        state.iteration += 1
        state.previous_filter, state.filter, state.mesh = filt, new_filt, new_mesh
        state.last_nlp, state.last_warm, state.last_options = new_nlp, warm, opts
        filt, mesh, nlp = new_filt, new_mesh, new_nlp
        if not nsol.ok:
            state.total_time = time.perf_counter() - t_start
            raise EchAbort(f"solve at iteration {state.iteration} failed with status {nsol.status.value}", state)

    state.total_time = time.perf_counter() - t_start
    return EchResult(state.solution, state)


def _warm_start(cfg: EchConfig, prev: DiscreteSolution, nlp: DiscretizedNlp, z_warm):
    opts = cfg.warm_solver
    if not cfg.warm_duals:
        return WarmStart(z_warm), cfg.solver
    lam = inject_multipliers(prev, nlp)
    c = nlp.ineq_constraints(z_warm)
    s = np.maximum(-c, opts.slack_min * np.maximum(1.0, np.abs(c)))
    known = np.isfinite(lam)
    lam_f = np.maximum(np.where(known, lam, 0.0), opts.mult_min)
    mu = _warm_mu(s[known], lam_f[known], opts) if known.any() else opts.mu_init
    return WarmStart(z_warm, None, lam, None, mu=mu), opts


def run_standard(prob: OcpProblem, initial_mesh: Mesh, cfg: EchConfig = EchConfig()) -> EchResult:
    """The same refinement loop with every path row kept at every node."""
    return run(prob, initial_mesh, replace(cfg, handling=False))


def recomputation_time(state: EchState, repeats: int = 3) -> float:
    """Median wall time of re-solving the final-iteration NLP from the warm start it used."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        solve(state.last_nlp, state.last_warm, state.last_options)
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))
