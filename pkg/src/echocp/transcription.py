"""Hermite-Simpson transcription of an :class:`OcpProblem` into a sparse NLP.

Decision vector layout: node blocks ``(x_i, u_i)`` for ``i = 0..N-1`` in
node order, then the static parameters, then ``(t0, tf)`` when the
horizon is free.  Node ``2k`` and ``2k + 2`` bound interval ``k``; node
``2k + 1`` is its midpoint and carries its own state and input.

Per interval and state component two defect rows are generated::

    simpson:  x_b - x_a - h/6 (f_a + 4 f_m + f_b)
    hermite:  x_m - (x_a + x_b)/2 - h/8 (f_a - f_b)

followed by the boundary rows.  Path-constraint rows ``c_l(x_i, u_i, t_i, p)``
are kept only where the activation filter admits node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshError
from .problem import OcpProblem

ALL = "all"
NONE = "none"

Entry = Union[str, tuple]


def _canonical_entry(entry, horizon) -> Entry:
    if isinstance(entry, str):
        if entry not in (ALL, NONE):
            raise ValueError(f"unknown filter entry {entry!r}")
        return entry
    t0, tf = horizon
    ivs = sorted((float(a), float(b)) for a, b in entry)
    merged: list[list[float]] = []
    for a, b in ivs:
        if b < a:
            raise ValueError(f"interval [{a}, {b}] is reversed")
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    if not merged:
        return NONE
    out = tuple((a, b) for a, b in merged)
    span = tf - t0
    if len(out) == 1 and out[0][0] <= t0 + 1e-12 * span and out[0][1] >= tf - 1e-12 * span:
        return ALL
    return out


@dataclass(frozen=True)
class ActivationFilter:
    """Per path-constraint row: ``ALL``, ``NONE`` or closed time intervals."""

    entries: Mapping[int, Entry]
    horizon: tuple[float, float]

    def __post_init__(self):
        h = (float(self.horizon[0]), float(self.horizon[1]))
        object.__setattr__(self, "horizon", h)
        canon = {int(l): _canonical_entry(e, h) for l, e in dict(self.entries).items()}
        for e in canon.values():
            if isinstance(e, tuple):
                for a, b in e:
                    if a < h[0] - 1e-9 * (h[1] - h[0]) or b > h[1] + 1e-9 * (h[1] - h[0]):
                        raise ValueError(f"interval [{a}, {b}] outside horizon {h}")
        object.__setattr__(self, "entries", dict(sorted(canon.items())))

    @classmethod
    def all(cls, n_rows: int, horizon) -> "ActivationFilter":
        return cls({l: ALL for l in range(n_rows)}, horizon)

    @classmethod
    def none(cls, n_rows: int, horizon) -> "ActivationFilter":
        return cls({l: NONE for l in range(n_rows)}, horizon)

    def __getitem__(self, l: int) -> Entry:
        return self.entries[l]

    def intervals(self, l: int) -> list[tuple[float, float]]:
        e = self.entries[l]
        if e == ALL:
            return [self.horizon]
        if e == NONE:
            return []
        return list(e)

    def mask(self, l: int, times: np.ndarray) -> np.ndarray:
        """Closed-interval membership of ``times`` for row ``l``."""
        times = np.asarray(times, dtype=float)
        e = self.entries[l]
        if e == ALL:
            return np.ones(times.shape, dtype=bool)
        if e == NONE:
            return np.zeros(times.shape, dtype=bool)
        tol = 1e-12 * max(1.0, abs(self.horizon[1]) + abs(self.horizon[0]))
        out = np.zeros(times.shape, dtype=bool)
        for a, b in e:
            out |= (times >= a - tol) & (times <= b + tol)
        return out

    def to_dict(self) -> dict:
        return {str(l): (e if isinstance(e, str) else [list(iv) for iv in e])
                for l, e in self.entries.items()}

    @classmethod
    def from_dict(cls, d: Mapping, horizon) -> "ActivationFilter":
        return cls({int(l): (e if isinstance(e, str) else tuple(tuple(iv) for iv in e))
                    for l, e in d.items()}, horizon)


@dataclass(frozen=True)
class Layout:
    n: int
    m: int
    s: int
    N: int
    free_time: bool

    @property
    def block(self) -> int:
        return self.n + self.m

    @property
    def nz(self) -> int:
        return self.N * self.block + self.s + (2 if self.free_time else 0)

    @property
    def x_idx(self) -> np.ndarray:
        return np.arange(self.N)[:, None] * self.block + np.arange(self.n)[None, :]

    @property
    def u_idx(self) -> np.ndarray:
        return np.arange(self.N)[:, None] * self.block + self.n + np.arange(self.m)[None, :]

    @property
    def xu_idx(self) -> np.ndarray:
        return np.arange(self.N)[:, None] * self.block + np.arange(self.block)[None, :]

    @property
    def p_idx(self) -> np.ndarray:
        return self.N * self.block + np.arange(self.s)

    @property
    def t_idx(self) -> np.ndarray:
        """Indices of ``(t0, tf)``; empty for a fixed horizon."""
        if not self.free_time:
            return np.zeros(0, dtype=int)
        base = self.N * self.block + self.s
        return np.array([base, base + 1])

    def unpack(self, z, t0: float, tf: float):
        z = np.asarray(z, dtype=float)
        XU = z[:self.N * self.block].reshape(self.N, self.block)
        p = z[self.N * self.block:self.N * self.block + self.s]
        if self.free_time:
            t0, tf = z[-2], z[-1]
        return XU[:, :self.n], XU[:, self.n:], p, float(t0), float(tf)

    def pack(self, X, U, p=None, t0=None, tf=None) -> np.ndarray:
        z = np.empty(self.nz)
        XU = np.concatenate([np.asarray(X, float).reshape(self.N, self.n),
                             np.asarray(U, float).reshape(self.N, self.m)], axis=1)
        z[:self.N * self.block] = XU.ravel()
        z[self.N * self.block:self.N * self.block + self.s] = (
            np.zeros(self.s) if p is None else np.asarray(p, float).reshape(self.s))
        if self.free_time:
            z[-2], z[-1] = t0, tf
        return z


# (block, node offset, identity coefficient, dynamics coefficient / dtau)
_DEFECT_TERMS = (
    (0, 0, -1.0, -1.0 / 6.0),
    (0, 1, 0.0, -4.0 / 6.0),
    (0, 2, 1.0, -1.0 / 6.0),
    (1, 0, -0.5, -1.0 / 8.0),
    (1, 1, 1.0, 0.0),
    (1, 2, -0.5, 1.0 / 8.0),
)


class _Coo:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, vals):
        rows, cols = np.broadcast_arrays(rows, cols)
        vals = np.broadcast_to(vals, rows.shape)
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(np.asarray(vals, dtype=float).ravel())

    def tocsr(self, shape) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix(shape)
        return sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                             shape=shape)


@dataclass(eq=False)
class DiscretizedNlp:
    """Sparse NLP: ``min f(z)`` s.t. ``eq(z) = 0``, ``ineq(z) <= 0``, ``lb <= z <= ub``."""

    prob: OcpProblem
    mesh: Mesh
    filter: ActivationFilter
    layout: Layout
    row_constraint: np.ndarray
    row_node: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    # -- sizes and metadata -------------------------------------------------
    @property
    def n(self) -> int:
        return self.layout.nz

    @property
    def n_defect(self) -> int:
        return 2 * self.prob.state_dim * self.mesh.K

    @property
    def n_eq(self) -> int:
        return self.n_defect + self.prob.boundary_dim

    @property
    def n_ineq(self) -> int:
        return self.row_constraint.size

    @property
    def quadrature_weights(self) -> np.ndarray:
        return self.mesh.simpson_weights()

    def node_times(self, z=None) -> np.ndarray:
        t0, tf = self.horizon(z)
        return self.mesh.node_times(t0, tf)

    def horizon(self, z=None) -> tuple[float, float]:
        if z is None or not self.layout.free_time:
            return self.prob.t0, self.prob.tf
        return float(z[-2]), float(z[-1])

    def row_times(self, z=None) -> np.ndarray:
        return self.node_times(z)[self.row_node]

    def unpack(self, z):
        return self.layout.unpack(z, self.prob.t0, self.prob.tf)

    def initial_point(self) -> np.ndarray:
        prob, lay = self.prob, self.layout
        t = self.node_times()
        if prob.initial_guess is not None:
            X, U = prob.initial_guess(t)
        else:
            X = np.zeros((lay.N, lay.n))
            U = np.zeros((lay.N, lay.m))
        p = np.zeros(lay.s)
        z = lay.pack(X, U, p, prob.t0, prob.tf)
        return np.clip(z, self.lb, self.ub)

    # -- evaluation core ------------------------------------------------------
    def _eval(self, z, need_jac: bool):
        key = z.tobytes()
        c = self._cache
        if c.get("key") != key:
            c.clear()
            c["key"] = key
        if "F" not in c:
            X, U, p, t0, tf = self.unpack(z)
            tau = self.mesh.tau
            t = t0 + tau * (tf - t0)
            prob = self.prob
            c.update(X=X, U=U, p=p, t0=t0, tf=tf, t=t, D=tf - t0)
            c["F"] = prob._f.value(X, U, t, p)
            c["L"] = prob._L.value(X, U, t, p)[:, 0]
            c["e"] = np.concatenate([X[0], [t0], X[-1], [tf], p])
            if self.n_ineq:
                nodes = np.unique(self.row_node)
                c["cnodes"] = nodes
                C = prob._c.value(X[nodes], U[nodes], t[nodes], p)
                pos = np.searchsorted(nodes, self.row_node)
                c["cpos"] = pos
                c["cvals"] = C[pos, self.row_constraint]
        if need_jac and "Fj" not in c:
            prob = self.prob
            X, U, p, t = c["X"], c["U"], c["p"], c["t"]
            c["Fj"] = prob._f.jacobian(X, U, t, p)
            c["Lj"] = prob._L.jacobian(X, U, t, p)[:, 0, :]
            if self.n_ineq:
                nodes = c["cnodes"]
                c["Cj"] = prob._c.jacobian(X[nodes], U[nodes], t[nodes], p)
        return c

    # -- objective ------------------------------------------------------------
    def objective(self, z) -> float:
        c = self._eval(z, False)
        w = self.quadrature_weights
        return float(self.prob._mayer.value_e(c["e"])[0] + c["D"] * np.dot(w, c["L"]))

    def gradient(self, z) -> np.ndarray:
        c = self._eval(z, True)
        lay = self.layout
        n, m, s = lay.n, lay.m, lay.s
        nm = n + m
        w = self.quadrature_weights
        D = c["D"]
        Lj = c["Lj"]
        g = np.zeros(lay.nz)
        g[lay.xu_idx] = D * w[:, None] * Lj[:, :nm]
        if s:
            g[lay.p_idx] += D * (w @ Lj[:, nm:nm + s])
        if lay.free_time:
            tau = self.mesh.tau
            Lt = Lj[:, -1]
            wl = float(w @ c["L"])
            g[lay.t_idx] += np.array([-wl, wl]) + D * np.array([w @ (Lt * (1 - tau)), w @ (Lt * tau)])
        ge = self.prob._mayer.jacobian_e(c["e"])[0]
        self._add_endpoint_vec(g, ge)
        return g

    def _endpoint_map(self):
        """Global column per endpoint coordinate; ``-1`` where the coordinate is fixed."""
        lay = self.layout
        n = lay.n
        cols = np.full(2 * n + lay.s + 2, -1)
        cols[:n] = lay.x_idx[0]
        cols[n + 1:2 * n + 1] = lay.x_idx[-1]
        cols[2 * n + 2:] = lay.p_idx
        if lay.free_time:
            cols[n] = lay.t_idx[0]
            cols[2 * n + 1] = lay.t_idx[1]
        return cols

    def _add_endpoint_vec(self, g, ge):
        cols = self._endpoint_map()
        keep = cols >= 0
        np.add.at(g, cols[keep], ge[keep])

    # -- constraints ----------------------------------------------------------
    def eq_constraints(self, z) -> np.ndarray:
        c = self._eval(z, False)
        X, F, D = c["X"], c["F"], c["D"]
        K = self.mesh.K
        dtau = self.mesh.dtau
        n = self.layout.n
        out = np.zeros((K, 2, n))
        for blk, off, a, b in _DEFECT_TERMS:
            idx = 2 * np.arange(K) + off
            out[:, blk, :] += a * X[idx] + (D * b * dtau)[:, None] * F[idx]
        phi = self.prob._phi.value_e(c["e"])
        return np.concatenate([out.ravel(), phi])

    def defect_residuals(self, z) -> np.ndarray:
        return self.eq_constraints(z)[:self.n_defect]

    def ineq_constraints(self, z) -> np.ndarray:
        if not self.n_ineq:
            return np.zeros(0)
        return self._eval(z, False)["cvals"].copy()

    def eq_jacobian(self, z) -> sp.csr_matrix:
        c = self._eval(z, True)
        lay = self.layout
        n, m, s = lay.n, lay.m, lay.s
        nm = n + m
        K = self.mesh.K
        dtau = self.mesh.dtau
        D = c["D"]
        Fj, F = c["Fj"], c["F"]
        tau = self.mesh.tau
        coo = _Coo()
        k = np.arange(K)
        jj = np.arange(n)
        for blk, off, a, b in _DEFECT_TERMS:
            node = 2 * k + off
            rows = (2 * n * k + blk * n)[:, None] + jj[None, :]  # (K, n)
            if a != 0.0:
                coo.add(rows, lay.x_idx[node], a)
            if b == 0.0:
                continue
            coef = D * b * dtau  # (K,)
            coo.add(rows[:, :, None], lay.xu_idx[node][:, None, :], coef[:, None, None] * Fj[node][:, :, :nm])
            if s:
                coo.add(rows[:, :, None], lay.p_idx[None, None, :], coef[:, None, None] * Fj[node][:, :, nm:nm + s])
            if lay.free_time:
                base = (b * dtau)[:, None] * F[node]
                ft = coef[:, None] * Fj[node][:, :, -1]
                a_t0 = (1 - tau[node])[:, None]
                a_tf = tau[node][:, None]
                coo.add(rows, lay.t_idx[0], -base + ft * a_t0)
                coo.add(rows, lay.t_idx[1], base + ft * a_tf)
        nb = self.prob.boundary_dim
        if nb:
            Je = self.prob._phi.jacobian_e(c["e"])
            cols = self._endpoint_map()
            keep = cols >= 0
            rows = self.n_defect + np.arange(nb)
            coo.add(rows[:, None], cols[keep][None, :], Je[:, keep])
        return coo.tocsr((self.n_eq, lay.nz))

    def ineq_jacobian(self, z) -> sp.csr_matrix:
        lay = self.layout
        if not self.n_ineq:
            return sp.csr_matrix((0, lay.nz))
        c = self._eval(z, True)
        n, m, s = lay.n, lay.m, lay.s
        nm = n + m
        Cj = c["Cj"][c["cpos"], self.row_constraint]  # (rows, nw)
        rows = np.arange(self.n_ineq)
        coo = _Coo()
        coo.add(rows[:, None], lay.xu_idx[self.row_node], Cj[:, :nm])
        if s:
            coo.add(rows[:, None], lay.p_idx[None, :], Cj[:, nm:nm + s])
        if lay.free_time:
            tau = self.mesh.tau[self.row_node]
            coo.add(rows, lay.t_idx[0], Cj[:, -1] * (1 - tau))
            coo.add(rows, lay.t_idx[1], Cj[:, -1] * tau)
        return coo.tocsr((self.n_ineq, lay.nz))

    # -- second derivatives ---------------------------------------------------
    def hessian(self, z, lam_eq, lam_ineq, obj_factor: float = 1.0) -> sp.csr_matrix:
        """Full symmetric Hessian of ``obj_factor f + lam_eq.eq + lam_ineq.ineq``."""
        c = self._eval(z, True)
        prob, lay = self.prob, self.layout
        n, m, s = lay.n, lay.m, lay.s
        nm = n + m
        N, K = lay.N, self.mesh.K
        X, U, p, t, D = c["X"], c["U"], c["p"], c["t"], c["D"]
        dtau = self.mesh.dtau
        tau = self.mesh.tau
        lam_eq = np.asarray(lam_eq, dtype=float)
        lam_def = lam_eq[:self.n_defect].reshape(K, 2, n)
        nu = np.zeros((N, n))
        for blk, off, a, b in _DEFECT_TERMS:
            if b != 0.0:
                nu[2 * np.arange(K) + off] += (b * dtau)[:, None] * lam_def[:, blk, :]
        wq = obj_factor * self.quadrature_weights
        HG = prob._f.weighted_hessian(X, U, t, p, nu) + prob._L.weighted_hessian(X, U, t, p, wq[:, None])
        Hw = D * HG
        if self.n_ineq and np.any(lam_ineq):
            nodes = c["cnodes"]
            Wc = np.zeros((nodes.size, prob.n_path))
            np.add.at(Wc, (c["cpos"], self.row_constraint), lam_ineq)
            Hw[nodes] += prob._c.weighted_hessian(X[nodes], U[nodes], t[nodes], p, Wc)
        coo = _Coo()
        xu = lay.xu_idx
        coo.add(xu[:, :, None], xu[:, None, :], Hw[:, :nm, :nm])
        if s:
            pi = lay.p_idx
            coo.add(xu[:, :, None], pi[None, None, :], Hw[:, :nm, nm:nm + s])
            coo.add(pi[None, :, None], xu[:, None, :], Hw[:, nm:nm + s, :nm])
            coo.add(pi[:, None], pi[None, :], Hw[:, nm:nm + s, nm:nm + s].sum(axis=0))
        if lay.free_time:
            Fj = c["Fj"]
            gw = np.einsum("ni,niw->nw", nu, Fj) + wq[:, None] * c["Lj"]
            a_i = np.stack([1 - tau, tau], axis=1)  # (N, 2)
            d = np.array([-1.0, 1.0])
            ti = lay.t_idx
            cross = gw[:, :-1, None] * d[None, None, :] + Hw[:, :-1, -1][:, :, None] * a_i[:, None, :]
            wcols = np.concatenate([xu, np.broadcast_to(lay.p_idx, (N, s))], axis=1)
            coo.add(wcols[:, :, None], ti[None, None, :], cross)
            coo.add(ti[None, :, None], wcols[:, None, :], np.transpose(cross, (0, 2, 1)))
            gt = gw[:, -1]
            tt = (gt[:, None, None] * (d[None, :, None] * a_i[:, None, :] + a_i[:, :, None] * d[None, None, :])
                  + Hw[:, -1, -1][:, None, None] * a_i[:, :, None] * a_i[:, None, :])
            coo.add(ti[:, None], ti[None, :], tt.sum(axis=0))
        # endpoint terms
        e = c["e"]
        He = obj_factor * prob._mayer.weighted_hessian_e(e, [1.0])
        nb = prob.boundary_dim
        if nb:
            He = He + prob._phi.weighted_hessian_e(e, lam_eq[self.n_defect:])
        cols = self._endpoint_map()
        keep = np.flatnonzero(cols >= 0)
        if np.any(He):
            coo.add(cols[keep][:, None], cols[keep][None, :], He[np.ix_(keep, keep)])
        return coo.tocsr((lay.nz, lay.nz))

    def jacobian_structure(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Declared sparsity patterns, probed at a random point inside the bounds."""
        rng = np.random.default_rng(12345)
        lo = np.where(np.isfinite(self.lb), self.lb, -1.0)
        hi = np.where(np.isfinite(self.ub), self.ub, 1.0)
        z = lo + (hi - lo) * rng.uniform(0.25, 0.75, size=self.n)
        out = {}
        for name, fn in (("eq", self.eq_jacobian), ("ineq", self.ineq_jacobian)):
            J = fn(z).tocoo()
            out[name] = (J.row.copy(), J.col.copy())
        return out


def transcribe(prob: OcpProblem, mesh: Mesh, filter: ActivationFilter | None = None) -> DiscretizedNlp:
    """Build the Hermite-Simpson NLP of ``prob`` on ``mesh``.

    Path-constraint rows are generated for ``(l, i)`` pairs whose node time
    lies in one of the filter's closed intervals for row ``l``; pairs are
    ordered by constraint, then node.
    """
    if mesh is None or mesh.K < 1:
        raise MeshError("empty mesh")
    horizon = prob.horizon
    if filter is None:
        filter = ActivationFilter.all(prob.n_path, horizon)
    unknown = set(filter.entries) - set(range(prob.n_path))
    if unknown:
        raise ValueError(f"filter references unknown constraint indices {sorted(unknown)}")
    missing = set(range(prob.n_path)) - set(filter.entries)
    if missing:
        raise ValueError(f"filter has no entry for constraint indices {sorted(missing)}")
    if not prob.fixed_time:
        for l, e in filter.entries.items():
            if isinstance(e, tuple):
                raise ValueError("per-node row removal requires a fixed terminal time")
    lay = Layout(prob.state_dim, prob.input_dim, prob.param_dim, mesh.N, not prob.fixed_time)
    times = mesh.node_times(*horizon)
    rc, rn = [], []
    for l in range(prob.n_path):
        nodes = np.flatnonzero(filter.mask(l, times))
        rc.append(np.full(nodes.size, l))
        rn.append(nodes)
    row_constraint = np.concatenate(rc).astype(int) if rc else np.zeros(0, dtype=int)
    row_node = np.concatenate(rn).astype(int) if rn else np.zeros(0, dtype=int)
    lb = np.empty(lay.nz)
    ub = np.empty(lay.nz)
    lb[lay.x_idx], ub[lay.x_idx] = prob.x_bounds[0], prob.x_bounds[1]
    lb[lay.u_idx], ub[lay.u_idx] = prob.u_bounds[0], prob.u_bounds[1]
    lb[lay.p_idx], ub[lay.p_idx] = prob.p_bounds[0], prob.p_bounds[1]
    if lay.free_time:
        lb[lay.t_idx] = [prob.t0_bounds[0][0], prob.tf_bounds[0][0]]
        ub[lay.t_idx] = [prob.t0_bounds[1][0], prob.tf_bounds[1][0]]
    return DiscretizedNlp(prob, mesh, filter, lay, row_constraint, row_node, lb, ub)


def defect_residuals(nlp: DiscretizedNlp, z) -> np.ndarray:
    """Hermite-Simpson defects, interval-major: ``(simpson[n], hermite[n])`` per interval."""
    z = np.asarray(z, dtype=float)
    if z.shape != (nlp.n,):
        raise ValueError(f"decision vector has shape {z.shape}, expected ({nlp.n},)")
    return nlp.defect_residuals(z)


def nlp_jacobians(nlp: DiscretizedNlp, z):
    """Return ``(objective gradient, equality Jacobian, inequality Jacobian)``."""
    z = np.asarray(z, dtype=float)
    return nlp.gradient(z), nlp.eq_jacobian(z), nlp.ineq_jacobian(z)
