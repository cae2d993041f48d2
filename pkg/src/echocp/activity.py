"""Constraint activity detection from multipliers and interpolated violations.

A path-constraint row is potentially active at node ``i`` when either the
interpolated constraint comes within ``eps_c_tol`` of the boundary between
the neighbouring nodes, or the node belongs to a multiplier segment whose
normalized mean is at least ``zeta``.  Segments come from a piecewise
constant fit of the normalized multiplier profile.  A constraint set with
no potentially active node is potentially redundant.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .interp import DiscreteSolution, Interpolant
from .problem import OcpProblem
from .transcription import ALL, NONE, ActivationFilter


class SetStatus(str, Enum):
    REDUNDANT = "PotentiallyRedundant"
    ENFORCED = "PotentiallyEnforced"


@dataclass
class MultiplierField:
    """Per constraint: node times and raw multipliers where rows were implemented."""

    times: list
    values: list

    def __post_init__(self):
        self.times = [np.asarray(t, dtype=float) for t in self.times]
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        for t, v in zip(self.times, self.values):
            if t.shape != v.shape:
                raise ValueError("times and values must have equal length")
            if np.any(np.diff(t) <= 0):
                raise ValueError("multiplier times must be strictly increasing")
            if np.any(v < 0):
                raise ValueError("multipliers must be nonnegative")

    @classmethod
    def from_solution(cls, sol: DiscreteSolution, n_path: int) -> "MultiplierField":
        t = sol.times
        times, values = [], []
        for l in range(n_path):
            sel = np.flatnonzero(sol.row_constraint == l)
            nodes = sol.row_node[sel]
            order = np.argsort(nodes)
            times.append(t[nodes[order]])
            values.append(np.maximum(sol.multipliers[sel[order]], 0.0))
        return cls(times, values)


def normalize_values(v: np.ndarray) -> np.ndarray:
    """Map ``v`` affinely onto ``[0, 1]``; a (near) constant profile maps to zeros."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 1e-12 * (1.0 + abs(hi)):
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalize(field: MultiplierField) -> list:
    return [normalize_values(v) for v in field.values]


# ---------------------------------------------------------------------------
# changepoints

class _Sse:
    """Segment sum of squared deviations from prefix sums; segments are ``[i, j)``."""

    def __init__(self, y):
        y = np.asarray(y, dtype=float)
        self.n = y.size
        self.s1 = np.concatenate([[0.0], np.cumsum(y)])
        self.s2 = np.concatenate([[0.0], np.cumsum(y * y)])

    def __call__(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        s = self.s1[j] - self.s1[i]
        return np.maximum(self.s2[j] - self.s2[i] - s * s / np.maximum(j - i, 1), 0.0)


def segmentation_cost(values, changepoints, penalty: float) -> float:
    """Total within-segment SSE plus ``penalty`` per changepoint."""
    sse = _Sse(values)
    b = [0, *sorted(changepoints), sse.n]
    return float(sum(sse(b[k], b[k + 1]) for k in range(len(b) - 1)) + penalty * (len(b) - 2))


def _best_split(sse, i, j):
    ks = np.arange(i + 1, j)
    c = sse(i, ks) + sse(ks, j)
    m = int(np.argmin(c))
    return int(ks[m]), float(c[m])


def _best_two_splits(sse, i, j):
    if j - i < 3:
        return None, np.inf
    k1 = np.arange(i + 1, j - 1)[:, None]
    k2 = np.arange(i + 2, j)[None, :]
    c = sse(i, k1) + sse(k1, k2) + sse(k2, j)
    c = np.where(k2 > k1, c, np.inf)
    a, b = np.unravel_index(int(np.argmin(c)), c.shape)
    return (int(k1[a, 0]), int(k2[0, b])), float(c[a, b])


def detect_changepoints(values, penalty: float) -> list[int]:
    """Changepoints of a piecewise-constant mean fit by binary segmentation.

    A segment is split at its best single split when that lowers the SSE by
    more than ``penalty``; otherwise the best pair of splits is tried against
    twice the penalty, which catches a level change hidden inside a segment.
    A final pass removes, moves or inserts single changepoints while that
    lowers the penalized cost.  Returned indices ``k`` start new segments.
    """
    y = np.asarray(values, dtype=float)
    n = y.size
    if n < 2:
        return []
    sse = _Sse(y)
    cps: list[int] = []
    stack = [(0, n)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        base = float(sse(i, j))
        k, c1 = _best_split(sse, i, j)
        if base - c1 > penalty:
            cps.append(k)
            stack += [(i, k), (k, j)]
            continue
        pair, c2 = _best_two_splits(sse, i, j)
        if pair is not None and base - c2 > 2.0 * penalty:
            cps.extend(pair)
            stack += [(i, pair[0]), (pair[0], pair[1]), (pair[1], j)]
    return _polish(sse, sorted(cps), penalty)


def _polish(sse, cps, penalty):
    n = sse.n
    improved = True
    while improved:
        improved = False
        b = [0, *cps, n]
        # removal
        for m in range(1, len(b) - 1):
            split = float(sse(b[m - 1], b[m]) + sse(b[m], b[m + 1]))
            if float(sse(b[m - 1], b[m + 1])) - split < penalty - 1e-12:
                del cps[m - 1]
                improved = True
                break
        if improved:
            continue
        # relocation between neighbours
        for m in range(1, len(b) - 1):
            lo, hi = b[m - 1], b[m + 1]
            if hi - lo < 2:
                continue
            k, c = _best_split(sse, lo, hi)
            if c < float(sse(lo, b[m]) + sse(b[m], hi)) - 1e-12:
                cps[m - 1] = k
                improved = True
                break
        if improved:
            continue
        # insertion
        for m in range(len(b) - 1):
            lo, hi = b[m], b[m + 1]
            if hi - lo < 2:
                continue
            k, c = _best_split(sse, lo, hi)
            if float(sse(lo, hi)) - c > penalty + 1e-12:
                cps.append(k)
                cps.sort()
                improved = True
                break
    return cps


def default_penalty(values) -> float:
    v = np.asarray(values, dtype=float)
    return 0.1 * v.size * float(np.var(v)) if v.size else 0.0


# ---------------------------------------------------------------------------
# classification

@dataclass(frozen=True)
class ActivityConfig:
    zeta: float = 0.1
    eps_c_tol: float = 1e-4
    penalty: Optional[float] = None
    samples_per_interval: int = 10
    multiplier_abs_floor: float = 1e-7
    multiplier_rel_floor: float = 1e-4

    def __post_init__(self):
        if self.zeta <= 0 or self.eps_c_tol <= 0:
            raise ValueError("zeta and eps_c_tol must be positive")
        if self.samples_per_interval < 2 or self.samples_per_interval % 2:
            raise ValueError("samples_per_interval must be an even integer >= 2")


@dataclass
class SegmentedProfile:
    nodes: np.ndarray
    normalized: np.ndarray
    changepoints: list
    segment_means: np.ndarray
    segment_active: np.ndarray


@dataclass
class ActivityReport:
    times: np.ndarray
    node_active: np.ndarray
    by_violation: np.ndarray
    by_multiplier: np.ndarray
    intervals: list
    set_status: dict
    set_rows: dict
    set_labels: dict
    profiles: list
    horizon: tuple
    fixed_time: bool = True

    def redundant_sets(self) -> list:
        return [k for k, v in self.set_status.items() if v is SetStatus.REDUNDANT]

    def enforced_sets(self) -> list:
        return [k for k, v in self.set_status.items() if v is SetStatus.ENFORCED]


def _window_max(c: np.ndarray) -> np.ndarray:
    """Per node, the max of ``c`` over the span between its neighbouring nodes.

    ``c`` has shape ``(K, S + 1, ng)``; the result has shape ``(2K + 1, ng)``.
    """
    K, S1, ng = c.shape
    half = (S1 - 1) // 2
    left = c[:, :half + 1].max(axis=1)
    right = c[:, half:].max(axis=1)
    out = np.full((2 * K + 1, ng), -np.inf)
    out[1::2] = np.maximum(left, right)
    out[0:-1:2] = left
    out[2::2] = np.maximum(out[2::2], right)
    return out


def node_runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs ``(first, last)`` of consecutive True entries."""
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts.tolist(), ends.tolist()))


def classify(prob: OcpProblem, sol: DiscreteSolution, interp: Interpolant,
             cfg: ActivityConfig = ActivityConfig()) -> ActivityReport:
    """Node-level potential activity, activation intervals and set verdicts."""
    ng = prob.n_path
    N = sol.mesh.N
    times = sol.times
    if sol.multipliers.size and not np.all(np.isfinite(sol.multipliers)):
        raise ValueError("solution is missing multipliers for implemented rows")
    S = cfg.samples_per_interval
    if ng:
        T = interp.sample_grid(S)
        flat = T.ravel()
        c = prob._c.value(interp.state(flat), interp.input(flat), flat, sol.p).reshape(T.shape + (ng,))
        by_violation = _window_max(c) >= -cfg.eps_c_tol
    else:
        by_violation = np.zeros((N, 0), dtype=bool)

    lam = np.maximum(sol.multipliers, 0.0)
    floor = max(cfg.multiplier_abs_floor, cfg.multiplier_rel_floor * float(np.max(lam, initial=0.0)))
    by_multiplier = np.zeros((N, ng), dtype=bool)
    profiles = []
    for l in range(ng):
        sel = np.flatnonzero(sol.row_constraint == l)
        nodes = sol.row_node[sel]
        order = np.argsort(nodes)
        nodes = nodes[order]
        v = lam[sel[order]]
        v = np.where(v < floor, 0.0, v)
        y = normalize_values(v)
        pen = cfg.penalty if cfg.penalty is not None else default_penalty(y)
        cps = detect_changepoints(y, pen) if y.size >= 2 else []
        bounds = [0, *cps, y.size] if y.size else [0]
        means = np.array([y[bounds[k]:bounds[k + 1]].mean() for k in range(len(bounds) - 1)])
        seg_active = means >= cfg.zeta
        for k in range(len(bounds) - 1):
            if seg_active[k]:
                by_multiplier[nodes[bounds[k]:bounds[k + 1]], l] = True
        profiles.append(SegmentedProfile(nodes, y, cps, means, seg_active))

    active = by_violation | by_multiplier
    intervals = [[(float(times[a]), float(times[b])) for a, b in node_runs(active[:, l])] for l in range(ng)]
    status, rows, labels = {}, {}, {}
    for cset in prob.constraint_sets:
        r = list(cset.row_indices)
        rows[cset.set_id] = r
        labels[cset.set_id] = cset.label
        status[cset.set_id] = SetStatus.ENFORCED if active[:, r].any() else SetStatus.REDUNDANT
    return ActivityReport(times, active, by_violation, by_multiplier, intervals, status, rows, labels,
                          profiles, (float(sol.t0), float(sol.tf)), prob.fixed_time)


def buffer_intervals(report: ActivityReport, beta: float, horizon=None) -> ActivationFilter:
    """Activation filter from the report's intervals widened by ``beta`` seconds."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    t0, tf = horizon if horizon is not None else report.horizon
    entries = {}
    everything = beta >= tf - t0
    for sid, rows in report.set_rows.items():
        redundant = report.set_status[sid] is SetStatus.REDUNDANT
        for l in rows:
            if everything:
                entries[l] = ALL
            elif redundant:
                entries[l] = NONE
            elif not report.fixed_time:
                entries[l] = ALL
            else:
                entries[l] = tuple((max(t0, a - beta), min(tf, b + beta)) for a, b in report.intervals[l])
    return ActivationFilter(entries, (t0, tf))
