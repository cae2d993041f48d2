"""Desk-scale benchmark: a planar point mass steering around circular no-fly zones.

States are ``(pN, pE, vN, vE)`` in meters and m/s, inputs are the
accelerations ``(aN, aE)``.  The cost is the integrated control effort
``aN^2 + aE^2`` over a fixed horizon, the start is at rest and the goal
position is fixed with a free terminal velocity.  Each zone contributes
one path row ``r^2 - (pN - cN)^2 - (pE - cE)^2 <= 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .mesh import Mesh
from .problem import ConstraintSet, OcpProblem


@dataclass(frozen=True)
class NoFlyZone:
    north: float
    east: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("no-fly zone radius must be positive")


GUESS_BOW = 0.02

DEFAULT_ZONES = (
    NoFlyZone(8.0, -0.4, 0.8),
    NoFlyZone(4.5, 3.0, 1.0),
    NoFlyZone(6.0, -3.0, 1.2),
    NoFlyZone(2.0, 0.3, 0.8),
    NoFlyZone(9.0, 3.5, 1.0),
)


@dataclass(frozen=True)
class BenchProblemSpec:
    name: str = "nfz5"
    t0: float = 0.0
    tf: float = 10.0
    start: tuple = (0.0, 0.0)
    goal: tuple = (10.0, 0.0)
    zones: tuple = DEFAULT_ZONES
    position_bound: float = 20.0
    velocity_bound: float = 10.0
    accel_bound: float = 5.0
    effort_weight: float = 1.0
    initial_intervals: int = 16

    def __post_init__(self):
        if not self.tf > self.t0:
            raise ValueError("tf must exceed t0")
        if self.initial_intervals < 1:
            raise ValueError("initial_intervals must be positive")
        if min(self.position_bound, self.velocity_bound, self.accel_bound, self.effort_weight) <= 0:
            raise ValueError("bounds and cost weight must be positive")
        zones = tuple(z if isinstance(z, NoFlyZone) else NoFlyZone(*z) for z in self.zones)
        object.__setattr__(self, "zones", zones)
        object.__setattr__(self, "start", tuple(map(float, self.start)))
        object.__setattr__(self, "goal", tuple(map(float, self.goal)))
        for k, z in enumerate(zones):
            for label, pt in (("start", self.start), ("goal", self.goal)):
                if np.hypot(pt[0] - z.north, pt[1] - z.east) <= z.radius:
                    raise ValueError(f"{label} point lies inside no-fly zone {k + 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zones"] = [list(z) for z in (astuple_zone(z) for z in self.zones)]
        d["start"], d["goal"] = list(self.start), list(self.goal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchProblemSpec":
        d = dict(d)
        if "zones" in d:
            d["zones"] = tuple(NoFlyZone(*z) for z in d["zones"])
        return cls(**d)


def astuple_zone(z: NoFlyZone) -> tuple:
    return (z.north, z.east, z.radius)


def segment_circle_intersects(a, b, center, radius) -> bool:
    """True when the closed segment ``a``-``b`` meets the open disc."""
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, center))
    d = b - a
    tt = 0.0 if not d.any() else float(np.clip((c - a) @ d / (d @ d), 0.0, 1.0))
    return float(np.linalg.norm(a + tt * d - c)) < radius


def straight_line_crossings(spec: BenchProblemSpec) -> list[int]:
    """Zero-based indices of zones cut by the straight start-to-goal segment."""
    return [k for k, z in enumerate(spec.zones)
            if segment_circle_intersects(spec.start, spec.goal, (z.north, z.east), z.radius)]


def min_effort_cost(spec: BenchProblemSpec) -> float:
    """Optimal effort without zones: rest-to-position, free end velocity.

    The optimal acceleration decays linearly to zero, ``a = 3 D (T - t) / T^3``,
    giving the cost ``3 |D|^2 / T^3``.
    """
    D = np.subtract(spec.goal, spec.start)
    T = spec.tf - spec.t0
    return float(spec.effort_weight * 3.0 * (D @ D) / T ** 3)


def min_effort_trajectory(spec: BenchProblemSpec, t):
    """States and inputs of the zone-free optimum at times ``t``."""
    t = np.asarray(t, dtype=float)
    T = spec.tf - spec.t0
    s = t - spec.t0
    D = np.subtract(spec.goal, spec.start)
    c = 3.0 * D / T ** 3
    a = np.outer(T - s, c)
    v = np.outer(T * s - 0.5 * s ** 2, c)
    p = np.asarray(spec.start) + np.outer(0.5 * T * s ** 2 - s ** 3 / 6.0, c)
    return np.hstack([p, v]), a


def _zone_arrays(zones):
    if not zones:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    arr = np.array([astuple_zone(z) for z in zones], dtype=float)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def build_problem(spec: BenchProblemSpec) -> OcpProblem:
    cn, ce, rad = _zone_arrays(spec.zones)
    ng = cn.size
    nw = 4 + 2 + 0 + 1
    w_eff = spec.effort_weight
    start = np.array([spec.start[0], spec.start[1], 0.0, 0.0])
    goal = np.asarray(spec.goal)

    def dynamics(x, u, t, p):
        return np.concatenate([x[..., 2:4], u], axis=-1)

    def dynamics_jac(x, u, t, p):
        J = np.zeros(x.shape[:-1] + (4, nw))
        J[..., 0, 2] = J[..., 1, 3] = J[..., 2, 4] = J[..., 3, 5] = 1.0
        return J

    def dynamics_hess(x, u, t, p, w):
        return np.zeros(x.shape[:-1] + (nw, nw))

    def zone_row(k):
        def c(x, u, t, p):
            return rad[k] ** 2 - (x[..., 0] - cn[k]) ** 2 - (x[..., 1] - ce[k]) ** 2
        return c

    def path_jac(x, u, t, p):
        J = np.zeros(x.shape[:-1] + (ng, nw))
        J[..., :, 0] = -2.0 * (x[..., 0:1] - cn)
        J[..., :, 1] = -2.0 * (x[..., 1:2] - ce)
        return J

    def path_hess(x, u, t, p, w):
        H = np.zeros(x.shape[:-1] + (nw, nw))
        tot = -2.0 * np.sum(w, axis=-1)
        H[..., 0, 0] = tot
        H[..., 1, 1] = tot
        return H

    def effort(x, u, t, p):
        return w_eff * np.sum(u * u, axis=-1)

    def effort_grad(x, u, t, p):
        g = np.zeros(x.shape[:-1] + (nw,))
        g[..., 4:6] = 2.0 * w_eff * u
        return g

    def effort_hess(x, u, t, p, w):
        H = np.zeros(x.shape[:-1] + (nw, nw))
        H[..., 4, 4] = H[..., 5, 5] = 2.0 * w_eff * w
        return H

    def boundary(x0, t0, xf, tf, p):
        return np.concatenate([x0 - start, xf[:2] - goal])

    def boundary_jac(x0, t0, xf, tf, p):
        J = np.zeros((6, 10))
        J[np.arange(4), np.arange(4)] = 1.0
        J[4, 5] = J[5, 6] = 1.0
        return J

    def boundary_hess(x0, t0, xf, tf, p, w):
        return np.zeros((10, 10))

    def guess(t):
        s = (t - spec.t0) / (spec.tf - spec.t0)
        X = np.zeros((t.size, 4))
        d = goal - np.asarray(spec.start)
        # small sideways bow so a zone centred on the straight line has a nonzero constraint gradient
        side = GUESS_BOW * np.array([-d[1], d[0]])
        bow = np.sin(np.pi * s)
        X[:, 0:2] = np.asarray(spec.start) + np.outer(s, d) + np.outer(bow, side)
        X[:, 2:4] = d / (spec.tf - spec.t0) + np.outer(np.pi * np.cos(np.pi * s), side) / (spec.tf - spec.t0)
        return X, np.zeros((t.size, 2))

    pb, vb, ab = spec.position_bound, spec.velocity_bound, spec.accel_bound
    return OcpProblem(
        state_dim=4, input_dim=2, dynamics=dynamics,
        path_constraints=[zone_row(k) for k in range(ng)],
        lagrange_cost=effort, boundary=boundary, boundary_dim=6,
        x_bounds=([-pb, -pb, -vb, -vb], [pb, pb, vb, vb]),
        u_bounds=([-ab, -ab], [ab, ab]),
        t0=spec.t0, tf=spec.tf, fixed_time=True,
        constraint_sets=[ConstraintSet(k, (k,), f"NFZ {k + 1}") for k in range(ng)],
        initial_guess=guess,
        dynamics_jac=dynamics_jac, dynamics_hess=dynamics_hess,
        path_jac=path_jac if ng else None, path_hess=path_hess if ng else None,
        lagrange_grad=effort_grad, lagrange_hess=effort_hess,
        boundary_jac=boundary_jac, boundary_hess=boundary_hess,
        name=spec.name,
    )


def bench_nfz5(overrides: Optional[dict] = None, spec: Optional[BenchProblemSpec] = None):
    """Build the five-zone benchmark; returns ``(problem, initial mesh, spec)``."""
    spec = spec or BenchProblemSpec()
    if overrides:
        spec = replace(spec, **overrides)
    return build_problem(spec), Mesh.uniform(spec.initial_intervals), spec
