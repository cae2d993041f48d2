"""Hermite-Simpson collocation meshes on normalized time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Segment boundaries in normalized time ``tau`` on ``[0, 1]``.

    Each of the ``K`` intervals carries its two endpoints and the midpoint,
    giving ``N = 2K + 1`` distinct collocation nodes.
    """

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float).ravel()
        if b.size < 2:
            raise MeshError("a mesh needs at least one interval")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise MeshError("mesh boundaries must start at 0 and end at 1")
        if np.any(np.diff(b) <= 0):
            raise MeshError("mesh boundaries must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def uniform(cls, K: int) -> "Mesh":
        if K < 1:
            raise MeshError("K must be at least 1")
        return cls(np.linspace(0.0, 1.0, K + 1))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.boundaries.shape == other.boundaries.shape and bool(
            np.all(self.boundaries == other.boundaries))

    __hash__ = None

    @property
    def K(self) -> int:
        return self.boundaries.size - 1

    @property
    def N(self) -> int:
        return 2 * self.K + 1

    @property
    def dtau(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def tau(self) -> np.ndarray:
        """Node positions: endpoints at even indices, midpoints at odd ones."""
        b = self.boundaries
        out = np.empty(self.N)
        out[0::2] = b
        out[1::2] = 0.5 * (b[:-1] + b[1:])
        return out

    def node_times(self, t0: float, tf: float) -> np.ndarray:
        return t0 + self.tau * (tf - t0)

    def simpson_weights(self) -> np.ndarray:
        """Quadrature weights on ``[0, 1]`` for the node values."""
        w = np.zeros(self.N)
        d = self.dtau
        w[0:-1:2] += d / 6.0
        w[1::2] += 4.0 * d / 6.0
        w[2::2] += d / 6.0
        return w
