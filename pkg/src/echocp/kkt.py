"""Symmetric indefinite KKT factorization with inertia.

SuperLU is run in symmetric mode with pure diagonal pivoting, so the
factorization is ``P A P^T = L U`` with ``U = D L^T``.  By Sylvester's law
of inertia the signs of ``diag(U)`` give the inertia of ``A``.  When
SuperLU departs from the symmetric permutation the inertia is recomputed
from a dense ``LDL^T`` (small systems) or reported as unknown.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

DENSE_INERTIA_LIMIT = 1500


class SingularKKT(RuntimeError):
    pass


def block_diagonal_inertia(D: np.ndarray) -> tuple[int, int, int]:
    """Inertia of the 1x1/2x2 block-diagonal factor of a Bunch-Kaufman LDL^T."""
    n = D.shape[0]
    tol = 1e-13 * max(1.0, float(np.abs(np.diag(D)).max(initial=0.0)))
    ev = []
    i = 0
    while i < n:
        if i + 1 < n and D[i + 1, i] != 0.0:
            ev.extend(np.linalg.eigvalsh(D[i:i + 2, i:i + 2]))
            i += 2
        else:
            ev.append(D[i, i])
            i += 1
    ev = np.asarray(ev)
    return int(np.sum(ev > tol)), int(np.sum(ev < -tol)), int(np.sum(np.abs(ev) <= tol))


class LDLFactor:
    """Factorization of a symmetric sparse matrix exposing its inertia."""

    def __init__(self, A: sp.spmatrix):
        A = sp.csc_matrix(A)
        self.shape = A.shape
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self._lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SingularKKT(str(exc)) from None
        d = self._lu.U.diagonal()
        if np.any(d == 0) or not np.all(np.isfinite(d)):
            raise SingularKKT("zero pivot")
        if np.array_equal(self._lu.perm_r, self._lu.perm_c):
            self.inertia = (int(np.sum(d > 0)), int(np.sum(d < 0)), 0)
        elif A.shape[0] <= DENSE_INERTIA_LIMIT:
            _, Dm, _ = la.ldl(A.toarray())
            self.inertia = block_diagonal_inertia(Dm)
        else:
            self.inertia = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        x = self._lu.solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SingularKKT("non-finite solution")
        return x

    def refined_solve(self, A: sp.spmatrix, b: np.ndarray, rtol: float = 1e-12, max_steps: int = 10):
        """Solve ``A x = b`` using this factor of a nearby matrix plus iterative refinement.

        Returns ``(x, relative residual)``.
        """
        b = np.asarray(b, dtype=float)
        scale = 1.0 + float(np.max(np.abs(b), initial=0.0))
        x = self.solve(b)
        res = np.inf
        for _ in range(max_steps):
            r = b - A @ x
            new = float(np.max(np.abs(r), initial=0.0)) / scale
            if new <= rtol or new >= 0.5 * res:
                res = min(res, new)
                break
            res = new
            x = x + self.solve(r)
        return x, res
