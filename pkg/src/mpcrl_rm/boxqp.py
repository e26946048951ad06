"""Strictly convex quadratic programs with box constraints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.optimize import lsq_linear


class IndefiniteHessianError(LinAlgError):
    """The QP matrix is not positive definite; regularize it before solving."""


@dataclass
class BoxQp:
    """``min 0.5 x'Hx + g'x`` subject to ``lb <= x <= ub``."""

    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        n = self.g.size
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(self.H).max())):
            raise ValueError("H must be symmetric")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bounds exceed upper bounds")

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def kkt_residual(self, x) -> float:
        """Infinity norm of the diagonally scaled projected gradient ``x - P(x - grad / diag(H))``.

        The diagonal scaling keeps the residual in the units of ``x`` whatever
        the magnitude of ``H``.
        """
        grad = (self.H @ x + self.g) / np.maximum(np.diag(self.H), 1e-300)
        return float(np.max(np.abs(x - np.clip(x - grad, self.lb, self.ub)), initial=0.0))


def solve_box_qp(qp: BoxQp, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Exact minimizer by bounded-variable least squares.

    With ``H = R'R`` the QP equals ``min 0.5 ||R x + R^{-T} g||^2`` over the box,
    which the BVLS active-set method solves in finitely many steps. A Jacobi
    scaling to unit diagonal is applied first so that badly scaled Gauss-Newton
    matrices keep a well-conditioned factor.
    """
    n = qp.g.size
    if n == 0:
        return np.zeros(0)
    S = 1.0 / np.sqrt(np.maximum(np.diag(qp.H), 1e-300))
    Hs = S[:, None] * qp.H * S[None, :]
    try:
        R = cholesky(Hs, lower=False)
    except LinAlgError as exc:
        raise IndefiniteHessianError("H is not positive definite; add a diagonal shift first") from exc
    b = -solve_triangular(R, S * qp.g, trans="T", lower=False)
    lb, ub = qp.lb / S, qp.ub / S
    fixed = lb == ub
    if fixed.all():
        return qp.lb.copy()
    # scipy's default of n iterations is too few when many bounds switch
    res = lsq_linear(R, b, bounds=(lb, ub), method="bvls", tol=1e-14, max_iter=max_iter or 20 * n + 100, lsmr_tol=None)
    x = _polish(qp, np.clip(S * res.x, qp.lb, qp.ub))
    kkt = qp.kkt_residual(x)
    if kkt > tol * max(1.0, np.abs(x).max()):
        raise RuntimeError(f"box QP did not converge (KKT residual {kkt:.3g})")
    return x


def _polish(qp: BoxQp, x: np.ndarray, sweeps: int = 3) -> np.ndarray:
    """Iterative refinement of the free variables with the active set held fixed."""
    H, g = qp.H, qp.g
    for _ in range(sweeps):
        free = (x > qp.lb) & (x < qp.ub)
        if not free.any():
            break
        r = -(H @ x + g)[free]
        HF = H[np.ix_(free, free)]
        d = np.linalg.solve(HF, r)
        y = x.copy()
        y[free] = np.clip(x[free] + d, qp.lb[free], qp.ub[free])
        if qp.kkt_residual(y) >= qp.kkt_residual(x):
            break
        x = y
    return x
