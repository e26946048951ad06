"""Block-structured nonlinear programs and a primal-dual interior-point solver.

A problem is a set of *blocks*. A block is a small expression graph over local
variable, parameter and data symbols, instantiated ``K`` times with index maps
into the global variable and parameter vectors. The objective is the sum of
all objective-block outputs; equality blocks contribute rows ``c(x, p) = 0``;
inequality blocks contribute rows ``c(x, p) <= 0``. Derivatives of each block
(Jacobian, Lagrangian Hessian, parameter Jacobian) are generated once and
evaluated for all instances with vectorized numpy code.

The solver follows the primal-dual barrier approach with a filter line search
and inertia correction of the condensed KKT system.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lapack

from . import autodiff as ad

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"
DIVERGED = "diverged"


class ContractViolation(RuntimeError):
    """Raised when an operation is used outside its precondition."""


# ---------------------------------------------------------------------------
# problem definition


class Block:
    """``K`` instances of a small expression graph.

    Parameters
    ----------
    outputs
        Scalar expressions evaluated per instance.
    variables, parameters, data
        Local symbols. Variables and parameters are mapped to global indices
        through ``var_index`` (K, nv) and ``par_index`` (K, np); data symbols
        take fixed per-instance values from ``data`` (nd, K).
    """

    def __init__(
        self,
        outputs: Sequence[ad.Expr],
        variables: Sequence[ad.Expr],
        var_index,
        parameters: Sequence[ad.Expr] = (),
        par_index=None,
        data: Sequence[ad.Expr] = (),
        data_values=None,
        name: str = "block",
    ):
        self.name = name
        self.outputs = list(outputs)
        self.variables = list(variables)
        self.parameters = list(parameters)
        self.data_symbols = list(data)
        self.var_index = np.atleast_2d(np.asarray(var_index, dtype=np.intp))
        self.K = self.var_index.shape[0]
        if self.var_index.shape[1] != len(self.variables):
            raise ValueError(f"{name}: var_index has {self.var_index.shape[1]} columns, expected {len(self.variables)}")
        if par_index is None:
            par_index = np.zeros((self.K, 0), dtype=np.intp)
        self.par_index = np.asarray(par_index, dtype=np.intp).reshape(self.K, len(self.parameters))
        if data_values is None:
            data_values = np.zeros((0, self.K))
        self.data_values = np.asarray(data_values, dtype=float).reshape(len(self.data_symbols), self.K)
        self.n_out = len(self.outputs)
        self._compiled = False

    @property
    def n_rows(self) -> int:
        return self.K * self.n_out

    def compile(self) -> None:
        """Build derivative graphs and generate their evaluators (once)."""
        if self._compiled:
            return
        v, p, d = self.variables, self.parameters, self.data_symbols
        nv = len(v)
        weights = ad.symbols(f"{self.name}.w", self.n_out)
        jac = [g for row in ad.jacobian(self.outputs, v) for g in row]
        pjac = [g for row in ad.jacobian(self.outputs, p) for g in row]
        lagr = None
        for w, o in zip(weights, self.outputs):
            lagr = w * o if lagr is None else lagr + w * o
        hess = ad.hessian(lagr, v, lower_only=True) if lagr is not None else []
        self._tril = [(i, j) for i in range(nv) for j in range(i + 1)]
        hess_flat = [hess[i][j] for i, j in self._tril]
        inputs = [v, p, d]
        self._f = ad.compile_function(inputs, self.outputs, f"{self.name}_f")
        self._jac = ad.compile_function(inputs, jac, f"{self.name}_jac")
        self._pjac = ad.compile_function(inputs, pjac, f"{self.name}_pjac")
        self._hess = ad.compile_function(inputs + [weights], hess_flat, f"{self.name}_hess")
        self._compiled = True

    def prepare(self, n_var: int, row_offset: int) -> None:
        """Precompute global scatter indices."""
        K, nv, no = self.K, len(self.variables), self.n_out
        rows = row_offset + np.arange(K)[:, None] * no + np.arange(no)[None, :]  # (K, no)
        self.rows = rows
        # jacobian entries ordered (K, no, nv)
        self._jac_rows = np.repeat(rows[:, :, None], nv, axis=2)
        self._jac_cols = np.repeat(self.var_index[:, None, :], no, axis=1)
        ii = np.array([i for i, _ in self._tril], dtype=np.intp)
        jj = np.array([j for _, j in self._tril], dtype=np.intp)
        gi, gj = self.var_index[:, ii], self.var_index[:, jj]  # (K, ntril)
        off = (ii != jj)[None, :]
        self._hess_flat_a = (gi * n_var + gj).ravel()
        self._hess_flat_b = np.where(off, gj * n_var + gi, -1).ravel()

    def _inputs(self, x: np.ndarray, p: np.ndarray):
        return x[self.var_index].T, p[self.par_index].T, self.data_values

    def values(self, x, p) -> np.ndarray:
        """Outputs as (K, n_out)."""
        return self._f(*self._inputs(x, p)).T

    def jac_entries(self, x, p) -> np.ndarray:
        """Local Jacobian as (K, n_out, nv)."""
        raw = self._jac(*self._inputs(x, p))  # (no*nv, K)
        return raw.T.reshape(self.K, self.n_out, len(self.variables))

    def par_jac(self, x, p) -> np.ndarray:
        raw = self._pjac(*self._inputs(x, p))
        return raw.T.reshape(self.K, self.n_out, len(self.parameters))

    def hess_entries(self, x, p, w) -> np.ndarray:
        """Lower-triangle Hessian entries of ``sum(w * outputs)`` as (K, ntril)."""
        raw = self._hess(*self._inputs(x, p), np.asarray(w).reshape(self.K, self.n_out).T)
        return raw.T


class NlpProblem:
    """min f(x, p) s.t. c_eq(x, p) = 0, c_ineq(x, p) <= 0, lbx <= x <= ubx."""

    def __init__(self, n_var: int, n_par: int = 0, lbx=None, ubx=None):
        self.n_var = int(n_var)
        self.n_par = int(n_par)
        self.lbx = np.full(self.n_var, -np.inf) if lbx is None else np.asarray(lbx, dtype=float).copy()
        self.ubx = np.full(self.n_var, np.inf) if ubx is None else np.asarray(ubx, dtype=float).copy()
        if np.any(self.lbx > self.ubx):
            raise ValueError("lower bounds exceed upper bounds")
        self.objective: list[Block] = []
        self.equalities: list[Block] = []
        self.inequalities: list[Block] = []
        self._ready = False

    @classmethod
    def from_expressions(
        cls,
        variables: Sequence[ad.Expr],
        objective: ad.Expr,
        equalities: Sequence[ad.Expr] = (),
        inequalities: Sequence[ad.Expr] = (),
        parameters: Sequence[ad.Expr] = (),
        lbx=None,
        ubx=None,
    ) -> "NlpProblem":
        """Single-instance problem from plain expressions."""
        n, m = len(variables), len(parameters)
        prob = cls(n, m, lbx, ubx)
        vi, pi = np.arange(n)[None, :], np.arange(m)[None, :]
        prob.add_objective(Block([ad._wrap(objective)], variables, vi, parameters, pi, name="obj"))
        if equalities:
            prob.add_equality(Block([ad._wrap(e) for e in equalities], variables, vi, parameters, pi, name="eq"))
        if inequalities:
            prob.add_inequality(Block([ad._wrap(e) for e in inequalities], variables, vi, parameters, pi, name="ineq"))
        return prob

    def add_objective(self, block: Block) -> None:
        if block.n_out != 1:
            raise ValueError("objective blocks must have a single output")
        self._check(block)
        self.objective.append(block)

    def add_equality(self, block: Block) -> None:
        self._check(block)
        self.equalities.append(block)

    def add_inequality(self, block: Block) -> None:
        self._check(block)
        self.inequalities.append(block)

    def _check(self, block: Block) -> None:
        if self._ready:
            raise RuntimeError("problem is already finalized")
        if block.var_index.size and (block.var_index.min() < 0 or block.var_index.max() >= self.n_var):
            raise ValueError(f"{block.name}: variable index out of range")
        if block.par_index.size and (block.par_index.min() < 0 or block.par_index.max() >= self.n_par):
            raise ValueError(f"{block.name}: parameter index out of range")

    def finalize(self) -> None:
        """Compile all blocks. Called automatically by the solver."""
        if self._ready:
            return
        for group in (self.objective, self.equalities, self.inequalities):
            off = 0
            for b in group:
                b.compile()
                b.prepare(self.n_var, off)
                off += b.n_rows
        self.m_eq = sum(b.n_rows for b in self.equalities)
        self.m_ineq = sum(b.n_rows for b in self.inequalities)
        self._ready = True

    # -- evaluation ---------------------------------------------------------

    def f(self, x, p) -> float:
        return float(sum(b.values(x, p).sum() for b in self.objective))

    def grad_f(self, x, p) -> np.ndarray:
        g = np.zeros(self.n_var)
        for b in self.objective:
            np.add.at(g, b.var_index, b.jac_entries(x, p)[:, 0, :])
        return g

    @staticmethod
    def _constraints(blocks, m, x, p) -> np.ndarray:
        if m == 0:
            return np.zeros(0)
        return np.concatenate([b.values(x, p).ravel() for b in blocks])

    def c_eq(self, x, p) -> np.ndarray:
        return self._constraints(self.equalities, self.m_eq, x, p)

    def c_ineq(self, x, p) -> np.ndarray:
        return self._constraints(self.inequalities, self.m_ineq, x, p)

    def _jac(self, blocks, m, x, p) -> np.ndarray:
        n = self.n_var
        if m == 0:
            return np.zeros((0, n))
        idx, vals = [], []
        for b in blocks:
            idx.append((b._jac_rows * n + b._jac_cols).ravel())
            vals.append(b.jac_entries(x, p).ravel())
        return np.bincount(np.concatenate(idx), np.concatenate(vals), minlength=m * n).reshape(m, n)

    def jac_eq(self, x, p) -> np.ndarray:
        return self._jac(self.equalities, self.m_eq, x, p)

    def jac_ineq(self, x, p) -> np.ndarray:
        return self._jac(self.inequalities, self.m_ineq, x, p)

    def hess_lagrangian(self, x, p, obj_factor: float, lam_eq, lam_ineq) -> np.ndarray:
        n = self.n_var
        idx, vals = [], []

        def collect(b, w):
            h = b.hess_entries(x, p, w).ravel()
            idx.append(b._hess_flat_a)
            vals.append(h)
            mask = b._hess_flat_b >= 0
            idx.append(b._hess_flat_b[mask])
            vals.append(h[mask])

        for b in self.objective:
            collect(b, np.full(b.K, obj_factor))
        for blocks, lam in ((self.equalities, lam_eq), (self.inequalities, lam_ineq)):
            for b in blocks:
                collect(b, lam[b.rows.ravel()])
        if not idx:
            return np.zeros((n, n))
        return np.bincount(np.concatenate(idx), np.concatenate(vals), minlength=n * n).reshape(n, n)

    def lagrangian_par_gradient(self, x, p, lam_eq, lam_ineq) -> np.ndarray:
        g = np.zeros(self.n_par)
        for b in self.objective:
            if b.parameters:
                np.add.at(g, b.par_index, b.par_jac(x, p)[:, 0, :])
        for blocks, lam in ((self.equalities, lam_eq), (self.inequalities, lam_ineq)):
            for b in blocks:
                if not b.parameters:
                    continue
                pj = b.par_jac(x, p)  # (K, no, np)
                w = lam[b.rows]  # (K, no)
                np.add.at(g, b.par_index, np.einsum("ko,kop->kp", w, pj))
        return g


# ---------------------------------------------------------------------------
# solution


@dataclass
class NlpSolution:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    f: float
    status: str
    iterations: int
    stationarity: float
    primal_infeasibility: float
    complementarity: float
    slack: np.ndarray = field(repr=False, default=None)
    lam_lbx: np.ndarray = field(repr=False, default=None)
    lam_ubx: np.ndarray = field(repr=False, default=None)
    mu: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    mu_init: float = 0.1
    bound_push: float = 1e-2
    warm_mu_init: float = 1e-6
    warm_bound_push: float = 1e-8
    kappa_eps: float = 10.0
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    tau_min: float = 0.99
    s_max: float = 100.0
    max_step_failures: int = 15


# line-search / filter constants
_GAMMA_THETA = 1e-5
_GAMMA_PHI = 1e-8
_ETA_PHI = 1e-8
_DELTA = 1.0
_S_THETA = 1.1
_S_PHI = 2.3
_KAPPA_SIGMA = 1e10
_TINY_STEP = 10 * np.finfo(float).eps


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def _ruiz_scaling(K: np.ndarray, iters: int = 10) -> np.ndarray:
    """Diagonal ``S`` such that ``S K S`` has rows of unit infinity norm (approximately)."""
    S = np.ones(K.shape[0])
    A = np.abs(K)
    for _ in range(iters):
        r = np.max(S[:, None] * A * S[None, :], axis=1)
        r[r == 0.0] = 1.0
        if np.all(np.abs(r - 1.0) < 1e-2):
            break
        S /= np.sqrt(r)
    return S


def _ldl_inertia(K: np.ndarray):
    """Bunch-Kaufman factorization and inertia (n_pos, n_neg, n_zero)."""
    lu, ipiv, info = lapack.dsytrf(K, lower=0)
    n = K.shape[0]
    pos = neg = zero = 0
    scale = max(1.0, float(np.max(np.abs(np.diag(lu)))) if n else 1.0)
    k = 0
    while k < n:
        if ipiv[k] > 0:
            d = lu[k, k]
            if abs(d) <= 1e-13 * scale:
                zero += 1
            elif d > 0:
                pos += 1
            else:
                neg += 1
            k += 1
        else:
            a, b, c = lu[k, k], lu[k, k + 1], lu[k + 1, k + 1]
            det = a * c - b * b
            tr = a + c
            if abs(det) <= 1e-26 * scale * scale:
                zero += 1
                if tr > 0:
                    pos += 1
                else:
                    neg += 1
            elif det < 0:
                pos += 1
                neg += 1
            elif tr > 0:
                pos += 2
            else:
                neg += 2
            k += 2
    return lu, ipiv, info, (pos, neg, zero)


class InteriorPointSolver:
    """Primal-dual barrier method for an :class:`NlpProblem`.

    Holds only mutable per-solve workspace; one instance per concurrent solve.
    """

    def __init__(self, problem: NlpProblem, options: SolverOptions | None = None):
        problem.finalize()
        self.prob = problem
        self.opts = options or SolverOptions()
        lb, ub = problem.lbx, problem.ubx
        self.has_lb = np.isfinite(lb)
        self.has_ub = np.isfinite(ub)
        self._delta_w_last = 0.0

    # -- helpers ----------------------------------------------------------

    def _project(self, x, push):
        lb, ub = self.prob.lbx, self.prob.ubx
        both = self.has_lb & self.has_ub
        width = np.where(both, ub - lb, np.inf)
        pl = np.minimum(push * np.maximum(1.0, np.abs(np.where(self.has_lb, lb, 0.0))), push * width)
        pu = np.minimum(push * np.maximum(1.0, np.abs(np.where(self.has_ub, ub, 0.0))), push * width)
        lo = np.where(self.has_lb, lb + pl, -np.inf)
        hi = np.where(self.has_ub, ub - pu, np.inf)
        return np.clip(x, lo, hi)

    def _slacks(self, x):
        lb, ub = self.prob.lbx, self.prob.ubx
        return np.where(self.has_lb, x - lb, 1.0), np.where(self.has_ub, ub - x, 1.0)

    def _barrier(self, f, x, s, mu):
        sl, su = self._slacks(x)
        return (
            f
            - mu * np.sum(np.log(sl[self.has_lb]))
            - mu * np.sum(np.log(su[self.has_ub]))
            - mu * np.sum(np.log(s))
        )

    def _eval(self, x, s, p):
        prob = self.prob
        with np.errstate(all="ignore"):
            f = prob.f(x, p)
            ce = prob.c_eq(x, p)
            ci = prob.c_ineq(x, p)
        ok = math.isfinite(f) and np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))
        return f, ce, ci, ok

    # -- main entry ---------------------------------------------------------

    def solve(self, p, x0, warm: NlpSolution | None = None) -> NlpSolution:
        prob, opts = self.prob, self.opts
        n, me, mi = prob.n_var, prob.m_eq, prob.m_ineq
        p = np.asarray(p, dtype=float).ravel()
        if p.size != prob.n_par:
            raise ValueError(f"expected {prob.n_par} parameters, got {p.size}")
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.size != n or not np.all(np.isfinite(x0)):
            raise ValueError("initial guess must be finite with one entry per variable")

        has_lb, has_ub = self.has_lb, self.has_ub
        if warm is not None:
            mu = opts.warm_mu_init
            x = self._project(x0, opts.warm_bound_push)
            y_e = np.array(warm.lam_eq, dtype=float) if warm.lam_eq is not None and warm.lam_eq.size == me else np.zeros(me)
            y_i = np.array(warm.lam_ineq, dtype=float) if warm.lam_ineq is not None and warm.lam_ineq.size == mi else np.zeros(mi)
            z_l = np.where(has_lb, warm.lam_lbx if warm.lam_lbx is not None else 1.0, 0.0)
            z_u = np.where(has_ub, warm.lam_ubx if warm.lam_ubx is not None else 1.0, 0.0)
            s_init = warm.slack
        else:
            mu = opts.mu_init
            x = self._project(x0, opts.bound_push)
            y_e, y_i = np.zeros(me), np.zeros(mi)
            z_l = np.where(has_lb, 1.0, 0.0)
            z_u = np.where(has_ub, 1.0, 0.0)
            s_init = None

        f, ce, ci, ok = self._eval(x, None, p)
        if not ok:
            return self._fail(x, np.zeros(mi), y_e, y_i, z_l, z_u, f, DIVERGED, 0, mu)
        push = opts.warm_bound_push if warm is not None else opts.bound_push
        floor = push * np.maximum(1.0, np.abs(ci))
        if s_init is not None and s_init.size == mi:
            s = np.maximum(np.maximum(-ci, s_init), floor)
        else:
            s = np.maximum(-ci, floor)
        if warm is not None:
            y_i = np.maximum(y_i, mu / s)
            sl, su = self._slacks(x)
            z_l = np.where(has_lb, np.maximum(z_l, mu / sl), 0.0)
            z_u = np.where(has_ub, np.maximum(z_u, mu / su), 0.0)
        z_s = y_i.copy() if warm is not None else np.ones(mi)

        g = prob.grad_f(x, p)
        Je = prob.jac_eq(x, p)
        Ji = prob.jac_ineq(x, p)

        theta0 = self._theta(ce, ci, s)
        theta_max = 1e4 * max(1.0, theta0)
        theta_min = 1e-4 * max(1.0, theta0)
        filt: list[tuple[float, float]] = []
        failures = 0
        it = 0
        res = None
        while True:
            res = self._residuals(g, Je, Ji, ce, ci, x, s, y_e, y_i, z_l, z_u, z_s, 0.0)
            if res["ok"] <= opts.tol:
                return self._finish(x, s, y_e, y_i, z_l, z_u, f, OPTIMAL, it, res, mu)
            if it >= opts.max_iter:
                return self._finish(x, s, y_e, y_i, z_l, z_u, f, MAX_ITER, it, res, mu)

            # barrier parameter update
            while True:
                e_mu = self._residuals(g, Je, Ji, ce, ci, x, s, y_e, y_i, z_l, z_u, z_s, mu)["scaled"]
                if e_mu > opts.kappa_eps * mu or mu <= opts.tol / 10.0 + 1e-300:
                    break
                mu = max(opts.tol / 10.0, min(opts.kappa_mu * mu, mu**opts.theta_mu))
                filt = []
            tau = max(opts.tau_min, 1.0 - mu)

            W = prob.hess_lagrangian(x, p, 1.0, y_e, y_i)
            step = self._newton_step(W, g, Je, Ji, ce, ci, x, s, y_e, y_i, z_l, z_u, z_s, mu)
            if step is None:
                return self._finish(x, s, y_e, y_i, z_l, z_u, f, DIVERGED, it, res, mu)
            dx, ds, dye, dyi, dzl, dzu, dzs = step

            sl, su = self._slacks(x)
            a_max = min(
                _fraction_to_boundary(sl[has_lb], dx[has_lb], tau),
                _fraction_to_boundary(su[has_ub], -dx[has_ub], tau),
                _fraction_to_boundary(s, ds, tau),
            )
            a_z = min(
                _fraction_to_boundary(z_l[has_lb], dzl[has_lb], tau),
                _fraction_to_boundary(z_u[has_ub], dzu[has_ub], tau),
                _fraction_to_boundary(z_s, dzs, tau),
            )

            theta = self._theta(ce, ci, s)
            phi = self._barrier(f, x, s, mu)
            gphi_x = g - mu * np.where(has_lb, 1.0 / sl, 0.0) + mu * np.where(has_ub, 1.0 / su, 0.0)
            dphi = float(gphi_x @ dx - mu * np.sum(ds / s)) if mi else float(gphi_x @ dx)

            alpha = a_max
            accepted = False
            a_min = self._alpha_min(theta, theta_min, dphi) * a_max
            # from a feasible point, a merit change below rounding cannot be judged; take the step whole
            tiny = theta <= opts.tol and abs(dphi) * a_max <= _TINY_STEP * max(1.0, abs(phi))
            if tiny:
                xt, st = x + alpha * dx, s + alpha * ds
                ft, cet, cit, accepted = self._eval(xt, st, p)
            while not accepted and alpha >= a_min:
                xt = x + alpha * dx
                st = s + alpha * ds
                ft, cet, cit, okt = self._eval(xt, st, p)
                if okt:
                    tht = self._theta(cet, cit, st)
                    with np.errstate(all="ignore"):
                        pht = self._barrier(ft, xt, st, mu)
                    if math.isfinite(pht) and tht <= theta_max and not self._in_filter(filt, tht, pht):
                        switching = dphi < 0 and alpha * (-dphi) ** _S_PHI > _DELTA * theta**_S_THETA
                        if theta <= theta_min and switching:
                            if pht <= phi + _ETA_PHI * alpha * dphi:
                                accepted = True
                                break
                        elif tht <= (1 - _GAMMA_THETA) * theta or pht <= phi - _GAMMA_PHI * theta:
                            filt.append(((1 - _GAMMA_THETA) * theta, phi - _GAMMA_PHI * theta))
                            accepted = True
                            break
                alpha *= 0.5
            if not accepted:
                failures += 1
                if failures > opts.max_step_failures:
                    status = INFEASIBLE if theta > opts.tol else DIVERGED
                    return self._finish(x, s, y_e, y_i, z_l, z_u, f, status, it, res, mu)
                # take a short step anyway and restart the filter
                alpha = a_max * 1e-2
                xt, st = x + alpha * dx, s + alpha * ds
                ft, cet, cit, okt = self._eval(xt, st, p)
                if not okt:
                    return self._finish(x, s, y_e, y_i, z_l, z_u, f, DIVERGED, it, res, mu)
                filt = []
            else:
                failures = 0

            x, s = xt, st
            f, ce, ci = ft, cet, cit
            y_e = y_e + alpha * dye
            y_i = y_i + alpha * dyi
            z_l = z_l + a_z * dzl
            z_u = z_u + a_z * dzu
            z_s = z_s + a_z * dzs
            # keep bound multipliers close to the central path
            sl, su = self._slacks(x)
            z_l = np.where(has_lb, np.clip(z_l, mu / (_KAPPA_SIGMA * sl), _KAPPA_SIGMA * mu / sl), 0.0)
            z_u = np.where(has_ub, np.clip(z_u, mu / (_KAPPA_SIGMA * su), _KAPPA_SIGMA * mu / su), 0.0)
            if mi:
                z_s = np.clip(z_s, mu / (_KAPPA_SIGMA * s), _KAPPA_SIGMA * mu / s)
            g = prob.grad_f(x, p)
            Je = prob.jac_eq(x, p)
            Ji = prob.jac_ineq(x, p)
            it += 1

    # -- pieces -----------------------------------------------------------

    @staticmethod
    def _theta(ce, ci, s) -> float:
        return float(np.sum(np.abs(ce)) + np.sum(np.abs(ci + s)))

    @staticmethod
    def _in_filter(filt, theta, phi) -> bool:
        return any(theta >= ft and phi >= fp for ft, fp in filt)

    @staticmethod
    def _alpha_min(theta, theta_min, dphi) -> float:
        a = _GAMMA_THETA
        if dphi < 0:
            a = min(a, _GAMMA_PHI * theta / -dphi)
            if theta <= theta_min:
                a = min(a, _DELTA * theta**_S_THETA / (-dphi) ** _S_PHI)
        return max(0.05 * a, 1e-12)

    def _residuals(self, g, Je, Ji, ce, ci, x, s, y_e, y_i, z_l, z_u, z_s, mu):
        opts = self.opts
        rx = g + Je.T @ y_e + Ji.T @ y_i - z_l + z_u
        rs = y_i - z_s
        stat = max(np.max(np.abs(rx), initial=0.0), np.max(np.abs(rs), initial=0.0))
        primal = max(np.max(np.abs(ce), initial=0.0), np.max(np.abs(ci + s), initial=0.0))
        sl, su = self._slacks(x)
        comp = max(
            np.max(np.abs((sl * z_l - mu)[self.has_lb]), initial=0.0),
            np.max(np.abs((su * z_u - mu)[self.has_ub]), initial=0.0),
            np.max(np.abs(s * z_s - mu), initial=0.0),
        )
        n_mult = y_e.size + y_i.size
        n_z = int(self.has_lb.sum() + self.has_ub.sum()) + z_s.size
        s_d = max(opts.s_max, (np.sum(np.abs(y_e)) + np.sum(np.abs(y_i)) + np.sum(np.abs(z_l)) + np.sum(np.abs(z_u)) + np.sum(np.abs(z_s))) / max(1, n_mult + n_z)) / opts.s_max
        s_c = max(opts.s_max, (np.sum(np.abs(z_l)) + np.sum(np.abs(z_u)) + np.sum(np.abs(z_s))) / max(1, n_z)) / opts.s_max
        # unscaled complementarity: the optimality test is the unscaled max
        return {
            "stationarity": stat / s_d,
            "primal": primal,
            "complementarity": comp,
            "scaled": max(stat / s_d, primal, comp / s_c),
            "ok": max(stat / s_d, primal, comp),
        }

    def _newton_step(self, W, g, Je, Ji, ce, ci, x, s, y_e, y_i, z_l, z_u, z_s, mu):
        n, me, mi = self.prob.n_var, Je.shape[0], Ji.shape[0]
        has_lb, has_ub = self.has_lb, self.has_ub
        sl, su = self._slacks(x)
        sig_x = np.where(has_lb, z_l / sl, 0.0) + np.where(has_ub, z_u / su, 0.0)
        sig_s = z_s / s if mi else np.zeros(0)
        r_x = g + Je.T @ y_e + Ji.T @ y_i - mu * np.where(has_lb, 1.0 / sl, 0.0) + mu * np.where(has_ub, 1.0 / su, 0.0)
        r_s = y_i - mu / s if mi else np.zeros(0)

        delta_w, delta_c = 0.0, 0.0
        first = True
        for _attempt in range(60):
            D = 1.0 / (sig_s + delta_w) if mi else np.zeros(0)
            E = 1.0 / (D + delta_c) if mi else np.zeros(0)
            b_i = ci + s - D * r_s
            A = W + np.diag(sig_x + delta_w)
            rhs_x = -r_x
            if mi:
                A = A + Ji.T @ (E[:, None] * Ji)
                rhs_x = rhs_x - Ji.T @ (E * b_i)
            K = np.empty((n + me, n + me))
            K[:n, :n] = A
            K[:n, n:] = Je.T
            K[n:, :n] = Je
            K[n:, n:] = -delta_c * np.eye(me)
            # equilibration keeps the inertia (Sylvester) and makes pivot thresholds meaningful
            S = _ruiz_scaling(K)
            Ks = S[:, None] * K * S[None, :]
            lu, ipiv, info, (pos, neg, zero) = _ldl_inertia(np.asfortranarray(Ks))
            if info >= 0 and pos == n and neg == me and zero == 0:
                rhs = np.concatenate([rhs_x, -ce])
                sol, info2 = lapack.dsytrs(lu, ipiv, S * rhs, lower=0)
                sol = S * sol
                # a large residual means the factorization was numerically singular
                ok = info2 == 0 and np.all(np.isfinite(sol))
                if ok:
                    resid = np.max(np.abs(S * (K @ sol - rhs)), initial=0.0)
                    ok = resid <= 1e-6 * max(1.0, np.max(np.abs(S * rhs), initial=0.0))
                if ok:
                    if delta_w > 0:
                        self._delta_w_last = delta_w
                    dx, dye = sol[:n], sol[n:]
                    if mi:
                        dyi = E * (Ji @ dx + b_i)
                        ds = -D * (r_s + dyi)
                    else:
                        dyi = ds = np.zeros(0)
                    dzl = np.where(has_lb, mu / sl - z_l - (z_l / sl) * dx, 0.0)
                    dzu = np.where(has_ub, mu / su - z_u + (z_u / su) * dx, 0.0)
                    dzs = mu / s - z_s - sig_s * ds if mi else np.zeros(0)
                    return dx, ds, dye, dyi, dzl, dzu, dzs
            if (zero > 0 or (pos == n and neg == me)) and delta_c == 0.0 and me > 0:
                delta_c = 1e-8 * mu**0.25
                continue
            if first:
                delta_w = 1e-4 if self._delta_w_last == 0 else max(1e-20, self._delta_w_last / 3.0)
                first = False
            else:
                delta_w *= 8.0 if self._delta_w_last else 100.0
            if delta_w > 1e40:
                break
        return None

    def _finish(self, x, s, y_e, y_i, z_l, z_u, f, status, it, res, mu):
        return NlpSolution(
            x=x.copy(),
            lam_eq=y_e.copy(),
            lam_ineq=np.maximum(y_i, 0.0),
            f=float(f),
            status=status,
            iterations=it,
            stationarity=float(res["stationarity"]),
            primal_infeasibility=float(res["primal"]),
            complementarity=float(res["complementarity"]),
            slack=s.copy(),
            lam_lbx=z_l.copy(),
            lam_ubx=z_u.copy(),
            mu=mu,
        )

    def _fail(self, x, s, y_e, y_i, z_l, z_u, f, status, it, mu):
        nan = float("nan")
        return self._finish(x, s, y_e, y_i, z_l, z_u, f, status, it, {"stationarity": nan, "primal": nan, "complementarity": nan}, mu)


def solve_nlp(problem: NlpProblem, p=(), x0=None, options: SolverOptions | None = None, warm: NlpSolution | None = None) -> NlpSolution:
    """Solve ``problem`` at parameter values ``p`` from ``x0`` (or a warm start)."""
    problem.finalize()
    if x0 is None:
        x0 = warm.x if warm is not None else np.zeros(problem.n_var)
    return InteriorPointSolver(problem, options).solve(p, x0, warm)


def parametric_value_gradient(problem: NlpProblem, solution: NlpSolution, p) -> np.ndarray:
    """Gradient of the optimal value w.r.t. the parameters.

    Computed as the parameter gradient of the Lagrangian at the stored
    primal-dual optimum; bounds on ``x`` do not depend on ``p`` and drop out.
    """
    if solution.status != OPTIMAL:
        raise ContractViolation(f"sensitivity requires an optimal solution, got {solution.status!r}")
    problem.finalize()
    return problem.lagrangian_par_gradient(solution.x, np.asarray(p, dtype=float), solution.lam_eq, solution.lam_ineq)
