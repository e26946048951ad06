"""Parametric MPC used as the function approximator of V, Q and the policy.

The optimal control problem is built once as a block-structured
:class:`~mpcrl_rm.nlp.NlpProblem` whose parameter vector is::

    [theta | x_k | d_k | r_prev | q | a_pin]

so a single compiled problem serves every state, disturbance and parameter
value. Two copies exist: one with the first action free (V and the policy)
and one with the first action pinned (Q).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .metanet import MAINSTREAM, Disturbance, MetanetParams, NetworkTopology, TrafficState
from .nlp import (
    OPTIMAL,
    Block,
    NlpProblem,
    NlpSolution,
    SolverOptions,
    parametric_value_gradient,
    solve_nlp,
)

logger = logging.getLogger(__name__)

LEARNABLE_DYNAMICS = ("rho_crit", "a", "v_free")


class MpcConfigError(ValueError):
    pass


class DegradedResult(RuntimeError):
    """A derivative was requested from a solve that did not converge."""


@dataclass(frozen=True)
class HorizonConfig:
    Np: int = 24
    Nc: int = 3
    M: int = 6
    gamma: float = 0.98

    def __post_init__(self):
        if self.M < 1 or self.Np < 1 or self.Nc < 1:
            raise MpcConfigError("horizon lengths must be positive")
        if self.Nc > self.Np / self.M:
            raise MpcConfigError(f"Nc={self.Nc} exceeds Np/M={self.Np / self.M:g}")
        if not 0.0 < self.gamma <= 1.0:
            raise MpcConfigError("gamma must lie in (0, 1]")

    def control_index(self, i: int) -> int:
        """Control move applied at prediction step ``i``; the last move is held."""
        return min(i // self.M, self.Nc - 1)


@dataclass(frozen=True)
class FixedMpcConstants:
    """Non-learnable constants of the MPC objective and prediction model.

    ``rho_crit``, ``a`` and ``v_free`` are the prediction-model values used
    whenever the corresponding quantity is not learnable (and the initial
    values when it is). ``eps_flow`` and ``eps_rho`` set the smoothing of the
    min/max operators inside the prediction model; ``rho_offset`` keeps the
    equilibrium-speed power term away from zero density.
    """

    rho_sp: float = 23.45
    v_sp: float = 132.6
    rho_max: float = 180.0
    v_max: float = 132.6
    w_max: float = 50.0
    rho_crit: float = 23.45
    a: float = 2.4271
    v_free: float = 132.6
    eps_flow: float = 10.0
    eps_rho: float = 0.1
    rho_offset: float = 1e-3

    @classmethod
    def mismatched(cls, p: MetanetParams, rho_crit_factor: float = 0.7, a_factor: float = 1.3, v_free_factor: float = 1.3) -> "FixedMpcConstants":
        rc, vf = rho_crit_factor * p.rho_crit, v_free_factor * p.v_free
        return cls(rho_sp=rc, v_sp=vf, rho_max=p.rho_max, v_max=vf, w_max=p.w_max, rho_crit=rc, a=a_factor * p.a, v_free=vf)


@dataclass(frozen=True)
class AblationFlags:
    learnable: tuple[str, ...] = ("rho_crit", "a")
    track_learned_setpoints: bool = False

    def __post_init__(self):
        bad = set(self.learnable) - set(LEARNABLE_DYNAMICS)
        if bad:
            raise MpcConfigError(f"unknown learnable dynamics parameters {sorted(bad)}")
        if len(set(self.learnable)) != len(self.learnable):
            raise MpcConfigError("duplicate learnable dynamics parameters")


# ---------------------------------------------------------------------------
# parametrisation


@dataclass
class ThetaVector:
    """Learnable MPC parameters with names, bounds and group slices."""

    values: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    names: tuple[str, ...]
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        self.lb = np.asarray(self.lb, dtype=float).copy()
        self.ub = np.asarray(self.ub, dtype=float).copy()
        n = self.values.size
        if not (self.lb.size == self.ub.size == len(self.names) == n):
            raise MpcConfigError("theta values, bounds and names must have equal length")

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def default(
        cls,
        topo: NetworkTopology,
        horizon: HorizonConfig = HorizonConfig(),
        consts: FixedMpcConstants = FixedMpcConstants(),
        flags: AblationFlags = AblationFlags(),
    ) -> "ThetaVector":
        n, no, nc = topo.n_segments, topo.n_origins, len(topo.constrained_origins)
        spec = []
        dyn = {
            "rho_crit": (consts.rho_crit, 10.0, 162.0),
            "a": (consts.a, 1.1, 3.0),
            "v_free": (consts.v_free, 30.0, 300.0),
        }
        for name in LEARNABLE_DYNAMICS:
            if name in flags.learnable:
                spec.append((name, 1, *dyn[name]))
        spec += [
            ("theta_T", 1, 1.0, 1e-3, np.inf),
            ("theta_V", 1, 160000.0, 1e-3, np.inf),
            ("Theta_C", (horizon.Np + 1) * nc, 5.0, 1e-3, np.inf),
        ]
        for kind, lo in (("lambda", -np.inf), ("ell", 1e-6), ("Gamma", 1e-6)):
            spec += [(f"{kind}_rho", n, 1.0, lo, np.inf), (f"{kind}_v", n, 1.0, lo, np.inf), (f"{kind}_w", no, 1.0, lo, np.inf)]
        values, lb, ub, names, groups = [], [], [], [], {}
        for name, size, init, lo, hi in spec:
            groups[name] = slice(len(values), len(values) + size)
            values += [init] * size
            lb += [lo] * size
            ub += [hi] * size
            names += [name] if size == 1 else [f"{name}[{k}]" for k in range(size)]
        return cls(np.array(values), np.array(lb), np.array(ub), tuple(names), groups)

    def __getitem__(self, group: str) -> np.ndarray:
        return self.values[self.groups[group]]

    def with_values(self, values) -> "ThetaVector":
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.size} values, got {values.shape}")
        return ThetaVector(values, self.lb, self.ub, self.names, dict(self.groups))

    def copy(self) -> "ThetaVector":
        return self.with_values(self.values)

    def within_bounds(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= self.lb - tol) and np.all(self.values <= self.ub + tol))

    def to_dict(self) -> dict:
        return {name: float(v) for name, v in zip(self.names, self.values)}

    def load_dict(self, d: dict) -> "ThetaVector":
        vals = self.values.copy()
        index = {n: i for i, n in enumerate(self.names)}
        for name, v in d.items():
            if name in self.groups:
                vals[self.groups[name]] = v
            elif name in index:
                vals[index[name]] = v
            else:
                raise MpcConfigError(f"unknown theta entry {name!r}")
        return self.with_values(vals)


# ---------------------------------------------------------------------------
# problem construction


@dataclass
class ParameterLayout:
    n_theta: int
    n_x: int
    n_d: int
    n_u: int

    @property
    def x(self) -> slice:
        return slice(self.n_theta, self.n_theta + self.n_x)

    @property
    def d(self) -> slice:
        s = self.x.stop
        return slice(s, s + self.n_d)

    @property
    def r_prev(self) -> slice:
        s = self.d.stop
        return slice(s, s + self.n_u)

    @property
    def q(self) -> slice:
        s = self.r_prev.stop
        return slice(s, s + self.n_u)

    @property
    def a_pin(self) -> slice:
        s = self.q.stop
        return slice(s, s + self.n_u)

    @property
    def size(self) -> int:
        return self.a_pin.stop


@dataclass
class VariableLayout:
    n_x: int
    n_u: int
    n_sigma: int
    Np: int
    Nc: int

    def x(self, i: int) -> np.ndarray:
        return i * self.n_x + np.arange(self.n_x)

    def u(self, j: int) -> np.ndarray:
        return (self.Np + 1) * self.n_x + j * self.n_u + np.arange(self.n_u)

    def sigma(self, i: int) -> np.ndarray:
        return (self.Np + 1) * self.n_x + self.Nc * self.n_u + i * self.n_sigma + np.arange(self.n_sigma)

    @property
    def size(self) -> int:
        return (self.Np + 1) * (self.n_x + self.n_sigma) + self.Nc * self.n_u


class _Model:
    """Symbolic prediction model shared by all blocks."""

    def __init__(self, topo: NetworkTopology, p: MetanetParams, consts: FixedMpcConstants):
        self.topo, self.p, self.c = topo, p, consts

    def eq_speed(self, rho, rc, a, vf):
        c = self.c
        return vf * ad.exp(-ad.exp(a * ad.log((rho + c.rho_offset) / rc)) / a)

    def supply_ratio(self, rho, rc):
        return (self.p.rho_max - rho) / (self.p.rho_max - rc)

    def step(self, x, u, d, rc, a, vf):
        """Next-state expressions; ``x`` and ``d`` are lists, ``u`` the ramp flows."""
        topo, p, c = self.topo, self.p, self.c
        n, no = topo.n_segments, topo.n_origins
        rho, v, w = x[:n], x[n : 2 * n], x[2 * n :]
        dw, drho = d[:no], d[no:]
        T = p.T
        flows = [None] * no
        for k, o in enumerate(topo.controlled):
            flows[o] = u[k]
        upstream = ad.const(0.0)
        ramp_in = [ad.const(0.0)] * n
        for o, org in enumerate(topo.origins):
            if org.kind == MAINSTREAM:
                supply = ad.smooth_min(ad.const(org.capacity), org.capacity * self.supply_ratio(rho[org.segment], rc), c.eps_flow)
                flows[o] = ad.smooth_min(dw[o] + w[o] / T, supply, c.eps_flow)
                upstream = flows[o]
            else:
                ramp_in[org.segment] = ramp_in[org.segment] + flows[o]
        q = [topo.lanes[j] * rho[j] * v[j] for j in range(n)]
        down = ad.smooth_max(ad.smooth_min(rho[-1], rc, c.eps_rho), drho[0], c.eps_rho)
        rho_next, v_next = [], []
        for j in range(n):
            L, lam = topo.lengths[j], topo.lanes[j]
            q_up = upstream if j == 0 else q[j - 1]
            v_up = v[j] if j == 0 else v[j - 1]
            rho_dn = down if j == n - 1 else rho[j + 1]
            rho_next.append(rho[j] + T / (L * lam) * (q_up - q[j] + ramp_in[j]))
            vn = (
                v[j]
                + T / p.tau * (self.eq_speed(rho[j], rc, a, vf) - v[j])
                + T / L * v[j] * (v_up - v[j])
                - p.eta * T / (p.tau * L) * (rho_dn - rho[j]) / (rho[j] + p.kappa)
            )
            if not (ramp_in[j].is_const and ramp_in[j].value == 0.0):
                vn = vn - p.mu * T * ramp_in[j] * v[j] / (L * lam * (rho[j] + p.kappa))
            v_next.append(vn)
        w_next = [w[o] + T * (dw[o] - flows[o]) for o in range(no)]
        return rho_next + v_next + w_next


class ParametricMpc:
    """The parametric MPC problem and its V / Q evaluators.

    Parameters
    ----------
    topo, p
        Network and the model constants shared with the real process
        (``T``, ``tau``, ``eta``, ``kappa``, ``mu``, ``rho_max``).
    horizon, consts, flags
        Horizon, fixed constants and ablation flags.
    options
        Solver options for every solve.
    """

    def __init__(
        self,
        topo: NetworkTopology,
        p: MetanetParams,
        horizon: HorizonConfig = HorizonConfig(),
        consts: FixedMpcConstants | None = None,
        flags: AblationFlags = AblationFlags(),
        options: SolverOptions | None = None,
    ):
        self.topo, self.p, self.horizon = topo, p, horizon
        self.consts = consts or FixedMpcConstants.mismatched(p)
        self.flags = flags
        self.options = options or SolverOptions()
        self.theta0 = ThetaVector.default(topo, horizon, self.consts, flags)
        n_u = len(topo.controlled)
        if n_u == 0:
            raise MpcConfigError("the network has no controlled on-ramp")
        self.vars = VariableLayout(topo.n_states, n_u, len(topo.constrained_origins), horizon.Np, horizon.Nc)
        self.pars = ParameterLayout(len(self.theta0), topo.n_states, topo.n_origins + topo.n_destinations, n_u)
        self._model = _Model(topo, p, self.consts)
        self.problem_v = self._build(pin_action=False)
        self.problem_q = self._build(pin_action=True)
        self._predict = self._build_predictor()
        self._warm: NlpSolution | None = None

    # -- symbols ------------------------------------------------------------

    # -- construction -------------------------------------------------------

    def _build(self, pin_action: bool) -> NlpProblem:
        topo, hz, c, V, P = self.topo, self.horizon, self.consts, self.vars, self.pars
        nx, nu, ns, Np, Nc = V.n_x, V.n_u, V.n_sigma, V.Np, V.Nc
        n, no = topo.n_segments, topo.n_origins
        lbx = np.full(V.size, -np.inf)
        ubx = np.full(V.size, np.inf)
        for i in range(1, Np + 1):
            lbx[V.x(i)[:n]] = 0.0
        caps = np.array([topo.origins[o].capacity for o in topo.controlled])
        for j in range(Nc):
            lbx[V.u(j)] = 0.0
            ubx[V.u(j)] = caps
        for i in range(Np + 1):
            lbx[V.sigma(i)] = 0.0
        prob = NlpProblem(V.size, P.size, lbx, ubx)
        model = self._model

        # dynamics x_{i+1} - f(x_i, u_ic(i), d) = 0
        xs, xn, us = ad.symbols("x", nx), ad.symbols("xn", nx), ad.symbols("u", nu)
        ds = ad.symbols("d", P.n_d)
        dyn_syms = ad.symbols("dyn", 3)
        th_dyn, th_dyn_idx = self._dyn_params_symbols(dyn_syms)
        f = model.step(xs, us, ds, *th_dyn)
        var_index = np.array([np.concatenate([V.x(i), V.x(i + 1), V.u(hz.control_index(i))]) for i in range(Np)])
        dyn_par_syms = [s for s, used in zip(dyn_syms, th_dyn_idx) if used is not None]
        dyn_par_idx = [k for k in th_dyn_idx if k is not None]
        par_index = np.tile(np.concatenate([dyn_par_idx, np.arange(P.d.start, P.d.stop)]).astype(int), (Np, 1))
        prob.add_equality(Block([xn[k] - f[k] for k in range(nx)], xs + xn + us, var_index, dyn_par_syms + ds, par_index, name="dyn"))

        # initial state pin
        x0s, xks = ad.symbols("x0", nx), ad.symbols("xk", nx)
        prob.add_equality(Block([x0s[k] - xks[k] for k in range(nx)], x0s, V.x(0)[None, :], xks, np.arange(P.x.start, P.x.stop)[None, :], name="pin_x"))
        if pin_action:
            u0s, aps = ad.symbols("u0", nu), ad.symbols("apin", nu)
            prob.add_equality(Block([u0s[k] - aps[k] for k in range(nu)], u0s, V.u(0)[None, :], aps, np.arange(P.a_pin.start, P.a_pin.stop)[None, :], name="pin_u"))

        # flow bounds on each ramp: r <= d + w/T and r <= C (rho_max - rho) / (rho_max - rc)
        rho_s, w_s, u_s, d_s, rc_s = ad.symbol("rho"), ad.symbol("w"), ad.symbol("r"), ad.symbol("dw"), ad.symbol("rc")
        for k, o in enumerate(topo.controlled):
            org = topo.origins[o]
            outs = [u_s - d_s - w_s / self.p.T, u_s - org.capacity * model.supply_ratio(rho_s, rc_s if th_dyn_idx[0] is not None else ad.const(c.rho_crit))]
            vi = np.array([[V.x(i)[org.segment], V.x(i)[2 * n + o], V.u(hz.control_index(i))[k]] for i in range(Np + 1)])
            pars_h, pidx = [d_s], [P.d.start + o]
            if th_dyn_idx[0] is not None:
                pars_h.append(rc_s)
                pidx.append(th_dyn_idx[0])
            prob.add_inequality(Block(outs, [rho_s, w_s, u_s], vi, pars_h, np.tile(pidx, (Np + 1, 1)), name=f"h{o}"))

        # soft queue limits
        if ns:
            sg = ad.symbol("sigma")
            for m, o in enumerate(topo.constrained_origins):
                vi = np.array([[V.x(i)[2 * n + o], V.sigma(i)[m]] for i in range(Np + 1)])
                prob.add_inequality(Block([w_s - c.w_max - sg], [w_s, sg], vi, name=f"g{o}"))

        # stage objective (TTS, slack, tracking and terminal costs)
        th_T, thC = ad.symbol("theta_T"), ad.symbols("theta_C", ns)
        wl = ad.symbols("ell", nx)
        wG = ad.symbols("Gamma", nx)
        sig = ad.symbols("s", ns)
        gam, fl, fG = ad.symbol("gamma_i"), ad.symbol("flag_l"), ad.symbol("flag_G")
        rho, v, w = xs[:n], xs[n : 2 * n], xs[2 * n :]
        L_T = self.p.T * (sum(topo.lengths[j] * topo.lanes[j] * rho[j] for j in range(n)) + sum(w))
        if self.flags.track_learned_setpoints:
            rho_sp, v_sp = th_dyn[0], th_dyn[2]
        else:
            rho_sp, v_sp = ad.const(c.rho_sp), ad.const(c.v_sp)
        dev = [((rho[j] - rho_sp) / c.rho_max) ** 2 for j in range(n)]
        dev += [((v[j] - v_sp) / c.v_max) ** 2 for j in range(n)]
        dev += [(w[o] / c.w_max) ** 2 for o in range(no)]
        ell = sum(wl[k] * dev[k] for k in range(nx))
        Gam = sum(wG[k] * dev[k] for k in range(nx))
        slack = sum(thC[m] * sig[m] for m in range(ns)) if ns else ad.const(0.0)
        stage = gam * (th_T * L_T + slack + fl * ell + fG * Gam)
        g = self.theta0.groups
        pidx_common = [g["theta_T"].start] + list(range(g["ell_rho"].start, g["ell_w"].stop)) + list(range(g["Gamma_rho"].start, g["Gamma_w"].stop))
        st_pars = [th_T] + wl + wG
        st_pidx = []
        for i in range(Np + 1):
            row = list(pidx_common) + [g["Theta_C"].start + i * ns + m for m in range(ns)]
            if self.flags.track_learned_setpoints:
                row += [k for k in th_dyn_idx if k is not None]
            st_pidx.append(row)
        st_pars = st_pars + thC
        if self.flags.track_learned_setpoints:
            st_pars = st_pars + [s for s, k in zip(dyn_syms, th_dyn_idx) if k is not None]
        vi = np.array([np.concatenate([V.x(i), V.sigma(i)]) for i in range(Np + 1)])
        data = np.array([[hz.gamma**i for i in range(Np + 1)], [1.0 if 1 <= i <= Np - 1 else 0.0 for i in range(Np + 1)], [1.0 if i == Np else 0.0 for i in range(Np + 1)]])
        prob.add_objective(Block([stage], xs + sig, vi, st_pars, np.array(st_pidx), [gam, fl, fG], data, name="stage"))

        # initial linear cost on x_0
        wlam = ad.symbols("lam", nx)
        scale = [c.rho_max] * n + [c.v_max] * n + [c.w_max] * no
        lam_cost = sum(wlam[k] * xs[k] / scale[k] for k in range(nx))
        prob.add_objective(Block([lam_cost], xs, V.x(0)[None, :], wlam, np.arange(g["lambda_rho"].start, g["lambda_w"].stop)[None, :], name="lambda"))

        # control variability, first move against the last applied action, plus perturbation
        th_V = ad.symbol("theta_V")
        ua, ub_, rp, qs = ad.symbols("ua", nu), ad.symbols("ub", nu), ad.symbols("rprev", nu), ad.symbols("q", nu)
        first = th_V * sum(((ua[k] - rp[k]) / caps[k]) ** 2 for k in range(nu)) + sum(qs[k] * ua[k] / caps[k] for k in range(nu))
        pidx = np.concatenate([[g["theta_V"].start], np.arange(P.r_prev.start, P.r_prev.stop), np.arange(P.q.start, P.q.stop)])
        prob.add_objective(Block([first], ua, V.u(0)[None, :], [th_V] + rp + qs, pidx[None, :], name="var0"))
        if Nc > 1:
            var = gam * th_V * sum(((ua[k] - ub_[k]) / caps[k]) ** 2 for k in range(nu))
            vi = np.array([np.concatenate([V.u(j), V.u(j - 1)]) for j in range(1, Nc)])
            data = np.array([[hz.gamma ** (j * hz.M) for j in range(1, Nc)]])
            prob.add_objective(Block([var], ua + ub_, vi, [th_V], np.full((Nc - 1, 1), g["theta_V"].start), [gam], data, name="var"))
        return prob

    def _dyn_params_symbols(self, syms):
        """Map (rho_crit, a, v_free) to symbols when learnable, constants otherwise."""
        c, g = self.consts, self.theta0.groups
        exprs, idx = [], []
        for s, name, fixed in zip(syms, ("rho_crit", "a", "v_free"), (c.rho_crit, c.a, c.v_free)):
            if name in g:
                exprs.append(s)
                idx.append(g[name].start)
            else:
                exprs.append(ad.const(fixed))
                idx.append(None)
        return exprs, idx

    def _build_predictor(self):
        nx, nu = self.vars.n_x, self.vars.n_u
        xs, us, ds, dyn = ad.symbols("x", nx), ad.symbols("u", nu), ad.symbols("d", self.pars.n_d), ad.symbols("dyn", 3)
        f = self._model.step(xs, us, ds, *dyn)
        return ad.compile_function([xs, us, ds, dyn], f, "predict")

    # -- numerics -------------------------------------------------------------

    @property
    def n_var(self) -> int:
        return self.vars.size

    def dynamics_values(self, theta: ThetaVector) -> np.ndarray:
        """Prediction-model (rho_crit, a, v_free) under ``theta``."""
        c, g = self.consts, theta.groups
        return np.array([theta.values[g[k].start] if k in g else fixed for k, fixed in (("rho_crit", c.rho_crit), ("a", c.a), ("v_free", c.v_free))])

    def parameters(self, theta: ThetaVector, x: TrafficState, d: Disturbance, r_prev, q=None, a_pin=None) -> np.ndarray:
        P = self.pars
        out = np.zeros(P.size)
        out[: P.n_theta] = theta.values
        out[P.x] = x.as_vector()
        out[P.d] = d.as_vector()
        out[P.r_prev] = np.atleast_1d(r_prev)
        if q is not None:
            out[P.q] = np.atleast_1d(q)
        if a_pin is not None:
            out[P.a_pin] = np.atleast_1d(a_pin)
        return out

    def rollout(self, x: TrafficState, controls: np.ndarray, d: Disturbance, theta: ThetaVector) -> np.ndarray:
        """Primal guess consistent with the prediction model for given control moves."""
        V, hz = self.vars, self.horizon
        z = np.zeros(V.size)
        xi = x.as_vector()
        xi[: self.topo.n_segments] = np.maximum(xi[: self.topo.n_segments], 0.0)
        dyn = self.dynamics_values(theta)
        dv = d.as_vector()
        z[V.x(0)] = x.as_vector()
        for j in range(V.Nc):
            z[V.u(j)] = controls[j]
        for i in range(V.Np):
            u = controls[hz.control_index(i)]
            with np.errstate(all="ignore"):
                xi = self._predict(xi[:, None], u[:, None], dv[:, None], dyn[:, None])[:, 0]
            if not np.all(np.isfinite(xi)):
                xi = z[V.x(i)].copy()
            z[V.x(i + 1)] = xi
        n = self.topo.n_segments
        for i in range(V.Np + 1):
            wq = z[V.x(i)][2 * n + np.array(self.topo.constrained_origins, dtype=int)]
            z[V.sigma(i)] = np.maximum(wq - self.consts.w_max, 0.0) + 1.0
        return z

    def _feasible_controls(self, x: TrafficState, d: Disturbance, theta: ThetaVector, u) -> np.ndarray:
        caps = np.array([self.topo.origins[o].capacity for o in self.topo.controlled])
        rc = self.dynamics_values(theta)[0]
        bound = []
        for k, o in enumerate(self.topo.controlled):
            org = self.topo.origins[o]
            supply = org.capacity * (self.p.rho_max - x.rho[org.segment]) / (self.p.rho_max - rc)
            bound.append(min(d.demand[o] + x.w[o] / self.p.T, supply))
        u = np.clip(np.atleast_1d(u).astype(float), 0.0, np.minimum(caps, np.maximum(bound, 0.0)))
        return u

    def shifted_guess(self, sol: NlpSolution, x: TrafficState, d: Disturbance, theta: ThetaVector) -> tuple[np.ndarray, NlpSolution]:
        """Shift a previous solution by one control step and re-simulate the states."""
        V = self.vars
        u_prev = np.array([sol.x[V.u(j)] for j in range(V.Nc)])
        controls = np.concatenate([u_prev[1:], u_prev[-1:]], axis=0)
        z = self.rollout(x, controls, d, theta)
        return z, sol

    def solve(self, problem: NlpProblem, params: np.ndarray, guess: np.ndarray, warm: NlpSolution | None) -> NlpSolution:
        sol = solve_nlp(problem, params, guess, self.options, warm=warm)
        if not sol.success and warm is not None:
            logger.debug("warm solve failed (%s); retrying cold", sol.status)
            sol = solve_nlp(problem, params, guess, self.options)
        return sol


@dataclass
class MpcEvalResult:
    value: float
    action: np.ndarray
    solution: NlpSolution | None
    wall_time: float
    status: str
    params: np.ndarray
    pinned: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class MpcController:
    """Stateful evaluator of V, Q and the policy, with warm starts and fallback."""

    def __init__(self, mpc: ParametricMpc):
        self.mpc = mpc
        self._last: NlpSolution | None = None
        self.last_action: np.ndarray | None = None
        self.failures = 0

    def reset(self) -> None:
        self._last = None
        self.last_action = None

    def _guess(self, x, d, theta, r_prev):
        mpc = self.mpc
        if self._last is not None:
            return mpc.shifted_guess(self._last, x, d, theta)
        u = mpc._feasible_controls(x, d, theta, r_prev)
        return mpc.rollout(x, np.tile(u, (mpc.vars.Nc, 1)), d, theta), None

    def eval_value(self, x: TrafficState, d: Disturbance, theta: ThetaVector, r_prev, q=None, remember: bool = True) -> MpcEvalResult:
        """Solve with the first action free; returns V and the first optimal action."""
        mpc = self.mpc
        t0 = time.perf_counter()
        params = mpc.parameters(theta, x, d, r_prev, q)
        guess, warm = self._guess(x, d, theta, r_prev)
        sol = mpc.solve(mpc.problem_v, params, guess, warm)
        wall = time.perf_counter() - t0
        if sol.success:
            action = sol.x[mpc.vars.u(0)].copy()
            if remember:
                self._last = sol
            return MpcEvalResult(sol.f, action, sol, wall, sol.status, params)
        self.failures += 1
        fallback = np.atleast_1d(r_prev if self.last_action is None else self.last_action).astype(float)
        logger.warning("MPC solve failed (%s); holding the last applied action %s", sol.status, fallback)
        self._last = None
        return MpcEvalResult(float("nan"), fallback, sol, wall, sol.status, params)

    def eval_action_value(self, x: TrafficState, u, d: Disturbance, theta: ThetaVector, r_prev, warm_from: MpcEvalResult | None = None) -> MpcEvalResult:
        """Solve with the first action pinned to ``u``; returns Q."""
        mpc = self.mpc
        t0 = time.perf_counter()
        u = np.atleast_1d(np.asarray(u, dtype=float))
        params = mpc.parameters(theta, x, d, r_prev, None, u)
        if warm_from is not None and warm_from.solution is not None and warm_from.optimal:
            V = mpc.vars
            controls = np.array([warm_from.solution.x[V.u(j)] for j in range(V.Nc)])
            controls[0] = u
            guess = mpc.rollout(x, controls, d, theta)
        else:
            guess = mpc.rollout(x, np.tile(u, (mpc.vars.Nc, 1)), d, theta)
        sol = solve_nlp(mpc.problem_q, params, guess, mpc.options)
        wall = time.perf_counter() - t0
        value = sol.f if sol.success else float("nan")
        return MpcEvalResult(value, u.copy(), sol, wall, sol.status, params, pinned=True)


def theta_gradient_of_Q(mpc: ParametricMpc, result: MpcEvalResult) -> np.ndarray:
    """Gradient of Q (or V) with respect to theta at a converged solve."""
    if not result.optimal:
        raise DegradedResult(f"gradient undefined for a {result.status!r} solve")
    problem = mpc.problem_q if result.pinned else mpc.problem_v
    return parametric_value_gradient(problem, result.solution, result.params)[: mpc.pars.n_theta]


def theta_hessian_of_Q(mpc: ParametricMpc, result: MpcEvalResult, mode: str = "gauss-newton", step: float = 1e-5) -> np.ndarray | None:
    """Second derivative of Q with respect to theta.

    ``gauss-newton`` returns ``None``: the learner builds its own outer-product
    approximation. ``finite-difference`` differentiates the analytic gradient
    by central differences, re-solving the pinned problem for each entry.
    """
    if mode == "gauss-newton":
        return None
    if mode != "finite-difference":
        raise ValueError(f"unknown Hessian mode {mode!r}")
    if not result.optimal:
        raise DegradedResult(f"Hessian undefined for a {result.status!r} solve")
    problem = mpc.problem_q if result.pinned else mpc.problem_v
    nth = mpc.pars.n_theta
    H = np.zeros((nth, nth))
    base = result.params
    for j in range(nth):
        h = step * max(1.0, abs(base[j]))
        grads = []
        for sign in (1.0, -1.0):
            p = base.copy()
            p[j] += sign * h
            sol = solve_nlp(problem, p, result.solution.x, mpc.options, warm=result.solution)
            if not sol.success:
                raise RuntimeError(f"finite-difference solve failed for theta entry {j} ({sol.status})")
            grads.append(parametric_value_gradient(problem, sol, p)[:nth])
        H[:, j] = (grads[0] - grads[1]) / (2 * h)
    return 0.5 * (H + H.T)


def build_parametric_mpc(
    topo: NetworkTopology,
    p: MetanetParams,
    horizon: HorizonConfig = HorizonConfig(),
    consts: FixedMpcConstants | None = None,
    flags: AblationFlags = AblationFlags(),
    options: SolverOptions | None = None,
) -> ParametricMpc:
    return ParametricMpc(topo, p, horizon, consts, flags, options)
