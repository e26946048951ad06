import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mpcrl_rm.metanet import Disturbance, TrafficState
from mpcrl_rm.mpc import (
    AblationFlags,
    DegradedResult,
    HorizonConfig,
    MpcConfigError,
    MpcController,
    MpcEvalResult,
    build_parametric_mpc,
    theta_gradient_of_Q,
    theta_hessian_of_Q,
)
from mpcrl_rm.nlp import solve_nlp

SHORT = HorizonConfig(Np=12, Nc=2, M=6)


@pytest.fixture(scope="module")
def short_mpc(topo, params):
    return build_parametric_mpc(topo, params, SHORT)


def random_instance(mpc, rng, perturb=0.3):
    th0 = mpc.theta0
    x = TrafficState(rng.uniform(5, 80, 3), rng.uniform(30, 110, 3), [rng.uniform(0, 30), rng.uniform(0, 80)])
    d = Disturbance(np.array([rng.uniform(1500, 3500), rng.uniform(200, 1500)]), np.array([rng.uniform(20, 45)]))
    vals = np.clip(th0.values * np.exp(rng.uniform(-perturb, perturb, len(th0))), th0.lb, th0.ub)
    r_prev = np.array([rng.uniform(100, 1500)])
    return x, d, th0.with_values(vals), r_prev


def fd_gradient(mpc, res, h_rel=1e-5):
    problem = mpc.problem_q if res.pinned else mpc.problem_v
    fd = np.zeros(mpc.pars.n_theta)
    for j in range(mpc.pars.n_theta):
        h = h_rel * max(1.0, abs(res.params[j]))
        vals = []
        for s in (1.0, -1.0):
            p = res.params.copy()
            p[j] += s * h
            sol = solve_nlp(problem, p, res.solution.x, mpc.options, warm=res.solution)
            assert sol.success, sol.status
            vals.append(sol.f)
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    return fd


class TestParametrisation:
    def test_default_dimension_is_53(self, mpc):
        assert len(mpc.theta0) == 53

    def test_free_speed_adds_one(self, topo, params):
        m = build_parametric_mpc(topo, params, HorizonConfig(), flags=AblationFlags(learnable=("rho_crit", "a", "v_free")))
        assert len(m.theta0) == 54
        assert m.theta0.lb[m.theta0.groups["v_free"]][0] == 30.0

    def test_variable_count(self, mpc):
        # 25 states of 8 entries, 25 queue slacks, 3 control moves
        assert mpc.n_var == 228

    def test_group_slices_cover_vector(self, mpc):
        th = mpc.theta0
        covered = sorted(i for s in th.groups.values() for i in range(s.start, s.stop))
        assert covered == list(range(len(th)))

    def test_dict_roundtrip(self, mpc):
        th = mpc.theta0.with_values(mpc.theta0.values * 1.5)
        back = mpc.theta0.load_dict(th.to_dict())
        np.testing.assert_array_equal(back.values, th.values)

    def test_unknown_theta_entry(self, mpc):
        with pytest.raises(MpcConfigError):
            mpc.theta0.load_dict({"bogus": 1.0})

    def test_unknown_learnable(self):
        with pytest.raises(MpcConfigError):
            AblationFlags(learnable=("tau",))

    @pytest.mark.parametrize("kw", [dict(Np=24, Nc=5, M=6), dict(Np=0), dict(gamma=0.0), dict(gamma=1.5)])
    def test_invalid_horizon(self, kw):
        with pytest.raises(MpcConfigError):
            HorizonConfig(**kw)

    def test_control_index_holds_last_move(self):
        hz = HorizonConfig(Np=24, Nc=3, M=6)
        assert [hz.control_index(i) for i in (0, 5, 6, 11, 12, 23)] == [0, 0, 1, 1, 2, 2]


class TestValues:
    def test_zero_weights_give_zero_value(self, short_mpc, rng):
        x, d, th, rp = random_instance(short_mpc, rng)
        zero = th.with_values(np.clip(np.zeros(len(th)), th.lb, th.ub))
        vals = zero.values.copy()
        for name in ("rho_crit", "a"):
            vals[zero.groups[name]] = th[name]
        zero = zero.with_values(vals)
        res = MpcController(short_mpc).eval_value(x, d, zero, rp)
        assert res.optimal
        # every weight sits at its 1e-6 / 1e-3 floor, so the value is tiny compared to the default
        default = MpcController(short_mpc).eval_value(x, d, th, rp)
        assert abs(res.value) < 1e-2 * abs(default.value)

    def test_tts_weight_scales_prediction_cost(self, short_mpc, rng):
        # with every other weight at its floor, V / theta_T is the discounted predicted TTS
        x, d, th, rp = random_instance(short_mpc, rng)
        vals = np.maximum(th.lb, 0.0)
        vals[np.isneginf(th.lb)] = 0.0
        for name in ("rho_crit", "a"):
            vals[th.groups[name]] = th[name]
        vals[th.groups["theta_T"]] = 1.0
        thv = th.with_values(vals)
        ctl = MpcController(short_mpc)
        res = ctl.eval_value(x, d, thv, rp)
        assert res.optimal
        g = theta_gradient_of_Q(short_mpc, res)
        # the gradient in theta_T equals the discounted TTS sum along the optimal trajectory
        V, topo, p = short_mpc.vars, short_mpc.topo, short_mpc.p
        tts = 0.0
        for i in range(V.Np + 1):
            z = res.solution.x[V.x(i)]
            n = topo.n_segments
            tts += SHORT.gamma**i * p.T * (np.dot(np.multiply(topo.lengths, topo.lanes), z[:n]) + z[2 * n :].sum())
        assert g[th.groups["theta_T"]][0] == pytest.approx(tts, rel=1e-8)

    def test_bellman_identity(self, short_mpc, rng):
        for _ in range(5):
            x, d, th, rp = random_instance(short_mpc, rng)
            ctl = MpcController(short_mpc)
            v = ctl.eval_value(x, d, th, rp)
            q = ctl.eval_action_value(x, v.action, d, th, rp, warm_from=v)
            assert v.optimal and q.optimal
            assert abs(q.value - v.value) <= 10 * short_mpc.options.tol * max(1.0, abs(v.value))

    def test_q_dominates_v(self, short_mpc, rng):
        for _ in range(5):
            x, d, th, rp = random_instance(short_mpc, rng)
            ctl = MpcController(short_mpc)
            v = ctl.eval_value(x, d, th, rp)
            u = np.clip(v.action + rng.uniform(-300, 300), 0.0, 2000.0)
            q = ctl.eval_action_value(x, u, d, th, rp)
            assert q.optimal
            assert q.value >= v.value - 1e-6 * max(1.0, abs(v.value))

    def test_tiny_perturbation_is_continuous(self, short_mpc, rng):
        x, d, th, rp = random_instance(short_mpc, rng)
        a = MpcController(short_mpc).eval_value(x, d, th, rp)
        b = MpcController(short_mpc).eval_value(x, d, th, rp, q=np.array([1e-12]))
        assert abs(a.value - b.value) <= 1e-8 * max(1.0, abs(a.value))
        np.testing.assert_allclose(a.action, b.action, atol=1e-6)

    def test_slack_price_monotone(self, short_mpc, rng):
        # heavy queue: a higher slack price never increases the optimal violation
        x, d, th, rp = random_instance(short_mpc, rng)
        x = TrafficState(x.rho, x.v, np.array([x.w[0], 120.0]))
        viol = []
        for price in (1e-3, 1.0, 1e3):
            vals = th.values.copy()
            vals[th.groups["Theta_C"]] = price
            res = MpcController(short_mpc).eval_value(x, d, th.with_values(vals), rp)
            assert res.optimal
            s = np.concatenate([res.solution.x[short_mpc.vars.sigma(i)] for i in range(SHORT.Np + 1)])
            viol.append(s.sum())
        assert viol[0] >= viol[1] - 1e-6 and viol[1] >= viol[2] - 1e-6


class TestDerivatives:
    def test_gradient_matches_finite_differences(self, short_mpc, rng):
        for _ in range(2):
            x, d, th, rp = random_instance(short_mpc, rng)
            ctl = MpcController(short_mpc)
            v = ctl.eval_value(x, d, th, rp)
            q = ctl.eval_action_value(x, v.action, d, th, rp, warm_from=v)
            g = theta_gradient_of_Q(short_mpc, q)
            fd = fd_gradient(short_mpc, q)
            assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_gradient_of_degraded_result_raises(self, short_mpc):
        res = MpcEvalResult(float("nan"), np.zeros(1), None, 0.0, "max_iter", np.zeros(short_mpc.pars.size))
        with pytest.raises(DegradedResult):
            theta_gradient_of_Q(short_mpc, res)

    def test_gauss_newton_mode_returns_none(self, short_mpc, rng):
        x, d, th, rp = random_instance(short_mpc, rng)
        res = MpcController(short_mpc).eval_value(x, d, th, rp)
        assert theta_hessian_of_Q(short_mpc, res) is None
        with pytest.raises(ValueError):
            theta_hessian_of_Q(short_mpc, res, mode="bfgs")

    @pytest.mark.slow
    def test_finite_difference_hessian_symmetric(self, topo, params, rng):
        m = build_parametric_mpc(topo, params, HorizonConfig(Np=6, Nc=1, M=6))
        x, d, th, rp = random_instance(m, rng)
        res = MpcController(m).eval_value(x, d, th, rp)
        H = theta_hessian_of_Q(m, res, mode="finite-difference")
        assert H.shape == (len(th), len(th))
        np.testing.assert_allclose(H, H.T)
        assert np.all(np.isfinite(H))


class TestRollout:
    @settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(seed=st.integers(0, 2**31 - 1))
    def test_rollout_satisfies_dynamics(self, short_mpc, seed):
        rng = np.random.default_rng(seed)
        x, d, th, rp = random_instance(short_mpc, rng)
        controls = rng.uniform(0, 2000, (SHORT.Nc, 1))
        z = short_mpc.rollout(x, controls, d, th)
        V = short_mpc.vars
        prob = short_mpc.problem_v
        p = short_mpc.parameters(th, x, d, rp)
        h = prob.c_eq(z, p)
        # the rollout satisfies every dynamics row (state floors aside)
        if np.all(z[np.concatenate([V.x(i)[:3] for i in range(SHORT.Np + 1)])] > 0):
            assert np.max(np.abs(h)) < 1e-8
