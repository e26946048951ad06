import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcrl_rm import metanet as mn
from mpcrl_rm.baselines import (
    PiAlineaController,
    PiAlineaGains,
    SearchConfig,
    pi_alinea_action,
    queue_override,
    sample_gains,
    tune_gains,
)


class TestPiAlineaLaw:
    def test_example(self):
        g = PiAlineaGains(K_P=70.0, K_I=4.0, rho_hat=33.5)
        assert pi_alinea_action(35.0, 30.0, 1000.0, g, 2000.0) == pytest.approx(644.0)

    def test_at_setpoint_with_no_change_holds_flow(self):
        g = PiAlineaGains(K_P=40.0, K_I=5.0, rho_hat=30.0)
        assert pi_alinea_action(30.0, 30.0, 812.5, g, 2000.0) == 812.5

    def test_clamped_to_capacity_and_zero(self):
        g = PiAlineaGains(K_P=0.0, K_I=100.0, rho_hat=30.0)
        assert pi_alinea_action(0.0, 0.0, 1900.0, g, 2000.0) == 2000.0
        assert pi_alinea_action(80.0, 80.0, 100.0, g, 2000.0) == 0.0

    def test_negative_gains_rejected(self):
        with pytest.raises(ValueError):
            PiAlineaGains(K_P=-1.0)

    @settings(max_examples=200, deadline=None)
    @given(
        rho=st.floats(0, 180), rho_prev=st.floats(0, 180), r_prev=st.floats(0, 2000),
        kp=st.floats(0, 500), ki=st.floats(0, 200),
    )
    def test_output_within_bounds(self, rho, rho_prev, r_prev, kp, ki):
        r = pi_alinea_action(rho, rho_prev, r_prev, PiAlineaGains(kp, ki, 30.0), 2000.0)
        assert 0.0 <= r <= 2000.0


class TestQueueOverride:
    def test_override_saturates(self):
        assert queue_override(500.0, 60.0, 1500.0, 50.0, 1 / 60, 2000.0) == 2000.0

    def test_inactive_with_slack(self):
        # w <= w_max - d T_ctrl: the drain flow is below demand and below r_pi
        assert queue_override(700.0, 20.0, 600.0, 50.0, 1 / 60, 2000.0) == 700.0

    def test_inactive_at_limit_without_demand(self):
        assert queue_override(123.0, 50.0, 0.0, 50.0, 1 / 60, 2000.0) == 123.0

    def test_partial_override(self):
        assert queue_override(500.0, 55.0, 1000.0, 50.0, 1 / 60, 2000.0) == pytest.approx(1300.0)


class TestClosedLoop:
    @settings(max_examples=30, deadline=None)
    @given(w0=st.floats(60, 150), d=st.floats(200, 1200), rho=st.floats(5, 25), seed=st.integers(0, 1000))
    def test_queue_drains_above_limit(self, topo, params, w0, d, rho, seed):
        rng = np.random.default_rng(seed)
        ctl = PiAlineaController(PiAlineaGains(rng.uniform(0, 200), rng.uniform(0, 50), 23.45), 2000.0, params.w_max)
        x = mn.TrafficState(np.full(3, rho), np.full(3, 100.0), np.array([0.0, w0]))
        dist = mn.Disturbance(np.array([1000.0, d]), np.array([20.0]))
        T_ctrl = ctl.T_ctrl
        ctl.reset(0.0, rho)
        for _ in range(20):
            w_before = x.w[1]
            r = ctl.act(float(x.rho[2]), float(x.w[1]), d)
            for _ in range(6):
                u = mn.clip_control(x, [r], dist, topo, params)
                x = mn.step(x, u, dist, topo, params)
            if w_before > params.w_max + d * T_ctrl:
                assert x.w[1] <= w_before + 1e-9

    def test_reset_and_first_step_uses_current_density(self):
        ctl = PiAlineaController(PiAlineaGains(40.0, 0.0, 30.0), 2000.0, override=False)
        ctl.r_prev = 900.0
        assert ctl.act(50.0, 0.0, 0.0) == 900.0


class TestTuning:
    def test_budget_one(self):
        best, log = tune_gains(lambda g: g.K_P, SearchConfig(budget=1), seed=0)
        assert len(log) == 1 and log[0][0] == best

    def test_picks_dominant_pair(self):
        cands = [PiAlineaGains(10.0, 1.0), PiAlineaGains(40.0, 5.0), PiAlineaGains(80.0, 2.0)]
        best, _ = tune_gains(lambda g: (g.K_P - 40.0) ** 2 + (g.K_I - 5.0) ** 2, candidates=cands)
        assert best == cands[1]

    def test_deterministic_under_seed(self):
        a = sample_gains(SearchConfig(budget=10), np.random.default_rng(7), 23.45)
        b = sample_gains(SearchConfig(budget=10), np.random.default_rng(7), 23.45)
        assert a == b
        assert all(1.0 <= g.K_P <= 200.0 and 0.5 <= g.K_I <= 100.0 for g in a)

    def test_diverged_candidates_skipped(self):
        def cost(g):
            if g.K_P > 50:
                raise FloatingPointError("diverged")
            return g.K_P

        cands = [PiAlineaGains(60.0, 1.0), PiAlineaGains(20.0, 1.0), PiAlineaGains(30.0, 1.0)]
        best, log = tune_gains(cost, candidates=cands)
        assert best.K_P == 20.0
        assert math.isnan(log[0][1])

    def test_all_diverged(self):
        with pytest.raises(RuntimeError):
            tune_gains(lambda g: float("nan"), SearchConfig(budget=3))

    def test_zero_budget(self):
        with pytest.raises(ValueError):
            sample_gains(SearchConfig(budget=0), np.random.default_rng(0), 23.45)
