import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcrl_rm.metanet import Disturbance, MetanetParams, NetworkTopology, TrafficState, step
from mpcrl_rm.scenario import (
    CHANNELS,
    InvalidScenarioConfig,
    ScenarioConfig,
    generate_scenario,
    nominal_profile,
    sample_nodes,
    steady_state_init,
)

TOPO = NetworkTopology.benchmark()
P = MetanetParams()


def test_default_length_matches_horizon():
    r = generate_scenario(ScenarioConfig(), 0)
    assert len(r) == 1440
    assert r.demand.shape == (2, 1440) and r.congestion.shape == (1, 1440)


def test_zero_noise_equals_nominal():
    cfg = ScenarioConfig().zero_noise()
    a = generate_scenario(cfg, 1)
    b = nominal_profile(cfg)
    np.testing.assert_array_equal(a.demand, b.demand)
    np.testing.assert_array_equal(a.congestion, b.congestion)


def test_same_seed_same_realization():
    a, b = generate_scenario(ScenarioConfig(), 42), generate_scenario(ScenarioConfig(), 42)
    np.testing.assert_array_equal(a.demand, b.demand)
    c = generate_scenario(ScenarioConfig(), 43)
    assert not np.array_equal(a.demand, c.demand)


def test_node_noise_statistics():
    cfg = ScenarioConfig()
    rng = np.random.default_rng(0)
    node = 2  # first peak node of the mainstream demand
    nominal = cfg.nodes["d_O1"][node][1]
    sd = cfg.std["d_O1"][node]
    vals = np.array([sample_nodes(cfg, rng)["d_O1"][1][node] for _ in range(10_000)])
    assert abs(vals.mean() - nominal) < 3 * sd / np.sqrt(vals.size)
    inside = np.mean(np.abs(vals - nominal) <= 2 * sd)
    assert 0.94 <= inside <= 0.96


def test_nominal_mainstream_peak_within_20_minutes():
    cfg = ScenarioConfig().zero_noise()
    d = nominal_profile(cfg).demand[0]
    t = np.arange(d.size) * cfg.T
    base, peak = d[0], d.max()
    onset = t[np.argmax(d > base + 1.0)]
    reach = t[np.argmax(d >= base + 0.95 * (peak - base))]
    assert reach - onset <= 20 / 60 + 1e-9


def test_two_peaks_with_delayed_congestion():
    cfg = ScenarioConfig().zero_noise()
    r = nominal_profile(cfg)
    d1, cong = r.demand[0], r.congestion[0]
    hi = d1 > 0.5 * (d1.max() + d1.min())
    assert np.count_nonzero(np.diff(hi.astype(int)) == 1) == 2
    chi = cong > 0.5 * (cong.max() + cong.min())
    assert np.argmax(chi) > np.argmax(hi)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_realizations_nonnegative(seed):
    r = generate_scenario(ScenarioConfig(), seed)
    assert np.all(r.demand >= 0) and np.all(r.congestion >= 0)
    assert len(r) == ScenarioConfig().n_steps


@pytest.mark.parametrize(
    "change",
    [
        {"nodes": {"d_O1": [], "d_O2": [[0, 1], [4, 1]], "d_rho_D1": [[0, 1], [4, 1]]}},
        {"horizon": -1.0},
        {"smoothing": 0},
    ],
)
def test_invalid_configs(change):
    d = ScenarioConfig().to_dict()
    d.update(change)
    with pytest.raises(InvalidScenarioConfig):
        ScenarioConfig.from_dict(d).validate()


def test_decreasing_node_times_rejected():
    cfg = ScenarioConfig()
    nodes = dict(cfg.nodes)
    nodes["d_O1"] = [[0.0, 1000.0], [2.0, 2000.0], [1.0, 1000.0], [4.0, 1000.0]]
    with pytest.raises(InvalidScenarioConfig):
        ScenarioConfig(nodes=nodes).validate()


def test_config_roundtrip():
    cfg = ScenarioConfig()
    assert ScenarioConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_csv_export(tmp_path):
    r = generate_scenario(ScenarioConfig(), 3)
    path = tmp_path / "s.csv"
    r.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_s," + ",".join(CHANNELS)
    assert len(lines) == 1441


class TestSteadyState:
    def test_zero_demand_gives_free_flow(self):
        x, ok = steady_state_init(Disturbance([0.0, 0.0], [0.0]), TOPO, P)
        ff = TrafficState.free_flow(TOPO, P)
        assert ok
        np.testing.assert_allclose(x.as_vector(), ff.as_vector(), atol=1e-9)

    def test_low_demand_is_fixed_point(self):
        d = Disturbance([1000.0, 150.0], [20.0])
        x, ok = steady_state_init(d, TOPO, P)
        assert ok
        from mpcrl_rm.harness import initial_ramp_flow

        nxt = step(x, initial_ramp_flow(x, d, TOPO, P), d, TOPO, P)
        assert np.max(np.abs(nxt.as_vector() - x.as_vector())) < 1e-6
        assert abs(np.sum(nxt.w - x.w)) < 1e-6

    def test_deterministic(self):
        d = Disturbance([2000.0, 500.0], [30.0])
        a, _ = steady_state_init(d, TOPO, P)
        b, _ = steady_state_init(d, TOPO, P)
        np.testing.assert_array_equal(a.as_vector(), b.as_vector())

    def test_nonconvergence_warns(self):
        d = Disturbance([3500.0, 2000.0], [60.0])
        with pytest.warns(RuntimeWarning):
            _, ok = steady_state_init(d, TOPO, P, minutes=0.5)
        assert not ok
