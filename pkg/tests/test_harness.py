import copy
import csv
import json

import numpy as np
import pytest

from mpcrl_rm import harness as H
from mpcrl_rm.cli import EXIT_CONFIG, EXIT_DEGRADED, EXIT_OK, _seed_list, main
from mpcrl_rm.scenario import generate_scenario

# Half-hour scenario and a one-move horizon keep every run here to a few seconds.
SHORT = {
    "scenario": {
        "horizon": 0.5,
        "nodes": {
            "d_O1": [[0, 2500], [0.2, 3500], [0.5, 3000]],
            "d_O2": [[0, 800], [0.2, 1500], [0.5, 1200]],
            "d_rho_D1": [[0, 20], [0.25, 50], [0.5, 40]],
        },
        "std": {"d_O1": [50, 150, 100], "d_O2": [25, 100, 50], "d_rho_D1": [1, 5, 3]},
        "time_jitter": 0.0,
    },
    "controller": {"horizon": {"Np": 6, "Nc": 1}},
    "episodes": 3,
    "seeds": [0],
    "trace_episodes": [0],
}


def short_cfg(**overrides) -> H.ExperimentConfig:
    d = copy.deepcopy(SHORT)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return H.ExperimentConfig.from_dict(d)


class ConstantAgent:
    """Meters at a fixed flow and reports a zero value, so every step is a transition."""

    learning = False

    def __init__(self, flow=800.0):
        self.flow = flow

    def reset(self, r0):
        pass

    def decide(self, x, d, r_prev, rng, schedule):
        return H.Decision(np.array([self.flow]), 0.0, True, 0.0)


@pytest.fixture(scope="module")
def trained():
    cfg = short_cfg()
    return cfg, H.train(cfg)


class TestConfig:
    def test_defaults_validate(self):
        cfg = H.load_config(None)
        assert cfg.episodes == 80 and cfg.horizon().Np == 24

    def test_json_roundtrip(self):
        cfg = short_cfg()
        back = H.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()

    @pytest.mark.parametrize(
        "bad",
        [
            {"bogus": 1},
            {"episodes": 0},
            {"seeds": []},
            {"controller": {"kind": "ddpg"}},
            {"controller": {"horizon": {"Np": 24, "Nc": 9}}},
            {"controller": {"learnable": ["tau"]}},
            {"controller": {"theta_init": {"theta_T": -1.0}}},
            {"cost_weights": {"c_T": -1.0}},
            {"learner": {"alpha": -0.1}},
            {"baseline": {"gains_file": "/nonexistent/gains.json"}},
        ],
    )
    def test_invalid_configs_rejected(self, bad):
        with pytest.raises(H.ConfigError):
            H.ExperimentConfig.from_dict(bad)

    def test_desk_preset(self):
        cfg = H.load_config(None).with_desk_preset()
        assert cfg.horizon().Np == 12 and cfg.horizon().Nc == 2
        assert cfg.episodes == 20 and cfg.seeds == [0, 1, 2] and cfg.desk

    def test_seed_list_parsing(self):
        assert _seed_list("0-3,7") == [0, 1, 2, 3, 7]


class TestEpisode:
    def test_full_episode_shape(self, topo, params):
        cfg = H.load_config(None)
        scen = generate_scenario(cfg.scenario, 0)
        res = H.run_episode(topo, params, ConstantAgent(), scen, np.random.default_rng(0), keep_trace=True)
        assert len(scen) == 1440
        assert len(res.transitions) == 239 and len(res.interval_costs) == 240
        assert res.trace.w.shape == (1440, 2)

    def test_cost_decomposition(self, topo, params):
        cfg = H.load_config(None)
        res = H.run_episode(topo, params, ConstantAgent(), generate_scenario(cfg.scenario, 1), np.random.default_rng(0))
        m = res.metrics
        assert m.total == pytest.approx(m.tts + m.var + m.viol, rel=1e-12)
        assert m.tts == pytest.approx(5.0 * m.tts_raw, rel=1e-12)
        assert sum(res.interval_costs) == pytest.approx(m.total, rel=1e-10)
        assert sum(t.cost for t in res.transitions) + res.interval_costs[-1] == pytest.approx(m.total, rel=1e-10)

    def test_zero_demand_gives_zero_tts(self, topo, params):
        cfg = short_cfg(scenario={
            "nodes": {ch: [[0, 0.0], [0.5, 0.0]] for ch in ("d_O1", "d_O2", "d_rho_D1")},
            "std": {ch: [0.0, 0.0] for ch in ("d_O1", "d_O2", "d_rho_D1")},
        })
        res = H.run_episode(topo, params, ConstantAgent(0.0), generate_scenario(cfg.scenario, 0), np.random.default_rng(0))
        assert res.metrics.tts == pytest.approx(0.0, abs=1e-9)
        assert res.metrics.viol == 0.0

    def test_pi_alinea_records_no_transitions(self, topo, params):
        cfg = short_cfg()
        agent = H.make_agent(cfg, "pi-alinea")
        res = H.run_episode(topo, params, agent, generate_scenario(cfg.scenario, 0), np.random.default_rng(0))
        assert res.transitions == [] and not res.metrics.failed


    def test_fixed_flow_agent_is_unmetered_reference(self, topo, params):
        cfg = short_cfg()
        res = H.run_episode(topo, params, H.FixedFlowAgent(2000.0), generate_scenario(cfg.scenario, 0), np.random.default_rng(0))
        assert res.transitions == [] and not res.metrics.failed and res.metrics.explored == 0


class TestRuns:
    def test_fixed_mpc_is_deterministic(self):
        cfg = short_cfg()
        a = H.evaluate(cfg, "mpc-fixed", 1, [0])
        b = H.evaluate(cfg, "mpc-fixed", 1, [0])
        assert a.runs[0].metrics[0].row() == b.runs[0].metrics[0].row()

    def test_training_records_every_episode(self, trained):
        cfg, art = trained
        run = art.runs[0]
        assert len(run.metrics) == 3 and len(run.theta) == 4 and len(run.updates) == 3
        # 30 control steps per half hour give 29 transitions per episode
        assert len(run.tds) == 3 * 29
        th = H.build_mpc(cfg).theta0
        assert all(th.with_values(v).within_bounds(1e-12) for v in run.theta)

    def test_no_learning_keeps_theta(self):
        cfg = short_cfg(learner={"alpha": 0.0, "epsilon": 0.0}, episodes=2)
        run = H.train(cfg).runs[0]
        assert all(np.array_equal(run.theta[0], t) for t in run.theta)
        assert all(m.explored == 0 for m in run.metrics)

    def test_resume_matches_uninterrupted(self, tmp_path, trained):
        _, full = trained
        cfg = short_cfg(episodes=2)
        H.train(cfg, tmp_path)
        resumed = H.train(short_cfg(), tmp_path)
        a, b = full.runs[0], resumed.runs[0]
        assert [m.row() for m in a.metrics] == [m.row() for m in b.metrics]
        assert all(np.array_equal(x, y) for x, y in zip(a.theta, b.theta))

    def test_aggregate_interval(self):
        art = H.RunArtifacts({}, "x", [])
        for s, total in enumerate([1.0, 2.0, 3.0]):
            r = H.SeedRun(s)
            r.metrics.append(H.EpisodeMetrics(0, 0, 0, 0, 0, 0, 0, total, 0, 0, 0, 0, 0))
            art.runs.append(r)
        agg = H.aggregate(art)
        assert agg["mean"] == pytest.approx(2.0)
        # t(0.975, 2) * 1 / sqrt(3)
        assert agg["ci95"][1] - agg["mean"] == pytest.approx(4.302652729749464 / np.sqrt(3), rel=1e-9)


class TestExport:
    def test_schema_and_manifest(self, tmp_path, trained):
        cfg, art = trained
        man = H.export_report(art, tmp_path, cfg.scenario, envelope_samples=5)
        for name in ("learning_costs.csv", "theta_trajectory.csv", "td_error.csv", "update_log.csv", "queue_trace.csv",
                     "segment_heatmaps.csv", "scenario_envelope.csv", "summary.json", "theta.json"):
            assert name in man["files"] and (tmp_path / name).exists()
        with open(tmp_path / "learning_costs.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 and "wall_time" not in rows[0]
        with open(tmp_path / "theta_trajectory.csv", newline="") as fh:
            header = next(csv.reader(fh))
        assert len(header) == 2 + len(H.build_mpc(cfg).theta0)
        summ = json.loads((tmp_path / "summary.json").read_text())
        assert summ["episodes"] == 3 and set(summ["aggregate"]) == {"total", "tts", "var", "viol"}

    def test_missing_tables_reported(self, tmp_path):
        art = H.evaluate(short_cfg(trace_episodes=[]), "pi-alinea", 1, [0])
        man = H.export_report(art, tmp_path)
        assert "queue_trace.csv" in man["skipped"] and "td_error.csv" in man["skipped"]
        assert "theta.json" not in man["files"]

    def test_exports_byte_identical(self, tmp_path):
        cfg = short_cfg(episodes=2)
        for sub in ("a", "b"):
            H.export_report(H.train(cfg), tmp_path / sub, cfg.scenario, envelope_samples=5)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "artifacts.pkl" in names
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_artifacts_roundtrip(self, tmp_path, trained):
        _, art = trained
        H.save_artifacts(art, tmp_path / "a.pkl")
        back = H.load_artifacts(tmp_path / "a.pkl")
        assert [m.total for m in back.runs[0].metrics] == [m.total for m in art.runs[0].metrics]


class TestCli:
    def write_cfg(self, tmp_path, **overrides):
        d = copy.deepcopy(SHORT)
        d.update(overrides)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(d))
        return str(path)

    def test_validate_config(self, tmp_path, capsys):
        assert main(["validate-config", "--config", self.write_cfg(tmp_path)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["episodes"] == 3

    def test_bad_config_exit_code(self, tmp_path):
        assert main(["validate-config", "--config", self.write_cfg(tmp_path, episodes=0)]) == EXIT_CONFIG
        assert main(["validate-config", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_evaluate_and_export(self, tmp_path):
        out = tmp_path / "ev"
        assert main(["evaluate", "--config", self.write_cfg(tmp_path), "--controller", "pi-alinea", "--seed", "0,1", "--episodes", "1", "--out", str(out)]) == EXIT_OK
        summ = json.loads((out / "summary.json").read_text())
        assert summ["seeds"] == [0, 1] and summ["controller"] == "pi-alinea"
        assert main(["export", str(out), "--out", str(tmp_path / "re")]) == EXIT_OK
        assert (tmp_path / "re" / "learning_costs.csv").read_bytes() == (out / "learning_costs.csv").read_bytes()

    def test_degraded_exit_code(self, tmp_path):
        cfg = self.write_cfg(tmp_path, controller={"horizon": {"Np": 6, "Nc": 1}, "solver": {"max_iter": 1}})
        assert main(["evaluate", "--config", cfg, "--controller", "mpc-fixed", "--episodes", "1", "--out", str(tmp_path / "dg")]) == EXIT_DEGRADED

    def test_tune_baseline(self, tmp_path):
        cfg = self.write_cfg(tmp_path, baseline={"tune_seeds": [5]})
        assert main(["tune-baseline", "--config", cfg, "--budget", "2", "--out", str(tmp_path / "tb")]) == EXIT_OK
        gains = json.loads((tmp_path / "tb" / "gains.json").read_text())
        assert set(gains) == {"K_P", "K_I", "rho_hat"}
        assert main(["evaluate", "--config", cfg, "--controller", "pi-alinea", "--gains", str(tmp_path / "tb" / "gains.json"), "--out", str(tmp_path / "ev")]) == EXIT_OK
