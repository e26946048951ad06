"""Episodic training and evaluation of ramp-metering controllers."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .baselines import PiAlineaController, PiAlineaGains, SearchConfig, tune_gains
from .metanet import (
    Disturbance,
    MetanetParams,
    NetworkTopology,
    SimulationDiverged,
    TrafficState,
    clip_control,
    origin_flow_upper_bound,
    stage_cost,
    step,
)
from .mpc import (
    AblationFlags,
    FixedMpcConstants,
    HorizonConfig,
    MpcController,
    ParametricMpc,
    ThetaVector,
    theta_gradient_of_Q,
    theta_hessian_of_Q,
)
from .nlp import SolverOptions
from .qlearning import (
    LearnerConfig,
    LearnerSchedule,
    ReplayBuffer,
    Transition,
    apply_update,
    build_update,
    decay,
    sample_batch,
    td_error,
)
from .scenario import CHANNELS, ScenarioConfig, ScenarioRealization, generate_scenario, steady_state_init

logger = logging.getLogger(__name__)

CONTROLLERS = ("mpcrl", "mpc-fixed", "pi-alinea")
TD_WINDOW = 239


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ControllerConfig:
    kind: str = "mpcrl"
    horizon: dict = field(default_factory=lambda: {"Np": 24, "Nc": 3, "M": 6, "gamma": 0.98})
    mismatch: dict = field(default_factory=lambda: {"rho_crit": 0.7, "a": 1.3, "v_free": 1.3})
    learnable: list = field(default_factory=lambda: ["rho_crit", "a"])
    track_learned_setpoints: bool = False
    theta_init: dict = field(default_factory=dict)
    theta_file: str | None = None
    solver: dict = field(default_factory=lambda: {"tol": 1e-8, "max_iter": 500})


@dataclass
class BaselineConfig:
    K_P: float = 40.0
    K_I: float = 5.0
    rho_hat: float | None = None
    gains_file: str | None = None
    budget: int = 100
    K_P_range: list = field(default_factory=lambda: [1.0, 200.0])
    K_I_range: list = field(default_factory=lambda: [0.5, 100.0])
    tune_seeds: list = field(default_factory=lambda: [1000, 1001])


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    topology: NetworkTopology = field(default_factory=NetworkTopology.benchmark)
    params: MetanetParams = field(default_factory=MetanetParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    cost_weights: dict = field(default_factory=lambda: {"c_T": 5.0, "c_V": 1600.0, "c_C": 5.0})
    episodes: int = 80
    seeds: list = field(default_factory=lambda: list(range(15)))
    eval_episodes: int = 1
    trace_episodes: list = field(default_factory=lambda: [0, -1])
    output: str = "runs/default"
    desk: bool = False

    # -- derived objects --

    def horizon(self) -> HorizonConfig:
        try:
            return HorizonConfig(**self.controller.horizon)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"controller.horizon: {exc}") from exc

    def constants(self) -> FixedMpcConstants:
        m = self.controller.mismatch
        return FixedMpcConstants.mismatched(self.params, m.get("rho_crit", 0.7), m.get("a", 1.3), m.get("v_free", 1.3))

    def flags(self) -> AblationFlags:
        try:
            return AblationFlags(tuple(self.controller.learnable), self.controller.track_learned_setpoints)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def solver_options(self) -> SolverOptions:
        try:
            return SolverOptions(**self.controller.solver)
        except TypeError as exc:
            raise ConfigError(f"controller.solver: {exc}") from exc

    def validate(self) -> None:
        if self.controller.kind not in CONTROLLERS:
            raise ConfigError(f"controller.kind must be one of {CONTROLLERS}")
        try:
            self.scenario.validate()
        except ValueError as exc:
            raise ConfigError(f"scenario: {exc}") from exc
        hz = self.horizon()
        self.flags()
        self.solver_options()
        if abs(self.scenario.T - self.params.T) > 1e-12:
            raise ConfigError("scenario and model sampling times differ")
        if self.scenario.n_steps % hz.M:
            raise ConfigError("episode length must be a multiple of the control period")
        if self.episodes < 1 or not self.seeds:
            raise ConfigError("need at least one episode and one seed")
        if any(w < 0 for w in self.cost_weights.values()):
            raise ConfigError("cost weights must be nonnegative")
        if len(self.topology.controlled) != 1 and self.controller.kind == "pi-alinea":
            raise ConfigError("PI-ALINEA supports a single metered ramp")
        for f in (self.controller.theta_file, self.baseline.gains_file):
            if f is not None and not Path(f).exists():
                raise ConfigError(f"referenced file {f} does not exist")
        theta = ThetaVector.default(self.topology, hz, self.constants(), self.flags())
        try:
            theta = theta.load_dict(self.controller.theta_init)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not theta.within_bounds():
            raise ConfigError("initial theta violates its bounds")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "topology": self.topology.to_dict(),
            "params": self.params.to_dict(),
            "controller": asdict(self.controller),
            "learner": self.learner.to_dict(),
            "baseline": asdict(self.baseline),
            "cost_weights": dict(self.cost_weights),
            "episodes": self.episodes,
            "seeds": list(self.seeds),
            "eval_episodes": self.eval_episodes,
            "trace_episodes": list(self.trace_episodes),
            "output": self.output,
            "desk": self.desk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"scenario", "topology", "params", "controller", "learner", "baseline", "cost_weights", "episodes", "seeds", "eval_episodes", "trace_episodes", "output", "desk"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls()
        try:
            if "scenario" in d:
                base = cfg.scenario.to_dict()
                base.update(d["scenario"])
                cfg.scenario = ScenarioConfig.from_dict(base)
            if "topology" in d:
                cfg.topology = NetworkTopology.from_dict(d["topology"])
            if "params" in d:
                base = cfg.params.to_dict()
                base.update(d["params"])
                cfg.params = MetanetParams.from_dict(base)
            if "controller" in d:
                base = asdict(cfg.controller)
                for k, v in d["controller"].items():
                    if k not in base:
                        raise ConfigError(f"unknown controller key {k!r}")
                    if isinstance(base[k], dict) and isinstance(v, dict):
                        base[k] = {**base[k], **v}
                    else:
                        base[k] = v
                cfg.controller = ControllerConfig(**base)
            if "learner" in d:
                cfg.learner = LearnerConfig(**{**cfg.learner.to_dict(), **d["learner"]})
            if "baseline" in d:
                cfg.baseline = BaselineConfig(**{**asdict(cfg.baseline), **d["baseline"]})
            if "cost_weights" in d:
                cfg.cost_weights = {**cfg.cost_weights, **d["cost_weights"]}
            for k in ("episodes", "eval_episodes", "output", "desk"):
                if k in d:
                    setattr(cfg, k, d[k])
            if "seeds" in d:
                cfg.seeds = [int(s) for s in d["seeds"]]
            if "trace_episodes" in d:
                cfg.trace_episodes = [int(e) for e in d["trace_episodes"]]
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def with_desk_preset(self) -> "ExperimentConfig":
        """Short horizon, 20 episodes and 3 seeds for quick checks."""
        cfg = copy.deepcopy(self)
        cfg.controller.horizon = {**cfg.controller.horizon, "Np": 12, "Nc": 2}
        cfg.episodes = 20
        cfg.seeds = list(cfg.seeds[:3]) if len(cfg.seeds) >= 3 else [0, 1, 2]
        cfg.desk = True
        cfg.validate()
        return cfg


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# agents


@dataclass
class Decision:
    action: np.ndarray
    v_value: float
    v_ok: bool
    q_value: float = float("nan")
    grad_q: np.ndarray | None = None
    hess_q: np.ndarray | None = None
    degraded: bool = False
    explored: bool = False
    solve_time: float = 0.0


class MpcAgent:
    """MPC policy with optional exploration and Q-sensitivity bookkeeping."""

    def __init__(self, mpc: ParametricMpc, theta: ThetaVector, learning: bool = False, hessian_mode: str = "gauss-newton"):
        self.mpc = mpc
        self.theta = theta
        self.learning = learning
        self.hessian_mode = hessian_mode
        self.ctl = MpcController(mpc)

    def reset(self, r0) -> None:
        self.ctl.reset()
        self.ctl.last_action = np.atleast_1d(np.asarray(r0, dtype=float))

    def decide(self, x: TrafficState, d: Disturbance, r_prev, rng: np.random.Generator, schedule: LearnerSchedule | None) -> Decision:
        mpc, th = self.mpc, self.theta
        res_v = self.ctl.eval_value(x, d, th, r_prev)
        t = res_v.wall_time
        if not res_v.optimal:
            return Decision(res_v.action, float("nan"), False, degraded=True, solve_time=t)
        action, res_q, explored = res_v.action, res_v, False
        if self.learning and schedule is not None and schedule.epsilon > 0 and rng.random() < schedule.epsilon:
            q = rng.normal(0.0, schedule.sigma_q, size=mpc.vars.n_u)
            res_e = self.ctl.eval_value(x, d, th, r_prev, q=q, remember=False)
            t += res_e.wall_time
            if res_e.optimal:
                action = res_e.action
                res_q = self.ctl.eval_action_value(x, action, d, th, r_prev, warm_from=res_e)
                t += res_q.wall_time
                explored = True
        self.ctl.last_action = action.copy()
        dec = Decision(action.copy(), res_v.value, True, res_q.value, explored=explored, solve_time=t)
        if not res_q.optimal:
            dec.degraded = True
            return dec
        if self.learning:
            dec.grad_q = theta_gradient_of_Q(mpc, res_q)
            if self.hessian_mode == "finite-difference":
                dec.hess_q = theta_hessian_of_Q(mpc, res_q, "finite-difference")
        return dec


class PiAlineaAgent:
    def __init__(self, gains: PiAlineaGains, topo: NetworkTopology, p: MetanetParams, T_ctrl: float):
        self.topo = topo
        self.ramp = topo.controlled[0]
        org = topo.origins[self.ramp]
        self.segment = org.segment
        self.ctl = PiAlineaController(gains, org.capacity, p.w_max, T_ctrl)
        self.learning = False

    def reset(self, r0) -> None:
        self.ctl.r_prev = float(np.atleast_1d(r0)[0])
        self.ctl.rho_prev = None

    def decide(self, x: TrafficState, d: Disturbance, r_prev, rng, schedule) -> Decision:
        r = self.ctl.act(float(x.rho[self.segment]), float(x.w[self.ramp]), float(d.demand[self.ramp]))
        return Decision(np.array([r]), float("nan"), False)


class FixedFlowAgent:
    """Requests the same ramp flow at every decision; the simulator clips it.

    A request at ramp capacity is the unmetered reference.
    """

    def __init__(self, flow):
        self.flow = np.atleast_1d(np.asarray(flow, dtype=float))
        self.learning = False

    def reset(self, r0) -> None:
        pass

    def decide(self, x: TrafficState, d: Disturbance, r_prev, rng, schedule) -> Decision:
        return Decision(self.flow.copy(), float("nan"), False)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeMetrics:
    episode: int
    tts: float
    var: float
    viol: float
    tts_raw: float
    var_raw: float
    viol_raw: float
    total: float
    max_queue: float
    violating_steps: int
    mean_abs_td: float
    failures: int
    explored: int
    failed: bool = False
    wall_time: float = 0.0

    def row(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        d["failed"] = int(d["failed"])
        return d


@dataclass
class EpisodeTrace:
    rho: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    r: np.ndarray


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    transitions: list
    tds: list
    trace: EpisodeTrace | None
    interval_costs: list = field(default_factory=list)


def initial_ramp_flow(x: TrafficState, d: Disturbance, topo: NetworkTopology, p: MetanetParams) -> np.ndarray:
    ctrl = list(topo.controlled)
    caps = np.array([topo.origins[o].capacity for o in ctrl])
    seg = [topo.origins[o].segment for o in ctrl]
    return origin_flow_upper_bound(x.w[ctrl], d.demand[ctrl], x.rho[seg], caps, p)


def run_episode(
    topo: NetworkTopology,
    p: MetanetParams,
    agent,
    scenario: ScenarioRealization,
    rng: np.random.Generator,
    M: int = 6,
    weights: dict | None = None,
    schedule: LearnerSchedule | None = None,
    gamma: float = 0.98,
    td_exponent: int = 1,
    episode: int = 0,
    keep_trace: bool = False,
) -> EpisodeResult:
    """Simulate one episode from steady state; records one transition per pair of consecutive decisions."""
    weights = weights or {"c_T": 5.0, "c_V": 1600.0, "c_C": 5.0}
    t_start = time.perf_counter()
    N = len(scenario)
    x, _ = steady_state_init(scenario.disturbance(0), topo, p)
    r_applied = initial_ramp_flow(x, scenario.disturbance(0), topo, p)
    agent.reset(r_applied)
    ctrl = list(topo.controlled)
    cons = list(topo.constrained_origins)
    sums = np.zeros(3)
    max_q, n_viol, failures, explored = 0.0, 0, 0, 0
    trace = None
    if keep_trace:
        n, no = topo.n_segments, topo.n_origins
        trace = EpisodeTrace(np.zeros((N, n)), np.zeros((N, n)), np.zeros((N, n)), np.zeros((N, no)), np.zeros((N, len(ctrl))))
    transitions, tds, interval_costs = [], [], []
    pending = None
    failed = False
    try:
        for c in range(N // M):
            k = c * M
            d = scenario.disturbance(k)
            dec = agent.decide(x, d, r_applied, rng, schedule)
            failures += int(dec.degraded)
            explored += int(dec.explored)
            if pending is not None:
                pending.v_next = dec.v_value
                pending.degraded = pending.degraded or not dec.v_ok
                if not pending.degraded:
                    tds.append(td_error(pending, gamma, td_exponent))
                transitions.append(pending)
            x_start, cost = x.as_vector(), 0.0
            for m in range(M):
                dk = scenario.disturbance(k + m)
                u = clip_control(x, dec.action, dk, topo, p)
                x = step(x, u, dk, topo, p)
                sc = stage_cost(x, u, r_applied, topo, p, **weights)
                sums += (sc.tts, sc.variability, sc.violation)
                cost += sc.total
                r_applied = u
                if cons:
                    max_q = max(max_q, float(np.max(x.w[cons])))
                    n_viol += int(np.any(x.w[cons] > p.w_max))
                if trace is not None:
                    j = k + m
                    trace.rho[j], trace.v[j], trace.w[j], trace.r[j] = x.rho, x.v, x.w, u
                    trace.q[j] = np.asarray(topo.lanes) * x.rho * x.v
            interval_costs.append(cost)
            if not math.isnan(dec.v_value) or isinstance(agent, MpcAgent):
                pending = Transition(
                    x_start, dec.action.copy(), d.as_vector(), cost, x.as_vector(), episode, c,
                    dec.q_value, float("nan"), dec.grad_q, dec.hess_q, dec.degraded,
                )
    except SimulationDiverged as exc:
        logger.error("episode %d diverged: %s", episode, exc)
        failed = True
        transitions = []
    c_T, c_V, c_C = weights["c_T"], weights["c_V"], weights["c_C"]
    metrics = EpisodeMetrics(
        episode=episode,
        tts=c_T * sums[0],
        var=c_V * sums[1],
        viol=c_C * sums[2],
        tts_raw=sums[0],
        var_raw=sums[1],
        viol_raw=sums[2],
        total=c_T * sums[0] + c_V * sums[1] + c_C * sums[2],
        max_queue=max_q,
        violating_steps=n_viol,
        mean_abs_td=float(np.mean(np.abs(tds))) if tds else float("nan"),
        failures=failures,
        explored=explored,
        failed=failed,
        wall_time=time.perf_counter() - t_start,
    )
    return EpisodeResult(metrics, transitions, tds, trace, interval_costs)


# ---------------------------------------------------------------------------
# runs


@dataclass
class SeedRun:
    seed: int
    metrics: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    tds: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    degraded: bool = False


@dataclass
class RunArtifacts:
    config: dict
    controller: str
    theta_names: list
    runs: list = field(default_factory=list)
    mode: str = "train"

    @property
    def degraded(self) -> bool:
        return any(r.degraded for r in self.runs)

    def final_theta(self) -> np.ndarray:
        """Mean over seeds of the last theta of each run."""
        return np.mean([r.theta[-1] for r in self.runs if r.theta], axis=0)


def _seed_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    train_s, explore_s, sample_s, eval_s = ss.spawn(4)
    return train_s, explore_s, sample_s, eval_s


def episode_scenario(cfg: ExperimentConfig, stream: np.random.SeedSequence, episode: int) -> ScenarioRealization:
    child = np.random.SeedSequence(entropy=stream.entropy, spawn_key=stream.spawn_key + (episode,))
    return generate_scenario(cfg.scenario, int(child.generate_state(1, np.uint64)[0] >> np.uint64(1)))


def build_mpc(cfg: ExperimentConfig) -> ParametricMpc:
    return ParametricMpc(cfg.topology, cfg.params, cfg.horizon(), cfg.constants(), cfg.flags(), cfg.solver_options())


def initial_theta(cfg: ExperimentConfig, mpc: ParametricMpc) -> ThetaVector:
    theta = mpc.theta0.load_dict(cfg.controller.theta_init)
    if cfg.controller.theta_file:
        with open(cfg.controller.theta_file) as fh:
            data = json.load(fh)
        theta = theta.load_dict(data.get("theta", data))
    return theta


def _trace_wanted(cfg: ExperimentConfig, episode: int, n: int) -> bool:
    return any((e if e >= 0 else n + e) == episode for e in cfg.trace_episodes)


def _atomic_pickle(obj, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(obj, fh)
    os.replace(tmp, path)


def train_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: Path | None = None, mpc: ParametricMpc | None = None) -> SeedRun:
    """Train one seed; resumes from ``checkpoint_dir`` when a snapshot exists."""
    mpc = mpc or build_mpc(cfg)
    lc = cfg.learner
    train_s, explore_s, sample_s, _ = _seed_streams(seed)
    snap_path = checkpoint_dir / f"seed{seed}.ckpt" if checkpoint_dir else None
    if snap_path is not None and snap_path.exists():
        with open(snap_path, "rb") as fh:
            state = pickle.load(fh)
        logger.info("seed %d: resuming after episode %d", seed, len(state["run"].metrics))
    else:
        theta = initial_theta(cfg, mpc)
        state = {
            "run": SeedRun(seed, theta=[theta.values.copy()]),
            "theta": theta.values.copy(),
            "schedule": LearnerSchedule.from_config(lc),
            "buffer": ReplayBuffer(lc.buffer_episodes),
            "explore_rng": np.random.default_rng(explore_s),
            "sample_rng": np.random.default_rng(sample_s),
        }
    run: SeedRun = state["run"]
    theta = mpc.theta0.with_values(state["theta"])
    agent = MpcAgent(mpc, theta, learning=True, hessian_mode=lc.hessian_mode)
    for ep in range(len(run.metrics), cfg.episodes):
        agent.theta = mpc.theta0.with_values(state["theta"])
        scen = episode_scenario(cfg, train_s, ep)
        res = run_episode(
            cfg.topology, cfg.params, agent, scen, state["explore_rng"], cfg.horizon().M, cfg.cost_weights,
            state["schedule"], lc.gamma, lc.td_exponent, ep, _trace_wanted(cfg, ep, cfg.episodes),
        )
        m = res.metrics
        logger.info(
            "seed %d episode %d: tts %.1f var %.1f viol %.1f |td| %.3g failures %d (%.1fs)",
            seed, ep, m.tts, m.var, m.viol, m.mean_abs_td, m.failures, m.wall_time,
        )
        run.metrics.append(m)
        run.tds.extend(res.tds)
        if res.trace is not None:
            run.traces[ep] = res.trace
        if m.failed or m.failures > (len(scen) // cfg.horizon().M) // 2:
            run.degraded = True
        if res.transitions:
            state["buffer"].add_episode(res.transitions)
        new = state["theta"]
        if len(state["buffer"]) and lc.alpha > 0:
            try:
                batch = sample_batch(state["buffer"], lc, state["sample_rng"])
                upd = build_update(batch, len(theta), lc)
                new, report = apply_update(
                    state["theta"], upd.p, upd.H, state["schedule"].alpha, theta.lb, theta.ub,
                    lc.max_rel_step, lc.rate_floor, lc.min_eig, upd.mean_abs_td,
                )
                run.updates.append({"episode": ep, **report.row()})
                if not report.ok:
                    run.degraded = True
            except ValueError as exc:
                logger.warning("seed %d episode %d: update skipped (%s)", seed, ep, exc)
                run.updates.append({"episode": ep, "p_norm": float("nan"), "cond_H": float("nan"), "beta": float("nan"), "step_norm": 0.0, "n_active": 0, "mean_abs_td": float("nan"), "ok": 0})
            state["schedule"] = decay(state["schedule"], lc, "update")
        state["schedule"] = decay(state["schedule"], lc, "episode")
        state["theta"] = np.asarray(new, dtype=float)
        assert mpc.theta0.with_values(state["theta"]).within_bounds(1e-12)
        run.theta.append(state["theta"].copy())
        if snap_path is not None:
            _atomic_pickle(state, snap_path)
    return run


def _train_worker(args):
    cfg, seed, ckpt = args
    return train_seed(cfg, seed, ckpt)


def train(cfg: ExperimentConfig, checkpoint_dir: str | os.PathLike | None = None, workers: int = 1) -> RunArtifacts:
    """Learn theta for every configured seed; seeds are independent and may run in parallel processes."""
    if cfg.controller.kind != "mpcrl":
        raise ConfigError("training requires controller.kind = 'mpcrl'")
    mpc = build_mpc(cfg)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(cfg.to_dict(), "mpcrl", list(mpc.theta0.names))
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            art.runs = list(pool.map(_train_worker, [(cfg, s, ckpt) for s in cfg.seeds]))
    else:
        art.runs = [train_seed(cfg, seed, ckpt, mpc) for seed in cfg.seeds]
    return art


def make_agent(cfg: ExperimentConfig, kind: str, mpc: ParametricMpc | None = None, theta: np.ndarray | None = None, gains: PiAlineaGains | None = None):
    if kind == "pi-alinea":
        return PiAlineaAgent(gains or baseline_gains(cfg), cfg.topology, cfg.params, cfg.horizon().M * cfg.params.T)
    mpc = mpc or build_mpc(cfg)
    th = initial_theta(cfg, mpc)
    if kind == "mpcrl" and theta is not None:
        th = th.with_values(theta)
    return MpcAgent(mpc, th, learning=False)


def baseline_gains(cfg: ExperimentConfig) -> PiAlineaGains:
    b = cfg.baseline
    rho_hat = b.rho_hat if b.rho_hat is not None else cfg.constants().rho_crit
    if b.gains_file:
        with open(b.gains_file) as fh:
            g = json.load(fh)
        return PiAlineaGains(float(g["K_P"]), float(g["K_I"]), float(g.get("rho_hat", rho_hat)))
    return PiAlineaGains(b.K_P, b.K_I, rho_hat)


def evaluate(
    cfg: ExperimentConfig,
    controller: str,
    episodes: int | None = None,
    seeds: list | None = None,
    theta: np.ndarray | None = None,
    gains: PiAlineaGains | None = None,
) -> RunArtifacts:
    """Run a controller without learning on held-out scenarios of each seed."""
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller {controller!r}")
    episodes = episodes or cfg.eval_episodes
    seeds = list(seeds if seeds is not None else cfg.seeds)
    mpc = build_mpc(cfg) if controller != "pi-alinea" else None
    names = list(mpc.theta0.names) if mpc else []
    art = RunArtifacts(cfg.to_dict(), controller, names, mode="evaluate")
    for seed in seeds:
        _, _, _, eval_s = _seed_streams(seed)
        agent = make_agent(cfg, controller, mpc, theta, gains)
        run = SeedRun(seed)
        if isinstance(agent, MpcAgent):
            run.theta.append(agent.theta.values.copy())
        rng = np.random.default_rng(eval_s)
        for ep in range(episodes):
            res = run_episode(
                cfg.topology, cfg.params, agent, episode_scenario(cfg, eval_s, ep), rng, cfg.horizon().M,
                cfg.cost_weights, None, cfg.learner.gamma, cfg.learner.td_exponent, ep, _trace_wanted(cfg, ep, episodes),
            )
            run.metrics.append(res.metrics)
            run.tds.extend(res.tds)
            if res.trace is not None:
                run.traces[ep] = res.trace
            if res.metrics.failed or res.metrics.failures > len(res.tds) // 2 + 1:
                run.degraded = True
        art.runs.append(run)
    return art


def aggregate(art: RunArtifacts, key: str = "total") -> dict:
    """Mean over seeds of per-seed episode means, with a Student-t 95% interval."""
    per_seed = np.array([np.mean([getattr(m, key) for m in r.metrics]) for r in art.runs])
    mean = float(np.mean(per_seed))
    if per_seed.size > 1:
        half = float(stats.t.ppf(0.975, per_seed.size - 1) * np.std(per_seed, ddof=1) / math.sqrt(per_seed.size))
    else:
        half = float("nan")
    return {"mean": mean, "ci95": [mean - half, mean + half], "per_seed": per_seed.tolist()}


def tune_baseline(cfg: ExperimentConfig, seed: int = 0, budget: int | None = None, candidates=None):
    """Random search over PI-ALINEA gains on fixed-seed episodes."""
    b = cfg.baseline
    rho_hat = b.rho_hat if b.rho_hat is not None else cfg.constants().rho_crit
    scen = [generate_scenario(cfg.scenario, s) for s in b.tune_seeds]
    T_ctrl = cfg.horizon().M * cfg.params.T

    def cost(g: PiAlineaGains) -> float:
        agent = PiAlineaAgent(g, cfg.topology, cfg.params, T_ctrl)
        totals = []
        for sc in scen:
            res = run_episode(cfg.topology, cfg.params, agent, sc, np.random.default_rng(0), cfg.horizon().M, cfg.cost_weights)
            if res.metrics.failed:
                return float("nan")
            totals.append(res.metrics.total)
        return float(np.mean(totals))

    search = SearchConfig(budget if budget is not None else b.budget, tuple(b.K_P_range), tuple(b.K_I_range))
    return tune_gains(cost, search, seed, rho_hat, candidates)


# ---------------------------------------------------------------------------
# export


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def moving_average(x, window: int = TD_WINDOW) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def _json_clean(o):
    if isinstance(o, dict):
        return {str(k): _json_clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _json_clean(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else None
    if isinstance(o, (np.integer,)):
        return int(o)
    return o


def summary(art: RunArtifacts) -> dict:
    out = {
        "controller": art.controller,
        "mode": art.mode,
        "seeds": [r.seed for r in art.runs],
        "episodes": max((len(r.metrics) for r in art.runs), default=0),
        "degraded": art.degraded,
        "aggregate": {k: aggregate(art, k) for k in ("total", "tts", "var", "viol")} if art.runs and all(r.metrics for r in art.runs) else {},
        "config": art.config,
    }
    if art.theta_names and any(r.theta for r in art.runs):
        out["theta"] = dict(zip(art.theta_names, art.final_theta().tolist()))
    return _json_clean(out)


def export_report(art: RunArtifacts, out_dir: str | os.PathLike, scenario_cfg: ScenarioConfig | None = None, envelope_samples: int = 200) -> dict:
    """Write the CSV tables and the JSON summary; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"files": [], "skipped": {}}

    def done(name):
        manifest["files"].append(name)

    metric_cols = [k for k in EpisodeMetrics.__dataclass_fields__ if k != "wall_time"]
    rows = [[r.seed] + [m.row()[k] for k in metric_cols] for r in art.runs for m in r.metrics]
    if rows:
        _write_csv(out / "learning_costs.csv", ["seed"] + metric_cols, rows)
        done("learning_costs.csv")
    else:
        manifest["skipped"]["learning_costs.csv"] = "no episodes"

    if art.theta_names and any(len(r.theta) for r in art.runs):
        rows = [[r.seed, i] + list(th) for r in art.runs for i, th in enumerate(r.theta)]
        _write_csv(out / "theta_trajectory.csv", ["seed", "update"] + art.theta_names, rows)
        done("theta_trajectory.csv")
    else:
        manifest["skipped"]["theta_trajectory.csv"] = "no theta recorded"

    if any(r.tds for r in art.runs):
        rows = []
        for r in art.runs:
            ma = moving_average(r.tds)
            mabs = moving_average(np.abs(r.tds))
            rows += [[r.seed, i, r.tds[i], ma[i], mabs[i]] for i in range(len(r.tds))]
        _write_csv(out / "td_error.csv", ["seed", "transition", "td", "td_moving_average", "abs_td_moving_average"], rows)
        done("td_error.csv")
    else:
        manifest["skipped"]["td_error.csv"] = "no TD errors recorded"

    if any(r.updates for r in art.runs):
        cols = ["episode", "p_norm", "cond_H", "beta", "step_norm", "n_active", "mean_abs_td", "ok"]
        rows = [[r.seed] + [u[c] for c in cols] for r in art.runs for u in r.updates]
        _write_csv(out / "update_log.csv", ["seed"] + cols, rows)
        done("update_log.csv")

    if any(r.traces for r in art.runs):
        qrows, hrows = [], []
        for r in art.runs:
            for ep in sorted(r.traces):
                tr = r.traces[ep]
                for k in range(tr.w.shape[0]):
                    qrows.append([r.seed, ep, k + 1, *tr.w[k], *tr.r[k]])
                    for j in range(tr.rho.shape[1]):
                        hrows.append([r.seed, ep, k + 1, j + 1, tr.rho[k, j], tr.v[k, j], tr.q[k, j]])
        no = next(iter(next(r for r in art.runs if r.traces).traces.values())).w.shape[1]
        nr = next(iter(next(r for r in art.runs if r.traces).traces.values())).r.shape[1]
        _write_csv(out / "queue_trace.csv", ["seed", "episode", "k"] + [f"w_O{o + 1}" for o in range(no)] + [f"r_{i + 1}" for i in range(nr)], qrows)
        _write_csv(out / "segment_heatmaps.csv", ["seed", "episode", "k", "segment", "rho", "v", "q"], hrows)
        done("queue_trace.csv")
        done("segment_heatmaps.csv")
    else:
        manifest["skipped"]["queue_trace.csv"] = "no traced episodes"
        manifest["skipped"]["segment_heatmaps.csv"] = "no traced episodes"

    if scenario_cfg is not None:
        samples = np.array([np.vstack([s.demand, s.congestion]) for s in (generate_scenario(scenario_cfg, 10_000 + i) for i in range(envelope_samples))])
        mean, sd = samples.mean(axis=0), samples.std(axis=0)
        t = np.arange(samples.shape[2]) * scenario_cfg.T * 3600.0
        header = ["time_s"] + [f"{c}_{s}" for c in CHANNELS for s in ("mean", "lower", "upper")]
        rows = [[t[k]] + [v for ch in range(len(CHANNELS)) for v in (mean[ch, k], max(mean[ch, k] - 2 * sd[ch, k], 0.0), mean[ch, k] + 2 * sd[ch, k])] for k in range(t.size)]
        _write_csv(out / "scenario_envelope.csv", header, rows)
        done("scenario_envelope.csv")

    with open(out / "summary.json", "w") as fh:
        json.dump(summary(art), fh, indent=2, sort_keys=True)
    done("summary.json")
    if art.theta_names and any(r.theta for r in art.runs):
        with open(out / "theta.json", "w") as fh:
            json.dump({"theta": dict(zip(art.theta_names, art.final_theta().tolist()))}, fh, indent=2, sort_keys=True)
        done("theta.json")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    save_artifacts(art, out / "artifacts.pkl")
    return manifest


def save_artifacts(art: RunArtifacts, path: Path) -> None:
    """Pickle the run with wall times zeroed so equal runs give equal bytes."""
    clean = copy.copy(art)
    clean.runs = []
    for r in art.runs:
        rc = copy.copy(r)
        rc.metrics = [replace(m, wall_time=0.0) for m in r.metrics]
        clean.runs.append(rc)
    with open(path, "wb") as fh:
        pickle.dump(clean, fh, protocol=4)


def load_artifacts(path: str | os.PathLike) -> RunArtifacts:
    with open(path, "rb") as fh:
        art = pickle.load(fh)
    if not isinstance(art, RunArtifacts):
        raise ValueError(f"{path} does not hold run artifacts")
    return art
