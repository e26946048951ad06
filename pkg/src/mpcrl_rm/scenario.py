"""Random two-peak demand and downstream-congestion profiles."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .metanet import Disturbance, MetanetParams, NetworkTopology, TrafficState, origin_flows, step

logger = logging.getLogger(__name__)

CHANNELS = ("d_O1", "d_O2", "d_rho_D1")


class InvalidScenarioConfig(ValueError):
    pass


def _two_peaks(cycle: list[tuple[float, float]], period: float = 2.0) -> list[tuple[float, float]]:
    nodes = list(cycle)
    nodes += [(t + period, v) for t, v in cycle if t > 0]
    return nodes


# One cycle lasts two hours; the second peak repeats it. Demands climb to the
# peak in 20 minutes, congestion at the destination follows 10 minutes later.
_O1 = _two_peaks([(0.0, 1000.0), (0.25, 1000.0), (0.25 + 1 / 3, 3000.0), (1.0, 3000.0), (1.0 + 1 / 3, 1000.0), (2.0, 1000.0)])
_O2 = _two_peaks([(0.0, 150.0), (0.25, 150.0), (0.25 + 1 / 3, 1500.0), (0.8333, 1500.0), (1.1667, 150.0), (2.0, 150.0)])
_DR = _two_peaks([(0.0, 20.0), (0.4167, 20.0), (0.75, 60.0), (1.0833, 60.0), (1.4167, 20.0), (2.0, 20.0)])


def _default_nodes() -> dict:
    return {"d_O1": [list(n) for n in _O1], "d_O2": [list(n) for n in _O2], "d_rho_D1": [list(n) for n in _DR]}


def _default_std() -> dict:
    def per_node(nodes, low, high):
        vals = np.array([v for _, v in nodes])
        return [high if v > vals.min() else low for v in vals]

    return {
        "d_O1": per_node(_O1, 50.0, 150.0),
        "d_O2": per_node(_O2, 25.0, 100.0),
        "d_rho_D1": per_node(_DR, 1.0, 5.0),
    }


@dataclass
class ScenarioConfig:
    """Nominal node lists ``[(time h, value), ...]`` per channel plus noise levels.

    ``std`` holds one amplitude standard deviation per node; ``time_jitter`` is
    the standard deviation (h) of the shift applied to interior nodes.
    """

    horizon: float = 4.0
    T: float = 10.0 / 3600.0
    nodes: dict = field(default_factory=_default_nodes)
    std: dict = field(default_factory=_default_std)
    time_jitter: float = 2.0 / 60.0
    smoothing: int = 6
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.T))

    def validate(self) -> None:
        if self.horizon <= 0 or self.T <= 0:
            raise InvalidScenarioConfig("horizon and T must be positive")
        if abs(self.n_steps * self.T - self.horizon) > 1e-9:
            raise InvalidScenarioConfig("horizon must be a multiple of T")
        if self.smoothing < 1:
            raise InvalidScenarioConfig("smoothing window must be at least one step")
        for ch in CHANNELS:
            nodes = self.nodes.get(ch)
            if not nodes:
                raise InvalidScenarioConfig(f"channel {ch} has no nodes")
            t = np.array([n[0] for n in nodes], dtype=float)
            v = np.array([n[1] for n in nodes], dtype=float)
            if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > self.horizon + 1e-12:
                raise InvalidScenarioConfig(f"channel {ch}: node times must increase within [0, horizon]")
            if np.any(v < 0):
                raise InvalidScenarioConfig(f"channel {ch}: node values must be nonnegative")
            s = np.asarray(self.std.get(ch, np.zeros(len(nodes))), dtype=float)
            if s.shape != v.shape or np.any(s < 0):
                raise InvalidScenarioConfig(f"channel {ch}: need one nonnegative std per node")
        if self.time_jitter < 0:
            raise InvalidScenarioConfig("time jitter must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "T_s": self.T * 3600.0,
            "nodes": self.nodes,
            "std": self.std,
            "time_jitter": self.time_jitter,
            "smoothing": self.smoothing,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "T_s" in d:
            d["T"] = d.pop("T_s") / 3600.0
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def zero_noise(self) -> "ScenarioConfig":
        return ScenarioConfig(
            self.horizon,
            self.T,
            self.nodes,
            {ch: [0.0] * len(self.nodes[ch]) for ch in CHANNELS},
            0.0,
            self.smoothing,
            self.seed,
        )


@dataclass
class ScenarioRealization:
    """Per-process-step disturbance series; ``demand`` is (origins, N), ``congestion`` (destinations, N)."""

    T: float
    demand: np.ndarray
    congestion: np.ndarray

    def __len__(self) -> int:
        return self.demand.shape[1]

    @property
    def times_s(self) -> np.ndarray:
        return np.arange(len(self)) * self.T * 3600.0

    def disturbance(self, k: int) -> Disturbance:
        return Disturbance(self.demand[:, k], self.congestion[:, k])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", *CHANNELS])
            for k in range(len(self)):
                writer.writerow([repr(float(self.times_s[k])), repr(float(self.demand[0, k])), repr(float(self.demand[1, k])), repr(float(self.congestion[0, k]))])


def sample_nodes(cfg: ScenarioConfig, rng: np.random.Generator) -> dict:
    """Perturb node values (truncated at zero) and interior node times."""
    out = {}
    for ch in CHANNELS:
        nodes = np.asarray(cfg.nodes[ch], dtype=float)
        t, v = nodes[:, 0].copy(), nodes[:, 1].copy()
        s = np.asarray(cfg.std[ch], dtype=float)
        noise = rng.standard_normal(v.size)
        v = np.maximum(v + s * noise, 0.0)
        jitter = rng.standard_normal(t.size)
        if cfg.time_jitter > 0 and t.size > 2:
            t[1:-1] += cfg.time_jitter * jitter[1:-1]
            # keep node order; a tiny gap preserves strict monotonicity
            for i in range(1, t.size):
                t[i] = max(t[i], t[i - 1] + 1e-6)
        out[ch] = (t, v)
    return out


def _render(cfg: ScenarioConfig, nodes: dict) -> np.ndarray:
    grid = np.arange(cfg.n_steps) * cfg.T
    series = []
    for ch in CHANNELS:
        t, v = nodes[ch]
        y = np.interp(grid, t, v)
        if cfg.smoothing > 1:
            y = uniform_filter1d(y, cfg.smoothing, mode="nearest")
        series.append(np.maximum(y, 0.0))
    return np.array(series)


def nominal_profile(cfg: ScenarioConfig) -> ScenarioRealization:
    cfg.validate()
    nodes = {ch: (np.asarray(cfg.nodes[ch], float)[:, 0], np.asarray(cfg.nodes[ch], float)[:, 1]) for ch in CHANNELS}
    s = _render(cfg, nodes)
    return ScenarioRealization(cfg.T, s[:2], s[2:])


def generate_scenario(cfg: ScenarioConfig, seed: int | None = None) -> ScenarioRealization:
    """One random realization; deterministic given ``seed`` (defaults to ``cfg.seed``)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    s = _render(cfg, sample_nodes(cfg, rng))
    return ScenarioRealization(cfg.T, s[:2], s[2:])


def steady_state_init(
    initial: Disturbance,
    topo: NetworkTopology,
    p: MetanetParams,
    minutes: float = 30.0,
    tol: float = 1e-6,
) -> tuple[TrafficState, bool]:
    """Run the network from free flow under constant ``initial`` disturbances.

    Ramps release their maximum flow. Returns the final state and whether
    successive states had converged to within ``tol`` at exit.
    """
    x = TrafficState.free_flow(topo, p)
    n_steps = int(round(minutes / 60.0 / p.T))
    diff = np.inf
    for _ in range(n_steps):
        u = origin_flows(x, np.full(len(topo.controlled), np.inf), initial, topo, p)[list(topo.controlled)]
        u = np.minimum(u, _ramp_bound(x, initial, topo, p))
        x_next = step(x, u, initial, topo, p)
        diff = float(np.max(np.abs(x_next.as_vector() - x.as_vector())))
        x = x_next
    converged = diff < tol
    if not converged:
        warnings.warn(f"steady state not reached after {minutes} min (last change {diff:.3g})", RuntimeWarning, stacklevel=2)
    return x, converged


def _ramp_bound(x, d, topo, p):
    from .metanet import origin_flow_upper_bound

    ctrl = list(topo.controlled)
    caps = np.array([topo.origins[o].capacity for o in ctrl])
    seg = [topo.origins[o].segment for o in ctrl]
    return origin_flow_upper_bound(x.w[ctrl], d.demand[ctrl], x.rho[seg], caps, p)
