"""Destination-independent METANET simulation of a freeway stretch.

Canonical units: hours, km, veh/h, veh/km/lane. Segments form a single chain
ordered from upstream to downstream; the mainstream origin feeds the first
segment and the only destination sits after the last one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAINSTREAM = "mainstream"
ONRAMP = "on-ramp"


class SimulationDiverged(FloatingPointError):
    """A non-finite quantity appeared during a simulation step."""

    def __init__(self, quantity: str, values):
        super().__init__(f"non-finite {quantity}: {values}")
        self.quantity = quantity


@dataclass(frozen=True)
class Origin:
    name: str
    kind: str
    capacity: float
    segment: int


@dataclass(frozen=True)
class NetworkTopology:
    """Segments (length km, lanes), origins, destinations and constrained origins."""

    lengths: tuple[float, ...]
    lanes: tuple[int, ...]
    origins: tuple[Origin, ...]
    destinations: tuple[int, ...] = ()
    constrained_origins: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.lengths) < 1 or len(self.lengths) != len(self.lanes):
            raise ValueError("need at least one segment and one lane count per segment")
        if any(L <= 0 for L in self.lengths) or any(n <= 0 for n in self.lanes):
            raise ValueError("segment lengths and lane counts must be positive")
        n = len(self.lengths)
        for o in self.origins:
            if not 0 <= o.segment < n:
                raise ValueError(f"origin {o.name} enters missing segment {o.segment}")
            if o.kind not in (MAINSTREAM, ONRAMP):
                raise ValueError(f"unknown origin kind {o.kind!r}")
            if o.capacity <= 0:
                raise ValueError(f"origin {o.name} needs a positive capacity")
            if o.kind == MAINSTREAM and o.segment != 0:
                raise ValueError("the mainstream origin must feed the first segment")
        if sum(o.kind == MAINSTREAM for o in self.origins) > 1:
            raise ValueError("at most one mainstream origin is supported")
        if not self.destinations:
            object.__setattr__(self, "destinations", (n - 1,))
        if self.destinations != (n - 1,):
            raise ValueError("a single destination after the last segment is supported")
        for i in self.constrained_origins:
            if not 0 <= i < len(self.origins):
                raise ValueError(f"constrained origin index {i} out of range")

    @classmethod
    def benchmark(cls) -> "NetworkTopology":
        """Three 1 km two-lane segments, mainstream O1 and metered on-ramp O2 at S3."""
        return cls(
            lengths=(1.0, 1.0, 1.0),
            lanes=(2, 2, 2),
            origins=(Origin("O1", MAINSTREAM, 3500.0, 0), Origin("O2", ONRAMP, 2000.0, 2)),
            destinations=(2,),
            constrained_origins=(1,),
        )

    @property
    def n_segments(self) -> int:
        return len(self.lengths)

    @property
    def n_origins(self) -> int:
        return len(self.origins)

    @property
    def n_destinations(self) -> int:
        return len(self.destinations)

    @property
    def n_states(self) -> int:
        return 2 * self.n_segments + self.n_origins

    @property
    def controlled(self) -> tuple[int, ...]:
        """Indices of the metered (on-ramp) origins, in action order."""
        return tuple(i for i, o in enumerate(self.origins) if o.kind == ONRAMP)

    @property
    def mainstream(self) -> int | None:
        for i, o in enumerate(self.origins):
            if o.kind == MAINSTREAM:
                return i
        return None

    @property
    def capacities(self) -> np.ndarray:
        return np.array([o.capacity for o in self.origins])

    def to_dict(self) -> dict:
        return {
            "segments": [{"length": L, "lanes": n} for L, n in zip(self.lengths, self.lanes)],
            "origins": [{"name": o.name, "kind": o.kind, "capacity": o.capacity, "segment": o.segment} for o in self.origins],
            "destinations": list(self.destinations),
            "constrained_origins": list(self.constrained_origins),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkTopology":
        return cls(
            lengths=tuple(float(s["length"]) for s in d["segments"]),
            lanes=tuple(int(s["lanes"]) for s in d["segments"]),
            origins=tuple(Origin(o["name"], o["kind"], float(o["capacity"]), int(o["segment"])) for o in d["origins"]),
            destinations=tuple(d.get("destinations", ())),
            constrained_origins=tuple(d.get("constrained_origins", ())),
        )


@dataclass(frozen=True)
class MetanetParams:
    """Model parameters; time constants are stored in hours."""

    T: float = 10.0 / 3600.0
    tau: float = 18.0 / 3600.0
    eta: float = 60.0
    kappa: float = 40.0
    mu: float = 0.0122
    a: float = 1.867
    rho_crit: float = 33.5
    v_free: float = 102.0
    rho_max: float = 180.0
    w_max: float = 50.0

    def __post_init__(self):
        for name in ("T", "tau", "eta", "kappa", "mu", "a", "rho_crit", "v_free", "rho_max", "w_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.rho_crit >= self.rho_max:
            raise ValueError("rho_crit must be below rho_max")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["T_s"] = d.pop("T") * 3600.0
        d["tau_s"] = d.pop("tau") * 3600.0
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetanetParams":
        d = dict(d)
        if "T_s" in d:
            d["T"] = d.pop("T_s") / 3600.0
        if "tau_s" in d:
            d["tau"] = d.pop("tau_s") / 3600.0
        return cls(**d)


@dataclass
class TrafficState:
    rho: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        self.w = np.asarray(self.w, dtype=float).copy()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.v, self.w])

    @classmethod
    def from_vector(cls, x, topo: NetworkTopology) -> "TrafficState":
        x = np.asarray(x, dtype=float)
        n = topo.n_segments
        if x.size != topo.n_states:
            raise ValueError(f"expected {topo.n_states} state entries, got {x.size}")
        return cls(x[:n], x[n : 2 * n], x[2 * n :])

    @classmethod
    def free_flow(cls, topo: NetworkTopology, p: MetanetParams) -> "TrafficState":
        n = topo.n_segments
        return cls(np.zeros(n), np.full(n, p.v_free), np.zeros(topo.n_origins))

    def copy(self) -> "TrafficState":
        return TrafficState(self.rho, self.v, self.w)


@dataclass
class Disturbance:
    demand: np.ndarray
    congestion: np.ndarray

    def __post_init__(self):
        self.demand = np.atleast_1d(np.asarray(self.demand, dtype=float)).copy()
        self.congestion = np.atleast_1d(np.asarray(self.congestion, dtype=float)).copy()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.demand, self.congestion])

    def validate(self, topo: NetworkTopology, ceiling: float = 2.0) -> None:
        if np.any(self.demand < 0) or np.any(self.congestion < 0):
            raise ValueError("disturbances must be nonnegative")
        if np.any(self.demand > ceiling * topo.capacities):
            raise ValueError("demand above the sanity ceiling")


@dataclass
class StageCostBreakdown:
    tts: float
    variability: float
    violation: float
    total: float


def _check_finite(**arrays) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} must be finite")


def equilibrium_speed(rho, p: MetanetParams, a: float | None = None, rho_crit: float | None = None, v_free: float | None = None):
    """Equilibrium speed ``v_free * exp(-(rho / rho_crit)**a / a)``."""
    a = p.a if a is None else a
    rho_crit = p.rho_crit if rho_crit is None else rho_crit
    v_free = p.v_free if v_free is None else v_free
    rho = np.asarray(rho, dtype=float)
    _check_finite(rho=rho, a=np.asarray(a), rho_crit=np.asarray(rho_crit))
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    return v_free * np.exp(-((rho / rho_crit) ** a) / a)


def segment_flow(rho, v, lanes):
    rho, v = np.asarray(rho, dtype=float), np.asarray(v, dtype=float)
    _check_finite(rho=rho, v=v)
    return np.asarray(lanes) * rho * v


def origin_flow_upper_bound(w, d, rho_entry, C, p: MetanetParams, return_saturated: bool = False):
    """Largest flow an origin can release: min(d + w/T, C, C (rho_max - rho) / (rho_max - rho_crit)).

    Densities beyond ``rho_max`` clamp the supply term to zero and set the
    saturation flag.
    """
    w, d, rho_entry = np.asarray(w, dtype=float), np.asarray(d, dtype=float), np.asarray(rho_entry, dtype=float)
    _check_finite(w=w, d=d, rho_entry=rho_entry)
    saturated = rho_entry > p.rho_max
    supply = np.maximum(C * (p.rho_max - rho_entry) / (p.rho_max - p.rho_crit), 0.0)
    flow = np.maximum(np.minimum(np.minimum(d + w / p.T, C), supply), 0.0)
    if return_saturated:
        return flow, saturated
    return flow


def virtual_downstream_density(rho_last, d_rho, rho_crit):
    return np.maximum(np.minimum(rho_last, rho_crit), d_rho)


def clip_control(x: TrafficState, u, d: Disturbance, topo: NetworkTopology, p: MetanetParams) -> np.ndarray:
    """Clip requested on-ramp flows to what each ramp can physically release."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    ctrl = topo.controlled
    if u.size != len(ctrl):
        raise ValueError(f"expected {len(ctrl)} ramp flows, got {u.size}")
    caps = np.array([topo.origins[o].capacity for o in ctrl])
    seg = [topo.origins[o].segment for o in ctrl]
    bound = origin_flow_upper_bound(x.w[list(ctrl)], d.demand[list(ctrl)], x.rho[seg], caps, p)
    clipped = np.clip(u, 0.0, bound)
    if np.any(np.abs(clipped - u) > 1e-9 * np.maximum(1.0, np.abs(u))):
        logger.debug("ramp flow %s clipped to %s", u, clipped)
    return clipped


def origin_flows(x: TrafficState, u, d: Disturbance, topo: NetworkTopology, p: MetanetParams) -> np.ndarray:
    """Flow released by every origin: the mainstream at its bound, ramps at ``u``."""
    flows = np.zeros(topo.n_origins)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    for k, o in enumerate(topo.controlled):
        flows[o] = u[k]
    ms = topo.mainstream
    if ms is not None:
        org = topo.origins[ms]
        flows[ms] = origin_flow_upper_bound(x.w[ms], d.demand[ms], x.rho[org.segment], org.capacity, p)
    return flows


def step(x: TrafficState, u, d: Disturbance, topo: NetworkTopology, p: MetanetParams) -> TrafficState:
    """Advance the network by one process step of length ``p.T``."""
    T = p.T
    L = np.asarray(topo.lengths)
    lam = np.asarray(topo.lanes, dtype=float)
    rho, v, w = x.rho, x.v, x.w
    n = topo.n_segments

    flows = origin_flows(x, u, d, topo, p)
    ramp_in = np.zeros(n)
    upstream_in = 0.0
    for o, org in enumerate(topo.origins):
        if org.kind == ONRAMP:
            ramp_in[org.segment] += flows[o]
        else:
            upstream_in = flows[o]

    q = lam * rho * v
    q_up = np.concatenate([[upstream_in], q[:-1]])
    v_up = np.concatenate([[v[0]], v[:-1]])
    rho_down = np.concatenate([rho[1:], [virtual_downstream_density(rho[-1], d.congestion[0], p.rho_crit)]])

    rho_next = rho + T / (L * lam) * (q_up - q + ramp_in)
    v_next = (
        v
        + T / p.tau * (equilibrium_speed(rho, p) - v)
        + T / L * v * (v_up - v)
        - p.eta * T / (p.tau * L) * (rho_down - rho) / (rho + p.kappa)
        - p.mu * T * ramp_in * v / (L * lam * (rho + p.kappa))
    )
    w_next = w + T * (d.demand - flows)

    for name, arr in (("density", rho_next), ("speed", v_next), ("queue", w_next)):
        if not np.all(np.isfinite(arr)):
            raise SimulationDiverged(name, arr)
    # a queue emptied exactly can round to -1e-16
    return TrafficState(np.maximum(rho_next, 0.0), np.maximum(v_next, 0.0), np.maximum(w_next, 0.0))


def stage_cost(
    x: TrafficState,
    u,
    u_prev,
    topo: NetworkTopology,
    p: MetanetParams,
    c_T: float = 5.0,
    c_V: float = 1600.0,
    c_C: float = 5.0,
) -> StageCostBreakdown:
    """Weighted sum of time spent, control variability and queue-limit violation."""
    L = np.asarray(topo.lengths)
    lam = np.asarray(topo.lanes, dtype=float)
    tts = p.T * (float(np.sum(L * lam * x.rho)) + float(np.sum(x.w)))
    caps = np.array([topo.origins[o].capacity for o in topo.controlled])
    du = (np.atleast_1d(np.asarray(u, dtype=float)) - np.atleast_1d(np.asarray(u_prev, dtype=float))) / caps
    variability = float(np.sum(du**2))
    cons = list(topo.constrained_origins)
    violation = float(np.sum(np.maximum(0.0, x.w[cons] - p.w_max))) if cons else 0.0
    total = c_T * tts + c_V * variability + c_C * violation
    return StageCostBreakdown(tts, variability, violation, total)
