"""Second-order LSTD Q-learning with experience replay."""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, eigvalsh

from .boxqp import BoxQp, solve_box_qp

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    """One controller-timescale sample ``s --a--> s'`` with its stored evaluations.

    ``q_value`` and ``grad_q`` come from the pinned solve at ``(s, a)``;
    ``v_next`` is the value of the unperturbed solve at ``s'``. ``hess_q`` is
    only filled in finite-difference Hessian mode.
    """

    state: np.ndarray
    action: np.ndarray
    disturbance: np.ndarray
    cost: float
    next_state: np.ndarray
    episode: int
    step: int
    q_value: float
    v_next: float
    grad_q: np.ndarray | None
    hess_q: np.ndarray | None = None
    degraded: bool = False

    def __post_init__(self):
        if not np.isfinite(self.cost):
            raise ValueError("transition cost must be finite")


@dataclass
class LearnerConfig:
    gamma: float = 0.98
    td_exponent: int = 1
    alpha: float = 0.925
    alpha_decay: float = 0.925
    max_rel_step: float = 0.3
    rate_floor: float = 1e-3
    batch_episodes: float = 5.0
    buffer_episodes: int = 10
    recent_episodes: float = 2.5
    recent_fraction: float = 0.5
    sigma_q: float = 0.025
    epsilon: float = 0.5
    exploration_decay: float = 0.5
    hessian_mode: str = "gauss-newton"
    min_eig: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("learning rate must be nonnegative")
        for name in ("alpha_decay", "exploration_decay"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0.0 <= self.recent_fraction <= 1.0:
            raise ValueError("recent_fraction must lie in [0, 1]")
        if self.buffer_episodes < 1 or self.batch_episodes <= 0:
            raise ValueError("buffer and batch sizes must be positive")
        if self.hessian_mode not in ("gauss-newton", "finite-difference"):
            raise ValueError(f"unknown Hessian mode {self.hessian_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LearnerSchedule:
    """Mutable learning-rate and exploration schedules."""

    alpha: float
    sigma_q: float
    epsilon: float
    updates: int = 0
    episodes: int = 0

    @classmethod
    def from_config(cls, cfg: LearnerConfig) -> "LearnerSchedule":
        return cls(cfg.alpha, cfg.sigma_q, cfg.epsilon)


def decay(schedule: LearnerSchedule, cfg: LearnerConfig, event: str) -> LearnerSchedule:
    """Advance the schedules after an ``"update"`` or at the end of an ``"episode"``."""
    if event == "update":
        return LearnerSchedule(schedule.alpha * cfg.alpha_decay, schedule.sigma_q, schedule.epsilon, schedule.updates + 1, schedule.episodes)
    if event == "episode":
        f = cfg.exploration_decay
        return LearnerSchedule(schedule.alpha, schedule.sigma_q * f, schedule.epsilon * f, schedule.updates, schedule.episodes + 1)
    raise ValueError(f"unknown schedule event {event!r}")


def td_error(t: Transition, gamma: float, exponent: int = 1) -> float:
    """``L + gamma**exponent * V(s') - Q(s, a)``."""
    return float(t.cost + gamma**exponent * t.v_next - t.q_value)


class ReplayBuffer:
    """FIFO store of the transitions of the most recent episodes."""

    def __init__(self, capacity_episodes: int = 10):
        if capacity_episodes < 1:
            raise ValueError("capacity must be at least one episode")
        self.capacity = capacity_episodes
        self._episodes: deque[list[Transition]] = deque(maxlen=capacity_episodes)

    def add_episode(self, transitions: list[Transition]) -> None:
        self._episodes.append(list(transitions))

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def __len__(self) -> int:
        return sum(len(e) for e in self._episodes)

    @property
    def episodes(self) -> list[list[Transition]]:
        return list(self._episodes)

    def flat(self) -> list[Transition]:
        return [t for ep in self._episodes for t in ep]

    def episode_length(self) -> int:
        """Transitions per episode, taken from the latest episode."""
        return len(self._episodes[-1]) if self._episodes else 0


def sample_batch(buffer: ReplayBuffer, cfg: LearnerConfig, rng: np.random.Generator) -> list[Transition]:
    """Stratified sample: a ``recent_fraction`` share from the latest episodes, the rest from older ones.

    A stratum that is too small is sampled with replacement; when there is no
    older content the whole batch comes from the recent stratum.
    """
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty replay buffer")
    flat = buffer.flat()
    per_ep = buffer.episode_length()
    size = int(round(cfg.batch_episodes * per_ep))
    n_recent_pool = min(len(flat), int(cfg.recent_episodes * per_ep))
    recent = np.arange(len(flat) - n_recent_pool, len(flat))
    older = np.arange(0, len(flat) - n_recent_pool)
    n_recent = int(round(cfg.recent_fraction * size)) if older.size else size
    n_older = size - n_recent

    def draw(pool, k):
        if k == 0:
            return np.zeros(0, dtype=int)
        return rng.choice(pool, size=k, replace=k > pool.size)

    idx = np.concatenate([draw(recent, n_recent), draw(older, n_older)])
    return [flat[i] for i in idx]


@dataclass
class BatchUpdate:
    p: np.ndarray
    H: np.ndarray
    mean_abs_td: float
    n_used: int
    n_skipped: int


def build_update(batch: list[Transition], n_theta: int, cfg: LearnerConfig) -> BatchUpdate:
    """``p = -sum(delta * grad Q)`` and ``H = sum(grad Q grad Q')`` (minus ``sum(delta * hess Q)`` in finite-difference mode)."""
    p = np.zeros(n_theta)
    H = np.zeros((n_theta, n_theta))
    tds = []
    skipped = 0
    for t in batch:
        if t.degraded or t.grad_q is None or not np.isfinite(t.q_value) or not np.isfinite(t.v_next):
            skipped += 1
            continue
        delta = td_error(t, cfg.gamma, cfg.td_exponent)
        g = t.grad_q
        p -= delta * g
        H += np.outer(g, g)
        if cfg.hessian_mode == "finite-difference":
            if t.hess_q is None:
                raise ValueError("finite-difference mode needs a stored Hessian for every transition")
            H -= delta * t.hess_q
        tds.append(delta)
    if not tds:
        raise ValueError("every transition in the batch was skipped")
    if skipped:
        warnings.warn(f"{skipped} degraded transitions skipped", RuntimeWarning, stacklevel=2)
    return BatchUpdate(p, 0.5 * (H + H.T), float(np.mean(np.abs(tds))), len(tds), skipped)


@dataclass
class UpdateReport:
    p_norm: float
    cond_H: float
    beta: float
    delta: np.ndarray
    active: np.ndarray
    mean_abs_td: float
    ok: bool = True
    message: str = ""
    kkt_residual: float = 0.0

    def row(self) -> dict:
        return {
            "p_norm": self.p_norm,
            "cond_H": self.cond_H,
            "beta": self.beta,
            "step_norm": float(np.linalg.norm(self.delta)),
            "n_active": int(np.sum(self.active)),
            "mean_abs_td": self.mean_abs_td,
            "ok": int(self.ok),
        }


def step_bounds(theta, lb, ub, max_rel_step: float = 0.3, floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Box on the step: absolute bounds shifted by theta, intersected with the rate limit."""
    rate = max_rel_step * np.maximum(np.abs(theta), floor)
    lo = np.maximum(lb - theta, -rate)
    hi = np.minimum(ub - theta, rate)
    # theta sitting on a bound already keeps a degenerate zero-width box
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def apply_update(
    theta: np.ndarray,
    p: np.ndarray,
    H: np.ndarray,
    alpha: float,
    lb: np.ndarray,
    ub: np.ndarray,
    max_rel_step: float = 0.3,
    floor: float = 1e-3,
    min_eig: float = 1e-6,
    mean_abs_td: float = float("nan"),
) -> tuple[np.ndarray, UpdateReport]:
    """Regularized, bounded second-order step ``argmin 0.5 D'HD + alpha p'D``."""
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    n = theta.size
    eig = eigvalsh(H)
    beta = max(0.0, min_eig - float(eig[0]))
    Hr = H + beta * np.eye(n)
    cond = float((eig[-1] + beta) / (eig[0] + beta))
    lo, hi = step_bounds(theta, lb, ub, max_rel_step, floor)
    # solve in variables scaled by the rate limits for conditioning
    D = np.maximum(np.abs(theta), floor)
    try:
        cho_factor(Hr)
        qp = BoxQp(D[:, None] * Hr * D[None, :], alpha * D * p, lo / D, hi / D)
        y = solve_box_qp(qp)
        res = qp.kkt_residual(y)
    except (LinAlgError, RuntimeError, ValueError) as exc:
        logger.error("parameter update failed: %s", exc)
        zero = np.zeros(n)
        return theta.copy(), UpdateReport(float(np.linalg.norm(p)), cond, beta, zero, np.zeros(n, bool), mean_abs_td, False, str(exc))
    step = np.clip(D * y, lo, hi)
    new = np.clip(theta + step, lb, ub)
    active = (np.abs(step - lo) <= 1e-12 * D) | (np.abs(step - hi) <= 1e-12 * D)
    active &= hi > lo
    return new, UpdateReport(float(np.linalg.norm(p)), cond, beta, new - theta, active, mean_abs_td, True, "", res)
