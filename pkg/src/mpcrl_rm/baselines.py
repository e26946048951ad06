"""PI-ALINEA local ramp metering with queue override, and random-search gain tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PiAlineaGains:
    K_P: float = 40.0
    K_I: float = 5.0
    rho_hat: float = 23.45

    def __post_init__(self):
        if self.K_P < 0 or self.K_I < 0:
            raise ValueError("gains must be nonnegative")


def pi_alinea_action(rho_now: float, rho_prev: float, r_prev: float, gains: PiAlineaGains, C: float) -> float:
    """``clamp(r_prev - K_P (rho_now - rho_prev) + K_I (rho_hat - rho_now), 0, C)``."""
    r = r_prev - gains.K_P * (rho_now - rho_prev) + gains.K_I * (gains.rho_hat - rho_now)
    return float(min(max(r, 0.0), C))


def queue_override(r_pi: float, w: float, d: float, w_max: float, T_ctrl: float, C: float) -> float:
    """Raise the flow to ``d + (w - w_max) / T_ctrl`` when that drains the queue faster."""
    r_q = d + (w - w_max) / T_ctrl
    return float(min(max(r_pi, r_q, 0.0), C))


@dataclass
class PiAlineaController:
    """Closed-loop PI-ALINEA state: the last flow and the last measured density."""

    gains: PiAlineaGains
    capacity: float
    w_max: float = 50.0
    T_ctrl: float = 1.0 / 60.0
    override: bool = True
    r_prev: float = 0.0
    rho_prev: float | None = None

    def reset(self, r0: float, rho0: float) -> None:
        self.r_prev, self.rho_prev = float(r0), float(rho0)

    def act(self, rho: float, w: float, d: float) -> float:
        rho_prev = rho if self.rho_prev is None else self.rho_prev
        r = pi_alinea_action(rho, rho_prev, self.r_prev, self.gains, self.capacity)
        if self.override:
            r = queue_override(r, w, d, self.w_max, self.T_ctrl, self.capacity)
        self.r_prev, self.rho_prev = r, rho
        return r


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 100
    K_P: tuple[float, float] = (1.0, 200.0)
    K_I: tuple[float, float] = (0.5, 100.0)


def sample_gains(cfg: SearchConfig, rng: np.random.Generator, rho_hat: float) -> list[PiAlineaGains]:
    """Log-uniform candidates over the configured gain ranges."""
    if cfg.budget < 1:
        raise ValueError("budget must be at least 1")
    lp = rng.uniform(math.log(cfg.K_P[0]), math.log(cfg.K_P[1]), cfg.budget)
    li = rng.uniform(math.log(cfg.K_I[0]), math.log(cfg.K_I[1]), cfg.budget)
    return [PiAlineaGains(float(np.exp(a)), float(np.exp(b)), rho_hat) for a, b in zip(lp, li)]


def tune_gains(
    evaluate: Callable[[PiAlineaGains], float],
    cfg: SearchConfig = SearchConfig(),
    seed: int = 0,
    rho_hat: float = 23.45,
    candidates: Sequence[PiAlineaGains] | None = None,
) -> tuple[PiAlineaGains, list[tuple[PiAlineaGains, float]]]:
    """Return the candidate with the lowest mean cost and the full evaluation log.

    ``evaluate`` maps gains to a mean total cost on fixed-seed episodes; it may
    return ``nan`` or raise ``FloatingPointError`` for a diverged episode.
    """
    if candidates is None:
        candidates = sample_gains(cfg, np.random.default_rng(seed), rho_hat)
    log = []
    best, best_cost = None, math.inf
    for g in candidates:
        try:
            cost = float(evaluate(g))
        except FloatingPointError as exc:
            logger.info("gains %s diverged: %s", g, exc)
            cost = math.nan
        log.append((g, cost))
        if math.isfinite(cost) and cost < best_cost:
            best, best_cost = g, cost
    if best is None:
        raise RuntimeError("every candidate gain pair diverged")
    return best, log
