"""Shared oracles for the test suite and the acceptance report collector."""

import math

from mpcrl_rm.metanet import Disturbance, TrafficState

# lines printed at the end of the session, one per acceptance criterion
REPORT: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    REPORT.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def reference_step(rho, v, w, r, demand, d_rho):
    """Straight-line transcription of the benchmark dynamics, written without arrays."""
    T, tau, eta, kappa, mu = 10 / 3600, 18 / 3600, 60.0, 40.0, 0.0122
    a, rc, vf, rmax = 1.867, 33.5, 102.0, 180.0
    L, lam = 1.0, 2.0
    r1, r2, r3 = rho
    v1, v2, v3 = v
    w1, w2 = w
    d1, d2 = demand
    # mainstream origin at its upper bound, entering segment 1
    q_o1 = max(min(d1 + w1 / T, 3500.0, 3500.0 * (rmax - r1) / (rmax - rc)), 0.0)
    q1, q2, q3 = lam * r1 * v1, lam * r2 * v2, lam * r3 * v3
    nr1 = r1 + T / (L * lam) * (q_o1 - q1)
    nr2 = r2 + T / (L * lam) * (q1 - q2)
    nr3 = r3 + T / (L * lam) * (q2 - q3 + r)

    def ve(x):
        return vf * math.exp(-((x / rc) ** a) / a)

    rho_down = max(min(r3, rc), d_rho)
    nv1 = v1 + T / tau * (ve(r1) - v1) + T / L * v1 * (v1 - v1) - eta * T / (tau * L) * (r2 - r1) / (r1 + kappa)
    nv2 = v2 + T / tau * (ve(r2) - v2) + T / L * v2 * (v1 - v2) - eta * T / (tau * L) * (r3 - r2) / (r2 + kappa)
    nv3 = (
        v3
        + T / tau * (ve(r3) - v3)
        + T / L * v3 * (v2 - v3)
        - eta * T / (tau * L) * (rho_down - r3) / (r3 + kappa)
        - mu * T * r * v3 / (L * lam * (r3 + kappa))
    )
    nw1 = w1 + T * (d1 - q_o1)
    nw2 = w2 + T * (d2 - r)
    return (
        [max(nr1, 0.0), max(nr2, 0.0), max(nr3, 0.0)],
        [max(nv1, 0.0), max(nv2, 0.0), max(nv3, 0.0)],
        [max(nw1, 0.0), max(nw2, 0.0)],
    )


def random_inputs(rng):
    x = TrafficState(rng.uniform(0, 120, 3), rng.uniform(5, 120, 3), rng.uniform(0, 100, 2))
    d = Disturbance(rng.uniform(0, [3500, 2000]), rng.uniform(0, 80, 1))
    return x, d
