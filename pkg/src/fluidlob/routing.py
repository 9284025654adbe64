"""Pure functions of the queue state: market-order splitting rates, expected
delays, the routing argmax, routing fractions and their derivative.

Everything here is stateless and safe for unrestricted concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, RoutingBands, TypeDistribution, compute_bands

__all__ = [
    "QueueState",
    "market_rates",
    "expected_delays",
    "route",
    "chi",
    "chi_derivative",
    "mu_gradient",
]


@dataclass(frozen=True)
class QueueState:
    """Queue-length vector together with its workload W = beta . q."""

    q: np.ndarray
    workload: float

    @classmethod
    def of(cls, cfg: ModelConfig, q) -> "QueueState":
        q = np.asarray(q, dtype=float)
        if q.shape != (cfg.n_exchanges,):
            raise ValueError(f"expected {cfg.n_exchanges} queue lengths")
        if np.any(q < 0):
            raise ValueError("queue lengths must be nonnegative")
        q = q.copy()
        q.setflags(write=False)
        return cls(q=q, workload=float(cfg.beta @ q))


def market_rates(cfg: ModelConfig, state: QueueState, epsilon: float = 0.0) -> np.ndarray:
    """Per-venue market-order rates mu * beta_i q_i / (beta . q).

    With epsilon > 0 the denominator is clipped from below at epsilon; with
    epsilon = 0 an all-empty state yields the zero vector (service suspended).
    Components sum to mu whenever the denominator is not clipped.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    num = cfg.mu * cfg.beta * state.q
    if epsilon > 0:
        return num / max(state.workload, epsilon)
    if state.workload <= 0:
        return np.zeros(cfg.n_exchanges)
    return num / state.workload


def expected_delays(cfg: ModelConfig, state: QueueState) -> np.ndarray:
    """Expected delay per venue: W / (mu beta_i v) for nonempty queues, else 0.

    The immediate-execution option (index 0) always has zero delay and is
    handled by the caller.
    """
    base = state.workload / (cfg.mu * cfg.beta * cfg.v)
    return np.where(state.q > 0, base, 0.0)


def route(cfg: ModelConfig, gamma: float, state: QueueState) -> int:
    """Venue choice of a type-gamma investor: argmax of gamma*r_i - delay_i.

    Index 0 is the immediate-execution option with rebate `rebate0` and zero
    delay.  Floating-point payoff ties (probability zero for atomless types)
    are broken in favour of the highest rebate, which puts index 0 last.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not state.workload > 0:
        raise ValueError("routing is undefined at zero workload")
    delays = expected_delays(cfg, state)
    payoffs = np.concatenate(([gamma * cfg.rebate0], gamma * cfg.rebates - delays))
    ties = np.flatnonzero(payoffs == payoffs.max())
    if len(ties) == 1:
        return int(ties[0])
    all_rebates = np.concatenate(([cfg.rebate0], cfg.rebates))
    return int(ties[np.argmax(all_rebates[ties])])


def _band_chi(bands: RoutingBands, tdist: TypeDistribution, w) -> np.ndarray:
    """Venue routing fractions F(w a_plus) - F(w a_minus), clipped to [0, 1].

    `w` may be a scalar or a 1-d array of workloads; the result has one row of
    N venue fractions per workload.  Infinite upper edges contribute F = 1 and
    empty bands collapse to 0 via the clip.
    """
    w = np.asarray(w, dtype=float)
    lo = tdist.cdf(w[..., None] * bands.a_minus)
    finite = np.isfinite(bands.a_plus)
    ap = np.where(finite, bands.a_plus, 0.0)
    hi = np.where(finite, tdist.cdf(w[..., None] * ap), 1.0)
    return np.clip(hi - lo, 0.0, 1.0)


def chi(cfg: ModelConfig, w: float, epsilon: float = 0.0) -> np.ndarray:
    """Routing fractions (chi_0, chi_1, ..., chi_N) at workload w, index 0 first.

    With epsilon > 0 the workload is clipped from below at epsilon before the
    band formula is applied; epsilon = 0 requires w > 0.  Components lie in
    [0, 1] and sum to 1.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon > 0:
        if w < 0:
            raise ValueError("w must be nonnegative")
        w_eff = max(w, epsilon)
    else:
        if not w > 0:
            raise ValueError("chi is undefined at zero workload without truncation")
        w_eff = w
    venues = _band_chi(compute_bands(cfg), cfg.type_dist, w_eff)
    chi0 = min(max(1.0 - float(venues.sum()), 0.0), 1.0)
    return np.concatenate(([chi0], venues))


def chi_derivative(cfg: ModelConfig, w: float) -> np.ndarray:
    """d chi_i / dW at workload w: a_plus f(w a_plus) - a_minus f(w a_minus).

    Infinite upper edges contribute 0 (the density vanishes at infinity for
    any finite-mean type distribution) and empty bands contribute 0 outright.
    """
    if not w > 0:
        raise ValueError("w must be positive")
    bands = compute_bands(cfg)
    f = cfg.type_dist.pdf
    lo = bands.a_minus * np.asarray(f(w * bands.a_minus), dtype=float)
    finite = np.isfinite(bands.a_plus)
    ap = np.where(finite, bands.a_plus, 0.0)
    hi = np.where(finite, ap * np.asarray(f(w * ap), dtype=float), 0.0)
    out = hi - lo
    out[bands.empty_band] = 0.0
    return out


def mu_gradient(cfg: ModelConfig, state: QueueState) -> np.ndarray:
    """Jacobian of the market-rate map: row i is mu beta_i [W e_i - q_i beta] / W^2."""
    w = state.workload
    if not w > 0:
        raise ValueError("gradient is undefined at zero workload")
    grad = -np.outer(cfg.beta * state.q, cfg.beta) * (cfg.mu / w**2)
    grad[np.diag_indices_from(grad)] += cfg.mu * cfg.beta / w
    return grad
