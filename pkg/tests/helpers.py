"""Shared test utilities: config builders, randomized generators, and the
independent oracles (brute-force routing, finite differences) that the
package implementations are checked against.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from fluidlob import (
    ExponentialType,
    HalfNormalType,
    ModelConfig,
    QueueState,
    compute_bands,
    config_from_dict,
    fluid_rhs,
    solve_workload_star,
)

REPO = Path(__file__).resolve().parents[1]
FIXTURES = REPO / "fixtures"


def ref1_dict() -> dict:
    return {
        "n_exchanges": 2,
        "beta": [2.0, 1.0],
        "lambda": [0.3, 0.2],
        "big_lambda": 1.0,
        "mu": 1.0,
        "rebate0": -1.0,
        "rebates": [1.0, 2.0],
        "v": 1.0,
        "b_dedicated": [1.0, 1.0],
        "b_optimized": 1.0,
        "type_dist": {"kind": "exponential", "rate": 1.0},
        "size_dists": {
            "market": {"kind": "deterministic", "value": 1},
            "dedicated": {"kind": "deterministic", "value": 1},
            "optimized": {"kind": "deterministic", "value": 1},
        },
    }


def make_config(**overrides) -> ModelConfig:
    d = ref1_dict()
    d.update(overrides)
    return config_from_dict(d)


def strict_config() -> ModelConfig:
    """REF1 geometry with big_lambda = 5: the tail-monotonicity condition on
    gamma*f(gamma) genuinely holds (checked in test_model), so per-venue chi
    monotonicity applies on [kappa, 10 kappa]."""
    return make_config(big_lambda=5.0)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def brute_force_route(cfg: ModelConfig, gamma: float, q) -> int:
    """Literal payoff argmax, written independently of the package routing.

    Option 0 pays gamma*rebate0 with no delay; venue i pays gamma*r_i minus
    q_i / (v * mu_i(q)) when its queue is nonempty (zero delay otherwise).
    Ties go to the higher rebate.
    """
    q = np.asarray(q, dtype=float)
    w = float(np.dot(cfg.beta, q))
    best = (gamma * cfg.rebate0, cfg.rebate0, 0)
    for i in range(cfg.n_exchanges):
        if q[i] > 0:
            mu_i = cfg.mu * cfg.beta[i] * q[i] / w
            delay = q[i] / (cfg.v * mu_i)
        else:
            delay = 0.0
        cand = (gamma * cfg.rebates[i] - delay, cfg.rebates[i], i + 1)
        if cand[:2] > best[:2]:
            best = cand
    return best[2]


def band_route(cfg: ModelConfig, gamma: float, w: float) -> int:
    """Route by band membership: the venue whose interval W*[a-, a+] holds gamma."""
    bands = compute_bands(cfg)
    for i in range(cfg.n_exchanges):
        if bands.empty_band[i]:
            continue
        if w * bands.a_minus[i] <= gamma <= w * bands.a_plus[i]:
            return i + 1
    return 0


def fd_jacobian(cfg: ModelConfig, q, h: float = 1e-5) -> np.ndarray:
    """Centered finite differences of the fluid drift."""
    q = np.asarray(q, dtype=float)
    n = len(q)
    out = np.empty((n, n))
    for j in range(n):
        step = h * max(1.0, abs(q[j]))
        hi = q.copy()
        hi[j] += step
        lo = q.copy()
        lo[j] -= step
        out[:, j] = (
            fluid_rhs(cfg, QueueState.of(cfg, hi)) - fluid_rhs(cfg, QueueState.of(cfg, lo))
        ) / (2 * step)
    return out


# ---------------------------------------------------------------------------
# Randomized configurations
# ---------------------------------------------------------------------------

def _size_with_mean(rng: np.random.Generator, mean: int):
    if mean == 1:
        return {"kind": "deterministic", "value": 1}
    choice = rng.integers(0, 3)
    if choice == 0:
        return {"kind": "deterministic", "value": int(mean)}
    if choice == 1:
        return {"kind": "geometric", "p": 1.0 / mean}
    return {"kind": "tabulated", "values": [1, 2 * int(mean) - 1], "probs": [0.5, 0.5]}


def random_valid_config(
    rng: np.random.Generator,
    *,
    n_max: int = 5,
    kinds=("exponential", "half-normal"),
) -> ModelConfig:
    """A random configuration satisfying the throughput condition, with
    distinct rebates and mixed size distributions."""
    n = int(rng.integers(1, n_max + 1))
    beta = rng.uniform(0.6, 1.8, n)
    rebates = np.sort(rng.uniform(0.2, 3.0, n))
    while n > 1 and np.any(np.diff(rebates) < 0.15):
        rebates = np.sort(rng.uniform(0.2, 3.0, n))
    rebates = rebates[rng.permutation(n)]
    mu = float(rng.uniform(0.6, 1.6))
    v = int(rng.integers(1, 3))
    b_ded = rng.integers(1, 3, n)
    b_opt = int(rng.integers(1, 3))

    lam = rng.uniform(0.05, 0.4, n)
    v_mu = v * mu
    inflow = float(lam @ b_ded)
    if inflow >= 0.8 * v_mu:
        lam *= 0.8 * v_mu / inflow
        inflow = float(lam @ b_ded)
    big_lambda = (v_mu - inflow) * float(rng.uniform(1.5, 4.0)) / b_opt

    kind = kinds[rng.integers(0, len(kinds))]
    if kind == "exponential":
        tdist = {"kind": "exponential", "rate": float(rng.uniform(0.7, 1.5))}
    else:
        tdist = {"kind": "half-normal", "sigma": float(rng.uniform(0.7, 1.5))}

    return config_from_dict(
        {
            "n_exchanges": n,
            "beta": beta.tolist(),
            "lambda": lam.tolist(),
            "big_lambda": big_lambda,
            "mu": mu,
            "rebate0": -float(rng.uniform(0.3, 1.5)),
            "rebates": rebates.tolist(),
            "v": float(v),
            "b_dedicated": [float(b) for b in b_ded],
            "b_optimized": float(b_opt),
            "type_dist": tdist,
            "size_dists": {
                "market": [_size_with_mean(rng, v) for _ in range(n)],
                "dedicated": [_size_with_mean(rng, int(b)) for b in b_ded],
                "optimized": _size_with_mean(rng, b_opt),
            },
        }
    )


def _gamma_f_mode(cfg: ModelConfig) -> float:
    td = cfg.type_dist
    if isinstance(td, ExponentialType):
        return 1.0 / td.rate
    if isinstance(td, HalfNormalType):
        return td.sigma
    raise ValueError("mode known only for the smooth built-ins")


def random_stable_config(rng: np.random.Generator, *, n_max: int = 5) -> ModelConfig:
    """A random configuration inside the hypotheses of the local-stability
    certificate: gamma*f(gamma) decreases beyond a_min*kappa.

    Achieved by scaling the optimized rate upward until
    a_min * (beta_min/beta_max) * W_star exceeds the mode of gamma*f(gamma)
    with margin (the ratio is invariant under rescaling the type
    distribution, so this is a pure geometry condition).
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = random_valid_config(rng, n_max=n_max)
        mode = _gamma_f_mode(cfg)
        for _ in range(60):
            bands = compute_bands(cfg)
            w_star = solve_workload_star(cfg)
            ratio = cfg.beta.min() / cfg.beta.max()
            if bands.a_min_global * ratio * w_star >= 1.1 * mode:
                return cfg
            cfg = make_config(**{**_as_dict(cfg), "big_lambda": cfg.big_lambda * 1.8})
    raise AssertionError("could not reach the stability-regime margin")


def _as_dict(cfg: ModelConfig) -> dict:
    from fluidlob import config_to_dict

    return config_to_dict(cfg)


def random_positive_state(rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    return rng.uniform(0.2, 3.0, cfg.n_exchanges)
