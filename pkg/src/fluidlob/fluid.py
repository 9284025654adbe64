"""Fluid vector field and fixed-step integration of the coupled ODE system.

The field is singular where the workload vanishes; integration therefore runs
with a safety floor at a fraction of the proven workload lower bound kappa and
aborts if the floor is ever breached (which signals a bug or a violated
assumption, not physics).  Routing fractions use the workload-only band form
throughout, which is what removes the ambiguity of the per-venue delay at
empty queues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, SingularityError, StepInstabilityError
from .model import ModelConfig, compute_bands, compute_kappa
from .routing import QueueState, _band_chi

__all__ = [
    "IntegratorConfig",
    "FluidTrajectory",
    "fluid_rhs",
    "integrate",
    "workload_rhs",
]

# Accepted full steps may differ from two verification half-steps by at most
# this factor times the state scale.
_REFINE_TOL = 1e-6
# Negative components beyond this are an integration error, not roundoff.
_CLIP_TOL = 1e-12


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step integrator settings.

    `dt` is the base step (the horizon is divided into uniform steps no longer
    than this).  With `refine_check` every accepted step is compared against
    two half-steps.  `workload_floor_factor` sets the abort threshold as a
    fraction of kappa; kappa is a strict lower bound for the exact flow, so
    one half of it signals malfunction.
    """

    dt: float
    refine_check: bool = False
    workload_floor_factor: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.workload_floor_factor < 1.0:
            raise ValueError("workload_floor_factor must lie in (0, 1)")


def default_integrator_config(cfg: ModelConfig, *, refine_check: bool = False) -> IntegratorConfig:
    """Default step: 1e-3 of the characteristic service time 1/mu."""
    return IntegratorConfig(dt=1e-3 / cfg.mu, refine_check=refine_check)


@dataclass(frozen=True)
class FluidTrajectory:
    """A fluid solution sampled on the integrator grid."""

    times: np.ndarray      # (K+1,)
    states: np.ndarray     # (K+1, N)
    workload: np.ndarray   # (K+1,)
    min_workload: float
    kappa: float
    steps: int
    max_refine_error: float


def fluid_rhs(cfg: ModelConfig, state: QueueState) -> np.ndarray:
    """Drift of venue i: b_d_i lam_i + b_o Lambda chi_i(W) - v mu_i(q)."""
    if not state.workload > 0:
        raise ValueError("fluid field is singular at zero workload")
    return _rhs_batch(cfg, compute_bands(cfg), state.q[None, :])[0]


def _rhs_batch(cfg: ModelConfig, bands, q: np.ndarray) -> np.ndarray:
    """Vectorised drift for a (B, N) matrix of states with positive workloads."""
    w = q @ cfg.beta
    chi_v = _band_chi(bands, cfg.type_dist, w)
    service = (cfg.v * cfg.mu) * (cfg.beta * q) / w[:, None]
    return cfg.b_dedicated * cfg.lam + (cfg.b_optimized * cfg.big_lambda) * chi_v - service


@dataclass
class _BatchResult:
    times: np.ndarray             # (K+1,)
    workload: np.ndarray          # (K+1, B)
    states: np.ndarray | None     # (K+1, B, N) when stored
    terminal: np.ndarray          # (B, N)
    min_workload: np.ndarray      # (B,)
    failed: np.ndarray            # (B,) bool
    fail_reason: list
    steps: int
    max_refine_error: float


def _integrate_batch(
    cfg: ModelConfig,
    q0s: np.ndarray,
    horizon: float,
    icfg: IntegratorConfig,
    kappas: np.ndarray,
    *,
    store_states: bool = False,
    on_error: str = "raise",
) -> _BatchResult:
    """Classical RK4 over a batch of trajectories sharing one time grid.

    With on_error="record", per-trajectory failures (floor breach, negative
    undershoot, unstable step) freeze that trajectory at its last good state
    and are reported in the result instead of raised.
    """
    q0s = np.asarray(q0s, dtype=float)
    n_traj, _ = q0s.shape
    bands = compute_bands(cfg)
    n_steps = max(1, math.ceil(horizon / icfg.dt - 1e-12))
    dt = horizon / n_steps
    floor = icfg.workload_floor_factor * np.asarray(kappas, dtype=float)

    q = q0s.copy()
    w = q @ cfg.beta
    if np.any(w <= 0):
        raise ValueError("every initial state needs positive workload")

    alive = np.ones(n_traj, dtype=bool)
    reasons: list = [None] * n_traj
    min_w = w.copy()
    times = np.arange(n_steps + 1) * dt
    times[-1] = horizon
    w_hist = np.empty((n_steps + 1, n_traj))
    w_hist[0] = w
    q_hist = None
    if store_states:
        q_hist = np.empty((n_steps + 1, n_traj, q.shape[1]))
        q_hist[0] = q
    max_refine = 0.0

    def rk4(qc, h):
        k1 = _rhs_batch(cfg, bands, qc)
        k2 = _rhs_batch(cfg, bands, qc + 0.5 * h * k1)
        k3 = _rhs_batch(cfg, bands, qc + 0.5 * h * k2)
        k4 = _rhs_batch(cfg, bands, qc + h * k3)
        return qc + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def fail(mask, message):
        nonlocal alive
        if on_error == "raise":
            idx = int(np.flatnonzero(mask)[0])
            raise_map = {
                "floor": SingularityError,
                "negative": IntegrationError,
                "unstable": StepInstabilityError,
            }
            raise raise_map[message](f"trajectory {idx}: {message} at t={times[step]:.6g}")
        for idx in np.flatnonzero(mask):
            reasons[idx] = message
        alive = alive & ~mask

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for step in range(1, n_steps + 1):
            q_new = rk4(q, dt)
            if icfg.refine_check:
                q_half = rk4(rk4(q, 0.5 * dt), 0.5 * dt)
                disc = np.max(np.abs(q_new - q_half), axis=1)
                scale = np.maximum(1.0, np.max(np.abs(q_new), axis=1))
                bad = alive & ~np.isnan(disc) & (disc > _REFINE_TOL * scale)
                bad |= alive & np.isnan(disc)
                if bad.any():
                    fail(bad, "unstable")
                live_disc = disc[alive]
                if live_disc.size:
                    max_refine = max(max_refine, float(np.nanmax(live_disc)))

            low = np.min(q_new, axis=1)
            bad = alive & ~(low >= -_CLIP_TOL)
            if bad.any():
                fail(bad, "negative")
            np.clip(q_new, 0.0, None, out=q_new)

            w_new = q_new @ cfg.beta
            bad = alive & ~(w_new >= floor)
            if bad.any():
                fail(bad, "floor")

            q = np.where(alive[:, None], q_new, q)
            w = np.where(alive, w_new, w)
            min_w = np.where(alive, np.minimum(min_w, w), min_w)
            w_hist[step] = w
            if store_states:
                q_hist[step] = q

    return _BatchResult(
        times=times,
        workload=w_hist,
        states=q_hist,
        terminal=q,
        min_workload=min_w,
        failed=~alive,
        fail_reason=reasons,
        steps=n_steps,
        max_refine_error=max_refine,
    )


def integrate(
    cfg: ModelConfig,
    q0,
    horizon: float,
    icfg: IntegratorConfig | None = None,
) -> FluidTrajectory:
    """Integrate the fluid system from q0 over [0, horizon].

    Raises SingularityError if the workload drops below
    workload_floor_factor * kappa, StepInstabilityError if the optional
    half-step verification disagrees with an accepted step, and
    IntegrationError on negative component undershoot beyond roundoff.
    """
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != (cfg.n_exchanges,):
        raise ValueError(f"expected {cfg.n_exchanges} initial queue lengths")
    if np.any(q0 < 0):
        raise ValueError("initial queue lengths must be nonnegative")
    w0 = float(cfg.beta @ q0)
    if not w0 > 0:
        raise ValueError("initial workload must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if icfg is None:
        icfg = default_integrator_config(cfg)

    from .stability import solve_workload_star

    kappa = compute_kappa(cfg, w0, solve_workload_star(cfg))
    res = _integrate_batch(
        cfg, q0[None, :], horizon, icfg, np.array([kappa]), store_states=True, on_error="raise"
    )
    return FluidTrajectory(
        times=res.times,
        states=res.states[:, 0, :],
        workload=res.workload[:, 0],
        min_workload=float(res.min_workload[0]),
        kappa=kappa,
        steps=res.steps,
        max_refine_error=res.max_refine_error,
    )


def workload_rhs(cfg: ModelConfig, w: float) -> float:
    """Total-mass drift sum_i b_d_i lam_i + b_o Lambda (1 - chi_0(w)) - v mu.

    Only valid as a closed scalar field when all beta weights are equal (then
    the workload is proportional to the total mass and the venue composition
    drops out).
    """
    if np.any(cfg.beta != cfg.beta[0]):
        raise ValueError("workload_rhs requires equal beta weights")
    if not w > 0:
        raise ValueError("w must be positive")
    venues = _band_chi(compute_bands(cfg), cfg.type_dist, w)
    return float(
        cfg.b_dedicated @ cfg.lam
        + cfg.b_optimized * cfg.big_lambda * float(venues.sum())
        - cfg.v * cfg.mu
    )
