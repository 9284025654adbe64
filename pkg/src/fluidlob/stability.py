"""Stationary equilibrium, Jacobian spectrum, and trajectory-based stability
experiments.

The equilibrium reduces to a scalar root problem in the workload W: total
limit-order inflow matches total service exactly when
sum_i b_d_i lam_i + b_o Lambda sum_i chi_i(W) = v mu.  The venue composition
then follows from the per-venue balance.  Local stability is certified by the
eigenvalues of the drift Jacobian, cross-checked against a closed-form
determinant built from its rank-1-plus-diagonal structure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AssumptionError, BracketError
from .fluid import IntegratorConfig, _integrate_batch, fluid_rhs
from .model import ModelConfig, compute_bands, compute_kappa
from .routing import QueueState, _band_chi, chi, chi_derivative

__all__ = [
    "Equilibrium",
    "SpectrumReport",
    "LocalTrial",
    "LocalStabilityReport",
    "GlobalTrial",
    "GlobalStabilityReport",
    "solve_workload_star",
    "solve_equilibrium",
    "jacobian",
    "det_shifted",
    "spectrum",
    "local_stability_experiment",
    "global_stability_experiment",
]

# Verdict thresholds on the largest eigenvalue real part.
STABILITY_TOL = 1e-10


# ---------------------------------------------------------------------------
# Equilibrium
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Equilibrium:
    w_star: float
    q_star: np.ndarray
    chi_at_star: np.ndarray      # (N+1,), index 0 first
    residual: float              # max-norm of the drift at q_star
    all_roots: tuple[float, ...]
    unique: bool

    def to_dict(self) -> dict:
        return {
            "w_star": self.w_star,
            "q_star": self.q_star.tolist(),
            "chi_at_star": self.chi_at_star.tolist(),
            "residual": self.residual,
            "all_roots": list(self.all_roots),
            "unique": self.unique,
        }


def _stationarity_gap(cfg: ModelConfig, bands, w: float) -> float:
    """Inflow minus service at workload w; the equilibrium workload is its root."""
    total_chi = float(_band_chi(bands, cfg.type_dist, w).sum())
    return float(
        cfg.b_dedicated @ cfg.lam
        + cfg.b_optimized * cfg.big_lambda * total_chi
        - cfg.v * cfg.mu
    )


def _require_throughput(cfg: ModelConfig) -> None:
    lam_eff = float(cfg.b_dedicated @ cfg.lam)
    v_mu = cfg.v * cfg.mu
    if not lam_eff < v_mu:
        raise AssumptionError(
            f"dedicated inflow {lam_eff} must stay below service capacity {v_mu}"
        )
    if not v_mu < lam_eff + cfg.b_optimized * cfg.big_lambda:
        raise AssumptionError(
            "service capacity must stay below the total inflow "
            f"{lam_eff + cfg.b_optimized * cfg.big_lambda}"
        )


def workload_roots(cfg: ModelConfig) -> list[float]:
    """All roots of the stationarity gap found by geometric scan plus bisection.

    Scans [1e-6, 1e6] * (v mu / Lambda); each sign change is bisected to
    relative width 1e-13.  Raises BracketError when no sign change exists and
    warns when more than one root is found (multiplicity is surfaced, never
    silently resolved).
    """
    _require_throughput(cfg)
    bands = compute_bands(cfg)
    anchor = cfg.v * cfg.mu / cfg.big_lambda
    grid = np.geomspace(1e-6 * anchor, 1e6 * anchor, 301)
    vals = [_stationarity_gap(cfg, bands, w) for w in grid]

    roots: list[float] = []
    for k in range(len(grid) - 1):
        lo, hi = grid[k], grid[k + 1]
        flo, fhi = vals[k], vals[k + 1]
        if flo == 0.0:
            if not roots or abs(roots[-1] - lo) > 1e-12 * lo:
                roots.append(float(lo))
            continue
        if flo * fhi < 0:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if hi - lo <= 1e-13 * mid:
                    break
                fm = _stationarity_gap(cfg, bands, mid)
                if fm == 0.0:
                    lo = hi = mid
                    break
                if (fm > 0) == (flo > 0):
                    lo, flo = mid, fm
                else:
                    hi = mid
            roots.append(0.5 * (lo + hi))
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    if not roots:
        raise BracketError(
            "no sign change of the stationarity gap on the scan grid; "
            "the configuration violates the existence conditions"
        )
    if len(roots) > 1:
        warnings.warn(
            f"multiple stationary workload roots found: {roots}; returning the smallest",
            stacklevel=2,
        )
    return roots


def solve_workload_star(cfg: ModelConfig) -> float:
    """Equilibrium workload (the smallest root when several exist)."""
    return min(workload_roots(cfg))


def solve_equilibrium(cfg: ModelConfig) -> Equilibrium:
    """Solve for the stationary point: workload root, then per-venue balance."""
    roots = workload_roots(cfg)
    w_star = min(roots)
    chi_star = chi(cfg, w_star)
    q_star = (
        w_star
        * (cfg.b_dedicated * cfg.lam + cfg.b_optimized * cfg.big_lambda * chi_star[1:])
        / (cfg.v * cfg.mu * cfg.beta)
    )
    residual = float(np.max(np.abs(fluid_rhs(cfg, QueueState.of(cfg, q_star)))))
    return Equilibrium(
        w_star=float(w_star),
        q_star=q_star,
        chi_at_star=chi_star,
        residual=residual,
        all_roots=tuple(float(r) for r in roots),
        unique=len(roots) == 1,
    )


# ---------------------------------------------------------------------------
# Jacobian and closed-form determinant
# ---------------------------------------------------------------------------

def jacobian(cfg: ModelConfig, q) -> np.ndarray:
    """Jacobian of the fluid drift at q.

    Rank-1-plus-diagonal structure: J = y beta^T - (v mu / W) diag(beta) with
    y = b_o Lambda chi'(W) + (v mu / W^2) u and u_i = beta_i q_i.  Matches
    centered finite differences of the drift.
    """
    q = np.asarray(q, dtype=float)
    w = float(cfg.beta @ q)
    if not w > 0:
        raise ValueError("Jacobian is undefined at zero workload")
    lam_o = cfg.b_optimized * cfg.big_lambda
    mu_eff = cfg.v * cfg.mu
    y = lam_o * chi_derivative(cfg, w) + (mu_eff / w**2) * (cfg.beta * q)
    jac = np.outer(y, cfg.beta)
    jac[np.diag_indices_from(jac)] -= mu_eff * cfg.beta / w
    return jac


def det_shifted(cfg: ModelConfig, q, nu: float) -> float:
    """Closed-form det(J - nu I) from the rank-1 structure.

    Equals prod_i(beta_i mu_eff/W + nu) * (sum_i c_i/(beta_i mu_eff/W + nu) - 1)
    * (-1)^(N-1) with c_i = beta_i^2 q_i mu_eff / W^2 + Lambda_eff beta_i chi_i'(W);
    valid for nu >= 0 where the shifted diagonal is invertible.
    """
    q = np.asarray(q, dtype=float)
    w = float(cfg.beta @ q)
    if not w > 0:
        raise ValueError("determinant is undefined at zero workload")
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    lam_o = cfg.b_optimized * cfg.big_lambda
    mu_eff = cfg.v * cfg.mu
    d = cfg.beta * mu_eff / w + nu
    c = cfg.beta**2 * q * mu_eff / w**2 + lam_o * cfg.beta * chi_derivative(cfg, w)
    sign = -1.0 if cfg.n_exchanges % 2 == 0 else 1.0
    return float(np.prod(d) * (np.sum(c / d) - 1.0) * sign)


@dataclass(frozen=True)
class SpectrumReport:
    """Spectrum of the drift Jacobian plus the determinant cross-checks."""

    jacobian: np.ndarray
    eigenvalues: np.ndarray
    max_real_part: float
    det_identity_max_rel_err: float
    verdict: str                      # "stable" | "unstable" | "marginal"
    has_complex_pair: bool
    secular_checked: bool
    secular_real_roots: int | None
    real_eigs_off_pole: int | None
    secular_max_residual: float | None
    marginal_tolerance: float = STABILITY_TOL

    def to_dict(self) -> dict:
        return {
            "jacobian": self.jacobian.tolist(),
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "max_real_part": self.max_real_part,
            "det_identity_max_rel_err": self.det_identity_max_rel_err,
            "verdict": self.verdict,
            "has_complex_pair": self.has_complex_pair,
            "secular_checked": self.secular_checked,
            "secular_real_roots": self.secular_real_roots,
            "real_eigs_off_pole": self.real_eigs_off_pole,
            "secular_max_residual": self.secular_max_residual,
            "marginal_tolerance": self.marginal_tolerance,
        }


def _secular(cfg: ModelConfig, q, w: float):
    lam_o = cfg.b_optimized * cfg.big_lambda
    mu_eff = cfg.v * cfg.mu
    d = cfg.beta * mu_eff / w
    c = cfg.beta**2 * np.asarray(q, float) * mu_eff / w**2 + lam_o * cfg.beta * chi_derivative(cfg, w)

    def phi(nu):
        return float(np.sum(c / (d + nu)) - 1.0)

    return d, phi


def spectrum(cfg: ModelConfig, q) -> SpectrumReport:
    """Dense eigenvalue computation with determinant and secular cross-checks.

    The eigensolver is authoritative for the verdict; the closed-form
    determinant is compared against direct determinants on a nu grid, and for
    configurations with distinct diagonal entries the real eigenvalues away
    from the diagonal poles are counted against the real roots of the secular
    function.
    """
    q = np.asarray(q, dtype=float)
    w = float(cfg.beta @ q)
    if not w > 0:
        raise ValueError("spectrum is undefined at zero workload")
    jac = jacobian(cfg, q)
    try:
        eigs = np.linalg.eigvals(jac)
    except np.linalg.LinAlgError as exc:
        raise AssumptionError(f"eigenvalue solver did not converge: {exc}") from exc
    max_real = float(np.max(eigs.real))

    mu_eff = cfg.v * cfg.mu
    nu_grid = np.linspace(0.0, 2.0, 21) * (mu_eff / w)
    max_rel = 0.0
    eye = np.eye(cfg.n_exchanges)
    for nu in nu_grid:
        direct = float(np.linalg.det(jac - nu * eye))
        closed = det_shifted(cfg, q, float(nu))
        max_rel = max(max_rel, abs(closed - direct) / max(abs(direct), 1e-300))

    d, phi = _secular(cfg, q, w)
    gaps = np.diff(np.sort(d))
    secular_checked = cfg.n_exchanges == 1 or bool(np.all(gaps > 1e-9 * d.max()))
    sec_roots = real_off_pole = None
    sec_res = None
    if secular_checked:
        poles = -d
        scale = max(1.0, float(np.abs(eigs).max()))
        real_eigs = [z.real for z in eigs if abs(z.imag) <= 1e-9 * scale]
        off_pole = [
            x for x in real_eigs if np.min(np.abs(x - poles)) > 1e-7 * max(1.0, d.max())
        ]
        real_off_pole = len(off_pole)
        sec_res = max((abs(phi(x)) for x in off_pole), default=0.0)
        # Count real secular roots by sign changes between consecutive poles
        # (plus the two outer intervals, bounded by the Gershgorin radius).
        radius = float(np.max(np.sum(np.abs(jac), axis=1))) + 1.0
        edges = np.concatenate(([-radius], np.sort(poles), [radius]))
        count = 0
        for a, b in zip(edges[:-1], edges[1:]):
            pad = 1e-6 * max(1.0, b - a)
            xs = np.linspace(a + pad, b - pad, 200)
            vals = np.array([phi(x) for x in xs])
            count += int(np.sum(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0))
        sec_roots = count

    if max_real < -STABILITY_TOL:
        verdict = "stable"
    elif max_real > STABILITY_TOL:
        verdict = "unstable"
    else:
        verdict = "marginal"
    return SpectrumReport(
        jacobian=jac,
        eigenvalues=eigs,
        max_real_part=max_real,
        det_identity_max_rel_err=max_rel,
        verdict=verdict,
        has_complex_pair=bool(np.any(np.abs(eigs.imag) > 1e-9 * max(1.0, np.abs(eigs).max()))),
        secular_checked=secular_checked,
        secular_real_roots=sec_roots,
        real_eigs_off_pole=real_off_pole,
        secular_max_residual=sec_res,
    )


# ---------------------------------------------------------------------------
# Trajectory experiments
# ---------------------------------------------------------------------------

def _experiment_icfg(cfg: ModelConfig) -> IntegratorConfig:
    # Coarser than the single-trajectory default: RK4 at 1e-2/mu keeps the
    # global error orders of magnitude below the experiment thresholds while
    # fitting the experiment runtime budgets.
    return IntegratorConfig(dt=1e-2 / cfg.mu)


@dataclass(frozen=True)
class LocalTrial:
    delta: float
    direction: int
    terminal_distance: float
    min_workload: float
    kappa: float
    ok: bool
    error: str | None = None


@dataclass(frozen=True)
class LocalStabilityReport:
    trials: tuple[LocalTrial, ...]
    passed: bool
    threshold: float
    horizon: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "horizon": self.horizon,
            "seed": self.seed,
            "trials": [
                {
                    "delta": t.delta,
                    "direction": t.direction,
                    "terminal_distance": t.terminal_distance,
                    "min_workload": t.min_workload,
                    "kappa": t.kappa,
                    "ok": t.ok,
                    "error": t.error,
                }
                for t in self.trials
            ],
        }


def local_stability_experiment(
    cfg: ModelConfig,
    eq: Equilibrium,
    deltas,
    horizon: float,
    directions: int,
    *,
    seed: int = 0,
    icfg: IntegratorConfig | None = None,
    threshold: float = 1e-6,
) -> LocalStabilityReport:
    """Perturb the equilibrium by each delta along random unit directions and
    integrate; the experiment passes when every trajectory returns to within
    `threshold` of the stationary point by the horizon.

    Per-trial failures (nonpositive perturbed state, integration abort) are
    itemized in the report, not raised.
    """
    deltas = [float(d) for d in deltas]
    if any(d < 0 for d in deltas):
        raise ValueError("deltas must be nonnegative")
    if directions < 1:
        raise ValueError("need at least one direction")
    if icfg is None:
        icfg = _experiment_icfg(cfg)
    gen = np.random.default_rng(seed)
    dirs = gen.normal(size=(directions, cfg.n_exchanges))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    w_star = eq.w_star
    starts = []
    labels = []
    skipped = []
    for d in deltas:
        for j in range(directions):
            q0 = eq.q_star + d * dirs[j]
            if np.any(q0 <= 0):
                skipped.append(
                    LocalTrial(d, j, math.inf, math.nan, math.nan, False, "nonpositive start")
                )
                continue
            starts.append(q0)
            labels.append((d, j))

    trials = list(skipped)
    if starts:
        q0s = np.asarray(starts)
        w0s = q0s @ cfg.beta
        kappas = np.array([compute_kappa(cfg, w0, w_star) for w0 in w0s])
        res = _integrate_batch(
            cfg, q0s, horizon, icfg, kappas, store_states=False, on_error="record"
        )
        dist = np.max(np.abs(res.terminal - eq.q_star), axis=1)
        for k, (d, j) in enumerate(labels):
            err = res.fail_reason[k]
            ok = err is None and dist[k] < threshold
            trials.append(
                LocalTrial(
                    delta=d,
                    direction=j,
                    terminal_distance=float(dist[k]),
                    min_workload=float(res.min_workload[k]),
                    kappa=float(kappas[k]),
                    ok=bool(ok),
                    error=err,
                )
            )
    passed = bool(trials) and all(t.ok for t in trials)
    return LocalStabilityReport(
        trials=tuple(trials), passed=passed, threshold=threshold, horizon=horizon, seed=seed
    )


@dataclass(frozen=True)
class GlobalTrial:
    init: tuple[float, ...]
    terminal_distance: float
    workload_monotone: bool
    tube_entry_time: float | None
    min_workload: float
    kappa: float
    ok: bool
    error: str | None = None


@dataclass(frozen=True)
class GlobalStabilityReport:
    trials: tuple[GlobalTrial, ...]
    passed: bool
    threshold: float
    tube_radius: float
    horizon: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "tube_radius": self.tube_radius,
            "horizon": self.horizon,
            "seed": self.seed,
            "trials": [
                {
                    "init": list(t.init),
                    "terminal_distance": t.terminal_distance,
                    "workload_monotone": t.workload_monotone,
                    "tube_entry_time": t.tube_entry_time,
                    "min_workload": t.min_workload,
                    "kappa": t.kappa,
                    "ok": t.ok,
                    "error": t.error,
                }
                for t in self.trials
            ],
        }


def global_stability_experiment(
    cfg: ModelConfig,
    n_inits: int,
    box: float,
    horizon: float,
    seed: int,
    *,
    icfg: IntegratorConfig | None = None,
    threshold: float = 1e-4,
    monotone_tol: float = 1e-9,
) -> GlobalStabilityReport:
    """Integrate from random initial states in (0, box]^N (equal beta only).

    Records per trajectory the terminal distance to the stationary point,
    whether |W_t - W*| is nonincreasing along the grid, and the first grid
    time inside the tube |W - W*| <= 0.01 W*.  Passes when every trajectory
    converges below `threshold` with a monotone workload gap.
    """
    if np.any(cfg.beta != cfg.beta[0]):
        raise ValueError("global stability experiment requires equal beta weights")
    if n_inits < 1 or not box > 0:
        raise ValueError("need n_inits >= 1 and box > 0")
    if icfg is None:
        icfg = _experiment_icfg(cfg)
    eq = solve_equilibrium(cfg)
    w_star = eq.w_star
    tube = 0.01 * w_star

    gen = np.random.default_rng(seed)
    q0s = gen.uniform(0.0, box, size=(n_inits, cfg.n_exchanges))
    for k in range(n_inits):
        while not float(cfg.beta @ q0s[k]) > 0:
            q0s[k] = gen.uniform(0.0, box, size=cfg.n_exchanges)

    w0s = q0s @ cfg.beta
    kappas = np.array([compute_kappa(cfg, w0, w_star) for w0 in w0s])
    res = _integrate_batch(cfg, q0s, horizon, icfg, kappas, store_states=False, on_error="record")

    dist = np.max(np.abs(res.terminal - eq.q_star), axis=1)
    gap = np.abs(res.workload - w_star)          # (K+1, B)
    monotone = np.all(np.diff(gap, axis=0) <= monotone_tol, axis=0)
    inside = gap <= tube
    trials = []
    for k in range(n_inits):
        entry = None
        hit = np.flatnonzero(inside[:, k])
        if hit.size:
            entry = float(res.times[hit[0]])
        err = res.fail_reason[k]
        ok = err is None and dist[k] < threshold and bool(monotone[k])
        trials.append(
            GlobalTrial(
                init=tuple(float(x) for x in q0s[k]),
                terminal_distance=float(dist[k]),
                workload_monotone=bool(monotone[k]),
                tube_entry_time=entry,
                min_workload=float(res.min_workload[k]),
                kappa=float(kappas[k]),
                ok=bool(ok),
                error=err,
            )
        )
    passed = all(t.ok for t in trials)
    return GlobalStabilityReport(
        trials=tuple(trials),
        passed=passed,
        threshold=threshold,
        tube_radius=tube,
        horizon=horizon,
        seed=seed,
    )
