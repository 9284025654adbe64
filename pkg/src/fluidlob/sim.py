"""Exact event-driven simulation of the n-th rescaled queueing system.

Event scheme
------------
Dedicated and optimized arrivals are Poisson streams with constant rates
n*lam_i and n*Lambda, so their event times come straight from exponential
inter-arrival draws.  The state-dependent market-order stream is realized by
thinning a candidate stream at the envelope rate n*mu: each candidate is
accepted with probability (current total market rate) / (n*mu) and, when
accepted, assigned to venue i with probability beta_i Q_i / (beta . Q).  A
market order of size V against queue Q_i serves min(V, Q_i); the residue is
discarded, and the served counter records delivered volume so the bookkeeping
identity Q = Q_0 + A_d + A_o - D holds exactly.

The acceptance uniform is consumed at every candidate regardless of state.
Two runs sharing a seed therefore consume identical randomness for as long as
their states agree, which makes the epsilon-truncation coupling exact: if the
untruncated workload never falls below epsilon, the truncated twin accepts the
same candidates and the paths are bit-identical.

RNG streams
-----------
One master seed; every named substream (ded-times-i, ded-sizes-i, opt-times,
opt-types, opt-sizes, mkt-times, mkt-accept, mkt-venue, mkt-sizes-i) owns an
independent PCG64 generator seeded by SeedSequence((seed, sha256(name))).
Adding venues or changing the draw order inside one stream never perturbs
another.  Queue lengths and counters are integers internally, so counters
cannot overflow and the bookkeeping identity is exact.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .fluid import FluidTrajectory, IntegratorConfig, integrate
from .model import ModelConfig
from .routing import QueueState, route

__all__ = [
    "SimConfig",
    "SimPath",
    "ConvergenceTable",
    "simulate",
    "sup_distance",
    "replicate",
]

_BLOCK = 4096


def _stream_generator(seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(name.encode("ascii")).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed & (2**64 - 1), key))))


class _Stream:
    """Block-buffered draws from one named substream; counts logical draws."""

    __slots__ = ("_gen", "_draw", "_buf", "_pos", "count")

    def __init__(self, seed: int, name: str, draw):
        self._gen = _stream_generator(seed, name)
        self._draw = draw
        self._buf = None
        self._pos = 0
        self.count = 0

    def take(self):
        if self._buf is None or self._pos >= len(self._buf):
            self._buf = self._draw(self._gen, _BLOCK)
            self._pos = 0
        value = self._buf[self._pos]
        self._pos += 1
        self.count += 1
        return value


def _exp_draw(scale: float):
    return lambda gen, size: gen.exponential(scale, size)


def _unif_draw(gen, size):
    return gen.random(size)


@dataclass(frozen=True)
class SimConfig:
    """Run parameters for one simulation of the n-th rescaled system."""

    n: int
    horizon: float
    sample_dt: float
    seed: int
    q0_scaled: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        object.__setattr__(self, "n", int(self.n))
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.sample_dt > 0:
            raise ValueError("sample_dt must be positive")
        if self.horizon > 0 and self.sample_dt > self.horizon + 1e-12:
            raise ValueError("sample_dt must not exceed the horizon")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        q0 = np.array(self.q0_scaled, dtype=float)
        if np.any(q0 < 0):
            raise ValueError("q0_scaled must be nonnegative")
        if not np.any(q0 > 0):
            raise ValueError("q0_scaled needs a positive component (positive initial workload)")
        q0.setflags(write=False)
        object.__setattr__(self, "q0_scaled", q0)


@dataclass(frozen=True)
class SimPath:
    """A sampled trajectory of the rescaled system with event accounting.

    All series are scaled by 1/n and sampled right-continuously on the grid;
    `q_scaled = q0 + arrivals_dedicated + arrivals_optimized - served` holds
    exactly after multiplying back by n (all underlying quantities are
    integers).  `routed_zero` counts optimized orders sent to the immediate
    execution option, scaled by 1/n like the other counters.
    """

    times: np.ndarray                 # (G,)
    q_scaled: np.ndarray              # (G, N)
    arrivals_dedicated: np.ndarray    # (G, N) cumulative
    arrivals_optimized: np.ndarray    # (G, N) cumulative
    served: np.ndarray                # (G, N) cumulative delivered volume
    routed_zero: np.ndarray           # (G,)  cumulative
    min_workload: float               # min of beta . Qbar over the event path
    rng_fingerprint: str
    n: int
    seed: int


def _sample_grid(horizon: float, dt: float) -> np.ndarray:
    if horizon == 0:
        return np.array([0.0])
    k = int(math.floor(horizon / dt + 1e-9))
    grid = np.arange(k + 1) * dt
    if grid[-1] < horizon - 1e-9 * max(1.0, horizon):
        grid = np.append(grid, horizon)
    else:
        grid[-1] = min(grid[-1], horizon)
    return grid


def simulate(cfg: ModelConfig, sim: SimConfig) -> SimPath:
    """Run the continuous-time Markov chain and sample it on the grid.

    Deterministic given (cfg, sim) including the seed.  An optimized arrival
    routed to the immediate-execution option changes no queue but increments
    the routed-to-zero counter; with all queues empty the market clock is
    effectively suspended (every candidate is rejected) and optimized orders
    fall to the venue with the top rebate, whose delay penalty is zero.
    """
    n = sim.n
    n_venues = cfg.n_exchanges
    beta = [float(b) for b in cfg.beta]
    horizon = float(sim.horizon)
    grid = _sample_grid(horizon, float(sim.sample_dt))
    n_grid = len(grid)
    eps = float(sim.epsilon)
    seed = sim.seed

    queues = [int(x) for x in np.rint(np.asarray(sim.q0_scaled) * n)]
    arr_ded = [0] * n_venues
    arr_opt = [0] * n_venues
    served = [0] * n_venues
    routed_zero = 0

    out_q = np.empty((n_grid, n_venues))
    out_ad = np.empty((n_grid, n_venues))
    out_ao = np.empty((n_grid, n_venues))
    out_d = np.empty((n_grid, n_venues))
    out_r0 = np.empty(n_grid)

    ded_times = [
        _Stream(seed, f"ded-times-{i}", _exp_draw(1.0 / (n * cfg.lam[i])) if cfg.lam[i] > 0 else None)
        for i in range(n_venues)
    ]
    ded_sizes = [
        _Stream(seed, f"ded-sizes-{i}", cfg.dedicated_sizes[i].sample) for i in range(n_venues)
    ]
    opt_times = (
        _Stream(seed, "opt-times", _exp_draw(1.0 / (n * cfg.big_lambda)))
        if cfg.big_lambda > 0
        else None
    )
    opt_types = _Stream(seed, "opt-types", cfg.type_dist.sample)
    opt_sizes = _Stream(seed, "opt-sizes", cfg.optimized_size.sample)
    mkt_times = _Stream(seed, "mkt-times", _exp_draw(1.0 / (n * cfg.mu)))
    mkt_accept = _Stream(seed, "mkt-accept", _unif_draw)
    mkt_venue = _Stream(seed, "mkt-venue", _unif_draw)
    mkt_sizes = [_Stream(seed, f"mkt-sizes-{i}", cfg.market_sizes[i].sample) for i in range(n_venues)]

    inf = math.inf
    next_ded = [float(s.take()) if s._draw is not None else inf for s in ded_times]
    next_opt = float(opt_times.take()) if opt_times is not None else inf
    next_mkt = float(mkt_times.take())

    def workload_int() -> float:
        total = 0.0
        for i in range(n_venues):
            total += beta[i] * queues[i]
        return total

    min_w = workload_int() / n
    grid_pos = 0

    def emit_until(limit: float):
        nonlocal grid_pos
        while grid_pos < n_grid and grid[grid_pos] < limit:
            for i in range(n_venues):
                out_q[grid_pos, i] = queues[i] / n
                out_ad[grid_pos, i] = arr_ded[i] / n
                out_ao[grid_pos, i] = arr_opt[i] / n
                out_d[grid_pos, i] = served[i] / n
            out_r0[grid_pos] = routed_zero / n
            grid_pos += 1

    top_rebate_venue = 1 + int(np.argmax(cfg.rebates))

    while True:
        tau = next_mkt
        kind = -1  # market
        for i in range(n_venues):
            if next_ded[i] < tau:
                tau = next_ded[i]
                kind = i
        if next_opt < tau:
            tau = next_opt
            kind = -2  # optimized
        if tau > horizon:
            break
        emit_until(tau)

        if kind >= 0:
            i = kind
            size = int(ded_sizes[i].take())
            queues[i] += size
            arr_ded[i] += size
            next_ded[i] = tau + float(ded_times[i].take())
        elif kind == -2:
            gamma = float(opt_types.take())
            if gamma <= 0.0:
                gamma = 5e-324  # types are positive; a drawn 0.0 is a float artifact
            size = int(opt_sizes.take())
            w_int = workload_int()
            if w_int > 0:
                target = route(
                    cfg, gamma, QueueState(q=np.array(queues, dtype=float) / n, workload=w_int / n)
                )
            else:
                target = top_rebate_venue
            if target == 0:
                routed_zero += 1
            else:
                queues[target - 1] += size
                arr_opt[target - 1] += size
            next_opt = tau + float(opt_times.take())
        else:
            u = float(mkt_accept.take())
            w_int = workload_int()
            if eps > 0:
                accept_p = min(1.0, (w_int / n) / eps)
            else:
                accept_p = 1.0 if w_int > 0 else 0.0
            if u < accept_p:
                pick = float(mkt_venue.take()) * w_int
                acc = 0.0
                i = n_venues - 1
                for j in range(n_venues):
                    acc += beta[j] * queues[j]
                    if pick < acc:
                        i = j
                        break
                size = int(mkt_sizes[i].take())
                delivered = size if size <= queues[i] else queues[i]
                queues[i] -= delivered
                served[i] += delivered
            next_mkt = tau + float(mkt_times.take())

        w_scaled = workload_int() / n
        if w_scaled < min_w:
            min_w = w_scaled

    emit_until(horizon + 1.0)  # flush the remaining grid points with the final state

    streams = [*ded_times, *ded_sizes, opt_types, opt_sizes, mkt_times, mkt_accept, mkt_venue, *mkt_sizes]
    names = (
        [f"ded-times-{i}" for i in range(n_venues)]
        + [f"ded-sizes-{i}" for i in range(n_venues)]
        + ["opt-types", "opt-sizes", "mkt-times", "mkt-accept", "mkt-venue"]
        + [f"mkt-sizes-{i}" for i in range(n_venues)]
    )
    counts = dict(zip(names, (s.count for s in streams)))
    counts["opt-times"] = opt_times.count if opt_times is not None else 0
    blob = f"seed={seed}|" + "|".join(f"{k}:{counts[k]}" for k in sorted(counts))
    fingerprint = hashlib.sha256(blob.encode()).hexdigest()

    return SimPath(
        times=grid,
        q_scaled=out_q,
        arrivals_dedicated=out_ad,
        arrivals_optimized=out_ao,
        served=out_d,
        routed_zero=out_r0,
        min_workload=min_w,
        rng_fingerprint=fingerprint,
        n=n,
        seed=seed,
    )


def sup_distance(path: SimPath, traj: FluidTrajectory) -> float:
    """Max over sample times of the max-norm gap between the sampled discrete
    path and the fluid trajectory (interpolated linearly at the sample times)."""
    if abs(path.times[-1] - traj.times[-1]) > 1e-9 * max(1.0, path.times[-1]):
        raise ValueError("path and trajectory horizons differ")
    fluid_at = np.column_stack(
        [np.interp(path.times, traj.times, traj.states[:, j]) for j in range(traj.states.shape[1])]
    )
    return float(np.max(np.abs(path.q_scaled - fluid_at)))


@dataclass(frozen=True)
class ConvergenceTable:
    """Per-replication distances plus per-n medians and 90th percentiles."""

    rows: tuple[tuple[int, int, float], ...]   # (n, replicate, sup_distance)
    summary: tuple[tuple[int, float, float], ...]  # (n, median, p90)
    seed_base: int

    def median(self, n: int) -> float:
        for m, med, _ in self.summary:
            if m == n:
                return med
        raise KeyError(n)


def replicate(
    cfg: ModelConfig,
    sim_template: SimConfig,
    n_values,
    reps: int,
    *,
    icfg: IntegratorConfig | None = None,
    max_workers: int = 1,
) -> ConvergenceTable:
    """Run `reps` seeded replications per scaling level and compare each to the
    fluid limit (integrated once).

    Replicate r uses seed `sim_template.seed + r`; the same seed set is reused
    across scaling levels, which keeps rows comparable and regenerable.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    n_values = [int(n) for n in n_values]
    traj = integrate(cfg, sim_template.q0_scaled, sim_template.horizon, icfg)

    def one(n: int, rep: int) -> tuple[int, int, float]:
        run = replace(sim_template, n=n, seed=sim_template.seed + rep)
        return n, rep, sup_distance(simulate(cfg, run), traj)

    jobs = [(n, r) for n in n_values for r in range(reps)]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(lambda a: one(*a), jobs))
    else:
        rows = [one(*job) for job in jobs]

    summary = []
    for n in n_values:
        vals = np.array([d for (m, _, d) in rows if m == n])
        summary.append((n, float(np.median(vals)), float(np.percentile(vals, 90))))
    return ConvergenceTable(rows=tuple(rows), summary=tuple(summary), seed_base=sim_template.seed)
