"""Model primitives: parameters, investor-type and order-size distributions,
routing bands, and checks of the standing assumptions.

All types are immutable after construction (arrays are marked read-only), so
they can be shared freely across concurrent tasks.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import AssumptionError, BracketError, ConfigError

__all__ = [
    "TypeDistribution",
    "ExponentialType",
    "HalfNormalType",
    "TabulatedType",
    "SizeDistribution",
    "DeterministicSize",
    "GeometricSize",
    "TabulatedSize",
    "ModelConfig",
    "RoutingBands",
    "AssumptionReport",
    "compute_bands",
    "compute_kappa",
    "check_assumptions",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]

_SQRT2 = math.sqrt(2.0)


def _frozen(x, dtype=float) -> np.ndarray:
    a = np.array(x, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Investor-type distributions
# ---------------------------------------------------------------------------

class TypeDistribution:
    """Distribution of the investor type: atomless CDF F on (0, inf) with density f.

    F is nondecreasing with F(0) = 0 and F(inf) = 1.  `cdf` and `pdf` accept
    scalars or arrays (inf included) and broadcast like numpy ufuncs.
    """

    kind = "abstract"

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialType(TypeDistribution):
    rate: float

    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("type_dist.rate: must be positive")

    def cdf(self, x):
        return -np.expm1(-self.rate * np.maximum(np.asarray(x, dtype=float), 0.0))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.rate * np.exp(-self.rate * np.maximum(x, 0.0)), 0.0)

    def sample(self, gen, size):
        return gen.exponential(1.0 / self.rate, size)

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class HalfNormalType(TypeDistribution):
    sigma: float

    kind = "half-normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("type_dist.sigma: must be positive")

    def cdf(self, x):
        return erf(np.maximum(np.asarray(x, dtype=float), 0.0) / (self.sigma * _SQRT2))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        c = math.sqrt(2.0 / math.pi) / self.sigma
        return np.where(x >= 0, c * np.exp(-np.square(np.maximum(x, 0.0)) / (2.0 * self.sigma**2)), 0.0)

    def sample(self, gen, size):
        return np.abs(gen.normal(0.0, self.sigma, size))

    def to_dict(self):
        return {"kind": self.kind, "sigma": self.sigma}


@dataclass(frozen=True)
class TabulatedType(TypeDistribution):
    """CDF given on a grid and completed by monotone piecewise-linear interpolation.

    The grid must start at (0, 0) and end with CDF value 1; the density is the
    (piecewise-constant) derivative of the interpolant, zero outside the grid.
    """

    gammas: np.ndarray
    cdf_values: np.ndarray

    kind = "tabulated"

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        c = np.asarray(self.cdf_values, dtype=float)
        if g.ndim != 1 or g.shape != c.shape or len(g) < 2:
            raise ConfigError("type_dist.gamma/cdf: need two equal-length 1-d grids")
        if g[0] != 0.0:
            raise ConfigError("type_dist.gamma: grid must start at 0")
        if np.any(np.diff(g) <= 0):
            raise ConfigError("type_dist.gamma: grid must be strictly increasing")
        if c[0] != 0.0 or np.any(np.diff(c) < 0):
            raise ConfigError("type_dist.cdf: values must start at 0 and be nondecreasing")
        if abs(c[-1] - 1.0) > 1e-9:
            raise ConfigError("type_dist.cdf: last value must be 1")
        c = c / c[-1]
        object.__setattr__(self, "gammas", _frozen(g))
        object.__setattr__(self, "cdf_values", _frozen(c))
        object.__setattr__(self, "_slopes", _frozen(np.diff(c) / np.diff(g)))

    def cdf(self, x):
        return np.interp(np.asarray(x, dtype=float), self.gammas, self.cdf_values)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.gammas, x, side="right") - 1
        inside = (idx >= 0) & (idx < len(self._slopes)) & np.isfinite(x)
        return np.where(inside, self._slopes[np.clip(idx, 0, len(self._slopes) - 1)], 0.0)

    def sample(self, gen, size):
        return np.interp(gen.random(size), self.cdf_values, self.gammas)

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gammas.tolist(), "cdf": self.cdf_values.tolist()}


# ---------------------------------------------------------------------------
# Order-size distributions
# ---------------------------------------------------------------------------

class SizeDistribution:
    """Order-size distribution on {1, 2, ...} with finite first two moments."""

    kind = "abstract"

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class DeterministicSize(SizeDistribution):
    value: int

    kind = "deterministic"

    def __post_init__(self):
        if int(self.value) != self.value or self.value < 1:
            raise ConfigError("size.value: must be a positive integer")
        object.__setattr__(self, "value", int(self.value))

    @property
    def mean(self):
        return float(self.value)

    @property
    def second_moment(self):
        return float(self.value) ** 2

    def sample(self, gen, size):
        return np.full(size, self.value, dtype=np.int64)

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class GeometricSize(SizeDistribution):
    p: float

    kind = "geometric"

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("size.p: must lie in (0, 1]")

    @property
    def mean(self):
        return 1.0 / self.p

    @property
    def second_moment(self):
        return (2.0 - self.p) / self.p**2

    def sample(self, gen, size):
        return gen.geometric(self.p, size).astype(np.int64)

    def to_dict(self):
        return {"kind": self.kind, "p": self.p}


@dataclass(frozen=True)
class TabulatedSize(SizeDistribution):
    values: np.ndarray
    probs: np.ndarray

    kind = "tabulated"

    def __post_init__(self):
        v = np.asarray(self.values)
        p = np.asarray(self.probs, dtype=float)
        if v.ndim != 1 or v.shape != p.shape or len(v) == 0:
            raise ConfigError("size.values/probs: need two equal-length 1-d arrays")
        if np.any(v != np.rint(v)) or np.any(v < 1):
            raise ConfigError("size.values: support must be positive integers")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError("size.probs: must be nonnegative and sum to 1")
        object.__setattr__(self, "values", _frozen(v, dtype=np.int64))
        object.__setattr__(self, "probs", _frozen(p / p.sum()))

    @property
    def mean(self):
        return float(self.probs @ self.values)

    @property
    def second_moment(self):
        return float(self.probs @ (self.values.astype(float) ** 2))

    def sample(self, gen, size):
        return gen.choice(self.values, size=size, p=self.probs)

    def to_dict(self):
        return {"kind": self.kind, "values": self.values.tolist(), "probs": self.probs.tolist()}


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """All primitives of the N-venue order-routing model.

    `beta` weights how strongly each venue attracts market orders, `lam` is the
    per-venue dedicated limit-order rate, `big_lambda` the rate of optimally
    routed limit orders and `mu` the total market-order rate.  `rebate0` is the
    (negative) rebate of the immediate-execution option; venue rebates must be
    pairwise distinct.  `v`, `b_dedicated` and `b_optimized` are the mean order
    sizes and must agree with the means of the attached size distributions.
    """

    n_exchanges: int
    beta: np.ndarray
    lam: np.ndarray
    big_lambda: float
    mu: float
    rebate0: float
    rebates: np.ndarray
    v: float
    b_dedicated: np.ndarray
    b_optimized: float
    type_dist: TypeDistribution
    market_sizes: tuple[SizeDistribution, ...]
    dedicated_sizes: tuple[SizeDistribution, ...]
    optimized_size: SizeDistribution

    def __post_init__(self):
        n = self.n_exchanges
        if int(n) != n or n < 1:
            raise ConfigError("n_exchanges: must be a positive integer")
        object.__setattr__(self, "n_exchanges", int(n))
        for name in ("beta", "lam", "rebates", "b_dedicated"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.n_exchanges,):
                raise ConfigError(f"{name}: expected {self.n_exchanges} entries")
            object.__setattr__(self, name, _frozen(arr))
        if np.any(self.beta <= 0):
            raise ConfigError("beta: entries must be positive")
        if np.any(self.lam < 0):
            raise ConfigError("lambda: entries must be nonnegative")
        if not self.big_lambda >= 0:
            raise ConfigError("big_lambda: must be nonnegative")
        if not self.mu > 0:
            raise ConfigError("mu: must be positive")
        if not self.rebate0 < 0:
            raise ConfigError("rebate0: must be negative")
        if np.any(self.rebates < 0):
            raise ConfigError("rebates: entries must be nonnegative")
        if len(np.unique(self.rebates)) != self.n_exchanges:
            raise ConfigError("rebates: entries must be pairwise distinct")
        if not self.v > 0:
            raise ConfigError("v: must be positive")
        if np.any(self.b_dedicated <= 0):
            raise ConfigError("b_dedicated: entries must be positive")
        if not self.b_optimized > 0:
            raise ConfigError("b_optimized: must be positive")
        for name, dists in (("market", self.market_sizes), ("dedicated", self.dedicated_sizes)):
            if len(dists) != self.n_exchanges:
                raise ConfigError(f"size_dists.{name}: expected {self.n_exchanges} distributions")
        for i, d in enumerate(self.market_sizes):
            if abs(d.mean - self.v) > 1e-9 * max(1.0, self.v):
                raise ConfigError(f"size_dists.market[{i}]: mean {d.mean} does not match v={self.v}")
        for i, d in enumerate(self.dedicated_sizes):
            if abs(d.mean - self.b_dedicated[i]) > 1e-9 * max(1.0, self.b_dedicated[i]):
                raise ConfigError(
                    f"size_dists.dedicated[{i}]: mean {d.mean} does not match b_dedicated[{i}]"
                )
        if abs(self.optimized_size.mean - self.b_optimized) > 1e-9 * max(1.0, self.b_optimized):
            raise ConfigError("size_dists.optimized: mean does not match b_optimized")


# ---------------------------------------------------------------------------
# Routing bands and derived constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoutingBands:
    """Per-venue type-band edges [a_minus, a_plus] of the routing rule.

    A type gamma is routed to venue i exactly when gamma lies in
    W * [a_minus[i], a_plus[i]] for the current workload W.  `a_plus` is +inf
    for the venue with the top rebate; `empty_band[i]` marks venues that are
    never chosen (a_plus < a_minus).
    """

    a_minus: np.ndarray
    a_plus: np.ndarray
    a_min_global: float
    empty_band: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a_minus", _frozen(self.a_minus))
        object.__setattr__(self, "a_plus", _frozen(self.a_plus))
        object.__setattr__(self, "empty_band", _frozen(self.empty_band, dtype=bool))


def compute_bands(cfg: ModelConfig) -> RoutingBands:
    """Compute the routing-band edges from rebates, beta weights and mu, v.

    The lower edge pits venue i against the immediate-execution option and all
    venues with smaller rebates; the upper edge against all venues with larger
    rebates (empty set giving +inf).  Raw upper edges below zero are clamped to
    0; the band is empty either way.
    """
    n = cfg.n_exchanges
    inv = 1.0 / (cfg.mu * cfg.beta * cfg.v)
    a_plus = np.full(n, np.inf)
    a_minus = np.empty(n)
    for i in range(n):
        above = cfg.rebates > cfg.rebates[i]
        if above.any():
            a_plus[i] = max(
                0.0, np.min((inv[above] - inv[i]) / (cfg.rebates[above] - cfg.rebates[i]))
            )
        below = cfg.rebates < cfg.rebates[i]
        lo = inv[i] / (cfg.rebates[i] - cfg.rebate0)
        if below.any():
            lo = max(lo, np.max((inv[i] - inv[below]) / (cfg.rebates[i] - cfg.rebates[below])))
        a_minus[i] = lo
    empty = a_plus < a_minus
    if empty.any():
        warnings.warn(
            f"venues {np.flatnonzero(empty).tolist()} have empty routing bands and will never "
            "receive optimized orders",
            stacklevel=2,
        )
    return RoutingBands(
        a_minus=a_minus,
        a_plus=a_plus,
        a_min_global=float(a_minus.min()),
        empty_band=empty,
    )


def compute_kappa(cfg: ModelConfig, w0: float, w_star: float) -> float:
    """Lower bound on the fluid workload: (beta_min/beta_max) * min(w0, w_star)."""
    if not w0 > 0:
        raise ValueError("w0 must be positive")
    if not w_star > 0:
        raise ValueError("w_star must be positive")
    return float(cfg.beta.min() / cfg.beta.max() * min(w0, w_star))


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of the standing-assumption checks for one configuration.

    `cond_i_holds` reports whether gamma * f(gamma) decreases strictly on the
    geometric grid recorded in `gamma_f_grid` (lo, hi, points); it is None when
    the equilibrium workload could not be solved.  `cond_ii_sides` holds the
    three terms of the throughput inequality lhs < v*mu < rhs.  Condition (iii)
    concerns how simulations are initialised and is enforced by construction.
    """

    cond_i_holds: bool | None
    gamma_f_grid: tuple[float, float, int] | None
    cond_ii_holds: bool
    cond_ii_sides: tuple[float, float, float]
    cond_iii_note: str
    cond_iv_holds: bool
    empty_band_exchanges: tuple[int, ...]
    kappa: float | None
    complete: bool

    def to_dict(self) -> dict:
        return {
            "cond_i_holds": self.cond_i_holds,
            "gamma_f_grid": list(self.gamma_f_grid) if self.gamma_f_grid else None,
            "cond_ii_holds": self.cond_ii_holds,
            "cond_ii_sides": list(self.cond_ii_sides),
            "cond_iii_note": self.cond_iii_note,
            "cond_iv_holds": self.cond_iv_holds,
            "empty_band_exchanges": list(self.empty_band_exchanges),
            "kappa": self.kappa,
            "complete": self.complete,
        }


def check_assumptions(
    cfg: ModelConfig,
    q0,
    *,
    grid_points: int = 1000,
    grid_span: float = 1e4,
) -> AssumptionReport:
    """Evaluate the standing assumptions for `cfg` started from queue vector `q0`.

    The tail-monotonicity condition (i) is checked numerically on a geometric
    grid of at least 1000 points spanning [a_min*kappa, a_min*kappa*grid_span];
    the throughput condition (ii) is checked exactly; (iv) via the routing
    bands.  kappa combines the initial workload with the solved equilibrium
    workload; if that solve fails the report is marked incomplete.
    """
    q0 = np.asarray(q0, dtype=float)
    w0 = float(cfg.beta @ q0)
    if not w0 > 0:
        raise ValueError("q0 must have positive workload")
    bands = compute_bands(cfg)

    lam_eff = float(cfg.b_dedicated @ cfg.lam)
    v_mu = cfg.v * cfg.mu
    rhs = lam_eff + cfg.b_optimized * cfg.big_lambda
    cond_ii = lam_eff < v_mu < rhs

    empty = tuple(int(i) for i in np.flatnonzero(bands.empty_band))
    cond_iv = len(empty) == 0

    from .stability import solve_workload_star

    kappa = None
    cond_i = None
    grid_info = None
    complete = True
    try:
        w_star = solve_workload_star(cfg)
    except (AssumptionError, BracketError):
        complete = False
    else:
        kappa = compute_kappa(cfg, w0, w_star)
        lo = bands.a_min_global * kappa
        hi = lo * grid_span
        pts = max(int(grid_points), 1000)
        grid = np.geomspace(lo, hi, pts)
        gf = grid * np.asarray(cfg.type_dist.pdf(grid), dtype=float)
        # Strict decrease between consecutive points, allowing the far tail to
        # sit at exactly 0 once gamma*f(gamma) underflows.
        diffs = np.diff(gf)
        cond_i = bool(np.all((diffs < 0) | ((gf[:-1] == 0.0) & (gf[1:] == 0.0))))
        grid_info = (lo, hi, pts)

    return AssumptionReport(
        cond_i_holds=cond_i,
        gamma_f_grid=grid_info,
        cond_ii_holds=cond_ii,
        cond_ii_sides=(lam_eff, v_mu, rhs),
        cond_iii_note="initial queue lengths are set to round(n * q0_scaled) by the simulator",
        cond_iv_holds=cond_iv,
        empty_band_exchanges=empty,
        kappa=kappa,
        complete=complete,
    )


# ---------------------------------------------------------------------------
# JSON config schema
# ---------------------------------------------------------------------------

_TYPE_KINDS = {"exponential", "half-normal", "tabulated"}
_SIZE_KINDS = {"deterministic", "geometric", "tabulated"}


def _type_dist_from_dict(d, key: str) -> TypeDistribution:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{key}: expected a tagged object with a 'kind' field")
    kind = d["kind"]
    try:
        if kind == "exponential":
            return ExponentialType(rate=float(d["rate"]))
        if kind == "half-normal":
            return HalfNormalType(sigma=float(d["sigma"]))
        if kind == "tabulated":
            return TabulatedType(gammas=d["gamma"], cdf_values=d["cdf"])
    except KeyError as exc:
        raise ConfigError(f"{key}: missing field {exc}") from None
    raise ConfigError(f"{key}.kind: unknown type distribution '{kind}' (one of {sorted(_TYPE_KINDS)})")


def _size_dist_from_dict(d, key: str) -> SizeDistribution:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{key}: expected a tagged object with a 'kind' field")
    kind = d["kind"]
    try:
        if kind == "deterministic":
            return DeterministicSize(value=d["value"])
        if kind == "geometric":
            return GeometricSize(p=float(d["p"]))
        if kind == "tabulated":
            return TabulatedSize(values=d["values"], probs=d["probs"])
    except KeyError as exc:
        raise ConfigError(f"{key}: missing field {exc}") from None
    raise ConfigError(f"{key}.kind: unknown size distribution '{kind}' (one of {sorted(_SIZE_KINDS)})")


def _size_dist_list(entry, key: str, n: int) -> tuple[SizeDistribution, ...]:
    # A single tagged object is broadcast to all venues.
    if isinstance(entry, dict):
        return tuple(_size_dist_from_dict(entry, key) for _ in range(n))
    if isinstance(entry, list):
        if len(entry) != n:
            raise ConfigError(f"{key}: expected {n} distributions, got {len(entry)}")
        return tuple(_size_dist_from_dict(e, f"{key}[{i}]") for i, e in enumerate(entry))
    raise ConfigError(f"{key}: expected a tagged object or a list of them")


def config_from_dict(d: dict) -> ModelConfig:
    """Build a ModelConfig from the documented JSON schema (see docs/schema.md)."""
    required = [
        "n_exchanges", "beta", "lambda", "big_lambda", "mu", "rebate0",
        "rebates", "v", "b_dedicated", "b_optimized", "type_dist", "size_dists",
    ]
    for key in required:
        if key not in d:
            raise ConfigError(f"{key}: missing")
    n = d["n_exchanges"]
    sizes = d["size_dists"]
    if not isinstance(sizes, dict):
        raise ConfigError("size_dists: expected an object with market/dedicated/optimized")
    for key in ("market", "dedicated", "optimized"):
        if key not in sizes:
            raise ConfigError(f"size_dists.{key}: missing")
    return ModelConfig(
        n_exchanges=n,
        beta=d["beta"],
        lam=d["lambda"],
        big_lambda=float(d["big_lambda"]),
        mu=float(d["mu"]),
        rebate0=float(d["rebate0"]),
        rebates=d["rebates"],
        v=float(d["v"]),
        b_dedicated=d["b_dedicated"],
        b_optimized=float(d["b_optimized"]),
        type_dist=_type_dist_from_dict(d["type_dist"], "type_dist"),
        market_sizes=_size_dist_list(sizes["market"], "size_dists.market", n),
        dedicated_sizes=_size_dist_list(sizes["dedicated"], "size_dists.dedicated", n),
        optimized_size=_size_dist_from_dict(sizes["optimized"], "size_dists.optimized"),
    )


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "n_exchanges": cfg.n_exchanges,
        "beta": cfg.beta.tolist(),
        "lambda": cfg.lam.tolist(),
        "big_lambda": cfg.big_lambda,
        "mu": cfg.mu,
        "rebate0": cfg.rebate0,
        "rebates": cfg.rebates.tolist(),
        "v": cfg.v,
        "b_dedicated": cfg.b_dedicated.tolist(),
        "b_optimized": cfg.b_optimized,
        "type_dist": cfg.type_dist.to_dict(),
        "size_dists": {
            "market": [d.to_dict() for d in cfg.market_sizes],
            "dedicated": [d.to_dict() for d in cfg.dedicated_sizes],
            "optimized": cfg.optimized_size.to_dict(),
        },
    }


def load_config(path) -> ModelConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def config_digest(cfg: ModelConfig) -> str:
    """Stable short digest of a configuration, used to tag report files."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
