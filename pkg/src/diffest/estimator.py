"""Quadratic-variation estimator of the diffusion coefficient and its error split.

For K observed trajectories sampled at ``t_n = n dt`` the estimator is

    nu_hat = 1/(2 d K T) * sum_{i,n} |a_i^n|^2,      a_i^n = X_i(t_{n+1}) - X_i(t_n).

Subtracting the drift integrals ``b_i^n`` gives an exactly chi-squared
quantity; the remaining error is controlled by ``I2`` (empirical minus
mean-field drift) and ``I3`` (mean-field drift itself).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import SystemConfig
from .errors import ConfigError, MissingDataError, ShapeError
from .stats_bounds import chi2_tail

CSV_COLUMNS = ("N", "K", "M", "dt", "nu", "delta", "seed", "nu_hat", "nu_KN",
               "I2", "I3", "bound", "tail_prob")


@dataclass(frozen=True)
class ObservationSet:
    """Per-window data of the observed agents, arrays shaped ``[K][M][d]``.

    ``drift_integrals`` holds the left-endpoint sums ``h * sum_s drift(X^s)``
    of the simulated drift; ``meanfield_drifts`` the same sums of the
    mean-field force ``(F * rho)(X^s, t_s)`` along the observed paths.
    """

    increments: np.ndarray
    config: SystemConfig
    drift_integrals: Optional[np.ndarray] = None
    meanfield_drifts: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.increments, dtype=float)
        if a.ndim != 3:
            raise ShapeError("increments must have shape [K][M][d]")
        if not np.all(np.isfinite(a)):
            raise ConfigError("increments contain non-finite values")
        if a.shape[0] > self.config.N:
            raise ShapeError("more observed agents than particles")
        for name in ("drift_integrals", "meanfield_drifts"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != a.shape:
                raise ShapeError(f"{name} shape {np.shape(v)} differs from increments {a.shape}")
        object.__setattr__(self, "increments", a)

    @property
    def K(self) -> int:
        return self.increments.shape[0]

    @property
    def M(self) -> int:
        return self.increments.shape[1]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def T(self) -> float:
        """Observed horizon; equals ``config.T`` unless the set was truncated."""
        return self.M * self.config.dt

    @classmethod
    def from_ensemble(cls, ensemble, K: Optional[int] = None, provider=None) -> "ObservationSet":
        """Observe the first K particles of a simulated ensemble.

        If ``provider`` (a solved mean-field density) is given, the mean-field
        drift integrals are evaluated along the observed paths.
        """
        cfg = ensemble.config
        K = cfg.K if K is None else int(K)
        if not 1 <= K <= cfg.N:
            raise ConfigError("K must lie in [1, N]")
        q = cfg.substeps
        obs = ensemble.observed_positions[:, :K]
        a = np.transpose(np.diff(obs, axis=0), (1, 0, 2))
        n_steps, _, d = ensemble.drifts.shape
        win = ensemble.drifts[:, :K].reshape(n_steps // q, q, K, d)
        b = np.transpose(cfg.h * win.sum(axis=1), (1, 0, 2))
        m = None
        if provider is not None:
            from .meanfield import meanfield_drift_integrals
            m = meanfield_drift_integrals(ensemble.positions[:, :K], provider, cfg.h, q)
        return cls(a, cfg.replace(K=K), b, m)

    def coarsen(self, factor: int) -> "ObservationSet":
        """Observe the same paths every ``factor`` windows (dt -> factor * dt)."""
        if factor < 1 or self.M % factor:
            raise ConfigError("factor must divide the number of windows")

        def agg(v):
            if v is None:
                return None
            return v.reshape(self.K, self.M // factor, factor, self.d).sum(axis=2)

        cfg = self.config.replace(dt=self.config.dt * factor, substeps=self.config.substeps * factor)
        return ObservationSet(agg(self.increments), cfg, agg(self.drift_integrals),
                              agg(self.meanfield_drifts))

    def _norm(self) -> float:
        if self.K == 0 or self.M == 0:
            raise ConfigError("empty observation set")
        return self.d * self.K * self.T


def estimate_nu(obs: ObservationSet) -> float:
    """nu_hat = sum |a|^2 / (2 d K T)."""
    return float(np.sum(obs.increments**2) / (2.0 * obs._norm()))


def intermediate_estimator(obs: ObservationSet) -> float:
    """nu_KN = sum |a - b|^2 / (2 d K T); (d K M) nu_KN / nu is chi-squared(d K M)."""
    if obs.drift_integrals is None:
        raise MissingDataError("drift integrals were not retained")
    return float(np.sum((obs.increments - obs.drift_integrals) ** 2) / (2.0 * obs._norm()))


def error_I3(obs: ObservationSet) -> float:
    """sum |m|^2 / (d K T) over the mean-field drift integrals m."""
    if obs.meanfield_drifts is None:
        raise MissingDataError("no mean-field density available")
    return float(np.sum(obs.meanfield_drifts**2) / obs._norm())


def error_I2(obs: ObservationSet) -> float:
    """sum |b - m|^2 / (d K T): empirical versus mean-field drift integrals."""
    if obs.drift_integrals is None or obs.meanfield_drifts is None:
        raise MissingDataError("I2 needs both drift integrals and mean-field drifts")
    return float(np.sum((obs.drift_integrals - obs.meanfield_drifts) ** 2) / obs._norm())


@dataclass(frozen=True)
class Decomposition:
    """|nu_hat - nu_KN| against I2 + I3 + sqrt(2 nu_hat) sqrt(2 (I2 + I3)).

    The right-hand side follows from Cauchy-Schwarz and holds for any data.
    ``small_regime`` records whether |nu_KN - nu|, I2 and I3 are all below 1,
    the regime in which the splitting constant is meaningful.
    """

    nu_hat: float
    nu_KN: float
    I2: float
    I3: float
    gap: float
    bound: float
    loose_bound: float
    holds: bool
    small_regime: bool


def decomposition(obs: ObservationSet, nu: Optional[float] = None) -> Decomposition:
    nu = obs.config.nu if nu is None else nu
    nh, nk = estimate_nu(obs), intermediate_estimator(obs)
    i2, i3 = error_I2(obs), error_I3(obs)
    gap = abs(nh - nk)
    tight = i2 + i3 + math.sqrt(2 * nh) * math.sqrt(2 * (i2 + i3))
    loose = i2 + i3 + 2 * math.sqrt(2 * nh) * math.sqrt(i2 + i3)
    return Decomposition(nh, nk, i2, i3, gap, tight, loose, gap <= tight + 1e-10,
                         abs(nk - nu) < 1 and i2 < 1 and i3 < 1)


def interaction_rate_exponent(config: SystemConfig) -> float:
    """Exponent r of the N^{-r} log N mean-field term: delta for regularized kernels, 1/2 otherwise."""
    if config.kernel.kind in ("regularized", "newtonian"):
        if config.delta is None:
            raise ConfigError("regularized kernel needs delta")
        return float(config.delta)
    return 0.5


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma={gamma} must lie in (0, 1)")


@dataclass(frozen=True)
class BoundEvaluation:
    value: float
    failure_probability: float
    tail_probability: float
    mean_field_probability: float


def theorem_bound(config: SystemConfig, C_alpha: float, gamma: float,
                  alpha: float = 1.0) -> BoundEvaluation:
    """C nu^{1/2} dt^{1/2} (1 + nu^{1/2} N^{-r} log N) + gamma nu, failing w.p. N^{-alpha} + 2 exp(-dKM gamma^2/8)."""
    _check_gamma(gamma)
    if C_alpha <= 0:
        raise ConfigError("C_alpha must be positive")
    nu, N = config.nu, config.N
    r = interaction_rate_exponent(config)
    value = (C_alpha * math.sqrt(nu) * math.sqrt(config.dt)
             * (1.0 + math.sqrt(nu) * N ** (-r) * math.log(N)) + gamma * nu)
    tail = chi2_tail(config.d * config.K * config.M, gamma)
    mf = float(N) ** (-alpha)
    return BoundEvaluation(value, mf + tail, tail, mf)


def simplified_bound(config: SystemConfig, C_alpha: float) -> BoundEvaluation:
    """(C nu^{1/2} + nu) dt^{1/2}, valid w.p. >= 1 - 2 exp(-d K T / 8) in the large-N limit."""
    if C_alpha <= 0:
        raise ConfigError("C_alpha must be positive")
    nu = config.nu
    value = (C_alpha * math.sqrt(nu) + nu) * math.sqrt(config.dt)
    tail = 2.0 * math.exp(-config.d * config.K * config.T / 8.0)
    return BoundEvaluation(value, tail, tail, 0.0)


def bound_shape(config: SystemConfig) -> float:
    """Coefficient of C_alpha in the theorem bound."""
    r = interaction_rate_exponent(config)
    return (math.sqrt(config.nu) * math.sqrt(config.dt)
            * (1.0 + math.sqrt(config.nu) * config.N ** (-r) * math.log(config.N)))


def fit_c_alpha(errors: Sequence[Sequence[float]], configs: Sequence[SystemConfig],
                quantile: float = 0.9, gamma: float = 0.0) -> float:
    """Least-squares constant through the origin matching error quantiles to the bound's shape.

    ``errors[j]`` holds the observed |nu_hat - nu| of all replicates of
    ``configs[j]``.  The ``gamma * nu`` offset is subtracted before fitting.
    """
    if len(errors) != len(configs) or not configs:
        raise ConfigError("need one error sample per configuration")
    x = np.array([bound_shape(c) for c in configs])
    y = np.array([np.quantile(np.asarray(e, dtype=float), quantile) - gamma * c.nu
                  for e, c in zip(errors, configs)])
    c = float(np.dot(x, y) / np.dot(x, x))
    if not c > 0:
        raise ConfigError("fitted constant is not positive")
    return c


@dataclass(frozen=True)
class EstimateReport:
    """Estimates, diagnostics and provenance of one run.  Absent diagnostics are None."""

    nu_hat: float
    nu: float
    gamma: float
    alpha: float
    config: dict
    config_hash: str
    seed: int
    nu_KN: Optional[float] = None
    I2: Optional[float] = None
    I3: Optional[float] = None
    theorem_bound: Optional[float] = None
    tail_prob: Optional[float] = None
    C_alpha: Optional[float] = None
    small_regime: Optional[bool] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nu_hat", "nu_KN", "I2", "I3"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @property
    def abs_error(self) -> float:
        return abs(self.nu_hat - self.nu)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "EstimateReport":
        return cls(**data)

    def csv_row(self) -> dict:
        c = self.config
        M = int(round(c["T"] / c["dt"]))
        return {"N": c["N"], "K": c["K"], "M": M, "dt": c["dt"], "nu": c["nu"],
                "delta": c["delta"], "seed": self.seed, "nu_hat": self.nu_hat,
                "nu_KN": self.nu_KN, "I2": self.I2, "I3": self.I3,
                "bound": self.theorem_bound, "tail_prob": self.tail_prob}


def make_report(obs: ObservationSet, gamma: float = 0.1, alpha: float = 1.0,
                C_alpha: Optional[float] = None, extra: Optional[dict] = None) -> EstimateReport:
    """Evaluate every estimator the data supports."""
    _check_gamma(gamma)
    cfg = obs.config
    nu_KN = intermediate_estimator(obs) if obs.drift_integrals is not None else None
    have_mf = obs.meanfield_drifts is not None
    I3 = error_I3(obs) if have_mf else None
    I2 = error_I2(obs) if have_mf and obs.drift_integrals is not None else None
    small = None
    if nu_KN is not None and I2 is not None:
        small = abs(nu_KN - cfg.nu) < 1 and I2 < 1 and I3 < 1
    bound = tail = None
    if C_alpha is not None:
        ev = theorem_bound(cfg, C_alpha, gamma, alpha)
        bound, tail = ev.value, ev.failure_probability
    else:
        tail = chi2_tail(cfg.d * cfg.K * cfg.M, gamma)
    return EstimateReport(nu_hat=estimate_nu(obs), nu=cfg.nu, gamma=gamma, alpha=alpha,
                          config=cfg.to_dict(), config_hash=cfg.config_hash(), seed=cfg.seed,
                          nu_KN=nu_KN, I2=I2, I3=I3, theorem_bound=bound, tail_prob=tail,
                          C_alpha=C_alpha, small_regime=small, extra=dict(extra or {}))
