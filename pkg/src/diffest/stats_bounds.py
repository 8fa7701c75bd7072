"""Tail bounds and regression helpers used to check rates empirically."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError


def chi2_tail(dof: int, gamma: float) -> float:
    """2 exp(-dof gamma^2 / 8): Bernstein-type bound on P(|S/dof - 1| > gamma), S ~ chi2(dof).

    ``gamma = 0`` is accepted and returns the vacuous value 2.
    """
    if int(dof) != dof or dof < 1:
        raise ConfigError("dof must be a positive integer")
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma={gamma} must lie in [0, 1)")
    return 2.0 * math.exp(-dof * gamma * gamma / 8.0)


@dataclass(frozen=True)
class ConcentrationCheck:
    """Empirical exceedance frequency against a theoretical tail bound.

    ``passed`` allows three binomial standard errors of slack:
    ``frequency <= bound + 3 sqrt(bound / count)``.
    """

    sample_count: int
    threshold: float
    empirical_frequency: float
    theoretical_bound: float
    passed: bool

    @classmethod
    def compare(cls, exceed, threshold: float, bound: float) -> "ConcentrationCheck":
        exceed = np.asarray(exceed, dtype=bool).ravel()
        if exceed.size == 0:
            raise ConfigError("no samples")
        freq = float(exceed.mean())
        ok = freq <= bound + 3.0 * math.sqrt(max(bound, 0.0) / exceed.size)
        return cls(int(exceed.size), float(threshold), freq, float(bound), bool(ok))

    def to_dict(self) -> dict:
        return asdict(self)


def sample_mean_concentration(samples, variance_proxy: float, C_alpha: float = 1.0,
                              alpha: float = 1.0) -> ConcentrationCheck:
    """Frequency of |mean| >= C_alpha sqrt(g) log(N)/sqrt(N) against N^{-alpha}.

    ``samples`` is ``[replicates][N]`` (a 1-D array is one replicate) of
    centered values; each row yields one sample mean.
    """
    z = np.asarray(samples, dtype=float)
    if z.size == 0:
        raise ConfigError("empty samples")
    if z.ndim == 1:
        z = z[None, :]
    n = z.shape[1]
    if n < 2:
        raise ConfigError("need at least two samples per replicate")
    thr = C_alpha * math.sqrt(variance_proxy) * math.log(n) / math.sqrt(n)
    return ConcentrationCheck.compare(np.abs(z.mean(axis=1)) >= thr, thr, float(n) ** (-alpha))


class LineFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


def fit_linear(xs, ys) -> LineFit:
    """Ordinary least squares y = slope x + intercept."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("xs and ys must be 1-D and of equal length")
    if x.size < 3:
        raise ConfigError("need at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("non-finite input")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    # a constant series is fitted exactly
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return LineFit(float(slope), float(icpt), float(r2))


def fit_rate(xs, ys) -> LineFit:
    """Power-law fit y ~ x^slope by least squares on (log x, log y)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ConfigError("fit_rate needs positive xs and ys")
    return fit_linear(np.log(x), np.log(y))
