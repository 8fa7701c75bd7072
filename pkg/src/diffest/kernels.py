"""Interaction kernels: Newtonian, mollified Newtonian, bounded-Lipschitz.

Every kernel is a radial-odd map ``F: R^d -> R^d`` evaluated on arrays of
displacements with trailing axis ``d``.  Kernels the accelerated pair loop
understands expose :meth:`Kernel.numba_args`; anything else falls back to the
vectorised numpy path in :mod:`diffest.sde_sim`.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate, special

from .errors import ConfigError, DomainError, NumericalError

REPULSIVE = "repulsive"
ATTRACTIVE = "attractive"

# kind codes shared with diffest._accel
KIND_ZERO = 0
KIND_NEWTON = 1
KIND_REGULARIZED = 2
KIND_GAUSSIAN = 3

_EMPTY_TABLE = np.zeros((5, 1))


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2) / special.gamma(d / 2)


def newtonian_constant(d: int) -> float:
    """C_* = Gamma(d/2) / (2 pi^{d/2}); the field has unit flux through any sphere."""
    return special.gamma(d / 2) / (2.0 * math.pi ** (d / 2))


def _sign_factor(sign: str) -> float:
    if sign == REPULSIVE:
        return 1.0
    if sign == ATTRACTIVE:
        return -1.0
    raise ConfigError(f"unknown kernel sign {sign!r}")


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...k,...k->...", x, x))


class Kernel:
    """Base class.  Subclasses set ``d`` and implement :meth:`force`."""

    d: int
    singular = False

    def force(self, x) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.force(x)

    def numba_args(self):
        """``(kind, params, table)`` for the compiled pair loop, or None."""
        return None

    @property
    def resolution_scale(self) -> Optional[float]:
        """Smallest length scale a density grid has to resolve, if any."""
        return None

    def _check_dim(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ConfigError(f"expected trailing dimension {self.d}, got shape {x.shape}")
        return x


@dataclass(frozen=True)
class ZeroKernel(Kernel):
    d: int = 2

    def force(self, x):
        return np.zeros_like(self._check_dim(x))

    def numba_args(self):
        return KIND_ZERO, np.zeros(1), _EMPTY_TABLE


@dataclass(frozen=True)
class NewtonianKernel(Kernel):
    """Singular Newtonian field ``F(x) = -/+ C_* x / |x|^d``."""

    d: int = 2
    sign: str = REPULSIVE
    c_star: float = field(init=False)
    singular = True

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError("Newtonian kernel needs d >= 2")
        _sign_factor(self.sign)
        object.__setattr__(self, "c_star", newtonian_constant(self.d))

    @property
    def sign_factor(self) -> float:
        return _sign_factor(self.sign)

    def force(self, x):
        x = self._check_dim(x)
        r = _norm(x)
        if np.any(r == 0.0):
            raise DomainError("Newtonian force undefined at origin")
        w = self.sign_factor * self.c_star / r**self.d
        return w[..., None] * x

    def numba_args(self):
        return KIND_NEWTON, np.array([self.sign_factor * self.c_star]), _EMPTY_TABLE


def _bump(t):
    """exp(-1/(1-t^2)) on |t| < 1, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Radial unit-mass bump supported in the ball of radius ``width`` <= 1.

    Stores a table of the enclosed mass ``M(u)`` on ``[0, 1]`` together with a
    monotone cubic (PCHIP) interpolant of ``g(u) = M(u) / u^d``.  ``g`` is
    finite and smooth at the origin, so the mollified force never divides by a
    vanishing radius.
    """

    d: int = 2
    width: float = 1.0
    n_table: int = 2048
    normalization: float = field(init=False, repr=False)
    radii: np.ndarray = field(init=False, repr=False)
    cumulative_mass_table: np.ndarray = field(init=False, repr=False)
    ratio_table: np.ndarray = field(init=False, repr=False)
    _coeffs: np.ndarray = field(init=False, repr=False)
    _mass_interp: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.width <= 1.0:
            raise ConfigError("mollifier width must lie in (0, 1]")
        if self.n_table < 16:
            raise ConfigError("mollifier table needs at least 16 samples")
        d, w = self.d, self.width
        area = sphere_area(d)
        base, err = integrate.quad(
            lambda t: math.exp(-1.0 / (1.0 - t * t)) * t ** (d - 1), 0.0, 1.0,
            epsabs=1e-15, epsrel=1e-13, limit=200)
        norm = 1.0 / (area * w**d * base)

        u = np.linspace(0.0, 1.0, self.n_table)
        nodes, weights = np.polynomial.legendre.leggauss(24)
        a, b = u[:-1, None], u[1:, None]
        s = 0.5 * (b - a) * nodes[None, :] + 0.5 * (a + b)
        integrand = _bump(s / w) * s ** (d - 1)
        pieces = 0.5 * (b[:, 0] - a[:, 0]) * (integrand @ weights)
        mass = np.concatenate([[0.0], np.cumsum(pieces)]) * area * norm
        # pin M(1) = 1 exactly; the quadrature mismatch is O(1e-16)
        mass /= mass[-1]

        ratio = np.empty_like(mass)
        ratio[0] = area * norm * math.exp(-1.0) / d
        ratio[1:] = mass[1:] / u[1:] ** d
        pchip = interpolate.PchipInterpolator(u, ratio)
        coeffs = np.vstack([pchip.c, pchip.x[:-1]])
        mass_interp = interpolate.PchipInterpolator(u, mass)

        object.__setattr__(self, "normalization", norm)
        object.__setattr__(self, "radii", u)
        object.__setattr__(self, "cumulative_mass_table", mass)
        object.__setattr__(self, "ratio_table", ratio)
        object.__setattr__(self, "_coeffs", np.ascontiguousarray(coeffs))
        object.__setattr__(self, "_mass_interp", mass_interp)
        for arr in (u, mass, ratio, self._coeffs):
            arr.setflags(write=False)

    def profile(self, r):
        """psi(r) for the radial coordinate r = |x|."""
        return self.normalization * _bump(np.asarray(r, dtype=float) / self.width)

    def __call__(self, x):
        return self.profile(_norm(np.asarray(x, dtype=float)))

    def mass_ratio(self, u):
        """g(u) = M(u) / u^d, capped at u^-d (i.e. M <= 1)."""
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        inside = u < 1.0
        out[~inside] = u[~inside] ** (-float(self.d))
        ui = u[inside]
        c = self._coeffs
        k = np.minimum((ui * (self.n_table - 1)).astype(np.int64), self.n_table - 2)
        t = ui - c[4, k]
        g = ((c[0, k] * t + c[1, k]) * t + c[2, k]) * t + c[3, k]
        with np.errstate(divide="ignore", over="ignore"):
            out[inside] = np.minimum(g, ui ** (-float(self.d)))
        return out

    def cumulative_mass(self, u):
        """M(u), the mass of psi inside radius u."""
        u = np.asarray(u, dtype=float)
        return np.where(u < 1.0, self._mass_interp(np.clip(u, 0.0, 1.0)), 1.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["r", "M(r)"])
            for r, m in zip(self.radii, self.cumulative_mass_table):
                writer.writerow([repr(float(r)), repr(float(m))])


@dataclass(frozen=True)
class RegularizedKernel(Kernel):
    """F^N = F * psi_N with psi_N(x) = N^{d delta} psi(N^delta x).

    Evaluated through the enclosed-mass identity: inside the cutoff radius
    ``N^-delta`` the field is ``F(x) M(N^delta |x|)``, outside it is ``F``.
    """

    base: NewtonianKernel
    mollifier: Mollifier
    n_particles: int
    delta: float

    def __post_init__(self):
        d = self.base.d
        if self.mollifier.d != d:
            raise ConfigError("mollifier and kernel dimensions differ")
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if not 0.0 < self.delta <= 1.0 / d:
            raise ConfigError(f"cutoff index delta={self.delta} outside (0, 1/d]")
        if self.delta >= 1.0 / 3.0:
            warnings.warn(
                f"delta={self.delta} >= 1/3: the interaction-error rate is only "
                "established for delta < 1/3", stacklevel=3)

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def sign(self) -> str:
        return self.base.sign

    @property
    def scale(self) -> float:
        """N^delta."""
        return float(self.n_particles) ** self.delta

    @property
    def cutoff(self) -> float:
        """N^-delta; F^N coincides with F beyond this radius."""
        return float(self.n_particles) ** (-self.delta)

    @property
    def resolution_scale(self):
        return self.cutoff

    def force(self, x):
        x = self._check_dim(x)
        r = _norm(x)
        inside = r < self.cutoff
        w = np.empty_like(r)
        pref = self.base.sign_factor * self.base.c_star
        ri = r[inside]
        mag = self.scale**self.d * self.mollifier.mass_ratio(self.scale * ri)
        # enclosed mass <= 1: never exceed the Newtonian magnitude
        with np.errstate(divide="ignore", over="ignore"):
            w[inside] = np.where(mag * ri**self.d >= 1.0, pref / ri**self.d, pref * mag)
        w[~inside] = pref / r[~inside] ** self.d
        return w[..., None] * x

    def numba_args(self):
        params = np.array([
            self.base.sign_factor * self.base.c_star,
            self.scale,
            self.cutoff,
            self.scale**self.d,
            float(self.mollifier.n_table - 1),
        ])
        return KIND_REGULARIZED, params, self.mollifier._coeffs


@dataclass(frozen=True)
class LipschitzEnvelope:
    """L^N(x) = 6^d/|x|^d for |x| >= 6 N^-delta, N^{d delta} otherwise."""

    d: int
    n_particles: int
    delta: float

    @property
    def inner_radius(self) -> float:
        return 6.0 * float(self.n_particles) ** (-self.delta)

    @property
    def plateau(self) -> float:
        return float(self.n_particles) ** (self.d * self.delta)

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        out = np.full_like(r, self.plateau)
        far = r >= self.inner_radius
        out[far] = 6.0**self.d / r[far] ** self.d
        return out

    def __call__(self, x):
        return self.radial(_norm(np.asarray(x, dtype=float)))


class LipschitzKernel(Kernel):
    """Bounded Lipschitz interaction built from a user-supplied force map."""

    def __init__(self, force: Callable, sup_norm_bound: float, lipschitz_constant: float,
                 d: int = 2, name: str = "custom"):
        if sup_norm_bound < 0 or lipschitz_constant < 0:
            raise ConfigError("bounds must be non-negative")
        self._force = force
        self.sup_norm_bound = float(sup_norm_bound)
        self.lipschitz_constant = float(lipschitz_constant)
        self.d = d
        self.name = name

    def force(self, x):
        return np.asarray(self._force(self._check_dim(x)), dtype=float)

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, d={self.d})"


class GaussianKernel(LipschitzKernel):
    """F(x) = strength * x * exp(-|x|^2 / length^2).

    Negative ``strength`` is attractive.  The bounds are exact:
    ``sup|F| = |strength| length / sqrt(2e)`` and ``Lip(F) = |strength|``.
    """

    def __init__(self, d: int = 2, strength: float = -1.0, length: float = 1.0):
        if length <= 0:
            raise ConfigError("length must be positive")
        self.strength = float(strength)
        self.length = float(length)
        inv = 1.0 / self.length**2
        super().__init__(
            lambda x: self.strength * x * np.exp(-np.einsum("...k,...k->...", x, x) * inv)[..., None],
            sup_norm_bound=abs(self.strength) * self.length / math.sqrt(2.0 * math.e),
            lipschitz_constant=abs(self.strength),
            d=d,
            name="gaussian",
        )

    def numba_args(self):
        return KIND_GAUSSIAN, np.array([self.strength, 1.0 / self.length**2]), _EMPTY_TABLE

    def __eq__(self, other):
        return (isinstance(other, GaussianKernel) and (self.d, self.strength, self.length)
                == (other.d, other.strength, other.length))

    def __hash__(self):
        return hash(("gaussian", self.d, self.strength, self.length))


def newtonian_force(kernel: NewtonianKernel, x) -> np.ndarray:
    return kernel.force(x)


def regularized_force(kernel: RegularizedKernel, x) -> np.ndarray:
    return kernel.force(x)


def envelope_value(env: LipschitzEnvelope, x):
    return env(x)


def _quad(f, a, b, what):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, _ = integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-11, limit=400)
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature for {what} did not converge: {exc}") from exc
    if not math.isfinite(value):
        raise NumericalError(f"quadrature for {what} returned {value}")
    return value


def kernel_l2_norm(kernel: RegularizedKernel, radius: Optional[float] = None) -> float:
    """L^2 norm of F^N over the ball of the given radius (whole space if None).

    In d = 2 the Newtonian tail is not square integrable at infinity, so a
    finite ``radius`` is required there.
    """
    d = kernel.d
    if d < 2:
        raise ConfigError("kernel_l2_norm needs d >= 2")
    area = sphere_area(d)
    c = kernel.base.c_star
    r0 = kernel.cutoff
    r_in = r0 if radius is None else min(r0, radius)
    mol = kernel.mollifier
    s = kernel.scale

    def inner(r):
        m = float(mol.cumulative_mass(np.array([s * r]))[0])
        return area * c * c * m * m * r ** (1 - d)

    total = _quad(inner, 0.0, r_in, "inner kernel norm")
    if radius is None:
        if d == 2:
            raise NumericalError("||F^N||_2 diverges in d=2; pass a finite radius")
        total += _quad(lambda r: area * c * c * r ** (1 - d), r0, np.inf, "outer kernel norm")
    elif radius > r0:
        total += _quad(lambda r: area * c * c * r ** (1 - d), r0, radius, "outer kernel norm")
    return math.sqrt(total)


@lru_cache(maxsize=64)
def _cached_mollifier(d: int, width: float) -> Mollifier:
    return Mollifier(d=d, width=width)


def make_mollifier(d: int, width: float = 1.0) -> Mollifier:
    """Shared (immutable) mollifier instance for the given dimension and width."""
    return _cached_mollifier(int(d), float(width))


@lru_cache(maxsize=64)
def _cached_regularized(d, sign, width, n, delta):
    return RegularizedKernel(NewtonianKernel(d, sign), make_mollifier(d, width), n, delta)


def make_regularized(d: int, n_particles: int, delta: float, sign: str = REPULSIVE,
                     width: float = 1.0) -> RegularizedKernel:
    return _cached_regularized(int(d), sign, float(width), int(n_particles), float(delta))
