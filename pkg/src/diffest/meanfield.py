"""Spectral solver for the regularized aggregation equation in d = 2.

    d/dt rho = nu Lap rho - div(rho u),    u = F^N * rho

on a periodic square ``[-L/2, L/2)^2``.  The box stands in for the plane, so
the velocity is a free-space convolution (zero-padded FFT) while the
advection-diffusion step is periodic pseudo-spectral.  Diffusion is integrated
exactly (exponential time differencing, second order); the flux is explicit
and dealiased with the 2/3 rule.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .config import GridSpec, InitialSpec, SystemConfig
from .errors import (ConfigError, DomainError, DomainEscapeError, PositivityError,
                     ResolutionError, StepSizeError)
from .kernels import Kernel, LipschitzEnvelope

MASS_TOL = 1e-8
NEGATIVE_TOL = 1e-6
BOUNDARY_TOL = 1e-10
SNAPSHOT_MAGIC = b"DIFFRHO1"


def grid_coords(grid: GridSpec) -> np.ndarray:
    return -0.5 * grid.L + grid.spacing * np.arange(grid.n)


def check_resolution(grid: GridSpec, scale: Optional[float], what: str = "kernel") -> None:
    """Grid spacing must be at most a quarter of the kernel's smallest scale."""
    if scale is not None and grid.spacing > 0.25 * scale + 1e-15:
        raise ResolutionError(
            f"grid spacing {grid.spacing:.4g} exceeds {what} scale/4 = {0.25 * scale:.4g}; "
            f"need n >= {math.ceil(4 * grid.L / scale)}")


@dataclass(frozen=True)
class DensityField:
    """Density sampled at the nodes ``x_a = -L/2 + a h`` (array index ``[a, b]`` is ``(x_a, y_b)``)."""

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.values.shape != (self.grid.n, self.grid.n):
            raise ConfigError("density values do not match the grid")

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.spacing**2)

    @property
    def sup(self) -> float:
        return float(np.abs(self.values).max())

    @property
    def l1(self) -> float:
        return float(np.abs(self.values).sum() * self.grid.spacing**2)

    def boundary_ratio(self) -> float:
        """max |rho| on the outermost ring of nodes divided by max |rho|."""
        v = np.abs(self.values)
        edge = max(v[0].max(), v[-1].max(), v[:, 0].max(), v[:, -1].max())
        top = v.max()
        return float(edge / top) if top > 0 else 0.0

    def moments(self):
        """(mean_x, mean_y, var_x, var_y) of the normalized density."""
        x = grid_coords(self.grid)
        w = self.values / self.values.sum()
        mx = float((w.sum(axis=1) * x).sum())
        my = float((w.sum(axis=0) * x).sum())
        vx = float((w.sum(axis=1) * (x - mx) ** 2).sum())
        vy = float((w.sum(axis=0) * (x - my) ** 2).sum())
        return mx, my, vx, vy

    @classmethod
    def from_initial(cls, spec: InitialSpec, grid: GridSpec) -> "DensityField":
        """Gaussian or uniform-disk density, renormalized to unit grid mass."""
        x = grid_coords(grid)
        X, Y = np.meshgrid(x, x, indexing="ij")
        r2 = X**2 + Y**2
        if spec.kind == "gaussian":
            v = np.exp(-0.5 * r2 / spec.scale**2)
        elif spec.kind == "ball":
            v = (r2 <= spec.scale**2).astype(float)
        else:
            raise ConfigError(f"unknown initial density {spec.kind!r}")
        total = v.sum() * grid.spacing**2
        if total == 0:
            raise ConfigError("initial density does not intersect the grid")
        return cls(grid, v / total)

    def to_csv(self, path) -> None:
        x = grid_coords(self.grid)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "rho"])
            for a in range(self.grid.n):
                for b in range(self.grid.n):
                    w.writerow([repr(float(x[a])), repr(float(x[b])), repr(float(self.values[a, b]))])


@dataclass(frozen=True)
class ForceField:
    """Vector field on the density grid, values ``[n][n][2]``."""

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0

    def at(self, points) -> np.ndarray:
        return bilinear(self.grid, self.values, np.asarray(points, dtype=float))

    @property
    def sup(self) -> float:
        return float(np.sqrt((self.values**2).sum(axis=-1)).max())


def _cell_index(grid: GridSpec, points: np.ndarray):
    s = (points + 0.5 * grid.L) / grid.spacing
    idx = np.floor(s).astype(np.int64)
    bad = np.any((idx < 0) | (idx > grid.n - 2), axis=-1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DomainEscapeError(f"point {points[i]} outside the interpolation domain", index=i)
    return idx, s - idx


def bilinear(grid: GridSpec, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of node data; valid on ``[-L/2, L/2 - h]^2``."""
    idx, f = _cell_index(grid, points)
    a, b = idx[:, 0], idx[:, 1]
    fx, fy = f[:, 0:1], f[:, 1:2]
    return ((1 - fx) * (1 - fy) * values[a, b] + fx * (1 - fy) * values[a + 1, b]
            + (1 - fx) * fy * values[a, b + 1] + fx * fy * values[a + 1, b + 1])


class ForceConvolver:
    """Free-space ``F * rho`` on the grid through a (2n)^2 zero-padded FFT.

    The kernel transform is computed once; each call costs one forward and
    two inverse FFTs of size (2n)^2.
    """

    def __init__(self, kernel: Kernel, grid: GridSpec):
        if kernel.d != 2:
            raise ConfigError("density solver is two-dimensional")
        if kernel.singular:
            raise ConfigError("singular kernel cannot be sampled on a grid; regularize it first")
        check_resolution(grid, kernel.resolution_scale)
        n, h = grid.n, grid.spacing
        self.grid = grid
        self.kernel = kernel
        j = np.arange(2 * n)
        disp = np.where(j < n, j, j - 2 * n) * h
        DX, DY = np.meshgrid(disp, disp, indexing="ij")
        pts = np.stack([DX, DY], axis=-1)
        pts[0, 0] = (h, 0.0)  # placeholder, odd kernels vanish at the origin
        vals = kernel.force(pts)
        vals[0, 0] = 0.0
        self.zero = not np.any(vals)
        self._khat = [np.fft.rfft2(vals[..., c]) for c in range(2)]

    def __call__(self, values: np.ndarray) -> np.ndarray:
        n = self.grid.n
        out = np.zeros((n, n, 2))
        if self.zero:
            return out
        rhat = np.fft.rfft2(values, s=(2 * n, 2 * n))
        for c in range(2):
            out[..., c] = np.fft.irfft2(rhat * self._khat[c], s=(2 * n, 2 * n))[:n, :n]
        return out * self.grid.spacing**2


def convolve_force(rho: DensityField, kernel: Kernel) -> ForceField:
    """(F * rho) at every grid node."""
    return ForceField(rho.grid, ForceConvolver(kernel, rho.grid)(rho.values), rho.time)


def convolve_envelope(rho: DensityField, env: LipschitzEnvelope, power: int = 1,
                      targets=None) -> np.ndarray:
    """``(L^N)^power * rho`` by direct summation over grid nodes.

    ``targets`` is an ``[m][2]`` integer array of node indices; by default
    every node is evaluated and the result has the grid's shape.
    """
    if env.d != 2:
        raise ConfigError("density solver is two-dimensional")
    check_resolution(rho.grid, float(env.n_particles) ** (-env.delta), "envelope")
    n = rho.grid.n
    if targets is None:
        A, B = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        idx = np.stack([A.ravel(), B.ravel()], axis=1)
        shape = (n, n)
    else:
        idx = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        shape = (idx.shape[0],)
    vals = _accel.envelope_convolution(np.ascontiguousarray(rho.values, dtype=float),
                                       rho.grid.spacing, 2, env.plateau, env.inner_radius,
                                       int(power), np.ascontiguousarray(idx))
    return vals.reshape(shape)


def _phi(z: np.ndarray):
    """phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2, stable near 0."""
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    em1 = np.expm1(zs)
    phi1 = em1 / zs
    phi2 = (em1 - zs) / zs**2
    s1 = np.zeros_like(z)
    s2 = np.zeros_like(z)
    term = np.ones_like(z)
    fact1, fact2 = 1.0, 2.0
    for k in range(8):
        s1 += term / fact1
        s2 += term / fact2
        term = term * z
        fact1 *= k + 2
        fact2 *= k + 3
    return np.where(small, s1, phi1), np.where(small, s2, phi2)


@dataclass
class MeanFieldSolution:
    """Output of :func:`solve_density`; doubles as the force provider for the Y-dynamics.

    Force snapshots sit at ``times`` (spacing ``snapshot_step``) and are
    interpolated bilinearly in space and linearly in time.
    """

    grid: GridSpec
    times: np.ndarray
    forces: np.ndarray
    masses: np.ndarray
    boundary_ratios: np.ndarray
    negative_fractions: np.ndarray
    final: DensityField
    densities: Optional[np.ndarray] = None
    n_steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def snapshot_step(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def force_field(self, i: int) -> ForceField:
        return ForceField(self.grid, self.forces[i], float(self.times[i]))

    def density(self, i: int) -> DensityField:
        if self.densities is None:
            raise DomainError("densities were not retained; solve with keep_density=True")
        return DensityField(self.grid, self.densities[i], float(self.times[i]))

    def force_at(self, points, t: float) -> np.ndarray:
        """Mean-field force at ``points`` ([m][2]) and time ``t``."""
        pts = np.asarray(points, dtype=float)
        dt = self.snapshot_step
        if not self.t_start - 1e-12 <= t <= self.t_end + 1e-9 * max(1.0, self.t_end):
            raise DomainError(f"t={t} outside the solved interval [{self.t_start}, {self.t_end}]")
        if dt == 0.0:
            return bilinear(self.grid, self.forces[0], pts)
        s = (t - self.t_start) / dt
        i = int(np.floor(s + 1e-9))
        i = min(max(i, 0), len(self.times) - 1)
        w = s - i
        f0 = bilinear(self.grid, self.forces[i], pts)
        if abs(w) < 1e-9 or i == len(self.times) - 1:
            return f0
        return (1.0 - w) * f0 + w * bilinear(self.grid, self.forces[i + 1], pts)

    def write(self, path) -> None:
        """Snapshot file: magic, header length, JSON header, little-endian f8 arrays."""
        arrays = ["times", "forces"] + ([] if self.densities is None else ["densities"])
        header = {"grid": self.grid.to_dict(), "arrays": arrays, "meta": self.meta,
                  "shape": list(self.forces.shape), "dtype": "<f8"}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in arrays:
                fh.write(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())


def solve_density(rho0: DensityField, config: SystemConfig, t_end: Optional[float] = None,
                  step: Optional[float] = None, keep_density: bool = False,
                  kernel: Optional[Kernel] = None) -> MeanFieldSolution:
    """Evolve ``rho0`` to ``t_end`` (default ``config.T``), storing snapshots every ``config.h``.

    With ``step=None`` the internal step is chosen per snapshot interval from
    the CFL condition ``tau max|u| <= cfl * spacing``.  A user ``step`` is
    honoured as an upper bound and a CFL number above one raises
    :class:`StepSizeError`.
    """
    grid = rho0.grid
    if config.d != 2:
        raise ConfigError("density solver is two-dimensional")
    if config.nu <= 0:
        raise ConfigError("density solver needs nu > 0")
    t_end = config.T if t_end is None else float(t_end)
    if t_end > config.T * (1 + 1e-12) or t_end <= 0:
        raise ConfigError("t_end must lie in (0, T]")
    if abs(rho0.mass - 1.0) > MASS_TOL:
        raise ConfigError(f"initial mass {rho0.mass} differs from 1")
    if rho0.boundary_ratio() >= BOUNDARY_TOL:
        raise DomainError("initial density is not negligible on the box boundary; enlarge L")
    kernel = config.build_kernel() if kernel is None else kernel
    conv = ForceConvolver(kernel, grid)

    n, L, hx = grid.n, grid.L, grid.spacing
    kx = 2 * np.pi * np.fft.fftfreq(n, d=hx)
    ky = 2 * np.pi * np.fft.rfftfreq(n, d=hx)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    lin = -config.nu * (KX**2 + KY**2)
    kcut = (2.0 / 3.0) * np.pi / hx
    mask = (np.abs(KX) < kcut) & (np.abs(KY) < kcut)
    ikx, iky = 1j * KX * mask, 1j * KY * mask

    def nonlinear(rho):
        u = conv(rho)
        return -(ikx * np.fft.rfft2(rho * u[..., 0]) + iky * np.fft.rfft2(rho * u[..., 1])), u

    n_snap = int(round(t_end / config.h))
    if abs(n_snap * config.h - t_end) > 1e-9 * t_end:
        raise ConfigError("t_end must be a multiple of the simulation substep")
    times = np.arange(n_snap + 1) * config.h
    forces = np.empty((n_snap + 1, n, n, 2))
    densities = np.empty((n_snap + 1, n, n)) if keep_density else None
    masses = np.empty(n_snap + 1)
    boundary = np.empty(n_snap + 1)
    negative = np.empty(n_snap + 1)
    etd_cache: dict = {}

    def record(i, rho, u):
        forces[i] = u
        if densities is not None:
            densities[i] = rho
        masses[i] = rho.sum() * hx * hx
        absr = np.abs(rho)
        top = absr.max()
        boundary[i] = max(absr[0].max(), absr[-1].max(), absr[:, 0].max(), absr[:, -1].max()) / top
        negative[i] = -np.minimum(rho, 0.0).sum() / absr.sum()
        if abs(masses[i] - 1.0) > MASS_TOL:
            raise PositivityError(f"mass drifted to {masses[i]} at t={times[i]}")
        if negative[i] > NEGATIVE_TOL:
            raise PositivityError(f"negative mass fraction {negative[i]:.3g} at t={times[i]}")
        if boundary[i] >= BOUNDARY_TOL:
            raise DomainError(f"density reached the box boundary at t={times[i]}; enlarge L")

    rho = rho0.values.astype(float).copy()
    rhat = np.fft.rfft2(rho)
    nl, u = nonlinear(rho)
    record(0, rho, u)
    total_steps = 0
    for s in range(n_snap):
        umax = float(np.sqrt((u**2).sum(axis=-1)).max())
        limit = grid.cfl * hx / umax if umax > 0 else np.inf
        if step is None:
            m = max(1, math.ceil(config.h / limit - 1e-12)) if np.isfinite(limit) else 1
        else:
            m = max(1, math.ceil(config.h / step - 1e-12))
        tau = config.h / m
        if tau * umax > hx:
            raise StepSizeError(f"CFL number {tau * umax / hx:.3g} > 1 at t={times[s]}")
        if m not in etd_cache:
            z = lin * tau
            p1, p2 = _phi(z)
            etd_cache[m] = (np.exp(z), tau * p1, tau * p2)
        E, P1, P2 = etd_cache[m]
        for _ in range(m):
            a_hat = E * rhat + P1 * nl
            nl_a, _ = nonlinear(np.fft.irfft2(a_hat, s=(n, n)))
            rhat = a_hat + P2 * (nl_a - nl)
            rho = np.fft.irfft2(rhat, s=(n, n))
            nl, u = nonlinear(rho)
            total_steps += 1
            if step is not None:
                cfl_now = tau * float(np.sqrt((u**2).sum(axis=-1)).max()) / hx
                if cfl_now > 1.0:
                    raise StepSizeError(f"CFL number {cfl_now:.3g} > 1 during the step ending near t={times[s + 1]}")
        record(s + 1, rho, u)

    return MeanFieldSolution(
        grid=grid, times=times, forces=forces, masses=masses, boundary_ratios=boundary,
        negative_fractions=negative, final=DensityField(grid, rho, float(times[-1])),
        densities=densities, n_steps=total_steps,
        meta={"config": config.to_dict(), "t_end": t_end})


def meanfield_force(provider: MeanFieldSolution, x, t: float) -> np.ndarray:
    """Mean-field force at one point (2-vector) or many (``[m][2]``)."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    out = provider.force_at(np.atleast_2d(pts), t)
    return out[0] if single else out


def meanfield_drift_integrals(positions: np.ndarray, provider: MeanFieldSolution,
                              h: float, substeps: int) -> np.ndarray:
    """Left-endpoint sums ``h * sum_s (F * rho)(X^s, t_s)`` over each observation window.

    ``positions`` is ``[S+1][K][2]``; the result is ``[K][M][2]`` with ``M = S / substeps``.
    """
    n_steps = positions.shape[0] - 1
    M = n_steps // substeps
    K = positions.shape[1]
    out = np.zeros((K, M, positions.shape[2]))
    for s in range(M * substeps):
        out[:, s // substeps] += h * provider.force_at(positions[s], s * h)
    return out


def interaction_discrepancy(ensemble, provider: MeanFieldSolution, K: Optional[int] = None) -> float:
    """sup over substeps and the first K particles of |empirical drift - (F * rho)(X_i)|."""
    K = ensemble.config.N if K is None else K
    h = ensemble.config.h
    worst = 0.0
    for s in range(ensemble.drifts.shape[0]):
        diff = ensemble.drifts[s, :K] - provider.force_at(ensemble.positions[s, :K], s * h)
        worst = max(worst, float(np.sqrt((diff**2).sum(axis=1)).max()))
    return worst
