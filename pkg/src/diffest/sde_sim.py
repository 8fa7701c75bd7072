"""Euler-Maruyama integration of the N-particle system and its mean-field twin."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from . import _accel
from . import rng as rngmod
from .config import SystemConfig
from .errors import ConfigError, DomainError, DomainEscapeError, ShapeError
from .kernels import Kernel, LipschitzEnvelope

INTERACTING = "interacting"
MEANFIELD = "meanfield"

RUN_MAGIC = b"DIFFRUN1"


class ForceProvider(Protocol):
    """Anything that can evaluate a (time-dependent) external force field."""

    t_start: float
    t_end: float

    def force_at(self, points: np.ndarray, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class MeanField:
    """Simulation mode: particles feel ``provider`` instead of each other."""

    provider: ForceProvider


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Positions at every substep plus the drifts and increments that made them.

    ``positions[s + 1] = positions[s] + drifts[s] * h + sqrt(2 nu) * brownian_increments[s]``
    holds bitwise (see :meth:`replay`).
    """

    positions: np.ndarray
    brownian_increments: np.ndarray
    drifts: np.ndarray
    config: SystemConfig
    label: str
    keys: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.positions.shape[0]) * self.config.h

    @property
    def observed_positions(self) -> np.ndarray:
        """Positions at the observation times t_n = n dt."""
        return self.positions[:: self.config.substeps]

    def replay(self) -> np.ndarray:
        amp = np.sqrt(2.0 * self.config.nu)
        h = self.config.h
        out = np.empty_like(self.positions)
        out[0] = self.positions[0]
        for s in range(self.drifts.shape[0]):
            out[s + 1] = out[s] + self.drifts[s] * h + amp * self.brownian_increments[s]
        return out


def sample_initial(config: SystemConfig, keys=None) -> np.ndarray:
    """N i.i.d. draws from the configured initial law, one stream per particle."""
    if keys is None:
        keys = np.arange(config.N)
    d = config.d
    spec = config.initial
    if spec.kind == "gaussian":
        z = rngmod.standard_normals(config.seed, 1, d, rngmod.INITIAL, keys)[0]
        return spec.scale * z
    if spec.kind == "ball":
        out = np.empty((len(keys), d))
        for col, key in enumerate(keys):
            g = rngmod.particle_generator(config.seed, key, rngmod.INITIAL)
            v = g.standard_normal(d)
            r = g.random() ** (1.0 / d)
            out[col] = spec.scale * r * v / np.linalg.norm(v)
        return out
    raise ConfigError(f"unknown initial density {spec.kind!r}")


def _drift_numpy(kernel: Kernel, positions: np.ndarray, chunk: int = 256) -> np.ndarray:
    n, d = positions.shape
    out = np.zeros((n, d))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        dx = positions[start:stop, None, :] - positions[None, :, :]
        rows = np.arange(stop - start)
        dx[rows, rows + start, :] = 1.0  # placeholder, contribution discarded below
        f = kernel.force(dx)
        f[rows, rows + start, :] = 0.0
        out[start:stop] = f.sum(axis=1)
    return out / (n - 1)


def pairwise_drift(kernel: Kernel, positions, compensated: bool = False) -> np.ndarray:
    """(1/(N-1)) sum_{j != i} F(x_i - x_j) for every particle i.

    Uses the compiled antisymmetric pair loop when the kernel supports it and
    a chunked numpy evaluation otherwise.  ``compensated`` switches on Kahan
    summation in the compiled loop.
    """
    pos = np.ascontiguousarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[0] < 2:
        raise ShapeError("positions must have shape (N, d) with N >= 2")
    args = kernel.numba_args()
    if args is None:
        return _drift_numpy(kernel, pos)
    kind, params, table = args
    out = np.empty_like(pos)
    status = _accel.pairwise_drift_blocked(
        pos, kind, params, table, _accel.block_bounds(pos.shape[0]), compensated, out)
    if status:
        raise DomainError("Newtonian force undefined at origin (coincident particles)")
    return out


def empirical_envelope(env: LipschitzEnvelope, positions) -> np.ndarray:
    """(L^N(X))_i = (1/(N-1)) sum_{j != i} L^N(X_i - X_j)."""
    pos = np.ascontiguousarray(positions, dtype=float)
    return _accel.envelope_sum(pos, env.d, env.plateau, env.inner_radius)


def empirical_drift_at(kernel: Kernel, targets, sources, skip_self: bool = False) -> np.ndarray:
    """(1/(S-1)) sum_j F(t_i - s_j); used for law-of-large-numbers checks."""
    t = np.ascontiguousarray(targets, dtype=float)
    s = np.ascontiguousarray(sources, dtype=float)
    args = kernel.numba_args()
    if args is None:
        out = np.zeros_like(t)
        for i in range(len(t)):
            dx = t[i] - s
            keep = np.ones(len(s), dtype=bool)
            if skip_self:
                keep[i] = False
            keep &= np.any(dx != 0.0, axis=1)
            out[i] = kernel.force(dx[keep]).sum(axis=0)
        return out / (len(s) - 1)
    kind, params, table = args
    return _accel.targeted_drift(t, s, kind, params, table, skip_self)


def simulate(config: SystemConfig, mode=INTERACTING, keys=None,
             compensated: bool = False) -> TrajectoryEnsemble:
    """Integrate ``dX = drift dt + sqrt(2 nu) dB`` with step ``h = dt / substeps``.

    ``mode`` is ``"interacting"`` (pairwise drift) or a :class:`MeanField`
    wrapping a force provider.  ``keys`` assigns stream keys to particle slots;
    the default is the identity.
    """
    keys = np.arange(config.N) if keys is None else np.asarray(keys, dtype=np.int64)
    if keys.shape != (config.N,):
        raise ShapeError("keys must contain one stream key per particle")
    n_steps, n, d, h = config.n_substeps, config.N, config.d, config.h

    if mode == INTERACTING:
        kernel = config.build_kernel()
        label = INTERACTING

        def drift(x, t):
            return pairwise_drift(kernel, x, compensated)
    elif isinstance(mode, MeanField):
        provider = mode.provider
        if provider.t_start > 1e-12 or provider.t_end < config.T - 1e-9 * config.T:
            raise ConfigError("force provider does not cover [0, T]")
        label = MEANFIELD

        def drift(x, t):
            return provider.force_at(x, t)
    else:
        raise ConfigError(f"unknown simulation mode {mode!r}")

    positions = np.empty((n_steps + 1, n, d))
    positions[0] = sample_initial(config, keys)
    increments = np.sqrt(h) * rngmod.standard_normals(config.seed, n_steps, d, rngmod.BROWNIAN, keys)
    drifts = np.empty((n_steps, n, d))
    amp = np.sqrt(2.0 * config.nu)
    for s in range(n_steps):
        try:
            drifts[s] = drift(positions[s], s * h)
        except DomainEscapeError as exc:
            raise DomainEscapeError(str(exc), time=s * h, index=exc.index) from exc
        positions[s + 1] = positions[s] + drifts[s] * h + amp * increments[s]
    return TrajectoryEnsemble(positions, increments, drifts, config, label, keys)


def _same_grid(X: TrajectoryEnsemble, Y: TrajectoryEnsemble) -> None:
    if X.positions.shape != Y.positions.shape:
        raise ShapeError(f"trajectory shapes differ: {X.positions.shape} vs {Y.positions.shape}")
    cx, cy = X.config, Y.config
    if (cx.seed, cx.h, cx.T, cx.N, cx.d) != (cy.seed, cy.h, cy.T, cy.N, cy.d):
        raise ShapeError("ensembles were not produced on the same seed and substep grid")
    if not np.array_equal(X.keys, Y.keys):
        raise ShapeError("ensembles use different particle streams")


def coupled_sup_distance(X: TrajectoryEnsemble, Y: TrajectoryEnsemble) -> float:
    """sup over substeps of max_i |X_i - Y_i|."""
    _same_grid(X, Y)
    diff = X.positions - Y.positions
    return float(np.sqrt(np.einsum("sik,sik->si", diff, diff)).max())


def brownian_modulus_check(ensemble: TrajectoryEnsemble, window: Optional[float] = None,
                           threshold: float = 1.0) -> float:
    """Fraction of (particle, window) pairs with sup_{s in window} |B^s - B^t| >= threshold.

    Windows are consecutive, non-overlapping, of length ``window`` (default
    the observation interval) and start at t = 0; the excursion is monitored
    on the substep grid.
    """
    h = ensemble.config.h
    window = ensemble.config.dt if window is None else window
    w = int(round(window / h))
    if w < 1 or abs(w * h - window) > 1e-9 * window:
        raise ConfigError("window must be a positive multiple of the substep")
    inc = ensemble.brownian_increments
    n_win = inc.shape[0] // w
    if n_win == 0:
        raise ConfigError("window longer than the trajectory")
    blocks = inc[: n_win * w].reshape(n_win, w, inc.shape[1], inc.shape[2])
    paths = np.cumsum(blocks, axis=1)
    excursion = np.sqrt(np.einsum("wsik,wsik->wsi", paths, paths)).max(axis=1)
    return float(np.mean(excursion >= threshold))


def write_run(ensemble: TrajectoryEnsemble, path) -> None:
    """Binary run file: magic, header length, JSON header, little-endian f8 arrays."""
    header = {
        "config": ensemble.config.to_dict(),
        "label": ensemble.label,
        "keys": [int(k) for k in ensemble.keys],
        "shape": list(ensemble.positions.shape),
        "arrays": ["positions", "brownian_increments", "drifts"],
        "layout": "[substep][particle][coord]",
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(RUN_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["arrays"]:
            fh.write(np.ascontiguousarray(getattr(ensemble, name), dtype="<f8").tobytes())


def read_run(path) -> TrajectoryEnsemble:
    with open(path, "rb") as fh:
        if fh.read(len(RUN_MAGIC)) != RUN_MAGIC:
            raise ShapeError(f"{path} is not a run file")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length))
        s1, n, d = header["shape"]
        shapes = {"positions": (s1, n, d), "brownian_increments": (s1 - 1, n, d),
                  "drifts": (s1 - 1, n, d)}
        arrays = {}
        for name in header["arrays"]:
            shape = shapes[name]
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(float)
    return TrajectoryEnsemble(config=SystemConfig.from_dict(header["config"]),
                              label=header["label"], keys=np.array(header["keys"]), **arrays)


def write_csv(ensemble: TrajectoryEnsemble, path) -> None:
    """One row per (substep, particle): substep, time, particle, x0..x{d-1}."""
    d = ensemble.config.d
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["substep", "time", "particle"] + [f"x{k}" for k in range(d)])
        for s, t in enumerate(ensemble.times):
            for i, x in enumerate(ensemble.positions[s]):
                writer.writerow([s, repr(float(t)), i] + [repr(float(v)) for v in x])
