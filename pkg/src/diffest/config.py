"""Experiment configuration records and their JSON form."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

from . import kernels as kn
from .errors import ConfigError

KERNEL_KINDS = ("zero", "newtonian", "regularized", "gaussian")
INITIAL_KINDS = ("gaussian", "ball")
REQUIRED_KEYS = ("d", "N", "K", "T", "dt", "nu")


@dataclass(frozen=True)
class KernelSpec:
    """Serializable description of an interaction kernel."""

    kind: str = "regularized"
    sign: str = kn.REPULSIVE
    width: float = 1.0
    strength: float = -1.0
    length: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.sign not in (kn.REPULSIVE, kn.ATTRACTIVE):
            raise ConfigError(f"unknown kernel sign {self.sign!r}")

    def build(self, d: int, N: int, delta: Optional[float]) -> kn.Kernel:
        if self.kind == "zero":
            return kn.ZeroKernel(d)
        if self.kind == "newtonian":
            return kn.NewtonianKernel(d, self.sign)
        if self.kind == "gaussian":
            return kn.GaussianKernel(d, self.strength, self.length)
        if delta is None:
            raise ConfigError("regularized kernel needs a cutoff index delta")
        return kn.make_regularized(d, N, delta, self.sign, self.width)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data) -> "KernelSpec":
        if isinstance(data, str):
            return cls(kind=data)
        return cls(**data)


@dataclass(frozen=True)
class InitialSpec:
    """i.i.d. initial law: isotropic Gaussian (scale = sigma) or uniform ball (scale = R)."""

    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("initial density scale must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class GridSpec:
    """Periodic square [-L/2, L/2)^2 with n x n nodes for the density solver."""

    L: float
    n: int
    cfl: float = 0.5

    def __post_init__(self):
        if self.L <= 0 or self.n < 8:
            raise ConfigError("grid needs L > 0 and n >= 8")
        if not 0 < self.cfl <= 1:
            raise ConfigError("cfl factor must be in (0, 1]")

    @property
    def spacing(self) -> float:
        return self.L / self.n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SystemConfig:
    """All scalar parameters of one experiment.

    ``substeps`` simulation steps of size ``h = dt / substeps`` are taken per
    observation interval ``dt``; ``M = T / dt`` must be an integer.
    """

    d: int
    N: int
    K: int
    T: float
    dt: float
    nu: float
    delta: Optional[float] = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0
    initial: InitialSpec = field(default_factory=InitialSpec)
    substeps: int = 10
    grid: Optional[GridSpec] = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if not 1 <= self.K <= self.N:
            raise ConfigError("K must lie in [1, N]")
        if self.T <= 0 or self.dt <= 0:
            raise ConfigError("T and dt must be positive")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError(f"T/dt = {ratio} is not a positive integer")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if self.nu < 0 or not math.isfinite(self.nu):
            raise ConfigError("nu must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.initial.kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown initial density {self.initial.kind!r}")

    @property
    def M(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def h(self) -> float:
        return self.dt / self.substeps

    @property
    def n_substeps(self) -> int:
        return self.M * self.substeps

    def build_kernel(self) -> kn.Kernel:
        return self.kernel.build(self.d, self.N, self.delta)

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "d": self.d, "N": self.N, "K": self.K, "T": self.T, "dt": self.dt,
            "nu": self.nu, "delta": self.delta, "kernel": self.kernel.to_dict(),
            "seed": self.seed, "initial": self.initial.to_dict(),
            "substeps": self.substeps,
            "grid": None if self.grid is None else self.grid.to_dict(),
        }
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SystemConfig":
        missing = [k for k in REQUIRED_KEYS if k not in data]
        if missing:
            raise ConfigError(f"config is missing required keys: {', '.join(missing)}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = dict(data)
        if "kernel" in kw:
            kw["kernel"] = KernelSpec.from_dict(kw["kernel"])
        if "initial" in kw:
            kw["initial"] = InitialSpec(**kw["initial"])
        if kw.get("grid") is not None:
            kw["grid"] = GridSpec(**kw["grid"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SystemConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        """Stable short digest of the canonical JSON form (seed included)."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]
