"""Counter-based random streams.

Each particle owns a Philox stream keyed by ``(seed, particle index, purpose)``;
the substep index is the position inside the stream.  Two simulations with the
same seed therefore see identical Brownian increments for every particle,
whatever else differs between them.
"""
from __future__ import annotations

import numpy as np

INITIAL = 0
BROWNIAN = 1


def stream_key(seed: int, index: int, purpose: int) -> int:
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return (int(seed) << 64) | (int(index) << 2) | int(purpose)


def particle_generator(seed: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, index, purpose)))


def standard_normals(seed, n_steps, d, purpose=BROWNIAN, keys=None, n_particles=None):
    """Array ``[n_steps][N][d]`` of N(0,1) draws, column i from stream ``keys[i]``."""
    if keys is None:
        keys = range(n_particles)
    keys = list(keys)
    out = np.empty((n_steps, len(keys), d))
    for col, key in enumerate(keys):
        out[:, col, :] = particle_generator(seed, key, purpose).standard_normal((n_steps, d))
    return out


def derive_seed(master_seed: int, *indices: int) -> int:
    """Splittable 64-bit seed for the run addressed by ``indices``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(i) for i in indices))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)
