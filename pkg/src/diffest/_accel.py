"""Compiled hot loops (numba).

All supported kernels are radial-odd, ``F(x) = w(|x|^2) x``, so the pair loop
only needs the scalar weight ``w``.  The reduction over pairs is split into a
fixed number of row blocks with private buffers merged in block order, which
keeps results independent of the thread count.
"""
import numpy as np
from numba import njit, prange

from .kernels import KIND_GAUSSIAN, KIND_NEWTON, KIND_REGULARIZED, KIND_ZERO

N_BLOCKS = 8


@njit(cache=True, inline="always")
def _inv_rd(r2, d):
    # 1/|x|^d; generic pow is the bottleneck of the pair loop
    if d == 2:
        return 1.0 / r2
    if d == 3:
        return 1.0 / (r2 * np.sqrt(r2))
    return r2 ** (-0.5 * d)


# inlined: an out-of-line call costs more than the pair interaction itself
@njit(cache=True, inline="always")
def _weight(r2, kind, params, table, d):
    if kind == KIND_ZERO:
        return 0.0
    if kind == KIND_NEWTON:
        return params[0] * _inv_rd(r2, d)
    if kind == KIND_REGULARIZED:
        # params: sign*c_star, N^delta, N^-delta, N^{d delta}, n_intervals
        cut = params[2]
        if r2 >= cut * cut:
            return params[0] * _inv_rd(r2, d)
        u = np.sqrt(r2) * params[1]
        k = int(u * params[4])
        nk = table.shape[1]
        if k > nk - 1:
            k = nk - 1
        t = u - table[4, k]
        g = ((table[0, k] * t + table[1, k]) * t + table[2, k]) * t + table[3, k]
        mag = params[3] * g
        # enclosed mass never exceeds one
        if mag >= _inv_rd(r2, d):
            return params[0] * _inv_rd(r2, d)
        return params[0] * mag
    if kind == KIND_GAUSSIAN:
        return params[0] * np.exp(-r2 * params[1])
    return np.nan


def block_bounds(n, n_blocks=N_BLOCKS):
    """Row boundaries splitting the upper-triangular pair set into equal chunks."""
    n_blocks = max(1, min(n_blocks, n - 1))
    rows = np.arange(n, dtype=np.float64)
    work = np.cumsum(n - 1 - rows)
    total = work[-1]
    bounds = [0]
    for b in range(1, n_blocks):
        bounds.append(int(np.searchsorted(work, total * b / n_blocks)) + 1)
    bounds.append(n)
    return np.unique(np.array(bounds, dtype=np.int64))


@njit(cache=True, inline="always")
def _kahan_add(buf, comp, b, i, k, v):
    y = v - comp[b, i, k]
    s = buf[b, i, k] + y
    comp[b, i, k] = (s - buf[b, i, k]) - y
    buf[b, i, k] = s


@njit(cache=True, parallel=True)
def pairwise_drift_blocked(pos, kind, params, table, bounds, compensated, out):
    """out_i = 1/(N-1) sum_{j != i} F(x_i - x_j).  Returns 1 on a singular pair."""
    n, d = pos.shape
    nb = bounds.size - 1
    buf = np.zeros((nb, n, d))
    comp = np.zeros((nb, n, d))
    status = np.zeros(nb, dtype=np.int64)
    for b in prange(nb):
        dx = np.empty(d)
        acc = np.empty(d)
        for i in range(bounds[b], bounds[b + 1]):
            acc[:] = 0.0
            for j in range(i + 1, n):
                r2 = 0.0
                for k in range(d):
                    dx[k] = pos[i, k] - pos[j, k]
                    r2 += dx[k] * dx[k]
                if r2 == 0.0:
                    if kind == KIND_NEWTON:
                        status[b] = 1
                    continue
                w = _weight(r2, kind, params, table, d)
                if compensated:
                    for k in range(d):
                        _kahan_add(buf, comp, b, i, k, w * dx[k])
                        _kahan_add(buf, comp, b, j, k, -w * dx[k])
                else:
                    for k in range(d):
                        acc[k] += w * dx[k]
                        buf[b, j, k] -= w * dx[k]
            if not compensated:
                for k in range(d):
                    buf[b, i, k] += acc[k]
    inv = 1.0 / (n - 1)
    for i in range(n):
        for k in range(d):
            total = 0.0
            for b in range(nb):
                total += buf[b, i, k]
            out[i, k] = total * inv
    return status.max()


@njit(cache=True)
def targeted_drift(targets, sources, kind, params, table, skip_self):
    """Empirical drift at arbitrary targets: 1/(S-1) sum_j F(t_i - s_j).

    With ``skip_self`` the target with index i excludes source i (targets are
    then a prefix of the sources).
    """
    m, d = targets.shape
    n = sources.shape[0]
    out = np.zeros((m, d))
    for i in range(m):
        for j in range(n):
            if skip_self and i == j:
                continue
            r2 = 0.0
            for k in range(d):
                r2 += (targets[i, k] - sources[j, k]) ** 2
            if r2 == 0.0:
                continue
            w = _weight(r2, kind, params, table, d)
            for k in range(d):
                out[i, k] += w * (targets[i, k] - sources[j, k])
    return out / (n - 1)


@njit(cache=True)
def envelope_sum(pos, d, plateau, inner_radius):
    """(L^N(X))_i = 1/(N-1) sum_{j != i} L^N(X_i - X_j)."""
    n = pos.shape[0]
    out = np.zeros(n)
    far_c = 6.0**d
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(pos.shape[1]):
                r2 += (pos[i, k] - pos[j, k]) ** 2
            r = np.sqrt(r2)
            v = plateau if r < inner_radius else far_c / r**d
            out[i] += v
            out[j] += v
    return out / (n - 1)


@njit(cache=True)
def envelope_convolution(rho, h, d, plateau, inner_radius, power, tgt_idx):
    """Direct-summation (L^N)^power * rho at the listed grid nodes."""
    n = rho.shape[0]
    src = []
    for a in range(n):
        for b in range(n):
            if rho[a, b] != 0.0:
                src.append((a, b))
    far_c = 6.0**d
    out = np.zeros(tgt_idx.shape[0])
    cell = h * h
    for t in range(tgt_idx.shape[0]):
        ta = tgt_idx[t, 0]
        tb = tgt_idx[t, 1]
        acc = 0.0
        for s in src:
            dxa = (ta - s[0]) * h
            dxb = (tb - s[1]) * h
            r = np.sqrt(dxa * dxa + dxb * dxb)
            v = plateau if r < inner_radius else far_c / r**d
            acc += v**power * rho[s[0], s[1]]
        out[t] = acc * cell
    return out
