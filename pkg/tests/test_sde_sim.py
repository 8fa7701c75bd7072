import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffest import kernels as kn
from diffest.config import InitialSpec, KernelSpec, SystemConfig
from diffest.errors import ConfigError, DomainError, DomainEscapeError, ShapeError
from diffest.sde_sim import (
    MEANFIELD, MeanField, brownian_modulus_check, coupled_sup_distance, pairwise_drift,
    read_run, sample_initial, simulate, write_csv, write_run,
)


def cfg(**kw):
    args = dict(d=2, N=32, K=8, T=0.2, dt=0.05, nu=0.1, delta=0.3, seed=5, substeps=4)
    args.update(kw)
    return SystemConfig(**args)


class ConstantProvider:
    """Uniform force field valid on [0, t_end]."""

    def __init__(self, value, t_end=10.0, t_start=0.0):
        self.value = np.asarray(value, dtype=float)
        self.t_start, self.t_end = t_start, t_end

    def force_at(self, points, t):
        return np.broadcast_to(self.value, points.shape).copy()


class OutOfDomain(ConstantProvider):
    def force_at(self, points, t):
        bad = np.flatnonzero(np.abs(points).max(axis=1) > 0.56)
        if bad.size:
            raise DomainEscapeError("left the grid", index=int(bad[0]))
        return super().force_at(points, t)


# ---------------------------------------------------------------- initial data

def test_gaussian_initial_mean():
    x = sample_initial(cfg(N=10_000, K=1, initial=InitialSpec("gaussian", 1.0)))
    assert np.all(np.abs(x.mean(axis=0)) <= 4 / math.sqrt(10_000))
    assert np.allclose(x.var(axis=0), 1.0, rtol=0.05)


@pytest.mark.parametrize("d", [2, 3])
def test_ball_initial_support(d):
    x = sample_initial(cfg(d=d, N=5000, initial=InitialSpec("ball", 1.0)))
    r = np.linalg.norm(x, axis=1)
    assert r.max() <= 1.0
    # uniform in the ball: P(|x| <= 1/2) = 2^-d
    assert abs(np.mean(r <= 0.5) - 2.0**-d) < 0.03


def test_initial_determinism():
    c = cfg(N=100)
    np.testing.assert_array_equal(sample_initial(c), sample_initial(c))
    assert not np.array_equal(sample_initial(c), sample_initial(c.replace(seed=6)))


def test_unknown_initial_tag():
    c = cfg()
    object.__setattr__(c.initial, "kind", "cauchy")
    with pytest.raises(ConfigError):
        sample_initial(c)


# ---------------------------------------------------------------- pairwise drift

def test_two_body_drift():
    k = kn.make_regularized(2, 2, 0.3)
    s = 2.0 * k.cutoff
    out = pairwise_drift(k, np.array([[0.0, 0.0], [s, 0.0]]))
    expect = 1 / (2 * math.pi * s)
    np.testing.assert_allclose(out, [[-expect, 0.0], [expect, 0.0]], rtol=1e-12)


def test_coincident_particles_zero_drift():
    k = kn.make_regularized(2, 64, 0.3)
    assert np.all(pairwise_drift(k, np.ones((64, 2))) == 0.0)


def naive_drift(kernel, x):
    n = len(x)
    out = np.zeros_like(x)
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i] += kernel.force(x[i] - x[j])
    return out / (n - 1)


@pytest.mark.parametrize("kernel", [
    kn.make_regularized(2, 5, 0.3), kn.make_regularized(2, 5, 0.3, sign=kn.ATTRACTIVE),
    kn.make_regularized(3, 5, 0.3), kn.GaussianKernel(2, -1.0, 1.0), kn.NewtonianKernel(2),
])
def test_drift_matches_naive_loop(kernel):
    x = np.random.default_rng(0).normal(size=(5, kernel.d)) * 0.4
    ref = naive_drift(kernel, x)
    np.testing.assert_allclose(pairwise_drift(kernel, x), ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(pairwise_drift(kernel, x, compensated=True), ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.integers(0, 2**32 - 1), st.sampled_from([2, 3]))
def test_momentum_conservation(n, seed, d):
    k = kn.make_regularized(d, 1000, 0.3)
    x = np.random.default_rng(seed).normal(size=(n, d)) * 0.1
    drift = pairwise_drift(k, x)
    assert np.abs(drift.sum(axis=0)).max() <= 1e-10


def test_drift_compiled_is_deterministic():
    k = kn.make_regularized(2, 2000, 0.3)
    x = np.random.default_rng(1).normal(size=(2000, 2))
    np.testing.assert_array_equal(pairwise_drift(k, x), pairwise_drift(k, x))


def test_drift_errors():
    with pytest.raises(ShapeError):
        pairwise_drift(kn.make_regularized(2, 10, 0.3), np.zeros((1, 2)))
    with pytest.raises(DomainError):
        pairwise_drift(kn.NewtonianKernel(2), np.zeros((3, 2)))


# ---------------------------------------------------------------- dynamics

def test_no_noise_no_force_is_static():
    ens = simulate(cfg(nu=0.0, kernel=KernelSpec("zero")))
    assert np.all(ens.positions == ens.positions[0])


def test_increment_variance():
    c = cfg(N=1000, T=1.0, dt=0.01, substeps=2, nu=0.5, kernel=KernelSpec("zero"))
    ens = simulate(c)
    obs = ens.observed_positions
    inc = np.diff(obs, axis=0)
    assert inc[..., 0].size >= 1e5
    for k in range(2):
        assert inc[..., k].var() == pytest.approx(2 * c.nu * c.dt, rel=0.05)


def test_replay_bitwise():
    ens = simulate(cfg(kernel=KernelSpec("regularized", sign=kn.ATTRACTIVE)))
    np.testing.assert_array_equal(ens.replay(), ens.positions)


def test_zero_kernel_coupling_identical():
    c = cfg(kernel=KernelSpec("zero"))
    X = simulate(c)
    Y = simulate(c, MeanField(ConstantProvider([0.0, 0.0])))
    assert Y.label == MEANFIELD
    np.testing.assert_array_equal(X.positions, Y.positions)
    assert coupled_sup_distance(X, Y) == 0.0


def test_coupled_increments_identical():
    c = cfg()
    X = simulate(c)
    Y = simulate(c, MeanField(ConstantProvider([0.3, -0.1])))
    np.testing.assert_array_equal(X.brownian_increments, Y.brownian_increments)
    assert coupled_sup_distance(X, X) == 0.0
    assert coupled_sup_distance(X, Y) > 0.0


def test_meanfield_constant_drift():
    c = cfg(nu=0.0, kernel=KernelSpec("zero"))
    Y = simulate(c, MeanField(ConstantProvider([1.0, 2.0])))
    np.testing.assert_allclose(Y.positions[-1] - Y.positions[0], np.tile([c.T, 2 * c.T], (c.N, 1)),
                               rtol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(12))))
def test_exchangeability(perm):
    c = cfg(N=12, K=4)
    base = simulate(c)
    permuted = simulate(c, keys=np.array(perm))
    np.testing.assert_allclose(permuted.positions, base.positions[:, perm], rtol=0, atol=1e-12)


def test_sup_distance_shape_errors():
    X = simulate(cfg())
    with pytest.raises(ShapeError):
        coupled_sup_distance(X, simulate(cfg(N=16, K=4)))
    with pytest.raises(ShapeError):
        coupled_sup_distance(X, simulate(cfg(seed=6)))
    with pytest.raises(ShapeError):
        coupled_sup_distance(X, simulate(cfg(), keys=np.arange(32)[::-1]))


def test_attractive_sup_distance_nonincreasing(shared_context):
    spec = KernelSpec("regularized", sign=kn.ATTRACTIVE)
    medians = [float(np.median(shared_context.coupling(spec, n)["sup"])) for n in (64, 256, 1024)]
    assert medians[0] >= medians[1] >= medians[2], medians


def test_provider_must_cover_horizon():
    with pytest.raises(ConfigError):
        simulate(cfg(), MeanField(ConstantProvider([0.0, 0.0], t_end=0.1)))
    with pytest.raises(ConfigError):
        simulate(cfg(), "sideways")


def test_escape_reports_time_and_index():
    c = cfg(nu=0.0, kernel=KernelSpec("zero"), initial=InitialSpec("ball", 0.01), N=4, K=1)
    with pytest.raises(DomainEscapeError) as info:
        simulate(c, MeanField(OutOfDomain([10.0, 0.0])))
    # |x0| <= 0.01 and each substep moves 10 h = 0.125: first beyond 0.56 at substep 5
    assert info.value.time == pytest.approx(5 * c.h)
    assert info.value.index in range(4)


# ---------------------------------------------------------------- Brownian modulus

def test_modulus_trivial_thresholds():
    ens = simulate(cfg())
    assert brownian_modulus_check(ens, threshold=0.0) == 1.0
    assert brownian_modulus_check(ens, threshold=np.inf) == 0.0
    with pytest.raises(ConfigError):
        brownian_modulus_check(ens, window=0.0123)


def test_modulus_three_sigma_tail():
    c = SystemConfig(d=1, N=1000, K=1, T=1.0, dt=0.01, nu=1.0, substeps=20, kernel=KernelSpec("zero"))
    ens = simulate(c)
    assert ens.positions.shape[1] * c.M >= 1e5
    assert brownian_modulus_check(ens, threshold=3 * math.sqrt(c.dt)) <= 0.01


def test_modulus_below_maximal_inequality():
    """P(sup |B| >= b) <= C1 (sqrt(dt)/b) exp(-C2 b^2/dt), C1 = 4 d^1.5/sqrt(2 pi), C2 = 1/(2d)."""
    c = SystemConfig(d=2, N=500, K=1, T=1.0, dt=0.02, nu=1.0, substeps=20, kernel=KernelSpec("zero"))
    ens = simulate(c)
    C1, C2 = 4 * 2**1.5 / math.sqrt(2 * math.pi), 1 / 4
    for mult in (1.5, 2.0, 3.0, 4.0):
        b = mult * math.sqrt(c.dt)
        bound = C1 * (math.sqrt(c.dt) / b) * math.exp(-C2 * b * b / c.dt)
        assert brownian_modulus_check(ens, threshold=b) <= bound


# ---------------------------------------------------------------- IO

def test_run_file_round_trip(tmp_path):
    ens = simulate(cfg(d=3, delta=0.2))
    write_run(ens, tmp_path / "x.run")
    back = read_run(tmp_path / "x.run")
    assert back.config == ens.config and back.label == ens.label
    for name in ("positions", "brownian_increments", "drifts", "keys"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ens, name))
    (tmp_path / "bad.run").write_bytes(b"nonsense")
    with pytest.raises(ShapeError):
        read_run(tmp_path / "bad.run")


def test_csv_export(tmp_path):
    ens = simulate(cfg(N=3, K=1, T=0.1))
    write_csv(ens, tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "substep,time,particle,x0,x1"
    assert len(lines) == 1 + ens.positions.shape[0] * 3
    last = lines[-1].split(",")
    assert float(last[3]) == ens.positions[-1, 2, 0]
