import hashlib
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg

from slowfast.gaussian import coupled_moments
from slowfast.integrator import (ConfigError, SimConfig, SimulationError, SlowFastState, TrajectoryEnsemble,
                                 linear_noise_cov, simulate_averaged, simulate_coupled, simulate_frozen,
                                 step_coupled)
from slowfast.model import AssumptionProfile, CoefficientSet, ModelSpec, builtin_model
from slowfast.rng import NoiseStream
from slowfast.spectral import SpectralBasis, SpectralField

ZERO = {"f1": 0.0, "B1": 0.0, "b2": 0.0, "q": 0.0, "a": 0.0, "c": 0.0}


def frozen_cfg(m, dt=0.01, T=1.0, samples=1000, seed=0, scheme="exact-ou-fast"):
    return SimConfig(epsilon=1.0, m=m, dt=dt, T=T, scheme=scheme, samples=samples, master_seed=seed)


def nonaffine_model(m=4):
    basis = SpectralBasis.dirichlet(m)
    prof = AssumptionProfile.declare(basis.lambda1, 1.5, 0.0)
    coefs = CoefficientSet(
        F1=lambda x, y: np.sin(np.asarray(y)) + 0 * np.asarray(x),
        F2=lambda x, y: -np.asarray(y) - 0.5 * np.sin(np.asarray(y)) + np.tanh(np.asarray(x)),
        G1=lambda x: 0.05 * np.ones(np.shape(x)),
        G2=lambda x, y: 0.3 * (1.0 + 0.1 * np.cos(np.asarray(y))),
        profile=prof)
    return ModelSpec(basis, coefs, "custom")


@pytest.mark.parametrize("scheme", ["exact-ou-fast", "exp-euler"])
def test_zero_coefficients_one_step_is_pure_decay(scheme):
    m = builtin_model("linear-ou", 4, ZERO)
    eps = 0.25
    cfg = SimConfig(epsilon=eps, m=4, dt=0.01, T=0.01, scheme=scheme, micro_substeps=4)
    b = m.basis
    state = SlowFastState(SpectralField.unit(b, 1), SpectralField(b, [1.0, 0.5, 0.0, -1.0]))
    nxt = step_coupled(state, cfg, m, NoiseStream(0), NoiseStream(0, tag="W2"))
    lam = b.eigenvalues
    np.testing.assert_allclose(nxt.X.coeffs, [math.exp(-lam[0] * 0.01), 0, 0, 0], rtol=1e-13)
    np.testing.assert_allclose(nxt.Y.coeffs, np.exp(-lam * 0.01 / eps) * state.Y.coeffs, rtol=1e-12)
    assert nxt.t == pytest.approx(0.01)


def test_zero_coefficients_trajectory_is_semigroup():
    m = builtin_model("linear-ou", 6, ZERO)
    cfg = SimConfig(epsilon=0.1, m=6, dt=0.01, T=0.2, samples=1, record_every=1)
    x0 = np.arange(1, 7, dtype=float) ** -1.0
    ens = simulate_coupled(x0, np.zeros(6), cfg, m)
    expect = np.exp(-np.outer(ens.times, m.basis.eigenvalues)) * x0
    np.testing.assert_allclose(ens.X[:, 0, :], expect, rtol=1e-12, atol=1e-300)
    av = simulate_averaged(x0, cfg, m)
    np.testing.assert_allclose(av.X[:, 0, :], expect, rtol=1e-12, atol=1e-300)


def test_runs_are_bitwise_reproducible(lin16, x16):
    cfg = SimConfig(epsilon=2**-5, m=16, dt=1e-3, T=0.05, samples=64, master_seed=99, record_every=5)
    a = simulate_coupled(x16, x16, cfg, lin16, record_y=True)
    b = simulate_coupled(x16, x16, cfg, lin16, record_y=True)
    assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()
    # a subset of samples reproduces the same slots
    c = simulate_coupled(x16, x16, cfg, lin16, samples=[3, 10])
    assert c.X[:, 0].tobytes() == a.X[:, 3].tobytes() and c.X[:, 1].tobytes() == a.X[:, 10].tobytes()


def test_kernel_and_numpy_backends_agree(lin16, x16):
    cfg = SimConfig(epsilon=2**-3, m=16, dt=2e-3, T=0.04, scheme="exp-euler", micro_substeps=8, samples=16,
                    master_seed=5, record_every=4)
    a = simulate_coupled(x16, x16, cfg, lin16, record_y=True)
    b = simulate_coupled(x16, x16, cfg, lin16, record_y=True, backend="numpy")
    np.testing.assert_allclose(a.X, b.X, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a.Y, b.Y, rtol=1e-12, atol=1e-14)
    a = simulate_averaged(x16, cfg, lin16, refine=(2, 0))
    b = simulate_averaged(x16, cfg, lin16, refine=(2, 0), backend="numpy")
    np.testing.assert_allclose(a.X, b.X, rtol=1e-12, atol=1e-14)


def test_exact_ou_transition_law(lin16):
    m = builtin_model("linear-ou", 4)
    x = np.array([0.7, -0.3, 0.2, 0.1])
    y0 = np.array([1.0, -1.0, 0.5, 0.0])
    n_rep = 100_000
    ens = simulate_frozen(x, y0, frozen_cfg(4, dt=0.02, T=0.1, samples=n_rep), m, NoiseStream(3, tag="W2"),
                          record_steps=[5])
    Y = ens.Y[0]
    rate = m.basis.eigenvalues + m.affine.c
    mu = m.closed_form_invariant.mean(x)
    t = 0.1
    mean = mu + np.exp(-rate * t) * (y0 - mu)
    var = m.affine.g2**2 * (1 - np.exp(-2 * rate * t)) / (2 * rate)
    assert np.all(np.abs(Y.mean(0) - mean) <= 3 * np.sqrt(var / n_rep))
    assert np.all(np.abs(Y.var(0) - var) <= 3 * var * math.sqrt(2 / n_rep))


def test_time_change_of_the_fast_equation():
    # with b2 = 0 the fast variable ignores X: (eps, dt) must equal (1, dt / eps) under the same W2 draws
    m = builtin_model("linear-ou", 4, {"b2": 0.0})
    eps, dt = 0.05, 0.01
    y0 = np.array([1.0, 2.0, -1.0, 0.5])
    cfg = SimConfig(epsilon=eps, m=4, dt=dt, T=0.2, samples=8, master_seed=4, record_every=1)
    coupled = simulate_coupled(np.zeros(4), y0, cfg, m, record_y=True)
    frozen = simulate_frozen(np.zeros(4), y0, frozen_cfg(4, dt=dt / eps, T=0.2 / eps, samples=8, seed=4), m,
                             NoiseStream(4, tag="W2"))
    np.testing.assert_allclose(coupled.Y, frozen.Y, rtol=1e-10, atol=1e-13)


def test_frozen_long_run_mean(lin16, x16):
    ens = simulate_frozen(x16, np.zeros(16), frozen_cfg(16, dt=0.05, T=5.0, samples=4000, seed=8), lin16,
                          NoiseStream(8, tag="W2"), thin=100)
    Y = ens.Y[-1]
    mu = lin16.closed_form_invariant.mean(x16)
    se = Y.std(0, ddof=1) / math.sqrt(Y.shape[0])
    assert np.all(np.abs(Y.mean(0) - mu) <= 3 * se + 1e-15)


@pytest.mark.parametrize("scheme", ["exact-ou-fast", "exp-euler"])
def test_equilibrium_without_noise_is_constant(scheme):
    m = builtin_model("linear-ou", 8, {"q": 0.0})
    x = np.linspace(1, 0.1, 8)
    mu = m.closed_form_invariant.mean(x)
    ens = simulate_frozen(x, mu, frozen_cfg(8, dt=0.01, T=0.5, samples=2, scheme=scheme), m,
                          NoiseStream(0, tag="W2"))
    np.testing.assert_allclose(ens.Y, np.broadcast_to(mu, ens.Y.shape), rtol=1e-13)


def test_pathwise_contraction(lin16, x16):
    y1 = np.linspace(1, -1, 16)
    y2 = -y1 + 0.3
    cfg = frozen_cfg(16, dt=0.01, T=0.5, samples=20, seed=12)
    w = NoiseStream(12, tag="W2")
    a = simulate_frozen(x16, y1, cfg, lin16, w, thin=5).Y
    b = simulate_frozen(x16, y2, cfg, lin16, w, thin=5).Y
    t = np.arange(0, 51, 5) * 0.01
    rate1 = lin16.basis.lambda1 + lin16.affine.c
    d = np.linalg.norm(a - b, axis=-1)
    bound = np.exp(-rate1 * t)[:, None] * np.linalg.norm(y1 - y2)
    assert np.all(d <= bound * (1 + 1e-10))


def test_mean_square_contraction_rate(lin16, x16):
    y1 = np.zeros(16)
    y2 = np.eye(16)[0] * 2.0
    cfg = frozen_cfg(16, dt=0.01, T=0.3, samples=200, seed=13)
    w = NoiseStream(13, tag="W2")
    a = simulate_frozen(x16, y1, cfg, lin16, w, thin=3).Y
    b = simulate_frozen(x16, y2, cfg, lin16, w, thin=3).Y
    ms = np.mean(np.sum((a - b) ** 2, axis=-1), axis=1)
    t = np.arange(0, 31, 3) * 0.01
    slope = np.polyfit(t, np.log(ms), 1)[0]
    expected = -2 * (lin16.basis.lambda1 + lin16.affine.c)
    assert abs(slope / expected - 1) < 0.05


def test_coupled_second_moment_against_linear_oracle(lin16, x16):
    eps = 2**-4
    cfg = SimConfig(epsilon=eps, m=16, dt=1e-3, T=0.2, samples=4000, master_seed=21, record_every=20)
    ens = simulate_coupled(x16, 2 * x16, cfg, lin16)
    mean, cov = coupled_moments(lin16, x16, 2 * x16, eps, ens.times)
    exact = np.sum(mean[..., 0] ** 2 + cov[..., 0, 0], axis=1)
    sq = np.sum(ens.X**2, axis=-1)
    est = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / math.sqrt(sq.shape[1])
    assert np.all(np.abs(est - exact) <= 3 * se + 2e-3 * exact)


@pytest.mark.parametrize("eps", [2**-4, 2**-9])
def test_linear_model_is_stepped_exactly(eps):
    # without noise the exact transition must reproduce the closed-form mean at any dt
    m = builtin_model("linear-ou", 16, {"q": 0.0, "a": 0.0})
    x0 = np.arange(1, 17, dtype=float) ** -1.2
    cfg = SimConfig(epsilon=eps, m=16, dt=2.5e-4, T=0.5, samples=1, micro_substeps=3, record_every=100)
    ens = simulate_coupled(x0, 10 * x0, cfg, m, record_y=True)
    mean, _ = coupled_moments(m, x0, 10 * x0, eps, ens.times)
    np.testing.assert_allclose(ens.X[:, 0], mean[..., 0], rtol=1e-9, atol=1e-300)
    np.testing.assert_allclose(ens.Y[:, 0], mean[..., 1], rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(simulate_averaged(x0, cfg, m).X[:, 0], mean[..., 2], rtol=1e-11, atol=1e-300)


@given(st.floats(1.0, 3000.0), st.floats(-5.0, 5.0), st.floats(0.0, 5.0), st.floats(-7.0, -1.0),
       st.floats(-7.0, -3.0), st.booleans())
@settings(max_examples=40, deadline=None)
def test_linear_noise_covariance_matches_quadrature(lam, B1, b2, log_eps, log_h, slow):
    eps, h = 2.0**log_eps, 10.0**log_h
    A = np.array([[-lam, B1], [b2 / eps, -(lam + 1.0) / eps]])
    b = np.array([0.3, 0.0]) if slow else np.array([0.0, 0.5 / math.sqrt(eps)])
    q = linear_noise_cov(A, b, h)
    bb = np.outer(b, b)
    ref = integrate.quad_vec(lambda s: linalg.expm(A * s) @ bb @ linalg.expm(A * s).T, 0, h,
                             epsabs=0, epsrel=1e-12, limit=2000)[0]
    assert np.max(np.abs(q - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_averaged_terminal_law():
    m = builtin_model("linear-ou", 8, {"f1": 0.0, "a": 0.05})
    x0 = np.arange(1, 9, dtype=float) ** -1.2
    cfg = SimConfig(epsilon=1.0, m=8, dt=1e-3, T=0.3, samples=20_000, master_seed=2, record_every=300)
    X = simulate_averaged(x0, cfg, m).X[-1]
    from slowfast.gaussian import averaged_law
    mean, var = averaged_law(m, x0, 0.3)
    n = X.shape[0]
    assert np.all(np.abs(X.mean(0) - mean) <= 3 * np.sqrt(var / n))
    assert np.all(np.abs(X.var(0) - var) <= 3 * var * math.sqrt(2 / n))


def test_no_y_dependence_gives_identical_paths(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    cfg = SimConfig(epsilon=2**-6, m=16, dt=5e-4, T=0.1, samples=50, master_seed=1, record_every=10)
    a = simulate_coupled(x16, x16, cfg, m).X
    b = simulate_averaged(x16, cfg, m).X
    assert np.max(np.abs(a - b)) < 1e-12


def test_moment_bounds_uniform_in_epsilon(lin16, x16):
    for j in (2, 5, 8):
        eps = 2.0**-j
        cfg = SimConfig(epsilon=eps, m=16, dt=5e-4, T=0.1, samples=500, master_seed=j, record_every=20)
        ens = simulate_coupled(x16, x16, cfg, lin16, record_y=True)
        mean, cov = coupled_moments(lin16, x16, x16, eps, ens.times)
        ex = np.sum(mean[..., 0] ** 2 + cov[..., 0, 0], axis=1).max()
        ey = np.sum(mean[..., 1] ** 2 + cov[..., 1, 1], axis=1).max()
        assert np.sum(ens.X**2, axis=-1).mean(axis=1).max() <= 2 * ex
        assert np.sum(ens.Y**2, axis=-1).mean(axis=1).max() <= 2 * ey


def test_fast_component_holder_slope():
    m = builtin_model("linear-ou", 4)
    eps = 2**-4
    dt = eps * 1e-5
    cfg = SimConfig(epsilon=eps, m=4, dt=dt, T=1024 * dt, samples=400, master_seed=3, record_every=1)
    # start at the invariant mean so increments are noise driven
    y0 = m.closed_form_invariant.mean(np.ones(4))
    Y = simulate_coupled(np.ones(4), y0, cfg, m, record_y=True).Y
    lags = np.array([1, 2, 4, 8, 16, 32, 64])
    rms = [math.sqrt(np.mean(np.sum((Y[512 + l] - Y[512]) ** 2, axis=-1))) for l in lags]
    slope = np.polyfit(np.log(lags), np.log(rms), 1)[0]
    assert 0.4 <= slope <= 0.6


def test_restriped_noise_matches_fine_grid():
    m = builtin_model("linear-ou", 8, {"f1": 0.0, "B1": 0.0})
    x0 = np.ones(8)
    coarse = SimConfig(epsilon=1.0, m=8, dt=0.02, T=0.2, samples=4, master_seed=6, record_every=1)
    fine = coarse.refined()
    a = simulate_averaged(x0, coarse, m, refine=(1, 0)).X
    b = simulate_averaged(x0, fine, m).X
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_step_coupled_matches_ensemble(lin16, x16):
    cfg = SimConfig(epsilon=0.1, m=16, dt=0.01, T=0.03, samples=5, master_seed=7, record_every=1)
    ens = simulate_coupled(x16, x16, cfg, lin16, record_y=True)
    b = lin16.basis
    st = SlowFastState(SpectralField(b, x16), SpectralField(b, x16))
    for n in range(3):
        st = step_coupled(st, cfg, lin16, NoiseStream(7, 2), NoiseStream(7, 2, "W2"))
        assert st.X.coeffs.tobytes() == ens.X[n + 1, 2].tobytes()
        assert st.Y.coeffs.tobytes() == ens.Y[n + 1, 2].tobytes()


def test_config_validation(lin16):
    with pytest.raises(ConfigError, match="epsilon"):
        SimConfig(epsilon=0.0, m=4, dt=0.1, T=1.0)
    with pytest.raises(ConfigError, match="samples"):
        SimConfig(epsilon=1.0, m=4, dt=0.1, T=1.0, samples=0)
    with pytest.raises(ConfigError, match="dt"):
        SimConfig(epsilon=1.0, m=4, dt=-0.1, T=1.0)
    with pytest.raises(ConfigError, match="micro"):
        SimConfig(epsilon=0.01, m=4, dt=0.1, T=1.0, scheme="exp-euler", micro_substeps=10)
    SimConfig(epsilon=0.01, m=4, dt=0.1, T=1.0, scheme="exp-euler", micro_substeps=20)
    SimConfig(epsilon=0.01, m=4, dt=0.1, T=1.0, scheme="exact-ou-fast")
    SimConfig(epsilon=4.0, m=4, dt=0.1, T=1.0)
    with pytest.raises(ConfigError, match="scheme"):
        SimConfig(epsilon=1.0, m=4, dt=0.1, T=1.0).validate(nonaffine_model())
    with pytest.raises(ConfigError, match="m"):
        SimConfig(epsilon=1.0, m=4, dt=0.1, T=1.0).validate(lin16)


def test_nonaffine_model_uses_numpy_backend():
    m = nonaffine_model()
    cfg = SimConfig(epsilon=0.1, m=4, dt=0.01, T=0.1, scheme="exp-euler", micro_substeps=2, samples=8,
                    record_every=1)
    a = simulate_coupled(np.ones(4), np.zeros(4), cfg, m, record_y=True)
    b = simulate_coupled(np.ones(4), np.zeros(4), cfg, m, record_y=True)
    assert np.all(np.isfinite(a.X)) and a.X.tobytes() == b.X.tobytes()
    fz = simulate_frozen(np.ones(4), np.zeros(4), frozen_cfg(4, dt=0.01, T=0.1, samples=4, scheme="exp-euler"),
                         m, NoiseStream(0, tag="W2"))
    assert np.all(np.isfinite(fz.Y))


def test_blow_up_is_reported_with_sample_index():
    m = builtin_model("linear-ou", 4, {"f1": 1e6})
    cfg = SimConfig(epsilon=0.1, m=4, dt=0.01, T=1.0, samples=3)
    with pytest.raises(SimulationError) as info:
        simulate_coupled(np.ones(4), np.zeros(4), cfg, m)
    assert info.value.sample_index == 0 and info.value.step > 0


def test_binary_and_csv_dumps(tmp_path, lin16, x16):
    cfg = SimConfig(epsilon=0.1, m=16, dt=0.01, T=0.05, samples=3, master_seed=17, record_every=1)
    ens = simulate_coupled(x16, x16, cfg, lin16)
    path = tmp_path / "traj.bin"
    ens.to_binary(path)
    raw = path.read_bytes()
    assert np.frombuffer(raw[:32], "<u8").tolist() == [16, 6, 3, 17]
    back = TrajectoryEnsemble.from_binary(path)
    assert back.X.tobytes() == ens.X.tobytes() and np.array_equal(back.times, ens.times)
    ens.to_csv(tmp_path / "traj.csv", {"seed": 17})
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0].startswith("# config:") and lines[1].startswith("time,sample,u1")
    assert len(lines) == 2 + 6 * 3


def _digest(threads):
    code = ("import numpy as np, hashlib;"
            "from slowfast.model import builtin_model;"
            "from slowfast.integrator import SimConfig, simulate_coupled;"
            "m = builtin_model('linear-ou', 16); x = np.arange(1, 17.0) ** -1.2;"
            "cfg = SimConfig(epsilon=2**-6, m=16, dt=1e-3, T=0.05, samples=37, master_seed=3, record_every=5);"
            "e = simulate_coupled(x, x, cfg, m, record_y=True);"
            "print(hashlib.sha256(e.X.tobytes() + e.Y.tobytes()).hexdigest())")
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_bitwise_identical_across_thread_counts():
    assert _digest(1) == _digest(3)
