import dataclasses
import math

import numpy as np
import pytest

from slowfast.averaging import sample_invariant_array
from slowfast.model import builtin_model
from slowfast.poisson import (default_truncation, generator_identity_check, mixing_prefactor, phi_bound_probe,
                              phi_estimate, probe_grid)
from slowfast.rng import NoiseStream


def test_no_y_dependence_gives_zero_corrector(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    est = phi_estimate(m, x16, np.ones(16), 8.0 / m.theta, 16, NoiseStream(1))
    assert np.all(est.value.coeffs == 0.0) and est.stderr == 0.0
    assert np.all(m.closed_form_phi()(x16, np.ones(16)) == 0.0)


def test_estimate_matches_closed_form(lin16, x16):
    y = x16 * 3.0
    T = default_truncation(lin16, mixing_prefactor(lin16, x16, y), 1e-4)
    est = phi_estimate(lin16, x16, y, T, 4000, NoiseStream(2))
    exact = lin16.closed_form_phi()(x16, y)
    assert est.tail_bound <= 1e-4 * (1 + 1e-9)
    assert np.linalg.norm(est.value.coeffs - exact) <= 3 * est.stderr + est.tail_bound
    assert not est.flagged


def test_corrector_vanishes_at_the_invariant_mean(lin16, x16):
    mu = lin16.closed_form_invariant.mean(x16)
    assert np.all(lin16.closed_form_phi()(x16, mu) == 0.0)
    est = phi_estimate(lin16, x16, mu, 1.0, 2000, NoiseStream(3))
    assert np.linalg.norm(est.value.coeffs) <= 3 * est.stderr


def test_corrector_is_affine_in_y_under_common_noise(lin16, x16):
    y1, y2 = x16, -2 * x16
    T = 1.0
    a = phi_estimate(lin16, x16, y1, T, 50, NoiseStream(4)).value.coeffs
    b = phi_estimate(lin16, x16, y2, T, 50, NoiseStream(4)).value.coeffs
    rate = lin16.basis.eigenvalues + lin16.affine.c
    expect = lin16.affine.B1 * (y1 - y2) * -np.expm1(-rate * T) / rate
    np.testing.assert_allclose(a - b, expect, rtol=1e-9, atol=1e-14)


def test_corrector_is_centred_under_the_invariant_law(lin16, x16):
    draws = sample_invariant_array(lin16, x16, 50_000, NoiseStream(5))
    vals = lin16.closed_form_phi()(x16, draws)
    se = vals.std(0, ddof=1) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(vals.mean(0)) <= 3 * se)


def test_truncation_rules(lin16, x16):
    with pytest.raises(ValueError, match="truncation_T"):
        phi_estimate(lin16, x16, x16, 1.0 / lin16.theta, 10, NoiseStream(0))
    assert default_truncation(lin16, 1e-12, 1.0) == pytest.approx(8.0 / lin16.theta)
    T = default_truncation(lin16, 10.0, 1e-6)
    assert (4 / lin16.theta) * 10.0 * math.exp(-lin16.theta * T / 4) == pytest.approx(1e-6)


def test_flagged_when_error_exceeds_tolerance(lin16, x16):
    with pytest.warns(RuntimeWarning):
        est = phi_estimate(lin16, x16, x16, 1.0, 4, NoiseStream(6), tol=1e-12)
    assert est.flagged


def test_generic_path_matches_closed_form():
    m = builtin_model("linear-ou", 4)
    g = dataclasses.replace(m, closed_form_fbar=None, closed_form_invariant=None, affine=None)
    x = np.array([1.0, 0.5, 0.2, 0.1])
    y = np.array([0.3, -0.2, 0.1, 0.0])
    est = phi_estimate(g, x, y, 1.0, 400, NoiseStream(7), dt=2e-3)
    exact = m.closed_form_phi()(x, y)
    # exp-euler and trapezoid bias at dt = 2e-3 is about 1e-3 relative
    assert np.linalg.norm(est.value.coeffs - exact) <= 3 * est.stderr + 2e-3 * np.linalg.norm(exact)


def test_generator_identity(lin16, x16):
    chk = generator_identity_check(lin16, x16, 2 * x16, [0.01, 0.05, 0.1, 0.2], replicas=20_000,
                                   stream=NoiseStream(8))
    assert chk.ok
    # the identity itself: both sides agree and are nonzero early on
    assert np.max(np.abs(chk.lhs[0])) > 10 * chk.max_residual


def test_generator_identity_detects_a_wrong_corrector(lin16, x16):
    good = lin16.closed_form_phi()
    chk = generator_identity_check(lin16, x16, 2 * x16, [0.02, 0.05], phi=lambda x, y: 2 * good(x, y),
                                   replicas=5000, stream=NoiseStream(9))
    assert not chk.ok


def test_generator_identity_input_checks(lin16, x16):
    m = builtin_model("linear-ou", 4)
    g = dataclasses.replace(m, closed_form_fbar=None, closed_form_invariant=None, affine=None)
    with pytest.raises(ValueError, match="corrector"):
        generator_identity_check(g, np.ones(4), np.ones(4), [0.1], replicas=10)
    with pytest.raises(ValueError, match="multiples"):
        generator_identity_check(lin16, x16, x16, [0.0015], replicas=10)


def test_bound_probe_is_stable_in_m(lin16):
    probe = phi_bound_probe(lin16, probe_grid(64, 64, seed=1), m_values=(16, 32, 64))
    assert set(probe.ratios) == {16, 32, 64}
    assert probe.stable and all(r > 0 for r in probe.ratios.values())
    with pytest.raises(ValueError):
        phi_bound_probe(lin16, [])


def test_corrector_is_linear_in_the_drift(x16):
    y = 2 * x16
    base = builtin_model("linear-ou", 16)
    tripled = builtin_model("linear-ou", 16, {"B1": 3 * base.params.get("B1", 2.0)})
    a = phi_estimate(base, x16, y, 1.0, 64, NoiseStream(10))
    b = phi_estimate(tripled, x16, y, 1.0, 64, NoiseStream(10))
    np.testing.assert_allclose(b.value.coeffs, 3 * a.value.coeffs, rtol=1e-10, atol=1e-15)


def test_both_sides_decay_at_large_times(lin16, x16):
    chk = generator_identity_check(lin16, x16, 3 * x16, [0.01, 0.5], replicas=2000, stream=NoiseStream(11))
    early, late = np.abs(chk.rhs[0]).max(), np.abs(chk.rhs[1]).max()
    envelope = math.exp(-lin16.theta / 4 * 0.49)
    assert late <= envelope * early
    assert np.abs(chk.lhs[1]).max() <= envelope * np.abs(chk.lhs[0]).max()


def test_bound_probe_exact_ratio_and_zero_model(lin16):
    grid = probe_grid(20, 16, seed=3)
    probe = phi_bound_probe(lin16, grid, m_values=(16,))
    phi = lin16.closed_form_phi()
    exact = max(np.linalg.norm(phi(x, y)) / (1 + np.linalg.norm(x) + np.linalg.norm(y)) for x, y in grid)
    assert probe.ratios[16] == pytest.approx(exact, rel=1e-14)
    assert probe.alpha_ratios[16] >= probe.ratios[16] * math.sqrt(lin16.basis.lambda1) * (1 - 1e-12)
    zero = builtin_model("linear-ou", 16, {"B1": 0.0})
    assert phi_bound_probe(zero, grid, m_values=(16, 32)).ratios == {16: 0.0, 32: 0.0}


def test_derivative_probe(lin16, x16):
    from slowfast.poisson import phi_derivative_probe
    rate = lin16.basis.eigenvalues + lin16.affine.c
    e = np.eye(16)[2]
    dy = phi_derivative_probe(lin16, x16, x16, e, "y")
    np.testing.assert_allclose(dy, lin16.affine.B1 * e / rate, rtol=1e-8, atol=1e-14)
    dx = phi_derivative_probe(lin16, x16, x16, e, "x")
    mean = lin16.closed_form_invariant.mean
    np.testing.assert_allclose(dx, -lin16.affine.B1 * (mean(x16 + e) - mean(x16)) / rate, rtol=1e-6, atol=1e-12)
    m4 = builtin_model("linear-ou", 4)
    g = dataclasses.replace(m4, closed_form_fbar=None, closed_form_invariant=None, affine=None)
    est = phi_derivative_probe(g, np.ones(4), np.zeros(4), np.eye(4)[0], "y", replicas=64)
    rate4 = m4.basis.eigenvalues + m4.affine.c
    assert est[0] == pytest.approx(m4.affine.B1[0] / rate4[0], rel=0.05)
    with pytest.raises(ValueError):
        phi_derivative_probe(lin16, x16, x16, e, "z")
