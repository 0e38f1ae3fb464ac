import json
import math
from dataclasses import replace

import numpy as np
import pytest

from slowfast.experiments import (CSV_COLUMNS, ErrorMetricSpec, fit_rate, doubling_test, galerkin_refinement,
                                  measure, report_summary, run_rate, strong_errors, strong_sup_error, weak_error,
                                  write_csv, write_json)
from slowfast.gaussian import strong_error_exact
from slowfast.integrator import SimConfig
from slowfast.model import builtin_model

EPS = [2.0**-j for j in range(4, 10)]


def test_fit_recovers_half_slope():
    pts = [(e, 3 * e**0.5, 1e-3 * 3 * e**0.5) for e in EPS]
    fit = fit_rate(pts)
    assert fit.slope == pytest.approx(0.5, abs=1e-10)
    assert fit.intercept == pytest.approx(math.log2(3), abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0) and not fit.knee


def test_fit_recovers_linear_with_constant():
    fit = fit_rate([(e, 3 * e, 0.01 * 3 * e) for e in EPS])
    assert fit.slope == pytest.approx(1.0, abs=1e-10)
    assert fit.intercept == pytest.approx(math.log2(3), abs=1e-10)


def test_fit_interval_coverage():
    rng = np.random.default_rng(0)
    hits = 0
    trials = 200
    for _ in range(trials):
        pts = []
        for e in EPS:
            err = e**0.5 * (1 + 0.05 * rng.standard_normal())
            pts.append((e, err, 0.05 * e**0.5))
        fit = fit_rate(pts, detect_knee=False)
        hits += abs(fit.slope - 0.5) <= fit.slope_ci_halfwidth
    assert hits / trials >= 0.9


def test_fit_excludes_noisy_points_and_needs_four():
    pts = [(e, e**0.5, 0.01 * e**0.5) for e in EPS]
    pts[2] = (EPS[2], EPS[2] ** 0.5, 0.5 * EPS[2] ** 0.5)
    fit = fit_rate(pts)
    assert len(fit.excluded) == 1 and fit.excluded[0][0] == EPS[2]
    with pytest.raises(ValueError, match="4"):
        fit_rate(pts[:3])
    with pytest.raises(ValueError):
        fit_rate([(e, e, 0.9 * e) for e in EPS])


def test_fit_drops_a_pre_asymptotic_knee():
    # the two largest epsilons sit on a steeper pre-asymptotic branch
    pts = [(e, e**0.5 if e < 0.02 else 8 * e, 1e-3 * e**0.5) for e in EPS]
    fit = fit_rate(pts)
    assert fit.knee and len(fit.points) == 4
    assert fit.slope == pytest.approx(0.5, abs=1e-8)
    assert not fit_rate(pts, detect_knee=False).knee


def test_within_band():
    fit = fit_rate([(e, e**0.5, 1e-3) for e in EPS])
    assert fit.within(0.4, 0.6, 0.98) and not fit.within(0.8, 1.2, 0.95)


def small_cfg(samples=200, T=0.1, dt=1e-3, **kw):
    return SimConfig(epsilon=1.0, m=16, dt=dt, T=T, samples=samples, master_seed=11, **kw)


def test_no_coupling_gives_zero_strong_error(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    errs = strong_errors(m, small_cfg(), 2**-6, x16, x16)
    for est in errs.values():
        assert est.error <= 1e-10


def test_no_coupling_gives_zero_weak_error(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    est = weak_error(m, small_cfg(samples=500), 2**-6, x16, x16)
    assert est.extra["coupled_diff"] <= 1e-12
    assert est.error <= 3 * est.stderr


def test_sup_inside_dominates_outside(lin16, x16):
    errs = strong_errors(lin16, small_cfg(), 2**-5, x16, x16)
    assert errs["strong-sup-inside"].error >= errs["strong-sup-outside"].error
    with pytest.warns(RuntimeWarning):
        strong_sup_error(lin16, small_cfg(samples=20), 2**-5, x16, x16)


def test_strong_error_against_exact_law(lin16, x16):
    cfg = small_cfg(samples=2000, T=0.2, dt=5e-4, record_every=20)
    est = strong_errors(lin16, cfg, 2**-5, x16, np.zeros(16))["strong-sup-outside"]
    times = np.arange(0, 0.2 + 1e-12, 0.01)
    exact = strong_error_exact(lin16, x16, np.zeros(16), 2**-5, times)
    # X is frozen over each macro step, a bias of order dt / eps relative
    assert abs(est.error - exact) <= 3 * est.stderr + 0.03 * exact


def test_weak_oracle_value(lin16, x16):
    est = weak_error(lin16, small_cfg(samples=4000), 2**-4, x16, x16)
    assert est.error == est.extra["oracle_error"]
    assert {"coupled_diff", "coupled_stderr", "oracle_stderr", "oracle_continuous"} <= set(est.extra)
    assert est.stderr > 0 and est.n_samples == 4000


def test_measure_dispatch(lin16, x16):
    cfg = small_cfg(samples=50)
    a = measure(lin16, cfg, 2**-5, x16, x16, ErrorMetricSpec("strong-sup-outside"))
    b = strong_errors(lin16, cfg, 2**-5, x16, x16)["strong-sup-outside"]
    assert a.error == b.error
    with pytest.raises(ValueError):
        ErrorMetricSpec("bogus")


def test_doubling_zero_when_no_coupling(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    res = doubling_test(m, small_cfg(samples=50), 2**-6, x16, x16)
    assert res.relative_bias == 0.0 and res.ok


def test_doubling_zero_for_zero_coefficients(x16):
    m = builtin_model("linear-ou", 16, {"f1": 0.0, "B1": 0.0, "b2": 0.0, "q": 0.0, "a": 0.0, "c": 0.0})
    res = doubling_test(m, small_cfg(samples=20), 2**-6, x16, x16)
    assert res.relative_bias == 0.0 and res.ok


@pytest.mark.parametrize("kind", ["strong-sup-outside", "weak"])
def test_doubling_negligible_for_exact_linear_scheme(lin16, x16, kind):
    # the linear model is stepped exactly, so halving dt only regroups the same Brownian path
    cfg = small_cfg(samples=500, T=0.1, dt=2.5e-4)
    v = (1.0,) if kind == "weak" else None
    res = doubling_test(lin16, cfg, 2**-9, x16, 10 * x16, ErrorMetricSpec(kind, 2.0, v))
    assert res.samples == 500 and res.error_half > 0
    assert res.relative_bias <= 1e-6


def test_doubling_shrinks_with_the_exp_euler_micro_step():
    m = builtin_model("bounded-a4", 8)
    x0 = np.arange(1, 9, dtype=float) ** -1.2
    eps, dt = 2**-6, 2**-7
    coarse = SimConfig(epsilon=eps, m=8, dt=dt, T=32 * dt, scheme="exp-euler", micro_substeps=1, samples=200,
                       master_seed=4)
    a = doubling_test(m, coarse, eps, x0, 10 * x0)          # delta / eps = 0.5
    b = doubling_test(m, replace(coarse, micro_substeps=2), eps, x0, 10 * x0)   # delta / eps = 0.25
    assert b.relative_bias < a.relative_bias


def test_galerkin_refinement(lin16):
    cfg = SimConfig(epsilon=2**-4, m=16, dt=1e-3, T=0.1, samples=200, master_seed=3, record_every=10)
    rows = galerkin_refinement(lin16, cfg, m_grid=(4, 8, 16), M=32)
    d = [r.distance for r in rows]
    assert [r.m for r in rows] == [4, 8, 16, 32]
    assert d[-1] == 0.0
    assert d[0] > d[1] > d[2] > 0
    for r in rows[:-1]:
        assert r.distance <= r.tail_bound + 3 * r.stderr


def test_csv_and_json_writers(tmp_path):
    rows = [{"epsilon": 0.5, "error": 0.1, "stderr": 0.01, "n_samples": 10, "dt": 1e-3, "m": 16, "seed": 1,
             "extra_col": 2.0}]
    write_csv(tmp_path / "r.csv", rows, {"seed": 1})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert json.loads(lines[0].removeprefix("# config: ")) == {"seed": 1}
    assert lines[1].split(",") == CSV_COLUMNS + ["extra_col"]
    assert lines[2].split(",")[0] == "0.5"
    write_json(tmp_path / "s.json", {"a": np.float64(1.5), "b": np.arange(2)})
    assert json.loads((tmp_path / "s.json").read_text()) == {"a": 1.5, "b": [0, 1]}


def test_run_rate_fails_without_coupling(x16):
    m = builtin_model("linear-ou", 16, {"B1": 0.0})
    rep = run_rate("rate-strong", m, small_cfg(samples=20, T=0.05), x16, x16, epsilons=EPS, guard_samples=20)
    assert rep.fit is None and "4" in rep.fit_error
    assert not rep.passed
    summary = report_summary(rep, {"k": 1})
    assert summary["passed"] is False and len(summary["points"]) == 6


def test_run_rate_rejects_unknown_command(lin16, x16):
    with pytest.raises(ValueError):
        run_rate("rate-bogus", lin16, small_cfg(), x16, x16)
