"""Rate-estimation harness: strong and weak averaging errors over an
epsilon grid, weighted log-log fits, the time-step doubling guard and
Galerkin mode refinement.

Coupled and averaged runs share the W1 stream of every sample, so
``X^eps - Xbar`` carries only the averaging error (plus time-discretization
bias, which :func:`doubling_test` measures).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import subprocess
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .gaussian import averaged_chain_law, averaged_law, coupled_moments, linear_rates
from .integrator import SimConfig, simulate_averaged, simulate_coupled
from .model import ModelSpec

log = logging.getLogger(__name__)

STRONG_KINDS = ("strong-sup-outside", "strong-sup-inside")
METRIC_KINDS = STRONG_KINDS + ("weak",)
DEFAULT_EPSILONS = tuple(2.0 ** -j for j in range(4, 10))
MAX_RELATIVE_STDERR = 0.3
GUARD_LIMIT = 0.1
ROUNDING_FLOOR = 1e-12


@dataclass(frozen=True)
class ErrorMetricSpec:
    """``phi`` of the weak metric is ``cos(<v, .>)``; ``v`` defaults to ``e_1``."""

    kind: str = "strong-sup-outside"
    p: float = 2.0
    v: Optional[tuple] = None
    all_times: bool = False

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"metric kind must be one of {METRIC_KINDS}, got {self.kind!r}")
        if self.p < 1:
            raise ValueError("moment order p must be >= 1")

    def direction(self, m: int) -> np.ndarray:
        v = np.zeros(m)
        if self.v is None:
            v[0] = 1.0
        else:
            u = np.asarray(self.v, float)
            v[:min(m, u.size)] = u[:m]
        return v


@dataclass(frozen=True)
class ErrorEstimate:
    error: float
    stderr: float
    n_samples: int
    extra: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.stderr > MAX_RELATIVE_STDERR * abs(self.error)


@dataclass(frozen=True)
class RateFitResult:
    """Weighted fit of ``log2 error = slope log2 eps + intercept``.

    ``points`` are the admissible ``(eps, error, stderr)`` triples used in the
    fit; ``excluded`` lists the ones dropped for noise or a pre-asymptotic knee.
    """

    points: list
    slope: float
    intercept: float
    r_squared: float
    slope_ci_halfwidth: float
    excluded: list = field(default_factory=list)
    knee: bool = False

    def within(self, lo: float, hi: float, min_r2: float) -> bool:
        return lo <= self.slope <= hi and self.r_squared >= min_r2


# ------------------------------------------------------------------ fitting

def _wls(lx, ly, w):
    X = np.column_stack([lx, np.ones_like(lx)])
    W = w / np.max(w)
    XtW = X.T * W
    coef = np.linalg.solve(XtW @ X, XtW @ ly)
    res = ly - X @ coef
    ybar = np.sum(W * ly) / np.sum(W)
    ss_res = float(np.sum(W * res**2))
    ss_tot = float(np.sum(W * (ly - ybar) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = lx.size - 2
    if dof > 0 and ss_res > 0:
        cov = ss_res / dof * np.linalg.inv(XtW @ X)
        half = float(stats.t.ppf(0.975, dof) * math.sqrt(cov[0, 0]))
    else:
        half = 0.0
    return float(coef[0]), float(coef[1]), r2, half


def fit_rate(points: Sequence, detect_knee: bool = True) -> RateFitResult:
    """Weighted least squares of ``log2 error`` on ``log2 eps``.

    Weights are ``1 / var(log2 error)`` from the delta method; points with
    ``stderr > 0.3 error`` are excluded.  With six or more points the two
    largest epsilons are dropped when doing so moves the slope by more than
    the full fit's confidence half-width and improves the fit (a
    pre-asymptotic knee).
    """
    pts = [(float(e), float(r), float(s)) for e, r, s in points]
    keep = [p for p in pts if p[1] > 0 and p[2] <= MAX_RELATIVE_STDERR * p[1]]
    excluded = [p for p in pts if p not in keep]
    if len(keep) < 4:
        raise ValueError(f"need at least 4 admissible points, got {len(keep)}")
    keep.sort(key=lambda p: -p[0])

    def run(sel):
        e = np.array([p[0] for p in sel])
        r = np.array([p[1] for p in sel])
        s = np.array([p[2] for p in sel])
        rel = np.where(s > 0, s / r, 0.0)
        floor = max(float(np.min(rel[rel > 0])) if np.any(rel > 0) else 1.0, 1e-12)
        w = 1.0 / np.maximum(rel, floor) ** 2
        return _wls(np.log2(e), np.log2(r), w)

    slope, icpt, r2, half = run(keep)
    knee = False
    if detect_knee and len(keep) >= 6:
        s2, i2, r22, h2 = run(keep[2:])
        if abs(s2 - slope) > max(half, 1e-12) and r22 >= r2:
            knee = True
            excluded = excluded + keep[:2]
            keep = keep[2:]
            slope, icpt, r2, half = s2, i2, r22, h2
    return RateFitResult(keep, slope, icpt, r2, half, excluded, knee)


# ------------------------------------------------------------ error metrics

def _batched(stat, values, n_batches=10):
    """Standard error of ``stat`` by splitting samples into contiguous batches."""
    n = values.shape[-1]
    nb = min(n_batches, n)
    if nb < 2:
        return 0.0
    parts = np.array_split(np.arange(n), nb)
    b = np.array([stat(values[..., idx]) for idx in parts])
    return float(np.std(b, ddof=1) / math.sqrt(nb))


def _strong_record(cfg: SimConfig) -> int:
    if cfg.record_every is not None:
        return cfg.record_every
    return cfg.stride


def averaged_reference(model, cfg, x0, refine=(0, 0), samples=None):
    """Averaged ensemble for ``cfg`` (independent of epsilon)."""
    return simulate_averaged(x0, cfg, model, samples=samples, refine=refine)


def _strong_from(Xe, Xb, p):
    D = np.sum((Xe - Xb) ** 2, axis=-1) ** (p / 2)     # (n_times, samples)
    outside = lambda d: float(np.max(np.mean(d, axis=-1)) ** (1 / p))
    inside = lambda d: float(np.mean(np.max(d, axis=0)) ** (1 / p))
    return D, outside, inside


def strong_errors(model: ModelSpec, cfg: SimConfig, epsilon: float, x0, y0, p: float = 2.0,
                  averaged=None, refine=(0, 0), samples=None) -> dict:
    """Both strong metrics from one coupled ensemble: ``strong-sup-outside``
    (max over grid times of the p-th moment) and ``strong-sup-inside``
    (moment of the max over grid times), each as a 1/p-th power."""
    c = replace(cfg, epsilon=epsilon)
    if averaged is None:
        averaged = averaged_reference(model, c, x0, refine, samples)
    coupled = simulate_coupled(x0, y0, c, model, refine=refine, samples=samples)
    D, outside, inside = _strong_from(coupled.X, averaged.X, p)
    n = D.shape[1]
    return {
        "strong-sup-outside": ErrorEstimate(outside(D), _batched(outside, D), n),
        "strong-sup-inside": ErrorEstimate(inside(D), _batched(inside, D), n),
    }


def strong_error(model, cfg, epsilon, x0, y0, metric: str = "strong-sup-outside", p: float = 2.0,
                 **kw) -> ErrorEstimate:
    """``sup_t (E|X^eps_t - Xbar_t|^p)^{1/p}`` over the recorded grid."""
    if metric not in STRONG_KINDS:
        raise ValueError(f"not a strong metric: {metric!r}")
    return strong_errors(model, cfg, epsilon, x0, y0, p, **kw)[metric]


def strong_sup_error(model, cfg, epsilon, x0, y0, p: float = 2.0, **kw) -> ErrorEstimate:
    """``(E sup_t |X^eps_t - Xbar_t|^p)^{1/p}`` over the recorded grid."""
    if not model.profile.satisfies_A4:
        warnings.warn(f"model {model.name!r} does not satisfy the bounded-diffusion hypothesis "
                      "of the sup-inside estimate; running anyway", RuntimeWarning)
    return strong_errors(model, cfg, epsilon, x0, y0, p, **kw)["strong-sup-inside"]


def _has_gaussian_oracle(model):
    try:
        linear_rates(model)
    except ValueError:
        return False
    return True


def weak_error(model: ModelSpec, cfg: SimConfig, epsilon: float, x0, y0,
               metric: ErrorMetricSpec = ErrorMetricSpec("weak"), averaged=None, refine=(0, 0),
               samples=None) -> ErrorEstimate:
    """Weak error for ``phi = cos<v, .>``.

    ``error`` is the Gaussian-oracle metric ``|E phi(X^eps_T) - E phi(Xbar_T)|``
    when the model is linear (the reference is the exact law of the simulated
    averaged chain), otherwise the coupled-difference estimate
    ``|E[phi(X^eps_T) - phi(Xbar_T)]|`` over paths sharing W1.  Both are
    reported in ``extra``.  ``metric.all_times`` takes the max over the grid.
    """
    if not model.affine or not np.all(model.coefficients.G1(np.zeros(model.m)) ==
                                      model.coefficients.G1(np.ones(model.m))):
        warnings.warn("weak order needs additive slow noise; running anyway", RuntimeWarning)
    c = replace(cfg, epsilon=epsilon, record_every=None if metric.all_times else cfg.n_steps)
    if averaged is None:
        averaged = averaged_reference(model, c, x0, refine, samples)
    coupled = simulate_coupled(x0, y0, c, model, refine=refine, samples=samples)
    v = metric.direction(model.m)
    fe = np.cos(coupled.X @ v)          # (n_times, samples)
    fb = np.cos(averaged.X @ v)
    n = fe.shape[1]
    diff = fe - fb
    times_idx = range(fe.shape[0]) if metric.all_times else [fe.shape[0] - 1]

    def pick(vals, ses):
        i = int(np.argmax(vals))
        return float(vals[i]), float(ses[i])

    cd = np.abs(diff.mean(axis=1))
    cd_se = diff.std(axis=1, ddof=1) / math.sqrt(n)
    extra = {}
    extra["coupled_diff"], extra["coupled_stderr"] = pick(cd[list(times_idx)], cd_se[list(times_idx)])
    if _has_gaussian_oracle(model):
        steps = np.rint(coupled.times / c.dt).astype(int)
        dt_ref = c.dt / 2 ** refine[0] if refine[0] else c.dt
        ref_steps = steps * (2 ** refine[0]) if refine[0] else steps
        exact = np.array([_chain_cos(model, x0, v, dt_ref, s, c.scheme) for s in ref_steps])
        cont = np.array([_cont_cos(model, x0, v, t) for t in coupled.times])
        oe = np.abs(fe.mean(axis=1) - exact)
        oe_se = fe.std(axis=1, ddof=1) / math.sqrt(n)
        extra["oracle_error"], extra["oracle_stderr"] = pick(oe[list(times_idx)], oe_se[list(times_idx)])
        extra["oracle_continuous"] = float(np.max(np.abs(fe.mean(axis=1) - cont)[list(times_idx)]))
        return ErrorEstimate(extra["oracle_error"], extra["oracle_stderr"], n, extra)
    return ErrorEstimate(extra["coupled_diff"], extra["coupled_stderr"], n, extra)


def _chain_cos(model, x0, v, dt, n_steps, scheme="exp-euler"):
    mean, var = averaged_chain_law(model, x0, dt, int(n_steps), scheme)
    return float(np.exp(-0.5 * np.sum(v**2 * var)) * np.cos(v @ mean))


def _cont_cos(model, x0, v, t):
    mean, var = averaged_law(model, x0, t)
    return float(np.exp(-0.5 * np.sum(v**2 * var)) * np.cos(v @ mean))


def measure(model, cfg, epsilon, x0, y0, metric: ErrorMetricSpec, **kw) -> ErrorEstimate:
    if metric.kind == "weak":
        return weak_error(model, cfg, epsilon, x0, y0, metric, **kw)
    return strong_errors(model, cfg, epsilon, x0, y0, metric.p, **kw)[metric.kind]


# ------------------------------------------------------------------- guards

@dataclass(frozen=True)
class DoublingResult:
    relative_bias: float
    error_dt: float
    error_half: float
    samples: int

    @property
    def ok(self) -> bool:
        return self.relative_bias <= GUARD_LIMIT


def doubling_test(model: ModelSpec, cfg: SimConfig, epsilon: float, x0, y0,
                  metric: ErrorMetricSpec = ErrorMetricSpec(), samples: Optional[int] = None) -> DoublingResult:
    """Relative change of the error metric when dt is halved and the micro
    substeps doubled: ``|err(dt) - err(dt/2)| / err(dt/2)``.

    Both runs see the same Brownian paths: the coarse run composes each
    increment from the fine draws the refined run uses.  ``samples`` caps
    the ensemble (the first sample indices are used).  Errors below
    ``ROUNDING_FLOOR * (1 + |x0| + |y0|)`` are treated as zero.
    """
    n = cfg.samples if samples is None else min(samples, cfg.samples)
    c = replace(cfg, samples=n)
    c = replace(c, record_every=c.stride)   # both runs record the same times
    fine = c.refined()
    # dt halves and the micro step quarters; the coarse run sums that many fine draws
    lev1 = int(round(math.log2(c.dt / fine.dt)))
    lev2 = int(round(math.log2(c.micro_step / fine.micro_step)))
    coarse = measure(model, c, epsilon, x0, y0, metric, refine=(lev1, lev2))
    half = measure(model, fine, epsilon, x0, y0, metric)
    # errors at the rounding level of the state count as zero (the 0/0 case)
    norms = [float(np.linalg.norm(getattr(u, "coeffs", u))) for u in (x0, y0)]
    floor = ROUNDING_FLOOR * (1.0 + sum(norms))
    if half.error <= floor:
        rel = 0.0 if coarse.error <= floor else math.inf
    else:
        rel = abs(coarse.error - half.error) / abs(half.error)
    return DoublingResult(rel, coarse.error, half.error, n)


# ---------------------------------------------------------------- galerkin

@dataclass(frozen=True)
class GalerkinRow:
    m: int
    distance: float
    stderr: float
    tail_bound: Optional[float]


def galerkin_refinement(model: ModelSpec, cfg: SimConfig, m_grid: Sequence[int] = (8, 16, 32),
                        M: int = 64, x0_fn=None, y0_fn=None) -> list[GalerkinRow]:
    """``E sup_t |X^{m} - X^{M}|^2`` against the M-mode reference, common noise.

    Mode k draws from the same stream lane for every mode count, so the runs
    are noise-matched.  For linear models ``tail_bound`` is twice
    ``sup_t sum_{k>m} E (X^M_k)^2`` from the exact law.
    """
    x0_fn = x0_fn or (lambda m: np.arange(1, m + 1, dtype=float) ** -1.2)
    y0_fn = y0_fn or (lambda m: np.zeros(m))
    ms = sorted(set(int(m) for m in m_grid) | {M})
    ref_model = model.with_modes(M)
    ref = simulate_coupled(x0_fn(M), y0_fn(M), replace(cfg, m=M), ref_model).X
    exact = None
    if _has_gaussian_oracle(ref_model):
        mean, cov = coupled_moments(ref_model, x0_fn(M), y0_fn(M), cfg.epsilon, replace(cfg, m=M).times)
        exact = mean[..., 0] ** 2 + cov[..., 0, 0]            # (n_times, M)
    rows = []
    for m in ms:
        mm = model.with_modes(m)
        X = simulate_coupled(x0_fn(m), y0_fn(m), replace(cfg, m=m), mm).X
        pad = np.zeros_like(ref)
        pad[..., :m] = X
        d = np.max(np.sum((pad - ref) ** 2, axis=-1), axis=0)    # per sample sup over time
        tail = None if exact is None else 2.0 * float(np.max(np.sum(exact[:, m:], axis=1)))
        rows.append(GalerkinRow(m, float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size)), tail))
    return rows


# ----------------------------------------------------------- rate runners

RATE_TARGETS = {
    "rate-strong": ("strong-sup-outside", 0.40, 0.60, 0.98),
    "rate-strong-sup": ("strong-sup-inside", 0.40, 0.60, 0.98),
    "rate-weak": ("weak", 0.80, 1.20, 0.95),
}


@dataclass
class RateReport:
    command: str
    rows: list
    fit: Optional[RateFitResult]
    guard: Optional[DoublingResult]
    band: tuple
    checks: dict = field(default_factory=dict)
    fit_error: Optional[str] = None

    @property
    def passed(self) -> bool:
        if self.fit is None or self.guard is None or not self.guard.ok:
            return False
        lo, hi, r2 = self.band
        return self.fit.within(lo, hi, r2) and all(self.checks.values())


def _cfg_for(cfg: SimConfig, eps: float) -> SimConfig:
    c = replace(cfg, epsilon=eps)
    if c.scheme == "exp-euler":
        need = math.ceil(c.dt / (0.5 * eps) - 1e-12)
        c = replace(c, micro_substeps=max(c.micro_substeps, need))
    return c


def run_rate(command: str, model: ModelSpec, cfg: SimConfig, x0, y0, epsilons=DEFAULT_EPSILONS,
             p: float = 2.0, v=None, all_times: bool = False, guard_samples: Optional[int] = 5000) -> RateReport:
    """Run one rate experiment over ``epsilons``.

    The averaged ensemble does not depend on epsilon and is computed once.
    The doubling guard runs at the smallest epsilon; a failed guard blocks
    acceptance of the fit.
    """
    if command not in RATE_TARGETS:
        raise ValueError(f"unknown rate command {command!r}")
    kind, lo, hi, r2 = RATE_TARGETS[command]
    metric = ErrorMetricSpec(kind, p, None if v is None else tuple(v), all_times)
    if model.closed_form_fbar is None:
        raise ValueError("rate experiments need a closed-form averaged drift")
    if kind == "strong-sup-inside" and not model.profile.satisfies_A4:
        warnings.warn(f"model {model.name!r} does not satisfy the bounded-diffusion hypothesis", RuntimeWarning)
    eps_sorted = sorted(epsilons, reverse=True)
    base = _cfg_for(cfg, eps_sorted[0])
    if kind == "weak" and not all_times:
        base = replace(base, record_every=base.n_steps)
    averaged = averaged_reference(model, base, x0)
    rows = []
    checks = {}
    for eps in eps_sorted:
        c = _cfg_for(base, eps)
        if kind == "weak":
            est = weak_error(model, c, eps, x0, y0, metric, averaged=averaged)
            extra = dict(est.extra)
        else:
            both = strong_errors(model, c, eps, x0, y0, p, averaged=averaged)
            est = both[kind]
            extra = {"strong_outside": both["strong-sup-outside"].error,
                     "strong_outside_stderr": both["strong-sup-outside"].stderr}
            if kind == "strong-sup-inside":
                checks.setdefault("sup_inside_dominates", True)
                if est.error < both["strong-sup-outside"].error:
                    checks["sup_inside_dominates"] = False
        rows.append({"epsilon": eps, "error": est.error, "stderr": est.stderr, "n_samples": est.n_samples,
                     "dt": c.dt, "m": c.m, "seed": c.master_seed, **extra})
        log.info("eps=%.6g error=%.6g stderr=%.3g", eps, est.error, est.stderr)
    fit = None
    fit_error = None
    try:
        fit = fit_rate([(r["epsilon"], r["error"], r["stderr"]) for r in rows])
    except ValueError as exc:
        fit_error = str(exc)
    eps_min = eps_sorted[-1]
    guard = doubling_test(model, _cfg_for(base, eps_min), eps_min, x0, y0, metric, samples=guard_samples)
    return RateReport(command, rows, fit, guard, (lo, hi, r2), checks, fit_error)


# ---------------------------------------------------------------- artifacts

def version_string() -> str:
    """``git describe``-style identifier, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


CSV_COLUMNS = ["epsilon", "error", "stderr", "n_samples", "dt", "m", "seed"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list, config: dict, columns: Optional[list] = None) -> None:
    """Rows as CSV behind a ``# config:`` comment holding the resolved config."""
    cols = list(columns or CSV_COLUMNS)
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    Path(path).write_text(buf.getvalue())


def report_summary(report: RateReport, config: dict) -> dict:
    fit = report.fit
    out = {
        "command": report.command,
        "passed": report.passed,
        "band": {"slope_min": report.band[0], "slope_max": report.band[1], "r_squared_min": report.band[2]},
        "slope": None if fit is None else fit.slope,
        "intercept": None if fit is None else fit.intercept,
        "slope_ci_halfwidth": None if fit is None else fit.slope_ci_halfwidth,
        "r_squared": None if fit is None else fit.r_squared,
        "knee_dropped": None if fit is None else fit.knee,
        "excluded_points": [] if fit is None else [list(p) for p in fit.excluded],
        "fit_error": report.fit_error,
        "doubling_guard": None if report.guard is None else asdict(report.guard),
        "checks": report.checks,
        "points": report.rows,
        "config": config,
        "version": version_string(),
    }
    return out


def write_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")
