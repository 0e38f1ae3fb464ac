"""Poisson-equation corrector of the frozen generator.

``Phi(x, y) = int_0^inf [E F1(x, Y_t^{x,y}) - Fbar1(x)] dt`` solves
``-L2(x) Phi = F1 - Fbar1``.  It is estimated by truncating the time integral
and averaging frozen paths; along the frozen flow it satisfies
``d/dt E Phi(x, Y_t) = -(E F1(x, Y_t) - Fbar1(x))``, which
:func:`generator_identity_check` tests by finite differences.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .averaging import ErgodicBudget, fbar_ergodic, sample_invariant_array
from .integrator import SimConfig, simulate_frozen
from .model import ModelSpec
from .rng import NoiseStream
from .spectral import SpectralField


@dataclass(frozen=True)
class CorrectorEstimate:
    value: SpectralField
    truncation_T: float
    replicas: int
    stderr: float
    tail_bound: float
    flagged: bool = False


def _coeffs(model, u):
    return u.coeffs if isinstance(u, SpectralField) else np.asarray(u, float)


def _fbar(model, x, stream):
    if model.closed_form_fbar is not None:
        return model.closed_form_fbar(x), 0.0
    v, se = fbar_ergodic(model, x, ErgodicBudget(), stream)
    return v.coeffs, se


def _lipschitz_y(model):
    if model.affine is not None:
        return float(np.max(np.abs(model.affine.B1)))
    from .model import estimate_lipschitz
    rng = np.random.default_rng(0)
    return 1.05 * estimate_lipschitz(model.coefficients.F1, lambda r: r.standard_normal(model.m), 64, rng)


def mixing_prefactor(model: ModelSpec, x, y, stream: Optional[NoiseStream] = None) -> float:
    """Prefactor C in ``|E F1(x, Y_t^y) - Fbar1(x)| <= C e^{-theta t / 4}``.

    From the synchronous coupling bound ``|Y^y_t - Y^z_t| <= e^{-theta t/2}|y - z|``
    averaged over invariant z: ``C = Lip_y(F1) (E|y - z|^2)^{1/2}``.
    """
    x = _coeffs(model, x)
    y = _coeffs(model, y)
    inv = model.closed_form_invariant
    if inv is not None:
        spread = np.sum((y - inv.mean(x)) ** 2) + np.sum(inv.variances)
    else:
        z = sample_invariant_array(model, x, 256, stream or NoiseStream(0))
        spread = float(np.mean(np.sum((y - z) ** 2, axis=1)))
    return _lipschitz_y(model) * math.sqrt(spread)


def default_truncation(model: ModelSpec, c_mix: float, tol: float) -> float:
    """Smallest T with ``(4/theta) C e^{-theta T/4} <= tol``, at least ``8/theta``."""
    th = model.theta
    return max(8.0 / th, (4.0 / th) * math.log(max(4.0 * c_mix / (th * tol), 1.0)))


def phi_estimate(model: ModelSpec, x, y, truncation_T: float, replicas: int, stream: NoiseStream, *,
                 dt: float = 1e-2, tol: Optional[float] = None, c_mix: Optional[float] = None) -> CorrectorEstimate:
    """Monte Carlo estimate of ``Phi(x, y)`` truncated at ``truncation_T``.

    For models affine in y the time integral of each path is exact (the
    integrator carries the running integral of Y); otherwise the trapezoid
    rule is used on the step grid.  ``stderr`` is the Euclidean norm of the
    per-mode standard errors; the result is flagged when it exceeds ``tol``.
    """
    th = model.theta
    if th <= 0:
        raise ValueError("the corrector needs theta > 0")
    if truncation_T < 8.0 / th - 1e-12:
        raise ValueError(f"truncation_T must be at least 8/theta = {8.0 / th:.4g}")
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    x = _coeffs(model, x)
    y = _coeffs(model, y)
    n = int(math.ceil(truncation_T / dt - 1e-9))
    T = n * dt
    fb, fb_se = _fbar(model, x, stream)
    scheme = "exact-ou-fast" if model.affine is not None else "exp-euler"
    cfg = SimConfig(epsilon=1.0, m=model.m, dt=dt, T=T, scheme=scheme, samples=replicas,
                    master_seed=stream.master_seed)
    w2 = NoiseStream(stream.master_seed, tag="W2", replica=stream.replica)
    if model.affine is not None:
        ens = simulate_frozen(x, y, cfg, model, w2, record_steps=[n])
        s = model.affine
        per = T * (s.f1(x) - fb)[None, :] + s.B1 * ens.integral[0]
    else:
        ens = simulate_frozen(x, y, cfg, model, w2, record_steps=np.arange(n + 1))
        vals = model.coefficients.F1(np.broadcast_to(x, ens.Y.shape), ens.Y) - fb
        per = integrate.trapezoid(vals, dx=dt, axis=0)
    value = per[0] + np.mean(per - per[0], axis=0)
    se = float(np.sqrt(np.sum(np.var(per - per[0], axis=0, ddof=1) / replicas)) + T * fb_se)
    if c_mix is None:
        c_mix = mixing_prefactor(model, x, y, stream)
    tail = (4.0 / th) * c_mix * math.exp(-th * T / 4.0)
    flagged = tol is not None and se > tol
    if flagged:
        warnings.warn(f"corrector stderr {se:.3g} exceeds tolerance {tol:.3g}; increase replicas", RuntimeWarning)
    return CorrectorEstimate(SpectralField(model.basis, value), T, replicas, se, tail, flagged)


@dataclass(frozen=True)
class GeneratorCheck:
    """Residual of ``d/dt E Phi(x, Y_t) + (E F1(x, Y_t) - Fbar1(x))`` per grid time.

    ``budget`` combines three Monte Carlo standard errors with a Richardson
    estimate of the central-difference error; ``ok`` holds when every
    residual is within its budget.
    """

    t_grid: np.ndarray
    residuals: np.ndarray
    budget: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))

    @property
    def ok(self) -> bool:
        return bool(np.all(self.residuals <= self.budget))


def generator_identity_check(model: ModelSpec, x, y, t_grid: Sequence[float], *, phi: Optional[Callable] = None,
                             replicas: int = 100_000, fd_step: float = 1e-3,
                             stream: Optional[NoiseStream] = None, control_variate: bool = True,
                             chunk: int = 20_000) -> GeneratorCheck:
    """Check the semigroup form of the Poisson equation along frozen paths.

    ``phi(x, Y)`` defaults to the model's closed-form corrector.  With
    ``control_variate`` the paths from y are paired, through common noise,
    with paths started from invariant draws; the paired terms have mean zero
    by invariance and cancel most of the martingale noise.
    """
    stream = stream or NoiseStream(0)
    phi = phi or model.closed_form_phi()
    if phi is None:
        raise ValueError(f"model {model.name!r} has no closed-form corrector; pass phi")
    x = _coeffs(model, x)
    y = _coeffs(model, y)
    h = fd_step
    t_grid = np.atleast_1d(np.asarray(t_grid, float))
    centre = np.rint(t_grid / h).astype(np.int64)
    if np.any(centre < 2) or np.any(np.abs(centre * h - t_grid) > 1e-9):
        raise ValueError("grid times must be multiples of fd_step and at least 2 fd_step")
    if h * model.theta > 0.1:
        warnings.warn("finite-difference step is coarse relative to the mixing time", RuntimeWarning)
    offs = np.array([-2, -1, 0, 1, 2])
    rec = np.unique((centre[:, None] + offs[None, :]).ravel())
    pos = {int(s): i for i, s in enumerate(rec)}
    fb, _ = _fbar(model, x, stream)
    scheme = "exact-ou-fast" if model.affine is not None else "exp-euler"
    w2 = NoiseStream(stream.master_seed, tag="W2", replica=stream.replica)
    draws_all = sample_invariant_array(model, x, replicas, stream) if control_variate else None

    n_t = t_grid.size
    s1 = np.zeros((n_t, model.m))
    s2 = np.zeros((n_t, model.m))
    sr = np.zeros((n_t, model.m))
    sl = np.zeros((n_t, model.m))
    sg = np.zeros((n_t, model.m))
    for start in range(0, replicas, chunk):
        n = min(chunk, replicas - start)
        cfg = SimConfig(epsilon=1.0, m=model.m, dt=h, T=int(rec[-1]) * h, scheme=scheme, samples=n,
                        master_seed=stream.master_seed)
        paths = [simulate_frozen(x, y, cfg, model, w2, record_steps=rec, first_replica=start).Y]
        if control_variate:
            paths.append(simulate_frozen(x, y, cfg, model, w2, record_steps=rec, first_replica=start,
                                         y_init=draws_all[start:start + n]).Y)
        terms = []
        for Y in paths:
            X = np.broadcast_to(x, Y.shape[1:])
            P = np.stack([phi(X, Y[i]) for i in range(Y.shape[0])])
            out = []
            for c in centre:
                d1 = (P[pos[c + 1]] - P[pos[c - 1]]) / (2 * h)
                d2 = (P[pos[c + 2]] - P[pos[c - 2]]) / (4 * h)
                g = model.coefficients.F1(X, Y[pos[c]]) - fb
                out.append((d1, d2, g))
            terms.append(out)
        for i in range(n_t):
            d1, d2, g = terms[0][i]
            if control_variate:
                e1, e2, eg = terms[1][i]
                d1, d2, g = d1 - e1, d2 - e2, g - eg
            r = d1 + g
            s1[i] += r.sum(axis=0)
            s2[i] += (r**2).sum(axis=0)
            sr[i] += (d2 - d1).sum(axis=0)
            sl[i] += d1.sum(axis=0)
            sg[i] += g.sum(axis=0)
    mean = s1 / replicas
    var = np.maximum(s2 / replicas - mean**2, 0.0) * replicas / (replicas - 1)
    se = np.sqrt(var / replicas)
    fd_err = np.abs(sr / replicas) / 3.0
    residuals = np.max(np.abs(mean), axis=1)
    budget = 3.0 * np.max(se + fd_err, axis=1)
    return GeneratorCheck(t_grid, residuals, budget, sl / replicas, -sg / replicas)


@dataclass(frozen=True)
class BoundProbe:
    """Sup of ``|Phi(x, y)| / (1 + |x| + |y|)`` over a probe grid, per mode count.

    ``alpha_ratios`` holds the same sup with ``|Phi|`` replaced by the
    ``H^alpha`` norm; it is reported only, with no threshold attached.
    """

    ratios: dict
    relative_change: float
    alpha: float = 1.0
    alpha_ratios: dict = field(default_factory=dict)

    @property
    def stable(self) -> bool:
        return self.relative_change < 0.1


def probe_grid(n: int, M: int, seed: int = 0, amplitude: float = 1.0, decay: float = 1.2):
    """Random (x, y) pairs with coefficients ``amplitude k^{-decay} N(0,1)`` on M modes."""
    rng = np.random.default_rng(seed)
    k = np.arange(1, M + 1, dtype=float)
    env = amplitude * k**-decay
    return [(env * rng.standard_normal(M), env * rng.standard_normal(M)) for _ in range(n)]


def phi_bound_probe(model: ModelSpec, grid, m_values: Sequence[int] = (16, 32), *,
                    replicas: int = 256, stream: Optional[NoiseStream] = None, alpha: float = 1.0) -> BoundProbe:
    """Linear-growth ratio of the corrector at each mode count in ``m_values``.

    Grid points are truncated (or zero-padded) to each m.  The closed form is
    used when the model has one, otherwise :func:`phi_estimate`.
    """
    if not grid:
        raise ValueError("probe grid is empty")
    stream = stream or NoiseStream(0)
    ratios = {}
    alpha_ratios = {}
    for m in m_values:
        mm = model.with_modes(m) if model.m != m else model
        phi = mm.closed_form_phi()
        weight = mm.basis.eigenvalues ** (alpha / 2.0)
        best = best_a = 0.0
        for gx, gy in grid:
            x = _fit(gx, m)
            y = _fit(gy, m)
            if phi is not None:
                v = phi(x, y)
            else:
                v = phi_estimate(mm, x, y, 8.0 / mm.theta, replicas, stream).value.coeffs
            scale = 1.0 + np.linalg.norm(x) + np.linalg.norm(y)
            best = max(best, float(np.linalg.norm(v)) / scale)
            best_a = max(best_a, float(np.linalg.norm(weight * v)) / scale)
        ratios[int(m)] = best
        alpha_ratios[int(m)] = best_a
    vals = list(ratios.values())
    ref = max(abs(vals[-1]), 1e-300)
    change = 0.0 if max(vals) == 0 else (max(vals) - min(vals)) / ref
    return BoundProbe(ratios, change, alpha, alpha_ratios)


def phi_derivative_probe(model: ModelSpec, x, y, direction, wrt: str = "y", *, phi: Optional[Callable] = None,
                         replicas: int = 256, stream: Optional[NoiseStream] = None) -> np.ndarray:
    """Central difference of Phi along ``direction`` in x or y, spacing ``1e-3 (1 + |x|)``.

    A probe only: with the Monte Carlo corrector the two evaluations share
    their noise, so the difference is not swamped by sampling error.
    """
    if wrt not in ("x", "y"):
        raise ValueError("wrt must be 'x' or 'y'")
    x = _coeffs(model, x)
    y = _coeffs(model, y)
    d = np.asarray(direction, float)
    h = 1e-3 * (1.0 + float(np.linalg.norm(x)))
    phi = phi or model.closed_form_phi()
    if phi is None:
        stream = stream or NoiseStream(0)
        T = 8.0 / model.theta
        phi = lambda a, b: phi_estimate(model, a, b, T, replicas, stream).value.coeffs
    if wrt == "x":
        return (np.asarray(phi(x + h * d, y)) - np.asarray(phi(x - h * d, y))) / (2 * h)
    return (np.asarray(phi(x, y + h * d)) - np.asarray(phi(x, y - h * d))) / (2 * h)


def _fit(u, m):
    u = np.asarray(u.coeffs if isinstance(u, SpectralField) else u, float)
    out = np.zeros(m)
    out[:min(m, u.size)] = u[:m]
    return out


__all__ = ["CorrectorEstimate", "GeneratorCheck", "BoundProbe", "phi_estimate", "generator_identity_check",
           "phi_bound_probe", "phi_derivative_probe", "probe_grid", "mixing_prefactor", "default_truncation"]
