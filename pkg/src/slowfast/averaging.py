"""Averaged drift, invariant-measure sampling and mixing diagnostics for the
frozen fast equation ``dY = [A Y + F2(x, Y)] dt + G2(x, Y) dW2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from . import _kernels as K
from .integrator import SimConfig, simulate_frozen
from .model import ModelSpec
from .rng import INIT, NoiseStream, stream_keys
from .spectral import SpectralField

BURN_IN_TARGET = 1e-2


def default_burn_in(theta: float, target: float = BURN_IN_TARGET) -> float:
    """Time for the ``e^{-theta t / 4}`` mixing envelope to fall to ``target``."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    return (4.0 / theta) * math.log(1.0 / target)


@dataclass(frozen=True)
class ErgodicBudget:
    """``horizon`` is the final time of each frozen path; averaging runs over
    ``[burn_in, horizon]``.  ``burn_in=None`` selects the mixing-envelope default."""

    horizon: float = 20.0
    replicas: int = 64
    burn_in: Optional[float] = None
    dt: float = 1e-2

    def resolve(self, theta: float) -> "ErgodicBudget":
        b = default_burn_in(theta) if self.burn_in is None else float(self.burn_in)
        if self.replicas < 2:
            raise ValueError("ergodic estimates need at least 2 replicas")
        if b >= self.horizon:
            raise ValueError(f"budget too small: burn-in {b:.4g} is not below the horizon {self.horizon:.4g}")
        return ErgodicBudget(self.horizon, self.replicas, b, self.dt)


@dataclass(frozen=True)
class AveragedDrift:
    """Callable averaged drift; ``last_stderr`` holds the error of the most
    recent ergodic evaluation (0 in closed-form mode)."""

    mode: str
    evaluator: Callable
    error_budget: Optional[ErgodicBudget] = None
    last_stderr: list = field(default_factory=lambda: [0.0], compare=False)

    def __call__(self, x):
        return self.evaluator(x)

    @classmethod
    def closed_form(cls, model: ModelSpec) -> "AveragedDrift":
        if model.closed_form_fbar is None:
            raise ValueError(f"model {model.name!r} has no closed-form averaged drift")
        return cls("closed-form", model.closed_form_fbar)

    @classmethod
    def ergodic(cls, model: ModelSpec, budget: ErgodicBudget, stream: NoiseStream) -> "AveragedDrift":
        holder = [0.0]

        def ev(x):
            x = np.asarray(x, float)
            if x.ndim == 1:
                v, se = fbar_ergodic(model, x, budget, stream)
                holder[0] = se
                return v.coeffs
            out = np.empty_like(x)
            for i, row in enumerate(x):
                v, holder[0] = fbar_ergodic(model, row, budget, stream)
                out[i] = v.coeffs
            return out

        return cls("ergodic", ev, budget, holder)


def _field(model, u):
    return u if isinstance(u, SpectralField) else SpectralField(model.basis, np.asarray(u, float))


def fbar_closed_form(model: ModelSpec, x) -> SpectralField:
    """``Fbar1(x) = f1(x) + B1 mean(x)`` for models with a Gaussian invariant law."""
    if model.closed_form_fbar is None:
        raise ValueError(f"model {model.name!r} has no closed-form averaged drift")
    x = _field(model, x)
    return SpectralField(model.basis, model.closed_form_fbar(x.coeffs))


def _replica_mean(v):
    """Mean over axis 0, exact when all rows coincide."""
    return v[0] + np.mean(v - v[0], axis=0)


def fbar_ergodic(model: ModelSpec, x, budget: ErgodicBudget, stream: NoiseStream,
                 y0=None) -> tuple[SpectralField, float]:
    """Time average of ``F1(x, Y_s)`` over ``[burn_in, horizon]``, averaged over
    independent frozen paths.  The error is the Euclidean norm of the per-mode
    standard errors across replicas."""
    if model.theta <= 0:
        raise ValueError("ergodic averaging needs theta > 0")
    b = budget.resolve(model.theta)
    x = _field(model, x)
    y0 = np.zeros(model.m) if y0 is None else _field(model, y0).coeffs
    n_burn = int(round(b.burn_in / b.dt))
    n_end = int(round(b.horizon / b.dt))
    window = (n_end - n_burn) * b.dt
    scheme = "exact-ou-fast" if model.affine is not None else "exp-euler"
    cfg = SimConfig(epsilon=1.0, m=model.m, dt=b.dt, T=n_end * b.dt, scheme=scheme, samples=b.replicas,
                    master_seed=stream.master_seed)
    w2 = NoiseStream(stream.master_seed, tag="W2", replica=stream.replica)
    if model.affine is not None:
        ens = simulate_frozen(x, y0, cfg, model, w2, record_steps=[n_burn, n_end])
        s = model.affine
        # F1 = f1(x) + B1 y integrates exactly through the running integral of Y
        avg_y = (ens.integral[1] - ens.integral[0]) / window
        per = s.f1(x.coeffs)[None, :] + s.B1 * avg_y
    else:
        ens = simulate_frozen(x, y0, cfg, model, w2, record_steps=np.arange(n_burn, n_end + 1))
        vals = model.coefficients.F1(np.broadcast_to(x.coeffs, ens.Y.shape), ens.Y)
        per = integrate.trapezoid(vals, dx=b.dt, axis=0) / window
    mean = _replica_mean(per)
    # spread about the first row so identical replicas give exactly zero
    se = np.std(per - per[0], axis=0, ddof=1) / math.sqrt(b.replicas)
    return SpectralField(model.basis, mean), float(np.sqrt(np.sum(se**2)))


def _closed_draws(model, x, n, stream):
    inv = model.closed_form_invariant
    keys = stream_keys(stream.master_seed, np.arange(n), INIT, stream.replica)
    z = np.empty((n, 1, model.m, 2))
    K.fill_normals(keys, np.zeros(1, dtype=np.int64), model.m, z)
    return inv.mean(x)[None, :] + np.sqrt(inv.variances) * z[:, 0, :, 0]


def sample_invariant_array(model: ModelSpec, x, n: int, stream: NoiseStream,
                           burn_in: Optional[float] = None, dt: float = 1e-2) -> np.ndarray:
    """Array form of :func:`sample_invariant`, shape ``(n, m)``."""
    if n < 1:
        raise ValueError("n must be positive")
    if model.theta <= 0:
        raise ValueError("invariant sampling needs theta > 0")
    x = _field(model, x).coeffs
    if model.closed_form_invariant is not None:
        return _closed_draws(model, x, n, stream)
    burn = default_burn_in(model.theta) if burn_in is None else burn_in
    gap = max(1, int(math.ceil(4.0 / model.theta / dt)))
    n_paths = min(n, 64)
    per_path = -(-n // n_paths)
    n_burn = int(math.ceil(burn / dt))
    steps = n_burn + gap * np.arange(per_path)
    cfg = SimConfig(epsilon=1.0, m=model.m, dt=dt, T=int(steps[-1]) * dt, scheme="exp-euler",
                    samples=n_paths, master_seed=stream.master_seed)
    w2 = NoiseStream(stream.master_seed, tag="INIT", replica=stream.replica)
    ens = simulate_frozen(x, np.zeros(model.m), cfg, model, w2, record_steps=steps, backend="numpy")
    return ens.Y.transpose(1, 0, 2).reshape(-1, model.m)[:n]


def sample_invariant(model: ModelSpec, x, n: int, stream: NoiseStream, **kw) -> list[SpectralField]:
    """``n`` draws from the invariant law of the frozen equation at x.

    Exact Gaussian sampling when the model has a closed form, otherwise
    frozen paths thinned at spacing ``4 / theta`` after the default burn-in.
    """
    return [SpectralField(model.basis, row) for row in sample_invariant_array(model, x, n, stream, **kw)]


@dataclass(frozen=True)
class MixingFit:
    """Fitted decay ``|P_t phi(y) - mu(phi)| ~ C e^{rate t}``; ``rate`` < 0 means decay."""

    rate: float
    ci_halfwidth: float
    prefactor: float
    censored: bool
    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_fit: int

    def within_envelope(self, theta: float, slack: float = 1.0) -> bool:
        """Decay at least as fast as ``e^{-theta t / 4}`` up to ``slack`` CI widths."""
        return (not self.censored) and self.rate <= -theta / 4 + slack * self.ci_halfwidth


def mixing_rate(model: ModelSpec, x, probe=None, lags=None, *, y=None, replicas: int = 2000,
                dt: Optional[float] = None, stream: Optional[NoiseStream] = None) -> MixingFit:
    """Measure the exponential decay rate of ``P_t phi(y) - mu(phi)``.

    Paths from ``y`` are coupled synchronously (same W2 increments) with paths
    started from invariant draws, whose mean of ``phi`` is ``mu(phi)`` at every
    time.  The log of the mean difference is fitted against the lag by
    weighted least squares; lags where the signal is within three standard
    errors of zero are cut off, and fewer than three usable lags mark the
    result censored.  The default probe is ``<y, e_1>`` and the default start
    is one unit above the invariant mean along ``e_1``.
    """
    if model.theta <= 0:
        raise ValueError("mixing needs theta > 0")
    x = _field(model, x).coeffs
    stream = stream or NoiseStream(0)
    probe = probe or (lambda Y: Y[..., 0])
    if lags is None:
        lags = np.linspace(0.0, 16.0 / model.theta, 9)
    lags = np.asarray(lags, float)
    if dt is None:
        dt = float(np.min(np.diff(lags))) if lags.size > 1 else 1e-2
        if model.affine is None:
            dt = min(dt, 1e-2)
    steps = np.rint(lags / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - lags) > 1e-9 * max(1.0, lags.max())):
        raise ValueError("lags must be multiples of dt")
    draws = sample_invariant_array(model, x, replicas, stream)
    if y is None:
        y = draws.mean(axis=0) if model.closed_form_invariant is None else model.closed_form_invariant.mean(x)
        y = y + np.eye(model.m)[0]
    y = _field(model, y).coeffs
    scheme = "exact-ou-fast" if model.affine is not None else "exp-euler"
    cfg = SimConfig(epsilon=1.0, m=model.m, dt=dt, T=max(int(steps.max()), 1) * dt, scheme=scheme,
                    samples=replicas, master_seed=stream.master_seed)
    w2 = NoiseStream(stream.master_seed, tag="W2", replica=stream.replica)
    a = simulate_frozen(x, y, cfg, model, w2, record_steps=steps)
    b = simulate_frozen(x, y, cfg, model, w2, record_steps=steps, y_init=draws)
    d = np.asarray(probe(a.Y), float) - np.asarray(probe(b.Y), float)
    val = d.mean(axis=1)
    se = d.std(axis=1, ddof=1) / math.sqrt(replicas)
    ok = np.abs(val) > 3 * se
    n_fit = int(np.argmin(ok)) if not ok.all() else ok.size
    if n_fit < 3:
        return MixingFit(math.nan, math.nan, math.nan, True, lags, val, se, n_fit)
    t = lags[:n_fit]
    logv = np.log(np.abs(val[:n_fit]))
    w = (np.abs(val[:n_fit]) / np.maximum(se[:n_fit], 1e-300)) ** 2
    w = np.where(np.isfinite(w), w, 1e300)
    slope, icpt, half = _wls_line(t, logv, w)
    return MixingFit(float(slope), float(half), float(math.exp(icpt)), False, lags, val, se, n_fit)


def _wls_line(t, v, w):
    """Weighted line fit with a 95% t-based half-width on the slope."""
    sw = np.sqrt(w / np.max(w))
    X = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(X * sw[:, None], v * sw, rcond=None)
    dof = t.size - 2
    if dof < 1:
        return coef[0], coef[1], math.inf
    res = (v - X @ coef) * sw
    s2 = float(res @ res) / dof
    cov = s2 * np.linalg.inv((X * sw[:, None]).T @ (X * sw[:, None]))
    return coef[0], coef[1], stats.t.ppf(0.975, dof) * math.sqrt(max(cov[0, 0], 0.0))
