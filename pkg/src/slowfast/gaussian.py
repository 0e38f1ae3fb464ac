"""Closed-form Gaussian laws for linear diagonal models.

When ``f1`` and ``h`` are linear and the noise is constant, every mode k of
the triple ``(X^eps, Y^eps, Xbar)`` is an independent three-dimensional OU
process.  Its mean and covariance give exact references for the integrator
and the rate harness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import ModelSpec
from .spectral import phi1


@dataclass(frozen=True)
class LinearRates:
    lam: np.ndarray
    c: float
    f1: np.ndarray
    b2: np.ndarray
    B1: np.ndarray
    a: np.ndarray
    q: np.ndarray

    @property
    def kappa(self) -> np.ndarray:
        """Drift rate of the averaged equation per mode."""
        return -self.lam + self.f1 + self.B1 * self.b2 / (self.lam + self.c)


def linear_rates(model: ModelSpec) -> LinearRates:
    s = model.affine
    if s is None or s.f1.kind not in ("zero", "linear") or s.h.kind not in ("zero", "linear"):
        raise ValueError(f"model {model.name!r} is not linear in x")
    zero = np.zeros(model.m)
    f1 = s.f1.coef if s.f1.kind == "linear" else zero
    b2 = s.h.coef if s.h.kind == "linear" else zero
    return LinearRates(model.basis.eigenvalues, float(s.c), f1, b2, s.B1, s.g1**2, s.g2**2)


def _ou_moments(M, Q, z0, t):
    """Mean and covariance at time t of dZ = M Z dt + dW with Cov(dW) = Q dt, Z_0 = z0."""
    n = M.shape[0]
    # vec P' = (I kron M + M kron I) vec P + vec Q, solved with one augmented exponential
    L = np.kron(np.eye(n), M) + np.kron(M, np.eye(n))
    aug = np.zeros((n * n + 1, n * n + 1))
    aug[:-1, :-1] = L
    aug[:-1, -1] = Q.ravel(order="F")
    cov = (linalg.expm(aug * t)[:-1, -1]).reshape(n, n, order="F")
    return linalg.expm(M * t) @ z0, 0.5 * (cov + cov.T)


def coupled_moments(model: ModelSpec, x0, y0, eps: float, times):
    """Exact law of ``(X^eps_k, Y^eps_k, Xbar_k)`` with X and Xbar driven by one W1.

    Returns ``mean`` of shape ``(n_times, m, 3)`` and ``cov`` of shape
    ``(n_times, m, 3, 3)``.
    """
    r = linear_rates(model)
    x0 = np.asarray(x0, float)
    y0 = np.asarray(y0, float)
    times = np.atleast_1d(np.asarray(times, float))
    mean = np.empty((times.size, model.m, 3))
    cov = np.empty((times.size, model.m, 3, 3))
    for k in range(model.m):
        lam, rate = r.lam[k], r.lam[k] + r.c
        M = np.array([[-lam + r.f1[k], r.B1[k], 0.0],
                      [r.b2[k] / eps, -rate / eps, 0.0],
                      [0.0, 0.0, r.kappa[k]]])
        S = np.array([[np.sqrt(r.a[k]), 0.0], [0.0, np.sqrt(r.q[k] / eps)], [np.sqrt(r.a[k]), 0.0]])
        z0 = np.array([x0[k], y0[k], x0[k]])
        for i, t in enumerate(times):
            mean[i, k], cov[i, k] = _ou_moments(M, S @ S.T, z0, t)
    return mean, cov


def strong_error_exact(model: ModelSpec, x0, y0, eps: float, times) -> float:
    """``sup_t (E|X^eps_t - Xbar_t|^2)^{1/2}`` over ``times`` from the exact law."""
    mean, cov = coupled_moments(model, x0, y0, eps, times)
    d = mean[..., 0] - mean[..., 2]
    v = cov[..., 0, 0] + cov[..., 2, 2] - 2 * cov[..., 0, 2]
    return float(np.sqrt(np.max(np.sum(v + d**2, axis=1))))


def averaged_law(model: ModelSpec, x0, t: float):
    """Per-mode mean and variance of the continuous averaged solution at t."""
    r = linear_rates(model)
    kap = r.kappa
    mean = np.exp(kap * t) * np.asarray(x0, float)
    var = r.a * t * phi1(-2 * kap * t)
    return mean, var


def averaged_chain_law(model: ModelSpec, x0, dt: float, n_steps: int, scheme: str = "exp-euler"):
    """Per-mode mean and variance after ``n_steps`` of the averaged chain the
    integrator samples.  Under ``exact-ou-fast`` this is the continuous law;
    under ``exp-euler`` it is exponential Euler with exact convolution noise."""
    if scheme == "exact-ou-fast":
        return averaged_law(model, x0, n_steps * dt)
    r = linear_rates(model)
    rho = np.exp(-r.lam * dt) + dt * phi1(r.lam * dt) * (r.kappa + r.lam)
    noise = r.a * dt * phi1(2 * r.lam * dt)
    mean = rho**n_steps * np.asarray(x0, float)
    r2 = rho**2
    geo = np.where(np.abs(1 - r2) > 1e-14, (1 - r2**n_steps) / np.where(r2 == 1, 1, 1 - r2), n_steps)
    return mean, noise * geo


def cos_expectation(v, mean, var) -> float:
    """``E cos<v, X>`` for independent Gaussian modes: ``exp(-v'Sv/2) cos(v'mu)``."""
    v = np.asarray(v, float)
    return float(np.exp(-0.5 * np.sum(v**2 * var)) * np.cos(np.dot(v, mean)))
