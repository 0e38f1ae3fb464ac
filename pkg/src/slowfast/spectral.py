"""Spectral representation of H in the eigenbasis of A.

A field is a vector of mode coefficients ``u_k = <u, e_k>`` with
``A e_k = -lambda_k e_k``.  Everything is dense; bases up to 512 modes are
supported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_MODES = 512


def phi1(z):
    """``(1 - exp(-z)) / z`` with the removable singularity at 0.

    Uses a Taylor branch for ``|z| < 1e-4`` to avoid cancellation.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-4
    zs = z[small]
    out[small] = 1.0 - zs / 2.0 + zs * zs / 6.0
    zl = z[~small]
    out[~small] = -np.expm1(-zl) / zl
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).ravel()
        if lam.size == 0 or lam.size > MAX_MODES:
            raise ValueError(f"mode count must be in [1, {MAX_MODES}], got {lam.size}")
        if np.any(lam <= 0):
            raise ValueError("eigenvalues must be positive")
        if np.any(np.diff(lam) <= 0):
            raise ValueError("eigenvalues must be strictly increasing")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def dirichlet(cls, m: int) -> "SpectralBasis":
        """Dirichlet Laplacian on (0, 1): ``lambda_k = k^2 pi^2``."""
        k = np.arange(1, m + 1, dtype=float)
        return cls(k * k * math.pi**2)

    @property
    def m(self) -> int:
        return self.eigenvalues.size

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    def truncate(self, m: int) -> "SpectralBasis":
        if m > self.m:
            raise ValueError(f"cannot truncate {self.m} modes to {m}")
        return SpectralBasis(self.eigenvalues[:m])

    def __eq__(self, other):
        return isinstance(other, SpectralBasis) and np.array_equal(self.eigenvalues, other.eigenvalues)

    def __hash__(self):
        return hash(self.eigenvalues.tobytes())


@dataclass(frozen=True, eq=False)
class SpectralField:
    basis: SpectralBasis
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size != self.basis.m:
            raise ValueError(f"expected {self.basis.m} coefficients, got {c.size}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, basis: SpectralBasis) -> "SpectralField":
        return cls(basis, np.zeros(basis.m))

    @classmethod
    def unit(cls, basis: SpectralBasis, k: int) -> "SpectralField":
        """The eigenvector ``e_k`` (1-based index)."""
        c = np.zeros(basis.m)
        c[k - 1] = 1.0
        return cls(basis, c)

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self, s)

    def __add__(self, other):
        _check_same(self, other)
        return SpectralField(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same(self, other)
        return SpectralField(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, a: float):
        return SpectralField(self.basis, a * self.coeffs)

    __rmul__ = __mul__

    def __eq__(self, other):
        return (isinstance(other, SpectralField) and self.basis == other.basis
                and np.array_equal(self.coeffs, other.coeffs))

    __hash__ = None


def _check_same(u: SpectralField, v: SpectralField):
    if u.basis != v.basis:
        raise ValueError("fields live on different bases")


def sobolev_norm(u: SpectralField, s: float) -> float:
    """``(sum_k lambda_k^s u_k^2)^(1/2)``; ``s = 0`` is the H-norm."""
    terms = u.basis.eigenvalues**s * u.coeffs**2
    return math.sqrt(math.fsum(terms[::-1]))


def apply_semigroup(u: SpectralField, t: float) -> SpectralField:
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    return SpectralField(u.basis, np.exp(-u.basis.eigenvalues * t) * u.coeffs)


def apply_fractional(u: SpectralField, s: float) -> SpectralField:
    """``(-A)^{s/2} u``."""
    return SpectralField(u.basis, u.basis.eigenvalues ** (s / 2.0) * u.coeffs)


def project(u: SpectralField, m: int) -> SpectralField:
    """Orthogonal projection onto the span of the first ``m`` modes."""
    if m < 1 or m > u.basis.m:
        raise ValueError(f"projection size {m} outside [1, {u.basis.m}]")
    return SpectralField(u.basis.truncate(m), u.coeffs[:m])


def embed(u: SpectralField, basis: SpectralBasis) -> SpectralField:
    """Zero-pad ``u`` into a larger basis whose leading eigenvalues match."""
    if basis.m < u.basis.m or not np.array_equal(basis.eigenvalues[: u.basis.m], u.basis.eigenvalues):
        raise ValueError("target basis does not extend the field's basis")
    c = np.zeros(basis.m)
    c[: u.basis.m] = u.coeffs
    return SpectralField(basis, c)


def smoothing_factor(basis: SpectralBasis, t: float, gap: float) -> float:
    """``max_k lambda_k^{gap/2} exp(-lambda_k t)``, the H^s -> H^{s+gap} gain of ``e^{tA}``."""
    lam = basis.eigenvalues
    return float(np.max(lam ** (gap / 2.0) * np.exp(-lam * t)))


def power_law_field(basis: SpectralBasis, amplitude: float = 1.0, decay: float = 1.2) -> SpectralField:
    """Coefficients ``amplitude * k^{-decay}``; the default initial condition."""
    k = np.arange(1, basis.m + 1, dtype=float)
    return SpectralField(basis, amplitude * k**-decay)
