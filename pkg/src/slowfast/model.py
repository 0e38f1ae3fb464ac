"""Coefficient quadruples (F1, F2, G1, G2), their declared constants, and
the built-in test models.

Coefficient callables act on coefficient arrays of shape ``(..., m)`` so a
whole ensemble can be evaluated at once.  Diffusions are diagonal in the
eigenbasis: ``G1(x)`` returns the per-mode multipliers ``g1_k(x)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .spectral import SpectralBasis, SpectralField

DEFAULT_NODES = 4096

ArrayMap = Callable[..., np.ndarray]


# ---------------------------------------------------------------- assumptions

@dataclass(frozen=True)
class AssumptionProfile:
    L_F2: float
    L_G2: float
    theta: float
    gamma: float = 0.75
    zeta: float = 0.5
    delta: float = 0.75
    alpha: float = 0.5
    beta: float = 0.5
    kappa: float = 0.75
    satisfies_A4: bool = False
    satisfies_A5: bool = False

    def __post_init__(self):
        if self.L_F2 < 0 or self.L_G2 < 0:
            raise ValueError("Lipschitz constants must be nonnegative")
        for name in ("gamma", "zeta", "delta", "beta", "kappa"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 < self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")

    @classmethod
    def declare(cls, lambda1: float, L_F2: float, L_G2: float, **kw) -> "AssumptionProfile":
        theta, _ = check_dissipativity_values(L_F2, L_G2, lambda1)
        return cls(L_F2=L_F2, L_G2=L_G2, theta=theta, **kw)


def check_dissipativity_values(L_F2: float, L_G2: float, lambda1: float) -> tuple[float, bool]:
    theta = 2.0 * lambda1 - 2.0 * L_F2 - L_G2**2
    return theta, theta > 0.0


def check_dissipativity(profile: AssumptionProfile, lambda1: float) -> tuple[float, bool]:
    """Strong dissipativity: ``theta = 2 lambda1 - 2 L_F2 - L_G2^2 > 0``."""
    return check_dissipativity_values(profile.L_F2, profile.L_G2, lambda1)


# ------------------------------------------------------------------ nemytskii

def quadrature_nodes(n: int = DEFAULT_NODES) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def synthesis_matrix(m: int, n: int = DEFAULT_NODES) -> np.ndarray:
    """``S[j, k] = sqrt(2) sin((k+1) pi xi_j)`` at the midpoint nodes."""
    xi = quadrature_nodes(n)
    k = np.arange(1, m + 1)
    return math.sqrt(2.0) * np.sin(np.pi * np.outer(xi, k))


def nemytskii(f, x: SpectralField, y: SpectralField, nodes: int = DEFAULT_NODES) -> SpectralField:
    """Coefficients of ``xi -> f(x(xi), y(xi))`` in the Dirichlet sine basis.

    Fields are synthesised by direct sine summation and projected back with
    the composite midpoint rule on ``nodes`` points.
    """
    if x.basis != y.basis:
        raise ValueError("fields live on different bases")
    S = synthesis_matrix(x.basis.m, nodes)
    vals = np.asarray(f(S @ x.coeffs, S @ y.coeffs), dtype=float)
    vals = np.broadcast_to(vals, (nodes,))
    return SpectralField(x.basis, S.T @ vals / nodes)


def _nemytskii_batch(g, S):
    def apply(x):
        x = np.asarray(x, dtype=float)
        return g(x @ S.T) @ S / S.shape[0]
    return apply


# ------------------------------------------------------------------- x-maps

XMAP_KINDS = {"zero": 0, "linear": 1, "tanh": 2, "nemytskii-sin": 3}


@dataclass(frozen=True, eq=False)
class XMap:
    """An x-dependent field map of a few fixed shapes.

    ``linear``: ``coef * x``; ``tanh``: ``tanh(coef * x)`` mode-wise;
    ``nemytskii-sin``: ``coef * N[sin](x)`` with ``N`` the Nemytskii operator.
    """

    kind: str
    coef: np.ndarray
    nodes: int = DEFAULT_NODES
    synth: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in XMAP_KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")
        coef = np.array(self.coef, dtype=float).ravel()
        object.__setattr__(self, "coef", coef)
        if self.kind == "nemytskii-sin" and self.synth is None:
            object.__setattr__(self, "synth", synthesis_matrix(coef.size, self.nodes))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "linear":
            return self.coef * x
        if self.kind == "tanh":
            return np.tanh(self.coef * x)
        return self.coef * _nemytskii_batch(np.sin, self.synth)(x)

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant in H (the Nemytskii one uses |sin'| <= 1)."""
        return float(np.max(np.abs(self.coef))) if self.kind != "zero" else 0.0

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or not np.any(self.coef)

    def kernel_args(self):
        synth = self.synth if self.synth is not None else np.zeros((1, 1))
        return XMAP_KINDS[self.kind], self.coef, np.ascontiguousarray(synth)


@dataclass(frozen=True, eq=False)
class AffineStructure:
    """Models of the form

        F1 = f1(x) + B1 y,   F2 = -c y + h(x),   G1 = diag(g1),   G2 = diag(g2)

    with constant diagonal noise.  The frozen equation is then a Gaussian OU
    process, which the integrator can step exactly.
    """

    f1: XMap
    B1: np.ndarray
    c: float
    h: XMap
    g1: np.ndarray
    g2: np.ndarray


# ------------------------------------------------------------- model records

@dataclass(frozen=True, eq=False)
class CoefficientSet:
    F1: ArrayMap
    F2: ArrayMap
    G1: ArrayMap
    G2: ArrayMap
    profile: AssumptionProfile


@dataclass(frozen=True, eq=False)
class GaussianInvariant:
    """Product Gaussian law: mode k ~ N(mean(x)_k, variances_k)."""

    mean: ArrayMap
    variances: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelSpec:
    basis: SpectralBasis
    coefficients: CoefficientSet
    name: str
    closed_form_fbar: Optional[ArrayMap] = None
    closed_form_invariant: Optional[GaussianInvariant] = None
    affine: Optional[AffineStructure] = None
    params: dict = field(default_factory=dict)
    sup_witness: Optional[dict] = None

    @property
    def m(self) -> int:
        return self.basis.m

    @property
    def profile(self) -> AssumptionProfile:
        return self.coefficients.profile

    @property
    def theta(self) -> float:
        return self.profile.theta

    def with_modes(self, m: int) -> "ModelSpec":
        """Rebuild a built-in model on ``m`` modes with the same parameters."""
        if self.name not in BUILTIN_MODELS:
            raise ValueError(f"model {self.name!r} is not a built-in and cannot be rebuilt")
        return builtin_model(self.name, m, self.params)

    def bog1_witness(self) -> float:
        """Finite-m value of ``sum_k lambda_k^{2-gamma} g1_k^2``."""
        g1 = np.asarray(self.coefficients.G1(np.zeros(self.m)))
        lam = self.basis.eigenvalues
        return float(np.sum(lam ** (2.0 - self.profile.gamma) * g1**2))

    def closed_form_phi(self):
        """Exact Poisson corrector for affine models with a Gaussian invariant law.

        ``Phi(x, y) = B1 (y - mean(x)) / (lambda + c)``, or ``None``.
        """
        if self.affine is None or self.closed_form_invariant is None:
            return None
        rate = self.basis.eigenvalues + self.affine.c
        B1 = self.affine.B1
        mean = self.closed_form_invariant.mean
        return lambda x, y: B1 * (np.asarray(y) - mean(x)) / rate


def affine_model(name: str, basis: SpectralBasis, s: AffineStructure, profile: AssumptionProfile,
                 params: dict, sup_witness: Optional[dict] = None) -> ModelSpec:
    """Assemble a ModelSpec, with closed forms, from an affine structure."""
    lam = basis.eigenvalues
    rate = lam + s.c
    g1 = np.asarray(s.g1, dtype=float)
    g2 = np.asarray(s.g2, dtype=float)
    B1 = np.asarray(s.B1, dtype=float)

    def F1(x, y):
        return s.f1(x) + B1 * np.asarray(y)

    def F2(x, y):
        return -s.c * np.asarray(y) + s.h(x)

    def G1(x):
        return np.broadcast_to(g1, np.shape(x)).copy()

    def G2(x, y):
        return np.broadcast_to(g2, np.shape(y)).copy()

    def inv_mean(x):
        return s.h(x) / rate

    def fbar(x):
        return s.f1(x) + B1 * inv_mean(x)

    inv = GaussianInvariant(inv_mean, g2**2 / (2.0 * rate))
    coefs = CoefficientSet(F1, F2, G1, G2, profile)
    return ModelSpec(basis, coefs, name, fbar, inv, s, dict(params), sup_witness)


# ---------------------------------------------------------------- built-ins

def _mode_profile(params, key, default_amp, default_decay, m):
    val = params.get(key, default_amp)
    if np.ndim(val) == 0:
        k = np.arange(1, m + 1, dtype=float)
        return float(val) * k ** -float(params.get(key + "_decay", default_decay))
    arr = np.asarray(val, dtype=float).ravel()
    if arr.size < m:
        raise ValueError(f"parameter {key!r} has {arr.size} entries, need {m}")
    return arr[:m]


# amplitude, decay exponent in k
_LINEAR_DEFAULTS = {"c": 1.0, "q": (0.1, 2.0), "a": (1e-3, 4.0), "b2": (1.0, 1.0),
                    "B1": (2.0, 1.0), "f1": (8.0, 0.0)}
_SIN_DEFAULTS = {"c": 1.0, "q": (0.1, 2.0), "a": (1e-3, 4.0)}
_COMMON_KEYS = {"nodes"}


def _check_keys(name, params, defaults):
    allowed = set(defaults) | {k + "_decay" for k, v in defaults.items() if isinstance(v, tuple)} | _COMMON_KEYS
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown parameter(s) for model {name!r}: {sorted(unknown)}")


def _vectors(params, defaults, m):
    out = {}
    for key, dflt in defaults.items():
        if isinstance(dflt, tuple):
            out[key] = _mode_profile(params, key, dflt[0], dflt[1], m)
    return out


def _profile_for(basis, c, **flags):
    if c < 0:
        raise ValueError("damping c must be nonnegative")
    theta, ok = check_dissipativity_values(c, 0.0, basis.lambda1)
    if not ok:
        raise ValueError(f"dissipativity violated: theta = {theta:.6g} <= 0 (c = {c}, lambda1 = {basis.lambda1:.6g})")
    return AssumptionProfile(L_F2=c, L_G2=0.0, theta=theta, satisfies_A5=True, **flags)


def _linear_ou(m, params):
    _check_keys("linear-ou", params, _LINEAR_DEFAULTS)
    basis = SpectralBasis.dirichlet(m)
    c = float(params.get("c", _LINEAR_DEFAULTS["c"]))
    v = _vectors(params, _LINEAR_DEFAULTS, m)
    if np.any(v["q"] < 0) or np.any(v["a"] < 0):
        raise ValueError("noise intensities q, a must be nonnegative")
    s = AffineStructure(f1=XMap("linear", v["f1"]), B1=v["B1"], c=c, h=XMap("linear", v["b2"]),
                        g1=np.sqrt(v["a"]), g2=np.sqrt(v["q"]))
    return affine_model("linear-ou", basis, s, _profile_for(basis, c), params)


def _bounded_a4(m, params):
    _check_keys("bounded-a4", params, _LINEAR_DEFAULTS)
    basis = SpectralBasis.dirichlet(m)
    c = float(params.get("c", _LINEAR_DEFAULTS["c"]))
    v = _vectors(params, _LINEAR_DEFAULTS, m)
    if np.any(v["q"] < 0) or np.any(v["a"] < 0):
        raise ValueError("noise intensities q, a must be nonnegative")
    s = AffineStructure(f1=XMap("linear", v["f1"]), B1=v["B1"], c=c, h=XMap("tanh", v["b2"]),
                        g1=np.sqrt(v["a"]), g2=np.sqrt(v["q"]))
    witness = {"sup_G2_HS": float(np.sqrt(np.sum(v["q"]))), "sup_F2_x_0": math.sqrt(m)}
    return affine_model("bounded-a4", basis, s, _profile_for(basis, c, satisfies_A4=True), params, witness)


def _nemytskii_sin(m, params):
    _check_keys("nemytskii-sin", params, _SIN_DEFAULTS)
    basis = SpectralBasis.dirichlet(m)
    c = float(params.get("c", _SIN_DEFAULTS["c"]))
    nodes = int(params.get("nodes", DEFAULT_NODES))
    v = _vectors(params, _SIN_DEFAULTS, m)
    if np.any(v["q"] < 0) or np.any(v["a"] < 0):
        raise ValueError("noise intensities q, a must be nonnegative")
    nsin = XMap("nemytskii-sin", np.ones(m), nodes=nodes)
    s = AffineStructure(f1=nsin, B1=np.ones(m), c=c, h=nsin, g1=np.sqrt(v["a"]), g2=np.sqrt(v["q"]))
    # |sin(x(.))|_{L2(0,1)} <= 1
    witness = {"sup_G2_HS": float(np.sqrt(np.sum(v["q"]))), "sup_F2_x_0": 1.0}
    return affine_model("nemytskii-sin", basis, s, _profile_for(basis, c, satisfies_A4=True), params, witness)


BUILTIN_MODELS = {"linear-ou": _linear_ou, "nemytskii-sin": _nemytskii_sin, "bounded-a4": _bounded_a4}


def builtin_model(name: str, m: int, params: Optional[dict] = None) -> ModelSpec:
    """Construct one of the built-in models on ``m`` Dirichlet modes.

    Parameters not given take the defaults used by the rate experiments.
    Scalar noise/coupling parameters are amplitudes of a power law in the mode
    index (``q_k = q k^{-q_decay}``); sequences are taken verbatim.
    """
    if name not in BUILTIN_MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    if m < 1:
        raise ValueError("mode count must be positive")
    return BUILTIN_MODELS[name](int(m), dict(params or {}))


# -------------------------------------------------------------------- audit

def estimate_lipschitz(coef, sampler, n_pairs: int, rng=None) -> float:
    """Max of ``|F(x,y1) - F(x,y2)| / |y1 - y2|`` over sampled triples.

    ``coef(x, y)`` returns an array; ``sampler(rng)`` returns a coefficient
    array.  The result is a lower bound on the true constant.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(rng)
    best = 0.0
    for _ in range(n_pairs):
        x, y1, y2 = sampler(rng), sampler(rng), sampler(rng)
        dy = np.linalg.norm(np.asarray(y1) - np.asarray(y2))
        if dy == 0.0:
            continue
        best = max(best, float(np.linalg.norm(coef(x, y1) - coef(x, y2)) / dy))
    return best


def fbar_lipschitz_bound(model: ModelSpec) -> float:
    """Lipschitz bound of the closed-form averaged drift of an affine model:
    ``Lip(f1) + max_k |B1_k| Lip(h) / (lambda_k + c)`` (mode-wise for diagonal maps).
    """
    s = model.affine
    if s is None:
        raise ValueError("bound is only available for affine models")
    rate = model.basis.eigenvalues + s.c
    if s.h.kind in ("linear", "tanh") and s.f1.kind in ("linear", "zero"):
        f1c = s.f1.coef if s.f1.kind == "linear" else np.zeros(model.m)
        return float(np.max(np.abs(f1c) + np.abs(s.B1 * s.h.coef) / rate))
    return s.f1.lipschitz + float(np.max(np.abs(s.B1) / rate)) * s.h.lipschitz


def replace_params(model: ModelSpec, **params) -> ModelSpec:
    p = dict(model.params)
    p.update(params)
    return builtin_model(model.name, model.m, p)


__all__ = [
    "AssumptionProfile", "CoefficientSet", "GaussianInvariant", "ModelSpec", "AffineStructure", "XMap",
    "builtin_model", "check_dissipativity", "estimate_lipschitz", "nemytskii", "affine_model",
    "fbar_lipschitz_bound", "replace_params", "synthesis_matrix",
]
