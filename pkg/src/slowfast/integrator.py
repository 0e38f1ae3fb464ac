"""Time stepping for the coupled slow-fast system, the frozen fast equation
and the averaged slow equation on the Galerkin space H_m.

Slow variable: exponential Euler on the mild form,

    X+ = e^{-lam dt} X + dt phi1(lam dt) F1(X, .) + (stochastic convolution).

Fast variable, advanced in ``micro_substeps`` steps per macro step with the
slow variable frozen at the left end point:

* ``exp-euler``: exponential Euler for ``(1/eps)(A Y + F2)``; the slow drift
  integral uses the micro-step values of Y at their left end points.
* ``exact-ou-fast``: exact OU transition (affine models only), sampled jointly
  with the exact convolution integral of Y that enters the slow update.  When
  ``f1`` and ``h`` are linear each mode pair ``(X_k, Y_k)`` is a linear SDE
  and is stepped exactly, with no slow-variable freezing; the averaged
  equation is then linear too and also stepped exactly.

Noise uses the exact convolution variance; a state dependent coefficient is
frozen at the start of the step.  Noise is drawn from
counter-keyed streams, so ``simulate_coupled`` and ``simulate_averaged`` see
identical W1 increments for matching sample indices.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import integrate, linalg

from . import _kernels as K
from .model import ModelSpec
from .rng import W1, W2, NoiseStream, stream_keys, tag_code
from .spectral import SpectralField, phi1

log = logging.getLogger(__name__)

SCHEMES = ("exp-euler", "exact-ou-fast")
MAX_EXP_EULER_RATIO = 0.5


class ConfigError(ValueError):
    """Invalid simulation configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class SimulationError(RuntimeError):
    def __init__(self, sample_index: int, step: int, what: str = "non-finite state"):
        super().__init__(f"sample {sample_index}: {what} at step {step}")
        self.sample_index = sample_index
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    m: int
    dt: float
    T: float
    scheme: str = "exact-ou-fast"
    micro_substeps: int = 1
    samples: int = 1
    master_seed: int = 0
    record_every: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self, model: Optional[ModelSpec] = None) -> "SimConfig":
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError("epsilon", f"must be positive, got {self.epsilon}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError("m", f"must be a positive integer, got {self.m}")
        if not self.dt > 0:
            raise ConfigError("dt", f"must be positive, got {self.dt}")
        if not self.T > 0:
            raise ConfigError("T", f"must be positive, got {self.T}")
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {SCHEMES}, got {self.scheme!r}")
        if int(self.micro_substeps) != self.micro_substeps or self.micro_substeps < 1:
            raise ConfigError("micro_substeps", f"must be a positive integer, got {self.micro_substeps}")
        if int(self.samples) != self.samples or self.samples < 1:
            raise ConfigError("samples", f"must be >= 1, got {self.samples}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed", "must fit in an unsigned 64-bit integer")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError("dt", f"T = {self.T} is not an integer multiple of dt = {self.dt}")
        if self.record_every is not None and (int(self.record_every) != self.record_every or self.record_every < 1):
            raise ConfigError("record_every", f"must be a positive integer, got {self.record_every}")
        if self.record_every is not None and self.n_steps % self.record_every:
            raise ConfigError("record_every", f"must divide the step count {self.n_steps}")
        if self.scheme == "exp-euler" and self.micro_step / self.epsilon > MAX_EXP_EULER_RATIO:
            raise ConfigError("micro_substeps",
                              f"exp-euler needs micro step / epsilon <= {MAX_EXP_EULER_RATIO}, "
                              f"got {self.micro_step / self.epsilon:.4g}")
        if model is not None:
            if model.m != self.m:
                raise ConfigError("m", f"model has {model.m} modes, config has {self.m}")
            if self.scheme == "exact-ou-fast" and model.affine is None:
                raise ConfigError("scheme", "exact-ou-fast needs F2 affine in y and constant G2")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def micro_step(self) -> float:
        return self.dt / self.micro_substeps

    @property
    def stride(self) -> int:
        if self.record_every is not None:
            return int(self.record_every)
        n = self.n_steps
        stride = max(1, n // 100)
        while n % stride:
            stride -= 1
        return stride

    @property
    def times(self) -> np.ndarray:
        return np.arange(0, self.n_steps + 1, self.stride) * self.dt

    def refined(self) -> "SimConfig":
        """Half the macro step and twice the micro substeps."""
        rec = None if self.record_every is None else 2 * self.record_every
        return replace(self, dt=self.dt / 2, micro_substeps=2 * self.micro_substeps, record_every=rec)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SlowFastState:
    X: SpectralField
    Y: SpectralField
    t: float = 0.0

    def __post_init__(self):
        if self.X.basis != self.Y.basis:
            raise ValueError("X and Y must share the basis")


@dataclass(eq=False)
class TrajectoryEnsemble:
    """Recorded states, layout ``(n_times, n_samples, m)``.

    ``integral`` (frozen runs only) holds the running time integral of Y.
    """

    times: np.ndarray
    X: Optional[np.ndarray]
    Y: Optional[np.ndarray] = None
    integral: Optional[np.ndarray] = None
    sample_indices: Optional[np.ndarray] = None
    master_seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def states(self) -> np.ndarray:
        return self.X if self.X is not None else self.Y

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.states.shape[2]

    def to_binary(self, path) -> None:
        """Header of four little-endian uint64 ``(m, n_times, n_samples, seed)``,
        then the float64 grid times, then the states in row-major order."""
        st = np.ascontiguousarray(self.states, dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4Q", self.m, st.shape[0], st.shape[1], int(self.master_seed)))
            fh.write(np.asarray(self.times, dtype="<f8").tobytes())
            fh.write(st.tobytes())

    @classmethod
    def from_binary(cls, path) -> "TrajectoryEnsemble":
        with open(path, "rb") as fh:
            m, nt, ns, seed = struct.unpack("<4Q", fh.read(32))
            times = np.frombuffer(fh.read(8 * nt), dtype="<f8").copy()
            st = np.frombuffer(fh.read(8 * nt * ns * m), dtype="<f8").reshape(nt, ns, m).copy()
        return cls(times, st, master_seed=seed)

    def to_csv(self, path, config: Optional[dict] = None) -> None:
        st = self.states
        with open(path, "w", newline="") as fh:
            if config is not None:
                fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
            fh.write(",".join(["time", "sample"] + [f"u{k + 1}" for k in range(self.m)]) + "\n")
            idx = self.sample_indices if self.sample_indices is not None else np.arange(st.shape[1])
            for i, t in enumerate(self.times):
                for s in range(st.shape[1]):
                    fh.write(f"{t:.17g},{idx[s]}," + ",".join(f"{v:.17g}" for v in st[i, s]) + "\n")


# ------------------------------------------------------------ coefficients

def ou_pair_moments(a, b, h, s2):
    """Covariance of ``(Y_h, Z_h)`` for ``dY = -a Y dt + sqrt(s2) dW``, ``Y_0 = 0``,
    ``Z_h = int_0^h e^{-b(h-t)} Y_t dt``.  Arrays broadcast over modes.
    """
    a, b, s2 = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(s2, float))
    var_y = s2 * h * phi1(2 * a * h)
    cov = np.empty_like(a)
    var_z = np.empty_like(a)
    for i in np.ndindex(a.shape):
        ai, bi, si = a[i], b[i], s2[i]
        d = ai - bi
        if abs(d) * h > 1e-2:
            E = lambda u: h * phi1(u * h)
            cov[i] = si * (E(ai + bi) - E(2 * ai)) / d
            var_z[i] = si * (E(2 * bi) - 2 * E(ai + bi) + E(2 * ai)) / d**2
        else:
            kern = lambda v: np.exp(-bi * v) * v * phi1(d * v)
            cov[i] = si * integrate.quad(lambda v: np.exp(-ai * v) * kern(v), 0, h, epsabs=0, epsrel=1e-13)[0]
            var_z[i] = si * integrate.quad(lambda v: kern(v) ** 2, 0, h, epsabs=0, epsrel=1e-13)[0]
    return var_y, cov, var_z


def _cholesky2(var_y, cov, var_z):
    l11 = np.sqrt(var_y)
    l21 = np.divide(cov, l11, out=np.zeros_like(cov), where=l11 > 0)
    l22 = np.sqrt(np.maximum(var_z - l21**2, 0.0))
    return l11, l21, l22


def coefficient_table(model: ModelSpec, eps: float, dt: float, n_micro: int, scheme: str,
                      lev1: int = 0, lev2: int = 0, frozen: bool = False) -> np.ndarray:
    s = model.affine
    lam = model.basis.eigenvalues
    rate = lam + s.c
    tab = np.zeros((K.N_ROWS, model.m))
    tab[K.EX] = np.exp(-lam * dt)
    tab[K.DPHI] = dt * phi1(lam * dt)
    dt_f = dt / 2**lev1
    tab[K.EX_F] = np.exp(-lam * dt_f)
    tab[K.SX_F] = s.g1 * np.sqrt(dt_f * phi1(2 * lam * dt_f))
    delta = dt / n_micro
    delta_f = delta / 2**lev2
    b = np.zeros_like(lam) if frozen else lam
    tab[K.EBD] = np.exp(-b * delta)
    tab[K.HB] = delta * phi1(b * delta)
    s2 = s.g2**2 / eps
    if scheme == "exact-ou-fast":
        a = rate / eps
        tab[K.EY] = np.exp(-a * delta)
        tab[K.KD] = np.exp(-b * delta) * delta * phi1((a - b) * delta)
        tab[K.EY_F] = np.exp(-a * delta_f)
        tab[K.K_F] = np.exp(-b * delta_f) * delta_f * phi1((a - b) * delta_f)
        tab[K.EB_F] = np.exp(-b * delta_f)
        tab[K.L11], tab[K.L21], tab[K.L22] = _cholesky2(*ou_pair_moments(a, b, delta_f, s2))
    else:
        al = lam / eps
        tab[K.EY] = np.exp(-al * delta)
        tab[K.DY] = (delta / eps) * phi1(al * delta)
        tab[K.EY_F] = np.exp(-al * delta_f)
        tab[K.L11] = np.sqrt(s2 * delta_f * phi1(2 * al * delta_f))
    tab[K.RATE] = rate
    tab[K.B1] = s.B1
    return tab


def is_linear(model: ModelSpec) -> bool:
    """True for affine models whose ``f1`` and ``h`` are linear mode-wise."""
    s = model.affine
    return s is not None and s.f1.kind in ("zero", "linear") and s.h.kind in ("zero", "linear")


def _expint(mu, h):
    """``int_0^h e^{mu s} ds`` for real or complex ``mu``."""
    z = mu * h
    return h if z == 0 else h * np.expm1(z) / z


def linear_noise_cov(A, b, h):
    """``int_0^h e^{As} b b^T e^{A^T s} ds`` for a 2x2 drift matrix ``A``.

    Uses the eigen-decomposition, which stays accurate for stiff ``A``, and
    falls back to quadrature when the eigenvectors are nearly parallel.
    """
    d, V = np.linalg.eig(A)
    if np.linalg.cond(V) < 1e8:
        u = np.linalg.solve(V, b)
        M = np.array([[u[i] * u[j] * _expint(d[i] + d[j], h) for j in range(2)] for i in range(2)])
        Q = np.real(V @ M @ V.T)
    else:
        bb = np.outer(b, b)
        Q = integrate.quad_vec(lambda s: linalg.expm(A * s) @ bb @ linalg.expm(A * s).T, 0, h,
                               epsabs=0, epsrel=1e-12)[0]
    return 0.5 * (Q + Q.T)


def linear_table(model: ModelSpec, eps: float, dt: float, n_micro: int, lev1: int = 0,
                 lev2: int = 0) -> np.ndarray:
    """Exact per-mode transition of ``(X_k, Y_k)`` for a linear model.

    Rows: ``e^{A dt}`` (4), ``e^{A dt_f}`` and the Cholesky factor of one W1
    piece in the order (X, Y) (4 + 3), ``e^{A delta_f}`` and the factor of one
    W2 piece in the order (Y, X) (4 + 3).  ``dt_f`` and ``delta_f`` are the
    fine W1 and W2 piece lengths.
    """
    s = model.affine
    lam = model.basis.eigenvalues
    m = model.m
    f1 = s.f1.coef if s.f1.kind == "linear" else np.zeros(m)
    b2 = s.h.coef if s.h.kind == "linear" else np.zeros(m)
    dt_f = dt / 2**lev1
    de_f = dt / n_micro / 2**lev2
    tab = np.zeros((K.LIN_ROWS, m))
    with np.errstate(over="ignore", invalid="ignore"):   # blow-up is reported by the kernel
        for k in range(m):
            _linear_mode(tab, k, lam[k], f1[k], b2[k], s, eps, dt, dt_f, de_f)
    return tab


def _linear_mode(tab, k, lam, f1, b2, s, eps, dt, dt_f, de_f):
    A = np.array([[-lam + f1, s.B1[k]], [b2 / eps, -(lam + s.c) / eps]])
    tab[K.LE:K.LE + 4, k] = linalg.expm(A * dt).ravel()
    tab[K.LF1:K.LF1 + 4, k] = linalg.expm(A * dt_f).ravel()
    q = linear_noise_cov(A, np.array([s.g1[k], 0.0]), dt_f)
    tab[K.LP1:K.LP1 + 3, k] = _cholesky2(q[0, 0], q[0, 1], q[1, 1])
    tab[K.LF2:K.LF2 + 4, k] = linalg.expm(A * de_f).ravel()
    q = linear_noise_cov(A, np.array([0.0, s.g2[k] / math.sqrt(eps)]), de_f)
    tab[K.LP2:K.LP2 + 3, k] = _cholesky2(q[1, 1], q[0, 1], q[0, 0])
    if s.B1[k] == 0.0:
        # X_k is a scalar OU process; use the averaged table's formulas so both runs agree bitwise
        kap = A[0, 0]
        tab[K.LE:K.LE + 2, k] = np.exp(kap * dt), 0.0
        tab[K.LF1:K.LF1 + 2, k] = np.exp(kap * dt_f), 0.0
        tab[K.LP1, k] = s.g1[k] * np.sqrt(dt_f * phi1(-2 * kap * dt_f))
        tab[K.LF2 + 1, k] = 0.0
        tab[K.LP2 + 1:K.LP2 + 3, k] = 0.0


def averaged_exact_table(model: ModelSpec, dt: float, lev1: int = 0) -> np.ndarray:
    """Coefficient table that steps a linear averaged equation exactly.

    The whole linear drift goes into the exponential, so the drift row is zero.
    """
    s = model.affine
    lam = model.basis.eigenvalues
    f1 = s.f1.coef if s.f1.kind == "linear" else np.zeros(model.m)
    b2 = s.h.coef if s.h.kind == "linear" else np.zeros(model.m)
    kappa = -lam + f1 + s.B1 * b2 / (lam + s.c)
    tab = np.zeros((K.N_ROWS, model.m))
    tab[K.EX] = np.exp(kappa * dt)
    dt_f = dt / 2**lev1
    tab[K.EX_F] = np.exp(kappa * dt_f)
    tab[K.SX_F] = s.g1 * np.sqrt(dt_f * phi1(-2 * kappa * dt_f))
    tab[K.RATE] = lam + s.c
    tab[K.B1] = s.B1
    return tab


# ---------------------------------------------------------------- helpers

def _coeffs(u, m: int) -> np.ndarray:
    c = u.coeffs if isinstance(u, SpectralField) else np.asarray(u, dtype=float)
    if c.shape != (m,):
        raise ValueError(f"initial condition must have {m} coefficients, got shape {c.shape}")
    return np.ascontiguousarray(c, dtype=float)


def _sample_indices(cfg: SimConfig, samples) -> np.ndarray:
    if samples is None:
        return np.arange(cfg.samples, dtype=np.int64)
    return np.atleast_1d(np.asarray(samples, dtype=np.int64))


def _raise_status(status, idx):
    bad = np.flatnonzero(status)
    if bad.size:
        s = int(bad[0])
        raise SimulationError(int(idx[s]), int(status[s]))


def _use_kernel(model: ModelSpec, backend: str) -> bool:
    if backend not in ("auto", "kernel", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "kernel" and model.affine is None:
        raise ValueError("the compiled backend needs an affine model")
    return backend == "kernel" or (backend == "auto" and model.affine is not None)


# ------------------------------------------------------------- simulators

def simulate_coupled(x0, y0, cfg: SimConfig, model: ModelSpec, *, samples=None, record_y: bool = False,
                     refine: tuple[int, int] = (0, 0), step0: int = 0, backend: str = "auto") -> TrajectoryEnsemble:
    """Run the coupled system for every sample index from ``(x0, y0)`` to ``cfg.T``.

    Sample ``s`` uses the streams ``(s, W1)`` and ``(s, W2)``.  ``refine``
    builds each W1 (macro) and W2 (micro) increment from ``2**level`` finer
    draws, so a run at ``dt`` reuses the Brownian path of a run at
    ``dt / 2**level``.
    """
    cfg.validate(model)
    idx = _sample_indices(cfg, samples)
    x0 = _coeffs(x0, model.m)
    y0 = _coeffs(y0, model.m)
    keys1 = stream_keys(cfg.master_seed, idx, W1)
    keys2 = stream_keys(cfg.master_seed, idx, W2)
    times = cfg.times
    if _use_kernel(model, backend):
        s = model.affine
        tab = coefficient_table(model, cfg.epsilon, cfg.dt, cfg.micro_substeps, cfg.scheme, *refine)
        outX = np.empty((times.size, idx.size, model.m))
        outY = np.empty_like(outX) if record_y else np.empty((1, 1, 1))
        status = np.zeros(idx.size, dtype=np.int64)
        scheme = K.EXACT_OU if cfg.scheme == "exact-ou-fast" else K.EXP_EULER
        if scheme == K.EXACT_OU and is_linear(model):
            lin = linear_table(model, cfg.epsilon, cfg.dt, cfg.micro_substeps, *refine)
            K.linear_kernel(x0, y0, lin, cfg.n_steps, cfg.micro_substeps, step0, refine[0], refine[1],
                            keys1, keys2, cfg.stride, outX, outY, record_y, status)
        else:
            K.coupled_kernel(x0, y0, tab, float(s.c), *s.f1.kernel_args(), *s.h.kernel_args(),
                             cfg.n_steps, cfg.micro_substeps, step0, scheme, refine[0], refine[1],
                             keys1, keys2, cfg.stride, outX, outY, record_y, status)
        _raise_status(status, idx)
        Y = outY if record_y else None
    else:
        outX, Y = _coupled_numpy(x0, y0, cfg, model, keys1, keys2, refine, step0, record_y, idx)
    return TrajectoryEnsemble(times, outX, Y, sample_indices=idx, master_seed=cfg.master_seed,
                              meta={"kind": "coupled", "epsilon": cfg.epsilon})


def simulate_averaged(x0, cfg: SimConfig, model: ModelSpec, fbar=None, *, samples=None,
                      refine: tuple[int, int] = (0, 0), step0: int = 0, backend: str = "auto") -> TrajectoryEnsemble:
    """Exponential Euler for ``dX = [A X + Fbar(X)] dt + G1(X) dW1``.

    ``fbar`` defaults to the model's closed form.  Uses the same W1 stream
    ids as :func:`simulate_coupled`.  With ``exact-ou-fast`` and a linear
    model the step is exact.
    """
    if cfg.scheme == "exact-ou-fast" and model.affine is None:
        cfg = replace(cfg, scheme="exp-euler")
    cfg.validate(model)
    idx = _sample_indices(cfg, samples)
    x0 = _coeffs(x0, model.m)
    keys1 = stream_keys(cfg.master_seed, idx, W1)
    times = cfg.times
    closed = fbar is None or getattr(fbar, "mode", None) == "closed-form"
    if closed and model.closed_form_fbar is None:
        raise ValueError(f"model {model.name!r} has no closed-form averaged drift; pass an evaluator")
    if closed and _use_kernel(model, backend):
        s = model.affine
        if cfg.scheme == "exact-ou-fast" and is_linear(model):
            tab = averaged_exact_table(model, cfg.dt, refine[0])
        else:
            tab = coefficient_table(model, cfg.epsilon, cfg.dt, 1, "exp-euler", refine[0], 0)
        outX = np.empty((times.size, idx.size, model.m))
        status = np.zeros(idx.size, dtype=np.int64)
        K.averaged_kernel(x0, tab, *s.f1.kernel_args(), *s.h.kernel_args(),
                          cfg.n_steps, step0, refine[0], keys1, cfg.stride, outX, status)
        _raise_status(status, idx)
    else:
        f = model.closed_form_fbar if closed else fbar
        outX = _averaged_numpy(x0, cfg, model, f, keys1, refine, step0, idx)
    return TrajectoryEnsemble(times, outX, sample_indices=idx, master_seed=cfg.master_seed,
                              meta={"kind": "averaged"})


def simulate_frozen(x, y0, cfg: SimConfig, model: ModelSpec, w2: Optional[NoiseStream] = None, *,
                    replicas: Optional[int] = None, horizon: Optional[float] = None, thin: int = 1,
                    record_steps=None, y_init=None, first_replica: int = 0,
                    backend: str = "auto") -> TrajectoryEnsemble:
    """Frozen equation ``dY = [A Y + F2(x, Y)] dt + G2(x, Y) dW2`` with x fixed.

    Replica r uses stream ``(first_replica + r, W2, w2.replica)``; ``cfg.dt`` is the step,
    ``horizon`` (default ``cfg.T``) the final time.  States are recorded every
    ``thin`` steps, or at ``record_steps`` if given.  ``y_init`` overrides the
    common start ``y0`` with one start per replica.
    """
    if cfg.scheme == "exp-euler" and cfg.dt > MAX_EXP_EULER_RATIO:
        raise ConfigError("dt", f"exp-euler frozen steps need dt <= {MAX_EXP_EULER_RATIO}")
    if cfg.scheme == "exact-ou-fast" and model.affine is None:
        raise ConfigError("scheme", "exact-ou-fast needs F2 affine in y and constant G2")
    w2 = w2 or NoiseStream(cfg.master_seed, tag="W2")
    n_rep = int(replicas or cfg.samples)
    horizon = cfg.T if horizon is None else horizon
    n_steps = int(round(horizon / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError("dt", f"horizon {horizon} is not a positive multiple of dt = {cfg.dt}")
    if record_steps is None:
        record_steps = np.arange(0, n_steps + 1, thin)
    record_steps = np.unique(np.asarray(record_steps, dtype=np.int64))
    if record_steps[0] < 0 or record_steps[-1] > n_steps:
        raise ValueError("record steps outside the simulated range")
    x = _coeffs(x, model.m)
    if y_init is None:
        y_init = np.tile(_coeffs(y0, model.m), (n_rep, 1))
    y_init = np.ascontiguousarray(y_init, dtype=float)
    if y_init.shape != (n_rep, model.m):
        raise ValueError(f"y_init must have shape {(n_rep, model.m)}")
    idx = np.arange(first_replica, first_replica + n_rep, dtype=np.int64)
    keys2 = stream_keys(w2.master_seed, idx, tag_code(w2.tag), w2.replica)
    if _use_kernel(model, backend):
        s = model.affine
        tab = coefficient_table(model, 1.0, cfg.dt, 1, cfg.scheme, 0, 0, frozen=True)
        hx = np.ascontiguousarray(s.h(x))
        outY = np.empty((record_steps.size, n_rep, model.m))
        outI = np.empty_like(outY)
        status = np.zeros(n_rep, dtype=np.int64)
        K.frozen_kernel(y_init, hx, tab, float(s.c), n_steps, 0, K.EXACT_OU if cfg.scheme == "exact-ou-fast"
                        else K.EXP_EULER, 0, keys2, record_steps, outY, outI, status)
        _raise_status(status, idx)
    else:
        outY, outI = _frozen_numpy(x, y_init, cfg, model, keys2, n_steps, record_steps)
    return TrajectoryEnsemble(record_steps * cfg.dt, None, outY, outI, idx, w2.master_seed,
                              meta={"kind": "frozen", "replica_tag": w2.replica})


def step_coupled(state: SlowFastState, cfg: SimConfig, model: ModelSpec, w1: NoiseStream,
                 w2: NoiseStream) -> SlowFastState:
    """Advance one sample by one macro step; the step index is ``round(t / dt)``."""
    if w1.sample_index != w2.sample_index or w1.master_seed != w2.master_seed:
        raise ValueError("w1 and w2 must belong to the same sample")
    n0 = int(round(state.t / cfg.dt))
    one = replace(cfg, T=cfg.dt, samples=1, master_seed=w1.master_seed, record_every=1)
    ens = simulate_coupled(state.X, state.Y, one, model, samples=[w1.sample_index], record_y=True, step0=n0)
    b = state.X.basis
    return SlowFastState(SpectralField(b, ens.X[-1, 0]), SpectralField(b, ens.Y[-1, 0]), (n0 + 1) * cfg.dt)


# ---------------------------------------------------- generic numpy backend

def _normals(keys, steps, m):
    out = np.empty((keys.shape[0], len(steps), m, 2))
    K.fill_normals(keys, np.asarray(steps, dtype=np.int64), m, out)
    return out


def _exact_conv(keys, step, lev, m, decay_f, sigma_f):
    nsub = 2**lev
    z = _normals(keys, range(step * nsub, (step + 1) * nsub), m)[..., 0]
    acc = np.zeros((keys.shape[0], m))
    for i in range(nsub):
        acc = decay_f * acc + sigma_f * z[:, i]
    return acc


def _check_finite(arr, idx, n):
    bad = ~np.all(np.isfinite(arr), axis=-1)
    if np.any(bad):
        raise SimulationError(int(idx[np.flatnonzero(bad)[0]]), n + 1)


def _coupled_numpy(x0, y0, cfg, model, keys1, keys2, refine, step0, record_y, idx):
    if cfg.scheme != "exp-euler":
        raise ConfigError("scheme", "the numpy backend implements exp-euler only")
    lam = model.basis.eigenvalues
    cf = model.coefficients
    m, S, eps = model.m, keys1.shape[0], cfg.epsilon
    dt, nm = cfg.dt, cfg.micro_substeps
    delta = dt / nm
    lev1, lev2 = refine
    ex = np.exp(-lam * dt)
    ey, dy = np.exp(-lam * delta / eps), (delta / eps) * phi1(lam * delta / eps)
    w = np.exp(-lam * (dt - delta * np.arange(1, nm + 1)[:, None])) * delta * phi1(lam * delta)
    dt_f, de_f = dt / 2**lev1, delta / 2**lev2
    X = np.tile(x0, (S, 1))
    Y = np.tile(y0, (S, 1))
    times = cfg.times
    outX = np.empty((times.size, S, m))
    outY = np.empty_like(outX) if record_y else None
    outX[0] = X
    if record_y:
        outY[0] = Y
    r = 1
    for n in range(cfg.n_steps):
        step = step0 + n
        drift = np.zeros((S, m))
        for j in range(nm):
            g = step * nm + j
            drift += w[j] * cf.F1(X, Y)
            ny = cf.G2(X, Y) * _exact_conv(keys2, g, lev2, m, np.exp(-lam * de_f / eps),
                                           np.sqrt(de_f * phi1(2 * lam * de_f / eps) / eps))
            Y = ey * Y + dy * cf.F2(X, Y) + ny
        nx = cf.G1(X) * _exact_conv(keys1, step, lev1, m, np.exp(-lam * dt_f), np.sqrt(dt_f * phi1(2 * lam * dt_f)))
        X = ex * X + drift + nx
        _check_finite(np.concatenate([X, Y], axis=1), idx, n)
        if (n + 1) % cfg.stride == 0:
            outX[r] = X
            if record_y:
                outY[r] = Y
            r += 1
    return outX, outY


def _averaged_numpy(x0, cfg, model, fbar, keys1, refine, step0, idx):
    lam = model.basis.eigenvalues
    m, S, dt = model.m, keys1.shape[0], cfg.dt
    ex, dphi = np.exp(-lam * dt), dt * phi1(lam * dt)
    dt_f = dt / 2 ** refine[0]
    X = np.tile(x0, (S, 1))
    outX = np.empty((cfg.times.size, S, m))
    outX[0] = X
    r = 1
    for n in range(cfg.n_steps):
        step = step0 + n
        nx = model.coefficients.G1(X) * _exact_conv(keys1, step, refine[0], m, np.exp(-lam * dt_f),
                                                    np.sqrt(dt_f * phi1(2 * lam * dt_f)))
        X = ex * X + dphi * np.asarray(fbar(X)) + nx
        _check_finite(X, idx, n)
        if (n + 1) % cfg.stride == 0:
            outX[r] = X
            r += 1
    return outX


def _frozen_numpy(x, y_init, cfg, model, keys2, n_steps, record_steps):
    if cfg.scheme != "exp-euler":
        raise ConfigError("scheme", "the numpy backend implements exp-euler only")
    lam = model.basis.eigenvalues
    cf = model.coefficients
    h = cfg.dt
    ey, dy = np.exp(-lam * h), h * phi1(lam * h)
    Y = y_init.copy()
    X = np.broadcast_to(x, Y.shape)
    I = np.zeros_like(Y)
    outY = np.empty((record_steps.size, *Y.shape))
    outI = np.empty_like(outY)
    idx = np.arange(Y.shape[0])
    r = 0
    while r < record_steps.size and record_steps[r] == 0:
        outY[r], outI[r] = Y, I
        r += 1
    for n in range(n_steps):
        ny = cf.G2(X, Y) * _exact_conv(keys2, n, 0, model.m, ey, np.sqrt(h * phi1(2 * lam * h)))
        I = I + h * Y
        Y = ey * Y + dy * cf.F2(X, Y) + ny
        _check_finite(Y, idx, n)
        while r < record_steps.size and record_steps[r] == n + 1:
            outY[r], outI[r] = Y, I
            r += 1
    return outY, outI
