"""Compiled time-stepping kernels for affine models.

Per-mode step coefficients are precomputed in Python and passed as rows of
a ``(N_ROWS, m)`` table.  Samples are independent and run under ``prange``;
each writes only its own output slots.
"""
import numba as nb
import numpy as np

from .rng import lane, normal_pair

# rows of the coefficient table
EX, DPHI, EX_F, SX_F, EY, KD, EBD, HB, EY_F, K_F, EB_F, L11, L21, L22, DY, RATE, B1 = range(17)
N_ROWS = 17

EXP_EULER = 0
EXACT_OU = 1

# rows of the linear-model table: e^{A dt}, e^{A dt_f}, W1 factor, e^{A delta_f}, W2 factor
LE, LF1, LP1, LF2, LP2 = 0, 4, 8, 11, 15
LIN_ROWS = 18


@nb.njit(cache=True)
def eval_xmap(kind, coef, synth, x, out):
    m = x.shape[0]
    if kind == 0:
        for k in range(m):
            out[k] = 0.0
    elif kind == 1:
        for k in range(m):
            out[k] = coef[k] * x[k]
    elif kind == 2:
        for k in range(m):
            out[k] = np.tanh(coef[k] * x[k])
    else:
        n = synth.shape[0]
        for k in range(m):
            out[k] = 0.0
        for j in range(n):
            v = 0.0
            for k in range(m):
                v += synth[j, k] * x[k]
            sv = np.sin(v)
            for k in range(m):
                out[k] += synth[j, k] * sv
        for k in range(m):
            out[k] *= coef[k] / n


@nb.njit(inline="always", cache=True)
def _slow_noise(k0, k1, step, lev, k, ex_f, sx_f):
    nsub = 1 << lev
    acc = 0.0
    base = step * nsub
    for i in range(nsub):
        z0, _ = normal_pair(k0, k1, base + i, lane(k, 0))
        acc = ex_f * acc + sx_f * z0
    return acc


@nb.njit(inline="always", cache=True)
def _fast_noise_pair(k0, k1, g, lev, k, ey_f, k_f, eb_f, l11, l21, l22):
    nsub = 1 << lev
    ny = 0.0
    nz = 0.0
    base = g * nsub
    for i in range(nsub):
        z0, z1 = normal_pair(k0, k1, base + i, lane(k, 0))
        nz = k_f * ny + eb_f * nz + l21 * z0 + l22 * z1
        ny = ey_f * ny + l11 * z0
    return ny, nz


@nb.njit(inline="always", cache=True)
def _fast_noise_single(k0, k1, g, lev, k, ey_f, l11):
    nsub = 1 << lev
    ny = 0.0
    base = g * nsub
    for i in range(nsub):
        z0, _ = normal_pair(k0, k1, base + i, lane(k, 0))
        ny = ey_f * ny + l11 * z0
    return ny


@nb.njit(inline="always", cache=True)
def _finite(v):
    ok = True
    for k in range(v.shape[0]):
        if not np.isfinite(v[k]):
            ok = False
    return ok


@nb.njit(parallel=True, cache=True)
def coupled_kernel(x0, y0, coefs, c, f1k, f1c, f1s, hk, hc, hs,
                   n_steps, n_micro, step0, scheme, lev1, lev2, keys1, keys2,
                   record_every, outX, outY, record_y, status):
    n_samples = keys1.shape[0]
    m = x0.shape[0]
    for s in nb.prange(n_samples):
        X = x0.copy()
        Y = y0.copy()
        fx = np.empty(m)
        hx = np.empty(m)
        k10 = keys1[s, 0]
        k11 = keys1[s, 1]
        k20 = keys2[s, 0]
        k21 = keys2[s, 1]
        outX[0, s, :] = X
        if record_y:
            outY[0, s, :] = Y
        status[s] = 0
        r = 1
        for n in range(n_steps):
            step = step0 + n
            eval_xmap(f1k, f1c, f1s, X, fx)
            eval_xmap(hk, hc, hs, X, hx)
            for k in range(m):
                y = Y[k]
                zacc = 0.0
                if scheme == EXACT_OU:
                    mu = hx[k] / coefs[RATE, k]
                    for j in range(n_micro):
                        g = step * n_micro + j
                        ny, nz = _fast_noise_pair(k20, k21, g, lev2, k, coefs[EY_F, k], coefs[K_F, k],
                                                  coefs[EB_F, k], coefs[L11, k], coefs[L21, k], coefs[L22, k])
                        z = mu * coefs[HB, k] + (y - mu) * coefs[KD, k] + nz
                        y = mu + (y - mu) * coefs[EY, k] + ny
                        zacc = zacc * coefs[EBD, k] + z
                else:
                    for j in range(n_micro):
                        g = step * n_micro + j
                        ny = _fast_noise_single(k20, k21, g, lev2, k, coefs[EY_F, k], coefs[L11, k])
                        zacc = zacc * coefs[EBD, k] + coefs[HB, k] * y
                        y = coefs[EY, k] * y + coefs[DY, k] * (hx[k] - c * y) + ny
                nx = _slow_noise(k10, k11, step, lev1, k, coefs[EX_F, k], coefs[SX_F, k])
                X[k] = coefs[EX, k] * X[k] + coefs[DPHI, k] * fx[k] + coefs[B1, k] * zacc + nx
                Y[k] = y
            if not (_finite(X) and _finite(Y)):
                status[s] = n + 1
                while r < outX.shape[0]:
                    outX[r, s, :] = np.nan
                    if record_y:
                        outY[r, s, :] = np.nan
                    r += 1
                break
            if (n + 1) % record_every == 0:
                outX[r, s, :] = X
                if record_y:
                    outY[r, s, :] = Y
                r += 1


@nb.njit(parallel=True, cache=True)
def linear_kernel(x0, y0, lin, n_steps, n_micro, step0, lev1, lev2, keys1, keys2,
                  record_every, outX, outY, record_y, status):
    """Exact joint transition of ``(X_k, Y_k)`` for linear models.

    Each macro step adds the W1 and W2 convolutions, built piece by piece
    through the exact recursion ``acc = e^{A h_f} acc + L z``.
    """
    n_samples = keys1.shape[0]
    m = x0.shape[0]
    n1 = 1 << lev1
    n2 = n_micro << lev2
    for s in nb.prange(n_samples):
        X = x0.copy()
        Y = y0.copy()
        k10 = keys1[s, 0]
        k11 = keys1[s, 1]
        k20 = keys2[s, 0]
        k21 = keys2[s, 1]
        outX[0, s, :] = X
        if record_y:
            outY[0, s, :] = Y
        status[s] = 0
        r = 1
        for n in range(n_steps):
            step = step0 + n
            for k in range(m):
                ax = 0.0
                ay = 0.0
                for i in range(n1):
                    z0, z1 = normal_pair(k10, k11, step * n1 + i, lane(k, 0))
                    nx = lin[LF1, k] * ax + lin[LF1 + 1, k] * ay + lin[LP1, k] * z0
                    ay = lin[LF1 + 2, k] * ax + lin[LF1 + 3, k] * ay + lin[LP1 + 1, k] * z0 + lin[LP1 + 2, k] * z1
                    ax = nx
                bx = 0.0
                by = 0.0
                for i in range(n2):
                    z0, z1 = normal_pair(k20, k21, step * n2 + i, lane(k, 0))
                    nx = lin[LF2, k] * bx + lin[LF2 + 1, k] * by + lin[LP2 + 1, k] * z0 + lin[LP2 + 2, k] * z1
                    by = lin[LF2 + 2, k] * bx + lin[LF2 + 3, k] * by + lin[LP2, k] * z0
                    bx = nx
                x = X[k]
                y = Y[k]
                X[k] = lin[LE, k] * x + lin[LE + 1, k] * y + ax + bx
                Y[k] = lin[LE + 2, k] * x + lin[LE + 3, k] * y + ay + by
            if not (_finite(X) and _finite(Y)):
                status[s] = n + 1
                while r < outX.shape[0]:
                    outX[r, s, :] = np.nan
                    if record_y:
                        outY[r, s, :] = np.nan
                    r += 1
                break
            if (n + 1) % record_every == 0:
                outX[r, s, :] = X
                if record_y:
                    outY[r, s, :] = Y
                r += 1


@nb.njit(parallel=True, cache=True)
def averaged_kernel(x0, coefs, f1k, f1c, f1s, hk, hc, hs,
                    n_steps, step0, lev1, keys1, record_every, outX, status):
    n_samples = keys1.shape[0]
    m = x0.shape[0]
    for s in nb.prange(n_samples):
        X = x0.copy()
        fx = np.empty(m)
        hx = np.empty(m)
        k10 = keys1[s, 0]
        k11 = keys1[s, 1]
        outX[0, s, :] = X
        status[s] = 0
        r = 1
        for n in range(n_steps):
            step = step0 + n
            eval_xmap(f1k, f1c, f1s, X, fx)
            eval_xmap(hk, hc, hs, X, hx)
            for k in range(m):
                fbar = fx[k] + coefs[B1, k] * (hx[k] / coefs[RATE, k])
                nx = _slow_noise(k10, k11, step, lev1, k, coefs[EX_F, k], coefs[SX_F, k])
                X[k] = coefs[EX, k] * X[k] + coefs[DPHI, k] * fbar + nx
            if not _finite(X):
                status[s] = n + 1
                while r < outX.shape[0]:
                    outX[r, s, :] = np.nan
                    r += 1
                break
            if (n + 1) % record_every == 0:
                outX[r, s, :] = X
                r += 1


@nb.njit(parallel=True, cache=True)
def frozen_kernel(y_init, hx, coefs, c, n_steps, step0, scheme, lev2, keys2,
                  record_idx, outY, outI, status):
    """Frozen fast equation with the slow variable held fixed.

    ``outI`` receives the running time integral of Y at the record indices.
    ``record_idx`` must be sorted; index 0 records the initial state.
    """
    n_rep = keys2.shape[0]
    m = y_init.shape[1]
    n_rec = record_idx.shape[0]
    for s in nb.prange(n_rep):
        Y = y_init[s].copy()
        I = np.zeros(m)
        k20 = keys2[s, 0]
        k21 = keys2[s, 1]
        status[s] = 0
        r = 0
        while r < n_rec and record_idx[r] == 0:
            outY[r, s, :] = Y
            outI[r, s, :] = I
            r += 1
        for n in range(n_steps):
            g = step0 + n
            for k in range(m):
                y = Y[k]
                if scheme == EXACT_OU:
                    mu = hx[k] / coefs[RATE, k]
                    ny, nz = _fast_noise_pair(k20, k21, g, lev2, k, coefs[EY_F, k], coefs[K_F, k],
                                              coefs[EB_F, k], coefs[L11, k], coefs[L21, k], coefs[L22, k])
                    I[k] += mu * coefs[HB, k] + (y - mu) * coefs[KD, k] + nz
                    y = mu + (y - mu) * coefs[EY, k] + ny
                else:
                    ny = _fast_noise_single(k20, k21, g, lev2, k, coefs[EY_F, k], coefs[L11, k])
                    I[k] += coefs[HB, k] * y
                    y = coefs[EY, k] * y + coefs[DY, k] * (hx[k] - c * y) + ny
                Y[k] = y
            if not _finite(Y):
                status[s] = n + 1
                while r < n_rec:
                    outY[r, s, :] = np.nan
                    outI[r, s, :] = np.nan
                    r += 1
                break
            while r < n_rec and record_idx[r] == n + 1:
                outY[r, s, :] = Y
                outI[r, s, :] = I
                r += 1


@nb.njit(parallel=True, cache=True)
def fill_normals(keys, steps, m, out):
    """``out[s, i, k, :]`` = normal pair for sample s, step ``steps[i]``, mode k."""
    for s in nb.prange(keys.shape[0]):
        for i in range(steps.shape[0]):
            for k in range(m):
                z0, z1 = normal_pair(keys[s, 0], keys[s, 1], steps[i], lane(k, 0))
                out[s, i, k, 0] = z0
                out[s, i, k, 1] = z1
