"""Numba-compiled hot loops.

Pure single-threaded scalar kernels (no fastmath), so results are
deterministic and bit-reproducible across runs. Everything here has a
plain-numpy counterpart in the test suite; these kernels only exist to
keep desk-scale training in the minutes range on one core.

ZOH identities used throughout: u = dt * a, a_bar = expm1(u) + 1,
b_bar = expm1(u)/u * dt * b with the series dt * (1 + u/2) * b below the
|u| threshold.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ZOH_EPS = 1e-8


@njit(cache=True)
def im2col_3x3(xp: np.ndarray, cols: np.ndarray) -> None:
    """Gather 3x3 patches of padded [b, c, h+2, w+2] into [b*h*w, c*9]."""
    b, cin, h2, w2 = xp.shape
    h, w = h2 - 2, w2 - 2
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                row = (bi * h + i) * w + j
                col = 0
                for c in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            cols[row, col] = xp[bi, c, i + di, j + dj]
                            col += 1


@njit(cache=True)
def scan_forward(
    dt_t: np.ndarray,  # [L, B, E]
    a: np.ndarray,  # [E, N]
    b_t: np.ndarray,  # [L, B, N]
    c_t: np.ndarray,  # [L, B, N]
    x_t: np.ndarray,  # [L, B, E]
    euler: bool,
    h_hist: np.ndarray,  # out [L, B, E, N]
    y_t: np.ndarray,  # out [L, B, E]
) -> int:
    """Selective recurrence, state history saved for backward.

    Returns -1, or the first step index at which the state went
    non-finite.
    """
    seq_len, batch, e_ch = dt_t.shape
    n_st = a.shape[1]
    for t in range(seq_len):
        ok = True
        for bi in range(batch):
            for e in range(e_ch):
                dtv = dt_t[t, bi, e]
                xv = x_t[t, bi, e]
                acc = 0.0
                for n in range(n_st):
                    u = dtv * a[e, n]
                    em = math.expm1(u)
                    a_bar = em + 1.0
                    if euler:
                        drive = dtv * b_t[t, bi, n] * xv
                    elif abs(u) >= ZOH_EPS:
                        drive = em / u * dtv * b_t[t, bi, n] * xv
                    else:
                        drive = dtv * (1.0 + 0.5 * u) * b_t[t, bi, n] * xv
                    hprev = h_hist[t - 1, bi, e, n] if t > 0 else 0.0
                    hv = a_bar * hprev + drive
                    if not math.isfinite(hv):
                        ok = False
                    h_hist[t, bi, e, n] = hv
                    acc += c_t[t, bi, n] * hv
                y_t[t, bi, e] = acc
        if not ok:
            return t
    return -1


@njit(cache=True)
def scan_backward(
    gy_t: np.ndarray,  # [L, B, E] upstream gradient of y
    dt_t: np.ndarray,
    a: np.ndarray,
    b_t: np.ndarray,
    c_t: np.ndarray,
    x_t: np.ndarray,
    euler: bool,
    h_hist: np.ndarray,  # [L, B, E, N] saved states
    g_dt: np.ndarray,  # out [L, B, E]
    g_a: np.ndarray,  # out [E, N]
    g_b: np.ndarray,  # out [L, B, N]
    g_c: np.ndarray,  # out [L, B, N]
    g_x: np.ndarray,  # out [L, B, E]
) -> None:
    """Reverse-time accumulation through the recurrence (BPTT).

    All output buffers must be zero-initialized.
    """
    seq_len, batch, e_ch = dt_t.shape
    n_st = a.shape[1]
    gh = np.zeros((batch, e_ch, n_st))
    for t in range(seq_len - 1, -1, -1):
        for bi in range(batch):
            for e in range(e_ch):
                dtv = dt_t[t, bi, e]
                xv = x_t[t, bi, e]
                gyv = gy_t[t, bi, e]
                gdt = 0.0
                gx = 0.0
                for n in range(n_st):
                    hv = h_hist[t, bi, e, n]
                    # output stage y_t = sum_n c_t h_t
                    ghv = gh[bi, e, n] + gyv * c_t[t, bi, n]
                    g_c[t, bi, n] += gyv * hv
                    # recurrence stage h_t = a_bar h_{t-1} + drive
                    u = dtv * a[e, n]
                    em = math.expm1(u)
                    a_bar = em + 1.0
                    hprev = h_hist[t - 1, bi, e, n] if t > 0 else 0.0
                    bxm = b_t[t, bi, n] * xv
                    g_abar = ghv * hprev
                    gu = g_abar * a_bar
                    if euler:
                        coeff = dtv  # drive = dt * b * x
                        # d drive/d dt = b * x
                        gdt += ghv * bxm
                    else:
                        if abs(u) >= ZOH_EPS:
                            ratio = em / u
                            dr = (u * a_bar - em) / (u * u)
                        else:
                            ratio = 1.0 + 0.5 * u
                            dr = 0.5
                        coeff = ratio * dtv
                        g_ratio = ghv * dtv * bxm
                        gu += g_ratio * dr
                        gdt += ghv * ratio * bxm
                    gdt += gu * a[e, n]
                    g_a[e, n] += gu * dtv
                    g_b[t, bi, n] += ghv * coeff * xv
                    gx += ghv * coeff * b_t[t, bi, n]
                    gh[bi, e, n] = ghv * a_bar
                g_dt[t, bi, e] = gdt
                g_x[t, bi, e] = gx


@njit(cache=True, inline="always")
def _sig(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    ev = math.exp(v)
    return ev / (1.0 + ev)


@njit(cache=True)
def sigmoid_forward(x: np.ndarray, out: np.ndarray) -> None:
    for i in range(x.size):
        out[i] = _sig(x[i])


@njit(cache=True)
def silu_forward(x: np.ndarray, out: np.ndarray) -> None:
    for i in range(x.size):
        out[i] = x[i] * _sig(x[i])


@njit(cache=True)
def silu_backward(x: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    # d silu = sigma(x) (1 + x (1 - sigma(x)))
    for i in range(x.size):
        v = x[i]
        s = _sig(v)
        out[i] = g[i] * (s + v * s * (1.0 - s))


@njit(cache=True)
def softplus_forward(x: np.ndarray, out: np.ndarray) -> None:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    for i in range(x.size):
        v = x[i]
        m = v if v > 0.0 else 0.0
        out[i] = m + math.log1p(math.exp(-abs(v)))


@njit(cache=True)
def sigmoid_scale(x: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    """out = g * sigmoid(x); the softplus backward."""
    for i in range(x.size):
        out[i] = g[i] * _sig(x[i])
