"""Numba inner loops for the layer-normalized LSTM stack.

The recurrent loops are memory-bound at float64, so the elementwise
arithmetic is fused into compiled kernels. Transcendentals are the one
exception: without SVML numba evaluates exp/tanh through scalar libm,
which is ~10x slower than numpy's SIMD ufuncs, so the forward step is
split into two kernels with the gate nonlinearities applied by the caller
in between. The backward loop has no transcendentals and stays fully
compiled. No fastmath: results are deterministic and match the numpy
fallback to float rounding.
"""

import numpy as np
from numba import njit

LN_EPS = 1e-5


@njit(cache=True)
def fwd_step_pre(hcur, wh, gh, pre_t, a, VH_t, INVV_t):
    """a = pre_t + ln(hcur @ wh) * gh; stores vhat and 1/std."""
    b, nh = hcur.shape
    four_h = 4 * nh
    v = np.dot(hcur, wh)
    for i in range(b):
        mu = 0.0
        for j in range(four_h):
            mu += v[i, j]
        mu /= four_h
        var = 0.0
        for j in range(four_h):
            d = v[i, j] - mu
            var += d * d
        var /= four_h
        inv = 1.0 / np.sqrt(var + LN_EPS)
        INVV_t[i, 0] = inv
        for j in range(four_h):
            vh = (v[i, j] - mu) * inv
            VH_t[i, j] = vh
            a[i, j] = pre_t[i, j] + vh * gh[j]


@njit(cache=True)
def fwd_step_cell(sig_t, gg_t, gc, bc, hcur, ccur, C_t, CH_t, INVC_t, cbar):
    """Cell update and its layer norm; cbar gets the pre-tanh activation."""
    b, nh = ccur.shape
    for i in range(b):
        mu = 0.0
        for j in range(nh):
            cj = sig_t[i, nh + j] * ccur[i, j] + sig_t[i, j] * gg_t[i, j]
            C_t[i, j] = cj
            ccur[i, j] = cj
            mu += cj
        mu /= nh
        var = 0.0
        for j in range(nh):
            d = C_t[i, j] - mu
            var += d * d
        var /= nh
        inv = 1.0 / np.sqrt(var + LN_EPS)
        INVC_t[i, 0] = inv
        for j in range(nh):
            ch = (C_t[i, j] - mu) * inv
            CH_t[i, j] = ch
            cbar[i, j] = ch * gc[j] + bc[j]


@njit(cache=True)
def layer_bwd(gh_total, wh_t, ghp, gc, c0, C, VH, INVV, SIG, GG, CH, INVC, TC,
              DA, DCBAR, DV):
    s, b, nh = gh_total.shape
    four_h = 4 * nh
    dh_rec = np.zeros((b, nh))
    dc_rec = np.zeros((b, nh))
    dch = np.empty(nh)
    dvh = np.empty(four_h)
    for t in range(s - 1, -1, -1):
        for i in range(b):
            for j in range(nh):
                dh = gh_total[t, i, j] + dh_rec[i, j]
                tc = TC[t, i, j]
                og = SIG[t, i, 2 * nh + j]
                dcbar = dh * og * (1.0 - tc * tc)
                DCBAR[t, i, j] = dcbar
                dch[j] = dcbar * gc[j]
                DA[t, i, 2 * nh + j] = (dh * tc) * og * (1.0 - og)
            m1 = 0.0
            m2 = 0.0
            for j in range(nh):
                m1 += dch[j]
                m2 += dch[j] * CH[t, i, j]
            m1 /= nh
            m2 /= nh
            cinv = INVC[t, i, 0]
            for j in range(nh):
                dcj = cinv * (dch[j] - m1 - CH[t, i, j] * m2) + dc_rec[i, j]
                cp = C[t - 1, i, j] if t > 0 else c0[i, j]
                ig = SIG[t, i, j]
                fg = SIG[t, i, nh + j]
                gg = GG[t, i, j]
                DA[t, i, j] = (dcj * gg) * ig * (1.0 - ig)
                DA[t, i, nh + j] = (dcj * cp) * fg * (1.0 - fg)
                DA[t, i, 3 * nh + j] = (dcj * ig) * (1.0 - gg * gg)
                dc_rec[i, j] = dcj * fg
            m1 = 0.0
            m2 = 0.0
            for j in range(four_h):
                dv_j = DA[t, i, j] * ghp[j]
                dvh[j] = dv_j
                m1 += dv_j
                m2 += dv_j * VH[t, i, j]
            m1 /= four_h
            m2 /= four_h
            vinv = INVV[t, i, 0]
            for j in range(four_h):
                DV[t, i, j] = vinv * (dvh[j] - m1 - VH[t, i, j] * m2)
        np.dot(DV[t], wh_t, dh_rec)
