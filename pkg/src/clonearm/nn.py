"""Parameterized layers on top of the autodiff kernel.

The recurrent stack is implemented as a single fused tape op with a
hand-rolled BPTT backward: the composed-op version spends most of its time
in Python bookkeeping, and the training loops here live or die on CPU
throughput. The fused gradient is cross-checked against finite differences
and against a composed-op reference in the test suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor

try:
    from . import _lstm_kernels as _nb
except ImportError:  # numba unavailable: numpy fallbacks below
    _nb = None

LN_EPS = 1e-5


class Layer:
    def params(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []


class Dense(Layer):
    def __init__(self, name: str, din: int, dout: int, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.w = ad.parameter(w, f"{name}.w")
        self.b = ad.parameter(b, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class Conv(Layer):
    def __init__(self, name, w, b=None, stride=2, pad=1, transpose=False):
        self.name = name
        self.w = ad.parameter(w, f"{name}.w")
        self.b = ad.parameter(b, f"{name}.b") if b is not None else None
        self.stride = stride
        self.pad = pad
        self.transpose = transpose

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            out = ad.conv2d_transpose(x, self.w, self.stride, self.pad)
        else:
            out = ad.conv2d(x, self.w, self.stride, self.pad)
        if self.b is not None:
            out = ad.bias_add(out, self.b)
        return out

    def params(self):
        ps = [(self.w.name, self.w)]
        if self.b is not None:
            ps.append((self.b.name, self.b))
        return ps


class BatchNorm(Layer):
    def __init__(self, name: str, c: int, gamma: np.ndarray, beta: np.ndarray):
        self.name = name
        self.gamma = ad.parameter(gamma, f"{name}.gamma")
        self.beta = ad.parameter(beta, f"{name}.beta")
        self.running_mean = np.zeros(c, dtype=DTYPE)
        self.running_var = np.ones(c, dtype=DTYPE)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, train
        )

    def params(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]


# ---------------------------------------------------------------------------
# layer-normalized LSTM stack with input skip connections


def _ln_rows(x: np.ndarray, inplace: bool = False):
    """Normalization over the last axis; returns (xhat, inv_std).

    Row sums go through 2-D matvec products: at these shapes that is
    several times faster than ndarray.mean/var. With inplace=True the
    input buffer is overwritten by xhat.
    """
    n = x.shape[-1]
    x2 = x.reshape(-1, n)
    ones = np.ones(n)
    mu = (x2 @ ones)[:, None] * (1.0 / n)
    if inplace:
        x2 -= mu
        xc = x2
    else:
        xc = x2 - mu
    var = ((xc * xc) @ ones)[:, None] * (1.0 / n)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xc *= inv
    return xc.reshape(x.shape), inv.reshape(x.shape[:-1] + (1,))


def _ln_rows_bwd(dy: np.ndarray, yhat: np.ndarray, inv: np.ndarray,
                 inplace: bool = False) -> np.ndarray:
    n = dy.shape[-1]
    dy2 = dy.reshape(-1, n)
    yh2 = yhat.reshape(-1, n)
    ones = np.ones(n)
    m1 = (dy2 @ ones)[:, None] * (1.0 / n)
    m2 = ((dy2 * yh2) @ ones)[:, None] * (1.0 / n)
    out = dy2 if inplace else dy2.copy()
    out -= m1
    m2 *= -1.0
    out += yh2 * m2
    out *= inv.reshape(-1, 1)
    return out.reshape(dy.shape)


def _rowsum_to_vec(x2: np.ndarray) -> np.ndarray:
    """Sum a 2-D array over rows via gemv (fast path for reductions)."""
    return np.ones(x2.shape[0]) @ x2


def _cell_fwd(wt: dict, xcat, h_prev, c_prev):
    """One LN-LSTM sub-step. wt holds raw ndarrays for one layer.

    Gate layout in the 4h pre-activation is (input, forget, output | cell)
    so the three sigmoids share one exp call.
    """
    h = h_prev.shape[-1]
    u = xcat @ wt["wx"]
    v = h_prev @ wt["wh"]
    uh, inv_u = _ln_rows(u)
    vh, inv_v = _ln_rows(v)
    a = uh * wt["gx"]
    a += vh * wt["gh"]
    a += wt["b"]
    sig = 1.0 / (1.0 + np.exp(-a[:, : 3 * h]))
    ig = sig[:, :h]
    fg = sig[:, h : 2 * h]
    og = sig[:, 2 * h :]
    gg = np.tanh(a[:, 3 * h :])
    c = fg * c_prev + ig * gg
    ch, inv_c = _ln_rows(c)
    tc = np.tanh(ch * wt["gc"] + wt["bc"])
    hout = og * tc
    aux = (xcat, uh, inv_u, vh, inv_v, ig, fg, gg, og, c_prev, ch, inv_c, tc)
    return hout, c, aux


class LnLstmStack(Layer):
    """3-layer layer-normalized LSTM; the sub-step input is skip-connected
    to every layer, and all hidden states are exposed (for concatenation).
    """

    PER_LAYER = ("wx", "wh", "gx", "gh", "b", "gc", "bc")

    def __init__(self, name: str, din: int, hidden: int, layers: int, rng: np.random.Generator,
                 init_lo: float = -0.08, init_hi: float = 0.08):
        self.name = name
        self.din = din
        self.hidden = hidden
        self.layers = layers
        self.wts: list[dict[str, Tensor]] = []
        for l in range(layers):
            d_in = din + (hidden if l > 0 else 0)
            wt = {
                "wx": ad.parameter(rng.uniform(init_lo, init_hi, (d_in, 4 * hidden)),
                                   f"{name}.l{l}.wx"),
                "wh": ad.parameter(rng.uniform(init_lo, init_hi, (hidden, 4 * hidden)),
                                   f"{name}.l{l}.wh"),
                "gx": ad.parameter(np.ones(4 * hidden), f"{name}.l{l}.gx"),
                "gh": ad.parameter(np.ones(4 * hidden), f"{name}.l{l}.gh"),
                "b": ad.parameter(rng.uniform(init_lo, init_hi, 4 * hidden), f"{name}.l{l}.b"),
                "gc": ad.parameter(np.ones(hidden), f"{name}.l{l}.gc"),
                "bc": ad.parameter(np.zeros(hidden), f"{name}.l{l}.bc"),
            }
            self.wts.append(wt)

    def params(self):
        out = []
        for wt in self.wts:
            for k in self.PER_LAYER:
                t = wt[k]
                out.append((t.name, t))
        return out

    def zero_state(self, batch: int):
        return (
            np.zeros((self.layers, batch, self.hidden), dtype=DTYPE),
            np.zeros((self.layers, batch, self.hidden), dtype=DTYPE),
        )

    def _np_wts(self):
        return [{k: wt[k].data for k in self.PER_LAYER} for wt in self.wts]

    def step(self, x: np.ndarray, state):
        """Inference sub-step (no tape). x: (B, din). Returns (hcat, state)."""
        h0, c0 = state
        wts = self._np_wts()
        hs, cs, outs = [], [], []
        below = None
        for l in range(self.layers):
            xcat = x if l == 0 else np.concatenate([x, below], axis=-1)
            hout, c, _ = _cell_fwd(wts[l], xcat, h0[l], c0[l])
            below = hout
            hs.append(hout)
            cs.append(c)
            outs.append(hout)
        return np.concatenate(outs, axis=-1), (np.stack(hs), np.stack(cs))

    def sequence(self, inp: Tensor, state=None) -> Tensor:
        """Fused taped forward over a whole sub-step sequence.

        inp: (B, S, din) -> (B, S, layers*hidden). Gradients reach inp and
        every stack parameter via hand-rolled BPTT.

        Execution is layer-major: with the whole input sequence known
        (teacher forcing), each layer's input projection and its layer
        norm batch over all sub-steps in one shot, leaving only the
        recurrent path in the sequential loop.
        """
        b, s, din = inp.shape
        if din != self.din:
            raise ad.ShapeError(f"lstm input {inp.shape}, expected last dim {self.din}")
        nl, nh = self.layers, self.hidden
        if state is None:
            state = self.zero_state(b)
        h0, c0 = state
        wts = self._np_wts()

        xs = np.ascontiguousarray(inp.data.transpose(1, 0, 2))  # (S,B,din)
        out = np.empty((b, s, nl * nh), dtype=DTYPE)
        saved = []
        below = None
        for l in range(nl):
            wt = wts[l]
            d = din + (nh if l > 0 else 0)
            xcat = xs if l == 0 else np.concatenate([xs, below], axis=-1)
            u = (xcat.reshape(s * b, d) @ wt["wx"]).reshape(s, b, 4 * nh)
            uh, inv_u = _ln_rows(u, inplace=True)
            pre = uh * wt["gx"] + wt["b"]
            lay = _layer_fwd_loop(pre, wt, h0[l], c0[l])
            below = lay["h"]
            out[:, :, l * nh : (l + 1) * nh] = lay["h"].transpose(1, 0, 2)
            lay["xcat"] = xcat
            lay["uh"] = uh
            lay["inv_u"] = inv_u
            saved.append(lay)

        param_list = [self.wts[l][k] for l in range(nl) for k in self.PER_LAYER]

        def bwd(g):
            dwts = []
            dinp = np.zeros((s, b, din), dtype=DTYPE)
            g_step = np.ascontiguousarray(g.transpose(1, 0, 2))  # (S,B,nl*nh)
            dh_above = None
            for l in range(nl - 1, -1, -1):
                wt = wts[l]
                lay = saved[l]
                gh_total = g_step[:, :, l * nh : (l + 1) * nh]
                if dh_above is not None:
                    gh_total = gh_total + dh_above
                da, dcbar, dv = _layer_bwd_loop(gh_total, lay, wt, h0[l], c0[l])
                # batched input-path and parameter gradients
                du = _ln_rows_bwd(da * wt["gx"], lay["uh"], lay["inv_u"],
                                  inplace=True)
                d = din + (nh if l > 0 else 0)
                du2 = du.reshape(s * b, 4 * nh)
                dwx = lay["xcat"].reshape(s * b, d).T @ du2
                dxcat = (du2 @ wt["wx"].T).reshape(s, b, d)
                h_prev = np.concatenate([h0[l][None], lay["h"][:-1]], axis=0)
                dv2 = dv.reshape(s * b, 4 * nh)
                dwh = h_prev.reshape(s * b, nh).T @ dv2
                dw = {
                    "wx": dwx,
                    "wh": dwh,
                    "gx": _rowsum_to_vec((da * lay["uh"]).reshape(s * b, -1)),
                    "gh": _rowsum_to_vec((da * lay["vh"]).reshape(s * b, -1)),
                    "b": _rowsum_to_vec(da.reshape(s * b, -1)),
                    "gc": _rowsum_to_vec((dcbar * lay["ch"]).reshape(s * b, -1)),
                    "bc": _rowsum_to_vec(dcbar.reshape(s * b, -1)),
                }
                dwts.append(dw)
                dinp += dxcat[:, :, :din]
                dh_above = dxcat[:, :, din:] if l > 0 else None
            dwts.reverse()
            grads = [np.ascontiguousarray(dinp.transpose(1, 0, 2))]
            for l in range(nl):
                for k in self.PER_LAYER:
                    grads.append(dwts[l][k])
            return tuple(grads)

        return ad._record(out, tuple([inp] + param_list), bwd, "ln_lstm_stack")


def _alloc_fwd(s, b, nh):
    return {
        "h": np.empty((s, b, nh), dtype=DTYPE),
        "c": np.empty((s, b, nh), dtype=DTYPE),
        "vh": np.empty((s, b, 4 * nh), dtype=DTYPE),
        "inv_v": np.empty((s, b, 1), dtype=DTYPE),
        "sig": np.empty((s, b, 3 * nh), dtype=DTYPE),
        "gg": np.empty((s, b, nh), dtype=DTYPE),
        "ch": np.empty((s, b, nh), dtype=DTYPE),
        "inv_c": np.empty((s, b, 1), dtype=DTYPE),
        "tc": np.empty((s, b, nh), dtype=DTYPE),
    }


def _layer_fwd_loop(pre: np.ndarray, wt: dict, h0: np.ndarray, c0: np.ndarray) -> dict:
    """Sequential part of one LSTM layer: recurrent projection, gates, cell.

    pre: (S,B,4H) precomputed ln(x @ wx)*gx + b. Returns the per-step
    arrays the backward pass needs. Scratch buffers are reused across
    steps; this loop is memory-bound, so allocations matter.
    """
    s, b, four_h = pre.shape
    nh = four_h // 4
    lay = _alloc_fwd(s, b, nh)
    H, C, VH, INVV = lay["h"], lay["c"], lay["vh"], lay["inv_v"]
    SIG, GG, CH, INVC, TC = lay["sig"], lay["gg"], lay["ch"], lay["inv_c"], lay["tc"]
    wh, gh, gc, bc = wt["wh"], wt["gh"], wt["gc"], wt["bc"]
    if _nb is not None:
        hcur = h0.copy()
        ccur = c0.copy()
        a = np.empty((b, four_h), dtype=DTYPE)
        cbar = np.empty((b, nh), dtype=DTYPE)
        for t in range(s):
            _nb.fwd_step_pre(hcur, wh, gh, pre[t], a, VH[t], INVV[t])
            sig = SIG[t]
            np.negative(a[:, : 3 * nh], out=sig)
            np.exp(sig, out=sig)
            sig += 1.0
            np.divide(1.0, sig, out=sig)
            gg = GG[t]
            np.tanh(a[:, 3 * nh :], out=gg)
            _nb.fwd_step_cell(sig, gg, gc, bc, hcur, ccur, C[t], CH[t], INVC[t], cbar)
            tc = TC[t]
            np.tanh(cbar, out=tc)
            np.multiply(sig[:, 2 * nh :], tc, out=hcur)
            H[t] = hcur
        return lay
    ones4 = np.ones(four_h)
    onesh = np.ones(nh)
    r4 = 1.0 / four_h
    rh = 1.0 / nh
    hcur = h0.copy()
    ccur = c0.copy()
    v = np.empty((b, four_h), dtype=DTYPE)
    sq = np.empty((b, four_h), dtype=DTYPE)
    a = np.empty((b, four_h), dtype=DTYPE)
    mu = np.empty(b, dtype=DTYPE)
    inv = np.empty(b, dtype=DTYPE)
    cbuf = np.empty((b, nh), dtype=DTYPE)
    tmph = np.empty((b, nh), dtype=DTYPE)
    for t in range(s):
        np.dot(hcur, wh, out=v)
        np.dot(v, ones4, out=mu)
        mu *= r4
        v -= mu[:, None]
        np.multiply(v, v, out=sq)
        np.dot(sq, ones4, out=inv)
        inv *= r4
        inv += LN_EPS
        np.sqrt(inv, out=inv)
        np.divide(1.0, inv, out=inv)
        v *= inv[:, None]
        VH[t] = v
        INVV[t, :, 0] = inv
        np.multiply(v, gh, out=a)
        a += pre[t]
        sig = SIG[t]
        np.negative(a[:, : 3 * nh], out=sig)
        np.exp(sig, out=sig)
        sig += 1.0
        np.divide(1.0, sig, out=sig)
        gg = GG[t]
        np.tanh(a[:, 3 * nh :], out=gg)
        np.multiply(sig[:, nh : 2 * nh], ccur, out=cbuf)
        np.multiply(sig[:, :nh], gg, out=tmph)
        cbuf += tmph
        C[t] = cbuf
        ccur[:] = cbuf
        np.dot(cbuf, onesh, out=mu)
        mu *= rh
        cbuf -= mu[:, None]
        np.multiply(cbuf, cbuf, out=tmph)
        np.dot(tmph, onesh, out=inv)
        inv *= rh
        inv += LN_EPS
        np.sqrt(inv, out=inv)
        np.divide(1.0, inv, out=inv)
        cbuf *= inv[:, None]
        CH[t] = cbuf
        INVC[t, :, 0] = inv
        tc = TC[t]
        np.multiply(cbuf, gc, out=tmph)
        tmph += bc
        np.tanh(tmph, out=tc)
        np.multiply(sig[:, 2 * nh :], tc, out=hcur)
        H[t] = hcur
    return lay


def _layer_bwd_loop(gh_total: np.ndarray, lay: dict, wt: dict,
                    h0: np.ndarray, c0: np.ndarray):
    """Sequential BPTT for one layer. Returns (da, dcbar, dv), each (S,B,*)."""
    s, b, nh = gh_total.shape
    four_h = 4 * nh
    wh, ghp, gc = wt["wh"], wt["gh"], wt["gc"]
    wh_t = np.ascontiguousarray(wh.T)
    DA = np.empty((s, b, four_h), dtype=DTYPE)
    DCBAR = np.empty((s, b, nh), dtype=DTYPE)
    DV = np.empty((s, b, four_h), dtype=DTYPE)
    SIG, GG, CH, INVC, TC, C = (
        lay["sig"], lay["gg"], lay["ch"], lay["inv_c"], lay["tc"], lay["c"],
    )
    VH, INVV = lay["vh"], lay["inv_v"]
    if _nb is not None:
        _nb.layer_bwd(gh_total, wh_t, ghp, gc, c0, C, VH, INVV, SIG, GG, CH,
                      INVC, TC, DA, DCBAR, DV)
        return DA, DCBAR, DV
    ones4 = np.ones(four_h)
    onesh = np.ones(nh)
    r4 = 1.0 / four_h
    rh = 1.0 / nh
    dh_rec = np.zeros((b, nh), dtype=DTYPE)
    dc_rec = np.zeros((b, nh), dtype=DTYPE)
    dh = np.empty((b, nh), dtype=DTYPE)
    dch = np.empty((b, nh), dtype=DTYPE)
    dc = np.empty((b, nh), dtype=DTYPE)
    tmph = np.empty((b, nh), dtype=DTYPE)
    dvh = np.empty((b, four_h), dtype=DTYPE)
    tmp4 = np.empty((b, four_h), dtype=DTYPE)
    m1 = np.empty(b, dtype=DTYPE)
    m2 = np.empty(b, dtype=DTYPE)
    for t in range(s - 1, -1, -1):
        sig = SIG[t]
        ig = sig[:, :nh]
        fg = sig[:, nh : 2 * nh]
        og = sig[:, 2 * nh :]
        gg = GG[t]
        tc = TC[t]
        ch = CH[t]
        vh = VH[t]
        np.add(gh_total[t], dh_rec, out=dh)
        da = DA[t]
        dcbar = DCBAR[t]
        # output gate: dh*tc*og*(1-og)
        d_o = da[:, 2 * nh : 3 * nh]
        np.multiply(dh, tc, out=d_o)
        d_o *= og
        np.subtract(1.0, og, out=tmph)
        d_o *= tmph
        # dcbar = dh*og*(1-tc^2)
        np.multiply(tc, tc, out=tmph)
        np.subtract(1.0, tmph, out=tmph)
        tmph *= og
        np.multiply(dh, tmph, out=dcbar)
        # dc = ln_bwd(dcbar*gc) + dc_rec
        np.multiply(dcbar, gc, out=dch)
        np.dot(dch, onesh, out=m1)
        m1 *= rh
        np.multiply(dch, ch, out=tmph)
        np.dot(tmph, onesh, out=m2)
        m2 *= rh
        np.multiply(ch, m2[:, None], out=dc)
        np.subtract(dch, dc, out=dc)
        dc -= m1[:, None]
        dc *= INVC[t]
        dc += dc_rec
        c_prev = C[t - 1] if t > 0 else c0
        d_i = da[:, :nh]
        np.multiply(dc, gg, out=d_i)
        d_i *= ig
        np.subtract(1.0, ig, out=tmph)
        d_i *= tmph
        d_f = da[:, nh : 2 * nh]
        np.multiply(dc, c_prev, out=d_f)
        d_f *= fg
        np.subtract(1.0, fg, out=tmph)
        d_f *= tmph
        d_g = da[:, 3 * nh :]
        np.multiply(dc, ig, out=d_g)
        np.multiply(gg, gg, out=tmph)
        np.subtract(1.0, tmph, out=tmph)
        d_g *= tmph
        np.multiply(dc, fg, out=dc_rec)
        # dv = ln_bwd(da*ghp)
        np.multiply(da, ghp, out=dvh)
        np.dot(dvh, ones4, out=m1)
        m1 *= r4
        np.multiply(dvh, vh, out=tmp4)
        np.dot(tmp4, ones4, out=m2)
        m2 *= r4
        dv = DV[t]
        np.multiply(vh, m2[:, None], out=dv)
        np.subtract(dvh, dv, out=dv)
        dv -= m1[:, None]
        dv *= INVV[t]
        np.dot(dv, wh_t, out=dh_rec)
    return DA, DCBAR, DV
