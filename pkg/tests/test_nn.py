import numpy as np
import pytest

from clonearm import autodiff as ad
from clonearm import nn

from helpers import fd_check


def composed_lstm_forward(stack: nn.LnLstmStack, inp: ad.Tensor):
    """Reference LN-LSTM built purely from primitive tape ops."""
    b, s, din = inp.shape
    nh = stack.hidden
    ones = ad.constant(np.ones(4 * nh))
    zeros = ad.constant(np.zeros(4 * nh))
    ones_h = ad.constant(np.ones(nh))
    zeros_h = ad.constant(np.zeros(nh))
    h = [ad.constant(np.zeros((b, nh))) for _ in range(stack.layers)]
    c = [ad.constant(np.zeros((b, nh))) for _ in range(stack.layers)]
    outs = []
    for t in range(s):
        xt = ad.slice_(inp, (slice(None), t))
        below = None
        per_layer = []
        for l in range(stack.layers):
            wt = stack.wts[l]
            xcat = xt if l == 0 else ad.concat([xt, below], axis=-1)
            uh = ad.layer_norm(ad.matmul(xcat, wt["wx"]), ones, zeros)
            vh = ad.layer_norm(ad.matmul(h[l], wt["wh"]), ones, zeros)
            a = ad.bias_add(
                ad.add(ad.channel_scale(uh, wt["gx"]), ad.channel_scale(vh, wt["gh"])),
                wt["b"],
            )
            ig = ad.sigmoid(ad.slice_(a, (slice(None), slice(0, nh))))
            fg = ad.sigmoid(ad.slice_(a, (slice(None), slice(nh, 2 * nh))))
            og = ad.sigmoid(ad.slice_(a, (slice(None), slice(2 * nh, 3 * nh))))
            gg = ad.tanh(ad.slice_(a, (slice(None), slice(3 * nh, 4 * nh))))
            cnew = ad.add(ad.mul(fg, c[l]), ad.mul(ig, gg))
            ch = ad.layer_norm(cnew, ones_h, zeros_h)
            tc = ad.tanh(ad.bias_add(ad.channel_scale(ch, wt["gc"]), wt["bc"]))
            hnew = ad.mul(og, tc)
            h[l], c[l] = hnew, cnew
            below = hnew
            per_layer.append(hnew)
        outs.append(ad.concat(per_layer, axis=-1))
    rows = [ad.reshape(o, (b, 1, stack.layers * nh)) for o in outs]
    return ad.concat(rows, axis=1)


def make_stack(din=5, hidden=6, layers=3, seed=0):
    return nn.LnLstmStack("lstm", din, hidden, layers, np.random.default_rng(seed))


def test_fused_matches_composed_forward():
    stack = make_stack()
    rng = np.random.default_rng(1)
    x = ad.constant(rng.normal(size=(2, 4, 5)))
    fused = stack.sequence(x)
    composed = composed_lstm_forward(stack, x)
    assert np.allclose(fused.data, composed.data, atol=1e-12)


def test_fused_matches_composed_gradients():
    stack = make_stack(din=4, hidden=5, layers=2, seed=2)
    rng = np.random.default_rng(3)
    xv = rng.normal(size=(2, 3, 4))
    tgt = ad.constant(rng.normal(size=(2, 3, 2 * 5)))

    def run(fn):
        x = ad.parameter(xv.copy())
        with ad.Tape() as tape:
            out = fn(x)
            loss = ad.mse(out, tgt)
        grads = ad.backward(tape, loss)
        return {t.name: g for t, g in grads.items()}, grads[x]

    g_fused, gx_fused = run(lambda x: stack.sequence(x))
    g_comp, gx_comp = run(lambda x: composed_lstm_forward(stack, x))
    assert np.allclose(gx_fused, gx_comp, atol=1e-10)
    for name, t in stack.params():
        assert np.allclose(g_fused[name], g_comp[name], atol=1e-10), name


def test_fused_finite_difference():
    stack = make_stack(din=3, hidden=4, layers=3, seed=4)
    rng = np.random.default_rng(5)
    x = ad.parameter(rng.normal(size=(2, 3, 3)))
    tgt = ad.constant(rng.normal(size=(2, 3, 12)))

    def build():
        with ad.Tape() as tape:
            loss = ad.mse(stack.sequence(x), tgt)
        return loss.item(), ad.backward(tape, loss)

    params = [x] + [t for _, t in stack.params()]
    err = fd_check(build, params, max_elems=10, seed=6)
    assert err < 1e-4


def test_step_matches_sequence():
    stack = make_stack(din=4, hidden=8, layers=3, seed=7)
    rng = np.random.default_rng(8)
    xs = rng.normal(size=(2, 6, 4))
    seq = stack.sequence(ad.constant(xs))
    state = stack.zero_state(2)
    for t in range(6):
        hcat, state = stack.step(xs[:, t], state)
        assert np.allclose(hcat, seq.data[:, t], atol=1e-12)


def test_dense_and_conv_param_names_unique():
    rng = np.random.default_rng(0)
    layers = [
        nn.Dense("d1", 4, 3, rng.normal(size=(4, 3)), np.zeros(3)),
        nn.Conv("c1", rng.normal(size=(4, 4, 3, 8))),
        nn.BatchNorm("b1", 8, np.ones(8), np.zeros(8)),
    ]
    names = [n for l in layers for n, _ in l.params()]
    assert len(names) == len(set(names))
