import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clonearm import autodiff as ad

from helpers import fd_check, rel_err


def taped(fn):
    """Run fn under a fresh tape, backward from its scalar output."""
    with ad.Tape() as tape:
        loss = fn()
    grads = ad.backward(tape, loss)
    return loss.item(), grads


# --- tape semantics ---------------------------------------------------------


def test_backward_hand_derived():
    # loss = mse(w*x, y), w=2, x=3, y=0 -> dloss/dw = 2*(6)*3 = 36
    w = ad.parameter(np.array(2.0))
    x = ad.constant(np.array(3.0))
    y = ad.constant(np.array(0.0))
    with ad.Tape() as tape:
        loss = ad.mse(ad.mul(w, x), y)
    grads = ad.backward(tape, loss)
    assert loss.item() == pytest.approx(36.0)
    assert grads[w] == pytest.approx(36.0)


def test_unused_parameter_gets_zero_grad():
    w = ad.parameter(np.array(2.0))
    unused = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        tape.watch(unused)
        loss = ad.mul(w, w)
    grads = ad.backward(tape, loss)
    assert np.all(grads[unused] == 0.0)
    assert np.all(unused.grad == 0.0)


def test_grads_accumulate_additively():
    w = ad.parameter(np.array(1.5))
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.mul(w, w)
        ad.backward(tape, loss)
    assert w.grad == pytest.approx(2 * 2 * 1.5)


def test_tape_consumed_error():
    w = ad.parameter(np.array(1.0))
    with ad.Tape() as tape:
        loss = ad.mul(w, w)
    ad.backward(tape, loss)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, loss)


def test_cleared_tape_holds_zero_gradients():
    w = ad.parameter(np.array(1.0))
    with ad.Tape() as tape:
        loss = ad.mul(w, w)
    ad.backward(tape, loss)
    tape.clear()
    assert w.grad is None
    assert tape.nodes == [] and not tape.consumed


def test_non_scalar_loss_rejected():
    w = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        out = ad.mul(w, w)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, out)


def test_diamond_graph_accumulates():
    w = ad.parameter(np.array(3.0))
    with ad.Tape() as tape:
        a = ad.mul(w, w)      # w^2
        b = ad.add(a, w)      # w^2 + w
        loss = ad.mul(b, ad.constant(2.0))
    grads = ad.backward(tape, loss)
    assert grads[w] == pytest.approx(2 * (2 * 3.0 + 1))


def test_non_finite_output_raises():
    x = ad.constant(np.array([-1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(x)


# --- clip-gradients ---------------------------------------------------------


def test_clip_examples():
    w = ad.parameter(np.zeros(3))
    g = {w: np.array([-3.0, 0.5, 2.0])}
    out = ad.clip_gradients(g, -1.0, 1.0)
    assert np.allclose(out[w], [-1.0, 0.5, 1.0])
    z = {w: np.zeros(4)}
    assert np.all(ad.clip_gradients(z, -1.0, 1.0)[w] == 0.0)


def test_clip_invalid_range():
    with pytest.raises(ValueError):
        ad.clip_gradients({}, 1.0, -1.0)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_clip_matches_naive_loop(vals):
    w = ad.parameter(np.zeros(len(vals)))
    clipped = ad.clip_gradients({w: np.array(vals)}, -1.0, 1.0)[w]
    naive = [min(max(v, -1.0), 1.0) for v in vals]
    assert np.allclose(clipped, naive)
    assert clipped.sum() == pytest.approx(sum(naive))


# --- trivial op examples ----------------------------------------------------


def test_softmax_symmetry():
    out = ad.softmax(ad.constant(np.array([1.0, 1.0, 1.0])))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_gaussian_sample_zero_variance_limit():
    rng = np.random.default_rng(0)
    out = ad.gaussian_sample(
        ad.constant(np.zeros(8)), ad.constant(np.full(8, -40.0)), rng
    )
    assert np.max(np.abs(out.data)) < 1e-8


def test_determinism_same_seed_bitwise():
    a = ad.gaussian_sample(ad.constant(np.zeros(16)), ad.constant(np.zeros(16)),
                           np.random.default_rng(7))
    b = ad.gaussian_sample(ad.constant(np.zeros(16)), ad.constant(np.zeros(16)),
                           np.random.default_rng(7))
    assert np.array_equal(a.data, b.data)
    da = ad.dropout(ad.constant(np.ones(64)), 0.5, np.random.default_rng(3))
    db = ad.dropout(ad.constant(np.ones(64)), 0.5, np.random.default_rng(3))
    assert np.array_equal(da.data, db.data)


def test_dropout_eval_is_identity():
    x = ad.constant(np.random.default_rng(0).normal(size=32))
    out = ad.dropout(x, 0.5, np.random.default_rng(1), train=False)
    assert np.array_equal(out.data, x.data)


def test_batch_norm_eval_uses_frozen_stats():
    x = ad.constant(np.random.default_rng(0).normal(size=(8, 4)))
    gamma = ad.parameter(np.ones(4))
    beta = ad.parameter(np.zeros(4))
    rm = np.array([1.0, 2.0, 3.0, 4.0])
    rv = np.ones(4)
    out = ad.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), train=False)
    expected = (x.data - rm) / np.sqrt(rv + 1e-5)
    assert np.allclose(out.data, expected)


# --- finite-difference checks per op ---------------------------------------


def _fd_case(make):
    params, fn = make()
    err = fd_check(lambda: taped(fn), params)
    assert err < 1e-4, f"fd mismatch: {err}"


def test_fd_matmul_bias():
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.normal(size=(4, 3)))
    b = ad.parameter(rng.normal(size=3))
    x = ad.constant(rng.normal(size=(5, 4)))

    def fn():
        return ad.mean_(ad.tanh(ad.bias_add(ad.matmul(x, w), b)))

    _fd_case(lambda: ([w, b], fn))


def test_fd_conv2d():
    # 1x4x4 input, 3x3 kernel, per the stated oracle
    rng = np.random.default_rng(2)
    x = ad.parameter(rng.normal(size=(1, 4, 4, 1)))
    w = ad.parameter(rng.normal(size=(3, 3, 1, 2)))

    def fn():
        return ad.mean_(ad.conv2d(x, w, stride=1, pad=1))

    params = [x, w]
    err = fd_check(lambda: taped(fn), params, max_elems=64)
    assert err < 1e-4


def test_fd_conv2d_strided():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(2, 6, 6, 3)))
    w = ad.parameter(rng.normal(size=(4, 4, 3, 5)))

    def fn():
        return ad.mean_(ad.sigmoid(ad.conv2d(x, w, stride=2, pad=1)))

    _fd_case(lambda: ([x, w], fn))


def test_fd_conv2d_transpose():
    rng = np.random.default_rng(4)
    x = ad.parameter(rng.normal(size=(2, 3, 3, 4)))
    w = ad.parameter(rng.normal(size=(4, 4, 4, 2)))

    def fn():
        return ad.mean_(ad.conv2d_transpose(x, w, stride=2, pad=1))

    _fd_case(lambda: ([x, w], fn))


def test_fd_batch_norm_train():
    rng = np.random.default_rng(5)
    x = ad.parameter(rng.normal(size=(6, 4)))
    gamma = ad.parameter(rng.normal(size=4) + 1.0)
    beta = ad.parameter(rng.normal(size=4))

    def fn():
        rm, rv = np.zeros(4), np.ones(4)
        return ad.mean_(ad.tanh(ad.batch_norm(x, gamma, beta, rm, rv, train=True)))

    _fd_case(lambda: ([x, gamma, beta], fn))


def test_fd_layer_norm():
    rng = np.random.default_rng(6)
    x = ad.parameter(rng.normal(size=(5, 8)))
    gain = ad.parameter(rng.normal(size=8) + 1.0)
    bias = ad.parameter(rng.normal(size=8))

    def fn():
        return ad.mean_(ad.sigmoid(ad.layer_norm(x, gain, bias)))

    _fd_case(lambda: ([x, gain, bias], fn))


def test_fd_softmax_logsumexp():
    rng = np.random.default_rng(7)
    x = ad.parameter(rng.normal(size=(4, 6)))

    def fn():
        s = ad.softmax(x)
        l = ad.logsumexp(ad.mul(x, ad.constant(0.7)))
        return ad.add(ad.mean_(ad.mul(s, s)), ad.mean_(l))

    _fd_case(lambda: ([x], fn))


def test_fd_elementwise_chain():
    rng = np.random.default_rng(8)
    x = ad.parameter(rng.uniform(0.1, 2.0, size=(3, 5)))

    def fn():
        a = ad.exp(ad.neg(x))
        b = ad.log(ad.add(a, ad.constant(1.0)))
        c = ad.leaky_relu(ad.sub(b, ad.constant(0.3)))
        d = ad.relu(ad.add(c, ad.constant(0.05)))
        return ad.mean_(ad.mul(d, d))

    _fd_case(lambda: ([x], fn))


def test_fd_clamp_concat_slice():
    rng = np.random.default_rng(9)
    x = ad.parameter(rng.normal(size=(4, 3)))
    y = ad.parameter(rng.normal(size=(4, 2)))

    def fn():
        c = ad.concat([x, y], axis=1)
        s = ad.slice_(c, (slice(None), slice(1, 4)))
        cl = ad.clamp(s, -0.5, 0.5)
        return ad.mean_(ad.mul(cl, cl))

    _fd_case(lambda: ([x, y], fn))


def test_fd_gaussian_sample_and_dropout():
    rng_master = np.random.default_rng(10)
    mean = ad.parameter(rng_master.normal(size=6))
    logvar = ad.parameter(rng_master.normal(size=6))

    def fn():
        z = ad.gaussian_sample(mean, logvar, np.random.default_rng(42))
        d = ad.dropout(z, 0.3, np.random.default_rng(43))
        return ad.mean_(ad.mul(d, d))

    _fd_case(lambda: ([mean, logvar], fn))


def test_fd_mse():
    rng = np.random.default_rng(11)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(3, 4)))

    def fn():
        return ad.mse(ad.tanh(a), ad.sigmoid(b))

    _fd_case(lambda: ([a, b], fn))


@st.composite
def small_arrays(draw):
    h = draw(st.integers(3, 6))
    w = draw(st.integers(3, 6))
    c = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31 - 1))
    return h, w, c, seed


@settings(max_examples=12, deadline=None)
@given(small_arrays())
def test_fd_conv_property(case):
    h, w, c, seed = case
    rng = np.random.default_rng(seed)
    oc = int(rng.integers(1, 4))
    k = int(rng.integers(2, 4))
    x = ad.parameter(rng.normal(size=(1, h, w, c)))
    ker = ad.parameter(rng.normal(size=(k, k, c, oc)))

    def fn():
        return ad.mean_(ad.conv2d(x, ker, stride=1, pad=1))

    err = fd_check(lambda: taped(fn), [x, ker], max_elems=12, seed=seed)
    assert err < 1e-4
