import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fundusfuse import tensor as T
from fundusfuse.tensor import (ConfigurationError, ContractError, DimensionError, Tape, Tensor,
                               grad_check)

from oracles import naive_conv


# ------------------------------------------------------------------ conv2d


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("algorithm", ["direct", "im2col", "auto"])
def test_conv_matches_naive_loop(rng, algorithm):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, algorithm=algorithm)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, naive_conv(x, w, 2, 1), atol=1e-5)


def test_depthwise_conv_matches_naive_loop(rng):
    x = rng.normal(size=(2, 6, 7, 7)).astype(np.float32)
    w = rng.normal(size=(6, 1, 3, 3)).astype(np.float32)
    for alg in ("direct", "im2col"):
        out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=6, algorithm=alg)
        np.testing.assert_allclose(out.data, naive_conv(x, w, 1, 1, groups=6), atol=1e-5)


def test_conv_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ConfigurationError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 7, 7))))
    with pytest.raises(ConfigurationError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), algorithm="fft")


def test_conv_paths_agree_on_gradients(rng):
    x = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    grads = []
    for alg in ("direct", "im2col"):
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.conv2d(xt, wt, stride=2, padding=1, groups=2, algorithm=alg) ** 2)
        tape.backward(loss)
        grads.append((xt.grad, wt.grad))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-4, atol=1e-4)
    np.testing.assert_allclose(grads[0][1], grads[1][1], rtol=1e-4, atol=1e-4)


@given(size=st.integers(1, 12), kernel=st.integers(1, 5), stride=st.integers(1, 3),
       padding=st.integers(0, 2))
def test_conv_output_size_floor(size, kernel, stride, padding):
    if size + 2 * padding < kernel:
        with pytest.raises(ConfigurationError):
            T.conv_output_size(size, kernel, stride, padding)
    else:
        assert T.conv_output_size(size, kernel, stride, padding) == (size + 2 * padding - kernel) // stride + 1


# ----------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data,
                               [1 / 6, 2 / 6, 3 / 6], rtol=1e-6)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=1)


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)


# ----------------------------------------------------------------- sigmoid


def test_sigmoid_examples():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    small = T.sigmoid(Tensor(-100.0)).data
    assert 0 <= small < 1e-6


@given(st.floats(-80, 80))
def test_sigmoid_symmetry(x):
    s = T.sigmoid(Tensor([x, -x])).data.astype(np.float64)
    assert abs(s.sum() - 1.0) <= 1e-7


# -------------------------------------------------------------- layer norm


def test_layer_norm_examples(rng):
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = T.layer_norm(Tensor([[1.0, 2.0, 3.0]]), one, zero, eps=0.0).data
    np.testing.assert_allclose(out, [[-1.2247449, 0.0, 1.2247449]], atol=1e-5)
    flat = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), one, zero, eps=1e-5).data
    np.testing.assert_array_equal(flat, 0.0)
    x = rng.normal(2.0, 3.0, size=(4, 8))
    y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_grads_accumulate_across_uses():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x + x * 2.0)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    _ = x * 2.0
    assert len(tape) == 0


def test_mlp_gradients_match_finite_differences(rng):
    w1 = Tensor(rng.normal(0, 0.5, (5, 8)), requires_grad=True)
    w2 = Tensor(rng.normal(0, 0.5, (8, 8)), requires_grad=True)
    w3 = Tensor(rng.normal(0, 0.5, (8, 1)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 5)))

    def loss(_):
        h = T.gelu(T.matmul(x, w1))
        h = T.silu(T.matmul(h, w2))
        return T.mean(T.sigmoid(T.matmul(h, w3)))

    for w in (w1, w2, w3):
        assert grad_check(loss, w) < 1e-3


# -------------------------------------------------------------- grad_check


def test_grad_check_sum_is_exact(rng):
    assert grad_check(lambda t: T.tsum(t), Tensor(rng.normal(size=(3, 4)))) == 0.0


def test_grad_check_sigmoid_at_zero():
    x = Tensor(np.zeros(5), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.sigmoid(x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 0.25)
    assert grad_check(lambda t: T.tsum(T.sigmoid(t)), Tensor(np.zeros(5))) < 1e-4


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        # forward is x^2, but the recorded backward claims 3x
        return T._make(np.sum(t.data ** 2), (t,), lambda g: (3 * g * t.data,))

    assert grad_check(bad, Tensor([1.0, 2.0])) > 0.1


@pytest.mark.parametrize("name,fn", [
    ("exp", lambda t: T.tsum(T.exp(t))),
    ("log", lambda t: T.tsum(T.log(T.clamp(t * t + 1.0, 1e-3, 1e3)))),
    ("relu", lambda t: T.tsum(T.relu(t) * t)),
    ("gelu", lambda t: T.tsum(T.gelu(t))),
    ("silu", lambda t: T.tsum(T.silu(t))),
    ("div", lambda t: T.tsum(T.div(t, t * t + 2.0))),
    ("power", lambda t: T.tsum(T.power(t * t + 1.0, 1.5))),
    ("max", lambda t: T.tsum(T.tmax(t, axis=1))),
    ("softmax", lambda t: T.tsum(T.softmax(t, axis=1) * T.Tensor(np.arange(12).reshape(3, 4)))),
    ("transpose", lambda t: T.tsum(T.matmul(t, T.transpose(t, (1, 0))))),
    ("concat", lambda t: T.tsum(T.concat([t, t * 2.0], axis=0) ** 2)),
    ("mean", lambda t: T.tsum(T.mean(t, axis=0) ** 2)),
])
def test_elementwise_gradients(rng, name, fn):
    x = Tensor(rng.normal(size=(3, 4)) + 0.05)
    assert grad_check(fn, x) < 1e-3, name


def test_batch_norm_and_layer_norm_gradients(rng):
    x = Tensor(rng.normal(size=(4, 3, 2, 2)))
    g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    c = Tensor(rng.normal(size=(4, 3, 2, 2)))
    f = lambda t: T.tsum(T.batch_norm(t, g, b)[0] * c)
    assert grad_check(f, x) < 1e-3
    y = Tensor(rng.normal(size=(3, 5)))
    gn, bn = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    d = Tensor(rng.normal(size=(3, 5)))
    assert grad_check(lambda t: T.tsum(T.layer_norm(t, gn, bn) * d), y) < 1e-3
    assert grad_check(lambda t: T.tsum(T.layer_norm(y, t, bn) * d), gn) < 1e-3


# ----------------------------------------------------------------- dropout


def test_dropout_scales_kept_units(rng):
    x = Tensor(np.ones((1000,)))
    y = T.dropout(x, 0.3, np.random.default_rng(0)).data
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1 / 0.7, rtol=1e-6)
    assert 0.6 < len(kept) / 1000 < 0.8
    assert T.dropout(x, 0.0, rng) is x


# ------------------------------------------------------------ serialisation


def test_tensor_roundtrip(tmp_path, rng):
    t = Tensor(rng.normal(size=(2, 3)))
    T.save_tensor(t, tmp_path / "w.bin", "w")
    back = T.load_tensor(tmp_path / "w.bin")
    np.testing.assert_array_equal(back.data, t.data)
    assert back.name == "w"
    state = {"a": t.data, "b": np.arange(4, dtype=np.float32)}
    index = T.save_tensors(state, tmp_path / "s.bin")
    loaded = T.load_tensors(index, tmp_path / "s.bin")
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])


def test_check_finite_names_layer():
    with pytest.raises(T.NonFiniteError, match="cnn.stem"):
        T.check_finite(Tensor([math.nan]), "cnn.stem")
