import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazecnn import gradcheck as G
from gazecnn import tensor as T


@pytest.fixture
def rng():
    return T.make_rng(1234)


# -- conv2d -----------------------------------------------------------------

def test_conv_first_layer_shape(rng):
    x = rng.standard_normal((3, 70, 210)).astype(np.float32)
    out = T.conv2d_forward(x, np.zeros((9, 3, 3, 3), np.float32), np.zeros(9, np.float32))
    assert out.shape == (9, 68, 208)


def test_conv_zero_input_gives_zero():
    out = T.conv2d_forward(np.zeros((3, 7, 9)), np.ones((4, 3, 3, 3)), np.zeros(4))
    assert out.shape == (4, 5, 7)
    assert not out.any()


def test_conv_sum_of_ones():
    out = T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    ref = np.zeros((3, 3, 4))
    for o in range(3):
        for i in range(3):
            for j in range(4):
                ref[o, i, j] = np.sum(x[:, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(T.conv2d_forward(x, w, b), ref, rtol=1e-12)


def test_conv_backward_bias_of_ones():
    gx, gw, gb = T.conv2d_backward(np.ones((1, 1, 1)), np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(gb, [1.0])
    np.testing.assert_array_equal(gw, np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(gx, np.ones((1, 3, 3)))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    grads = T.conv2d_backward(np.zeros((3, 4, 4)), x, w)
    assert all(not g.any() for g in grads)


def test_conv_batch_equals_per_sample(rng):
    x = rng.standard_normal((4, 2, 7, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    batched = T.conv2d_forward(x, w, b)
    for n in range(4):
        np.testing.assert_allclose(batched[n], T.conv2d_forward(x[n], w, b), rtol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((3, 2, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((3, 5, 5)), np.zeros((2, 3, 3, 3)), np.zeros(1))


def test_conv_gradcheck(rng):
    res = G.check_conv2d(rng, trials=10)
    assert res.passed, res.line()


# -- maxpool ----------------------------------------------------------------

@pytest.mark.parametrize("shape, expected", [
    ((9, 68, 208), (9, 22, 69)),
    ((26, 20, 67), (26, 6, 22)),
])
def test_pool_shapes(rng, shape, expected):
    out, idx = T.maxpool_forward(rng.standard_normal(shape).astype(np.float32))
    assert out.shape == expected
    assert idx.shape == expected


def test_pool_constant_input_picks_first_cell():
    x = np.full((2, 6, 7), 0.25)
    out, idx = T.maxpool_forward(x)
    assert np.all(out == 0.25)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                assert idx[c, i, j] == c * 42 + 3 * i * 7 + 3 * j


def _naive_pool(x):
    c, h, w = x.shape
    out = np.empty((c, h // 3, w // 3))
    idx = np.empty(out.shape, dtype=np.intp)
    for ch in range(c):
        for i in range(h // 3):
            for j in range(w // 3):
                win = x[ch, 3 * i:3 * i + 3, 3 * j:3 * j + 3]
                k = int(np.argmax(win))  # first occurrence
                out[ch, i, j] = win.flat[k]
                idx[ch, i, j] = ch * h * w + (3 * i + k // 3) * w + 3 * j + k % 3
    return out, idx


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(3, 11), st.integers(3, 11), st.integers(0, 2**31))
def test_pool_matches_naive_with_ties(c, h, w, seed):
    # small integer values force plenty of ties
    x = T.make_rng(seed).integers(0, 3, (c, h, w)).astype(np.float64)
    out, idx = T.maxpool_forward(x)
    ref_out, ref_idx = _naive_pool(x)
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(idx, ref_idx)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(3, 12), st.integers(3, 12), st.integers(0, 2**31))
def test_pool_backward_conserves_mass(c, h, w, seed):
    r = T.make_rng(seed)
    x = r.standard_normal((c, h, w))
    out, idx = T.maxpool_forward(x)
    g = r.standard_normal(out.shape)
    gin = T.maxpool_backward(g, idx, x.shape)
    assert gin.shape == x.shape
    assert np.isclose(gin.sum(), g.sum(), rtol=1e-12, atol=1e-12)
    assert np.count_nonzero(gin) <= g.size


def test_pool_backward_zero(rng):
    x = rng.standard_normal((2, 6, 9))
    out, idx = T.maxpool_forward(x)
    assert not T.maxpool_backward(np.zeros_like(out), idx, x.shape).any()


def test_pool_backward_rejects_bad_index():
    with pytest.raises(T.PoolIndexError):
        T.maxpool_backward(np.ones((1, 1, 1)), np.array([[[9]]]), (1, 3, 3))


def test_pool_too_small():
    with pytest.raises(T.ShapeError):
        T.maxpool_forward(np.zeros((1, 2, 5)))


def test_pool_gradcheck(rng):
    res = G.check_maxpool(rng, trials=10)
    assert res.passed, res.line()


# -- linear / relu ------------------------------------------------------------

@pytest.mark.parametrize("n_in, n_out, count", [(3432, 600, 2_059_800), (53, 2, 108)])
def test_linear_param_counts(n_in, n_out, count):
    w = np.zeros((n_out, n_in))
    b = np.zeros(n_out)
    assert w.size + b.size == count
    assert T.linear_forward(np.zeros(n_in), w, b).shape == (n_out,)


def test_linear_identity(rng):
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(T.linear_forward(x, np.eye(5), np.zeros(5)), x)


def test_linear_backward_unit_vector(rng):
    x = rng.standard_normal(4)
    w = rng.standard_normal((3, 4))
    e1 = np.array([1.0, 0.0, 0.0])
    gx, gw, gb = T.linear_backward(e1, x, w)
    np.testing.assert_array_equal(gb, e1)
    np.testing.assert_array_equal(gx, w[0])
    np.testing.assert_array_equal(gw[0], x)


def test_linear_backward_zero_input(rng):
    _, gw, _ = T.linear_backward(rng.standard_normal(3), np.zeros(4), rng.standard_normal((3, 4)))
    assert not gw.any()


def test_linear_gradcheck(rng):
    res = G.check_linear(rng, trials=10)
    assert res.passed, res.line()


def test_relu_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_relu_backward_blocks_negative():
    g = T.relu_backward(np.array([5.0, 5.0]), np.array([-1.0, 3.0]))
    np.testing.assert_array_equal(g, [0.0, 5.0])


def test_relu_gradcheck(rng):
    res = G.check_relu(rng, trials=10)
    assert res.passed, res.line()


# -- resize -----------------------------------------------------------------

def test_resize_constant():
    out = T.bilinear_resize(np.full((3, 5, 8), 0.3), 7, 11)
    assert out.shape == (3, 7, 11)
    np.testing.assert_allclose(out, 0.3, rtol=1e-12)


def test_resize_identity_is_bitwise(rng):
    img = rng.uniform(size=(3, 6, 9)).astype(np.float32)
    out = T.bilinear_resize(img, 6, 9)
    assert out.dtype == img.dtype
    assert np.array_equal(out, img)
    assert out is not img


def test_resize_ramp_midpoint():
    img = np.tile(np.array([[0.0, 1.0], [0.0, 1.0]]), (3, 1, 1))
    out = T.bilinear_resize(img, 2, 3)
    np.testing.assert_allclose(out[:, :, 1], 0.5)
    np.testing.assert_allclose(out[:, :, 0], 0.0)
    np.testing.assert_allclose(out[:, :, 2], 1.0)


def test_resize_uint8_promotes():
    out = T.bilinear_resize(np.full((3, 4, 4), 200, np.uint8), 2, 8)
    assert out.dtype == np.float32
    assert np.all(out == 200)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(2, 12), st.integers(2, 12),
       st.integers(0, 2**31))
def test_resize_within_input_range(h, w, oh, ow, seed):
    img = T.make_rng(seed).uniform(-1, 1, (3, h, w))
    out = T.bilinear_resize(img, oh, ow)
    assert out.shape == (3, oh, ow)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12
    # corners are aligned
    np.testing.assert_allclose(out[:, [0, 0, -1, -1], [0, -1, 0, -1]],
                               img[:, [0, 0, -1, -1], [0, -1, 0, -1]], rtol=1e-12)


def test_make_rng_deterministic():
    assert T.make_rng(7).integers(0, 1 << 30) == T.make_rng(7).integers(0, 1 << 30)
    assert T.make_rng([7, 1]).random() != T.make_rng([7, 2]).random()
