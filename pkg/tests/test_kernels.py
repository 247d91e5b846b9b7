import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridecg import kernels as K
from hybridecg.errors import DimensionError, NumericError, UsageError


def naive_conv(x, w, b):
    # direct sum over taps with the left=(K-1)//2 padding convention
    bsz, t, _ = x.shape
    k, _, c_out = w.shape
    left = (k - 1) // 2
    y = np.zeros((bsz, t, c_out))
    for n in range(bsz):
        for s in range(t):
            for j in range(k):
                src = s + j - left
                if 0 <= src < t:
                    y[n, s] += x[n, src] @ w[j]
    return y + b


@given(st.integers(1, 3), st.integers(1, 12), st.integers(1, 4), st.integers(1, 4),
       st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_conv_matches_direct_sum(b, t, c_in, c_out, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, t, c_in))
    w = r.standard_normal((k, c_in, c_out))
    bias = r.standard_normal(c_out)
    y, _ = K.conv1d_forward(x, w, bias)
    np.testing.assert_allclose(y, naive_conv(x, w, bias), rtol=1e-12, atol=1e-12)


def test_conv_identity_kernel_and_padding():
    x = np.arange(5.0).reshape(1, 5, 1)
    w = np.zeros((3, 1, 1))
    w[1, 0, 0] = 1.0
    y, _ = K.conv1d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(y, x)
    # K=2: no left padding, one zero on the right
    w2 = np.ones((2, 1, 1))
    y2, _ = K.conv1d_forward(x, w2, np.zeros(1))
    np.testing.assert_array_equal(y2[0, :, 0], [1, 3, 5, 7, 4])


def test_conv_unbatched_and_shape_errors():
    x = np.ones((6, 2))
    y, cache = K.conv1d_forward(x, np.ones((3, 2, 4)), np.zeros(4))
    assert y.shape == (6, 4)
    dx, dw, db = K.conv1d_backward(cache, np.ones((6, 4)))
    assert dx.shape == (6, 2) and dw.shape == (3, 2, 4) and db.shape == (4,)
    with pytest.raises(DimensionError):
        K.conv1d_forward(np.ones((1, 6, 3)), np.ones((3, 2, 4)), np.zeros(4))
    with pytest.raises(NumericError):
        K.conv1d_forward(np.full((1, 4, 2), np.nan), np.ones((3, 2, 4)), np.zeros(4))


def test_conv_first_layer_skips_input_grad():
    _, cache = K.conv1d_forward(np.ones((1, 4, 2)), np.ones((3, 2, 1)), np.zeros(1))
    dx, dw, _ = K.conv1d_backward(cache, np.ones((1, 4, 1)), input_grad=False)
    assert dx is None and dw.shape == (3, 2, 1)


def test_cache_is_single_use():
    _, cache = K.dense_forward(np.ones((2, 3)), np.ones((3, 1)), np.zeros(1))
    K.dense_backward(cache, np.ones((2, 1)))
    with pytest.raises(UsageError):
        K.dense_backward(cache, np.ones((2, 1)))
    _, cache = K.gap_forward(np.ones((1, 3, 2)))
    with pytest.raises(UsageError):
        K.dense_backward(cache, np.ones((1, 2)))


@pytest.mark.parametrize("pool", [2, 3])
def test_maxpool_routes_to_first_maximum(pool):
    x = np.array([[[1.0], [1.0], [0.0], [5.0], [5.0], [2.0]]])
    y, cache = K.maxpool1d_forward(x, pool)
    dx = K.maxpool1d_backward(cache, np.ones_like(y))
    if pool == 2:
        np.testing.assert_array_equal(y[0, :, 0], [1, 5, 5])
        np.testing.assert_array_equal(dx[0, :, 0], [1, 0, 0, 1, 1, 0])
    else:
        np.testing.assert_array_equal(y[0, :, 0], [1, 5])
        np.testing.assert_array_equal(dx[0, :, 0], [1, 0, 0, 1, 0, 0])


@given(st.integers(1, 3), st.integers(2, 11), st.integers(1, 3), st.sampled_from([2, 3]),
       st.integers(0, 2**31 - 1))
def test_maxpool_matches_loop(b, t, c, pool, seed):
    x = np.random.default_rng(seed).integers(-3, 3, (b, t, c)).astype(float)
    if t < pool:
        return
    y, _ = K.maxpool1d_forward(x, pool)
    t_out = t // pool
    ref = np.array([[[x[n, s * pool:(s + 1) * pool, ch].max() for ch in range(c)]
                     for s in range(t_out)] for n in range(b)])
    np.testing.assert_array_equal(y, ref)


def test_maxpool_odd_length_drops_tail():
    y, cache = K.maxpool1d_forward(np.arange(5.0).reshape(1, 5, 1))
    assert y.shape == (1, 2, 1)
    dx = K.maxpool1d_backward(cache, np.ones_like(y))
    assert dx[0, 4, 0] == 0


def test_batchnorm_train_normalises_and_updates_running_stats(rng):
    x = rng.normal(3.0, 2.0, (8, 5, 4))
    st_ = K.BatchNormState.fresh(4)
    y, _ = K.batchnorm_forward(x, st_, "train")
    flat = y.reshape(-1, 4)
    np.testing.assert_allclose(flat.mean(0), 0, atol=1e-12)
    var = x.reshape(-1, 4).var(0)
    np.testing.assert_allclose(flat.var(0), var / (var + 1e-3), rtol=1e-10)
    np.testing.assert_allclose(st_.running_mean, 0.01 * x.reshape(-1, 4).mean(0), rtol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.99 + 0.01 * var, rtol=1e-12)


def test_batchnorm_infer_uses_running_stats(rng):
    st_ = K.BatchNormState.fresh(3)
    st_.running_mean[...] = [1.0, 2.0, 3.0]
    st_.running_var[...] = [4.0, 1.0, 0.25]
    x = rng.standard_normal((2, 4, 3))
    y, _ = K.batchnorm_forward(x, st_, "infer")
    np.testing.assert_allclose(y, (x - st_.running_mean) / np.sqrt(st_.running_var + 1e-3))


def test_dropout_eval_identity_and_train_scaling(rng):
    x = rng.standard_normal((4, 6, 5))
    y, _ = K.spatial_dropout_forward(x, 0.3, "infer")
    assert y is x
    y, cache = K.spatial_dropout_forward(x, 0.5, "train", rng=np.random.default_rng(0))
    kept = (y != 0)
    # whole channels are kept or dropped together
    assert np.all(kept.all(axis=1) | (~kept).all(axis=1))
    np.testing.assert_allclose(y[kept], 2 * x[kept])
    dx = K.dropout_backward(cache, np.ones_like(x))
    np.testing.assert_array_equal(dx != 0, kept)


def test_dense_and_gap_values():
    x = np.array([[1.0, 2.0]])
    y, _ = K.dense_forward(x, np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]]), np.array([0.5, 0, 0]))
    np.testing.assert_array_equal(y, [[1.5, 2.0, 4.0]])
    g, cache = K.gap_forward(np.arange(6.0).reshape(1, 3, 2))
    np.testing.assert_array_equal(g, [[2.0, 3.0]])
    np.testing.assert_array_equal(K.gap_backward(cache, np.ones((1, 2))), np.full((1, 3, 2), 1 / 3))


def test_sigmoid_is_finite_for_extremes():
    s = K.sigmoid(np.array([-1e4, 0.0, 1e4]))
    assert np.all(np.isfinite(s)) and s[1] == 0.5
    assert 0 < s[0] < 1e-15 and 1 - 1e-15 < s[2] <= 1


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
def test_activation_backward_matches_derivative(kind, rng):
    x = rng.standard_normal((3, 4))
    y, cache = K.activation_forward(x, kind)
    dx = K.activation_backward(cache, np.ones_like(x))
    ref = {"relu": (x > 0).astype(float), "sigmoid": y * (1 - y), "tanh": 1 - np.tanh(x) ** 2}[kind]
    np.testing.assert_allclose(dx, ref)
