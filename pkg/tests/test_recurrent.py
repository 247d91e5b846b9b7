import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridecg import recurrent as R
from hybridecg.errors import DimensionError
from hybridecg.gradcheck import finite_difference_check
from hybridecg.model import BiLSTM, Recurrent


def _sig(a):
    return 1 / (1 + np.exp(-a))


def test_param_counts():
    assert R.param_count("lstm", 256, 128) == 197_120
    assert 2 * R.param_count("lstm", 128, 128) == 263_168
    # fused-bias GRU; the published 148,992 does not fit this formula
    assert R.param_count("gru", 256, 128) == 147_840


def test_lstm_step_matches_hand_formula(rng):
    p = R.RecurrentParams.initialise("lstm", 3, 2, rng)
    x, h0, c0 = rng.standard_normal((1, 3)), rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    h, c, _ = R.lstm_step(x, h0, c0, p)
    a = x @ p.input_weights + h0 @ p.recurrent_weights + p.bias
    i, f, g, o = _sig(a[:, :2]), _sig(a[:, 2:4]), np.tanh(a[:, 4:6]), _sig(a[:, 6:])
    c_ref = f * c0 + i * g
    np.testing.assert_allclose(c, c_ref, rtol=1e-12)
    np.testing.assert_allclose(h, o * np.tanh(c_ref), rtol=1e-12)


def test_gru_step_resets_before_recurrent_product(rng):
    p = R.RecurrentParams.initialise("gru", 3, 2, rng)
    x, h0 = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
    h, _ = R.gru_step(x, h0, p)
    xw = x @ p.input_weights + p.bias
    wz, wr, wc = p.recurrent_weights[:, :2], p.recurrent_weights[:, 2:4], p.recurrent_weights[:, 4:]
    z = _sig(xw[:, :2] + h0 @ wz)
    r = _sig(xw[:, 2:4] + h0 @ wr)
    cand = np.tanh(xw[:, 4:] + (r * h0) @ wc)
    np.testing.assert_allclose(h, (1 - z) * cand + z * h0, rtol=1e-12)


def test_lstm_init_conventions(rng):
    p = R.RecurrentParams.initialise("lstm", 5, 4, rng)
    np.testing.assert_array_equal(p.bias[4:8], 1.0)
    np.testing.assert_array_equal(np.delete(p.bias, range(4, 8)), 0.0)
    w = p.recurrent_weights  # (H, 4H) with orthonormal rows
    np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-12)


def test_zero_weights_lstm_stays_at_zero(rng):
    p = R.RecurrentParams("lstm", np.zeros((2, 8)), np.zeros((2, 8)), np.zeros(8))
    out, _ = R.run_sequence(rng.standard_normal((3, 5, 2)), p)
    # g = tanh(0) = 0, so the cell never leaves zero
    np.testing.assert_array_equal(out, 0)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gates_bounded(b, t, seed):
    r = np.random.default_rng(seed)
    p = R.RecurrentParams.initialise("lstm", 2, 3, r)
    x = r.standard_normal((b, t, 2)) * 10
    out, cache = R.run_sequence(x, p)
    for step in cache.saved["steps"]:
        for gate in ("i", "f", "o"):
            assert np.all((step[gate] >= 0) & (step[gate] <= 1))
    assert np.all(np.abs(out) < 1)


def test_bidirectional_batch_permutation(rng):
    fwd = R.RecurrentParams.initialise("lstm", 3, 2, rng)
    bwd = R.RecurrentParams.initialise("lstm", 3, 2, rng)
    x = rng.standard_normal((4, 6, 3))
    perm = np.array([2, 0, 3, 1])
    y, _ = R.bidirectional_forward(x, fwd, bwd)
    yp, _ = R.bidirectional_forward(x[perm], fwd, bwd)
    np.testing.assert_allclose(yp, y[perm], rtol=1e-12)
    # backward half equals a forward run over the reversed sequence
    y_rev, _ = R.run_sequence(x[:, ::-1], bwd)
    np.testing.assert_allclose(y[..., 2:], y_rev[:, ::-1], rtol=1e-12)


def test_shape_errors(rng):
    p = R.RecurrentParams.initialise("gru", 3, 2, rng)
    with pytest.raises(DimensionError):
        R.run_sequence(np.ones((1, 4, 2)), p)
    with pytest.raises(DimensionError):
        R.RecurrentParams("lstm", np.ones((3, 7)), np.ones((2, 8)), np.ones(8))


@pytest.mark.parametrize("kind", ["lstm", "gru"])
@given(seed=st.integers(0, 2**31 - 1))
def test_bptt_matches_finite_differences(kind, seed):
    r = np.random.default_rng(seed)
    d, h = int(r.integers(1, 4)), int(r.integers(1, 4))
    cell = Recurrent(kind, kind, d, h, r, np.float64)
    x = r.standard_normal((int(r.integers(1, 3)), int(r.integers(2, 7)), d))
    assert finite_difference_check(cell, x, seed=seed) < 1e-4


@given(seed=st.integers(0, 2**31 - 1))
def test_bilstm_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    layer = BiLSTM("bi", 2, 2, r, np.float64)
    assert finite_difference_check(layer, r.standard_normal((2, 5, 2)), seed=seed) < 1e-4
