"""LSTM and GRU cells, full-sequence runners with backpropagation through time,
and the bidirectional wrapper.

Weights are fused per gate block: ``input_weights`` is ``(D, G*H)``,
``recurrent_weights`` is ``(H, G*H)`` and there is a single ``bias`` of length
``G*H``. Gate order is (i, f, g, o) for the LSTM and (z, r, candidate) for the GRU.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import Cache, sigmoid

GATES = {"lstm": 4, "gru": 3}


@dataclass
class RecurrentParams:
    kind: str
    input_weights: np.ndarray
    recurrent_weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kind not in GATES:
            raise ConfigError(f"unknown recurrent cell {self.kind!r}")
        g = GATES[self.kind]
        d, gh = self.input_weights.shape
        h = self.recurrent_weights.shape[0]
        if gh != g * h or self.recurrent_weights.shape != (h, g * h) or self.bias.shape != (g * h,):
            raise DimensionError(
                f"inconsistent {self.kind} weights: input {self.input_weights.shape}, "
                f"recurrent {self.recurrent_weights.shape}, bias {self.bias.shape}"
            )

    @property
    def input_dim(self):
        return self.input_weights.shape[0]

    @property
    def hidden_dim(self):
        return self.recurrent_weights.shape[0]

    @property
    def n_params(self):
        return self.input_weights.size + self.recurrent_weights.size + self.bias.size

    def arrays(self):
        return {"input_weights": self.input_weights,
                "recurrent_weights": self.recurrent_weights,
                "bias": self.bias}

    @classmethod
    def initialise(cls, kind, input_dim, hidden_dim, rng, dtype=np.float64):
        """He-normal input weights, orthogonal recurrent weights, forget bias 1."""
        g = GATES[kind]
        w_in = rng.standard_normal((input_dim, g * hidden_dim)) * np.sqrt(2.0 / input_dim)
        q, r = np.linalg.qr(rng.standard_normal((g * hidden_dim, hidden_dim)))
        q = q * np.sign(np.diag(r))
        bias = np.zeros(g * hidden_dim)
        if kind == "lstm":
            bias[hidden_dim:2 * hidden_dim] = 1.0
        return cls(kind, w_in.astype(dtype), q.T.astype(dtype).copy(), bias.astype(dtype))


def param_count(kind, input_dim, hidden_dim):
    g = GATES[kind]
    return g * (input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim)


def _check_step(x_t, h_prev, params):
    if x_t.shape[-1] != params.input_dim:
        raise DimensionError(f"input width {x_t.shape[-1]} != cell input dim {params.input_dim}")
    if h_prev.shape[-1] != params.hidden_dim:
        raise DimensionError(f"state width {h_prev.shape[-1]} != hidden dim {params.hidden_dim}")


def lstm_step(x_t, h_prev, c_prev, params, x_proj=None):
    """One LSTM step. ``x_proj`` lets sequence runners pass a precomputed ``x_t W + b``."""
    _check_step(x_t, h_prev, params)
    if c_prev.shape != h_prev.shape:
        raise DimensionError("cell state and hidden state shapes differ")
    hd = params.hidden_dim
    if x_proj is None:
        x_proj = x_t @ params.input_weights + params.bias
    a = x_proj + h_prev @ params.recurrent_weights
    i = sigmoid(a[..., :hd])
    f = sigmoid(a[..., hd:2 * hd])
    g = np.tanh(a[..., 2 * hd:3 * hd])
    o = sigmoid(a[..., 3 * hd:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    step = {"x": x_t, "h_prev": h_prev, "c_prev": c_prev, "i": i, "f": f, "g": g, "o": o, "tc": tc}
    return h, c, step


def gru_step(x_t, h_prev, params, x_proj=None):
    """One GRU step with the reset gate applied before the recurrent product."""
    _check_step(x_t, h_prev, params)
    hd = params.hidden_dim
    if x_proj is None:
        x_proj = x_t @ params.input_weights + params.bias
    w_h = params.recurrent_weights
    a_zr = x_proj[..., :2 * hd] + h_prev @ w_h[:, :2 * hd]
    z = sigmoid(a_zr[..., :hd])
    r = sigmoid(a_zr[..., hd:])
    rh = r * h_prev
    cand = np.tanh(x_proj[..., 2 * hd:] + rh @ w_h[:, 2 * hd:])
    h = (1.0 - z) * cand + z * h_prev
    step = {"x": x_t, "h_prev": h_prev, "z": z, "r": r, "rh": rh, "cand": cand}
    return h, step


def run_sequence(x, params):
    """Run the cell left to right from zero state; returns every hidden state ``(B, T, H)``."""
    if x.ndim != 3:
        raise DimensionError(f"recurrent input must be (B, T, D), got {x.shape}")
    b, t, d = x.shape
    if t == 0:
        raise DimensionError("recurrent layer applied to an empty sequence")
    if d != params.input_dim:
        raise DimensionError(f"input width {d} != cell input dim {params.input_dim}")
    hd = params.hidden_dim
    x = np.ascontiguousarray(x)
    proj = (x.reshape(b * t, d) @ params.input_weights + params.bias).reshape(b, t, -1)
    h = np.zeros((b, hd), dtype=x.dtype)
    c = np.zeros((b, hd), dtype=x.dtype)
    out = np.empty((b, t, hd), dtype=np.result_type(x, params.input_weights))
    steps = []
    for s in range(t):
        if params.kind == "lstm":
            h, c, step = lstm_step(x[:, s], h, c, params, x_proj=proj[:, s])
        else:
            h, step = gru_step(x[:, s], h, params, x_proj=proj[:, s])
        out[:, s] = h
        steps.append(step)
    return out, Cache("recurrent", steps=steps, params=params, x=x)


def _lstm_step_backward(step, dh, dc_next):
    o, tc, i, g, f = step["o"], step["tc"], step["i"], step["g"], step["f"]
    do = dh * tc
    dc = dc_next + dh * o * (1.0 - tc * tc)
    da = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * step["c_prev"] * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    return da, dc * f


def bptt_backward(cache, dy):
    """Backpropagation through time. Returns ``(dx, grads)`` with grads keyed like ``params.arrays()``."""
    s = cache.consume("recurrent")
    steps, params, x = s["steps"], s["params"], s["x"]
    b, t, d = x.shape
    hd = params.hidden_dim
    if dy.shape != (b, t, hd):
        raise DimensionError(f"upstream gradient shape {dy.shape} != {(b, t, hd)}")
    w_h = params.recurrent_weights
    g = GATES[params.kind]
    da_all = np.empty((b, t, g * hd), dtype=dy.dtype)
    dw_h = np.zeros_like(w_h)
    dh_next = np.zeros((b, hd), dtype=dy.dtype)
    dc_next = np.zeros((b, hd), dtype=dy.dtype)
    for k in range(t - 1, -1, -1):
        step = steps[k]
        dh = dy[:, k] + dh_next
        if params.kind == "lstm":
            da, dc_next = _lstm_step_backward(step, dh, dc_next)
            dh_next = da @ w_h.T
            dw_h += step["h_prev"].T @ da
        else:
            z, r, cand, h_prev = step["z"], step["r"], step["cand"], step["h_prev"]
            da_c = dh * (1.0 - z) * (1.0 - cand * cand)
            drh = da_c @ w_h[:, 2 * hd:].T
            da_z = dh * (h_prev - cand) * z * (1.0 - z)
            da_r = drh * h_prev * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=-1)
            da = np.concatenate([da_zr, da_c], axis=-1)
            dh_next = dh * z + drh * r + da_zr @ w_h[:, :2 * hd].T
            dw_h[:, :2 * hd] += h_prev.T @ da_zr
            dw_h[:, 2 * hd:] += step["rh"].T @ da_c
        da_all[:, k] = da
    da2 = da_all.reshape(b * t, g * hd)
    grads = {
        "input_weights": x.reshape(b * t, d).T @ da2,
        "recurrent_weights": dw_h,
        "bias": da2.sum(axis=0),
    }
    dx = (da2 @ params.input_weights.T).reshape(b, t, d)
    return dx, grads


def bidirectional_forward(x, fwd, bwd):
    """Concatenate a forward pass and a time-reversed backward pass along features."""
    if fwd.hidden_dim != bwd.hidden_dim:
        raise DimensionError(f"direction hidden dims differ: {fwd.hidden_dim} vs {bwd.hidden_dim}")
    y_f, cache_f = run_sequence(x, fwd)
    y_b, cache_b = run_sequence(x[:, ::-1], bwd)
    out = np.concatenate([y_f, y_b[:, ::-1]], axis=-1)
    return out, Cache("bidirectional", fwd=cache_f, bwd=cache_b, hidden=fwd.hidden_dim)


def bidirectional_backward(cache, dy):
    """Returns ``(dx, grads_fwd, grads_bwd)``."""
    s = cache.consume("bidirectional")
    hd = s["hidden"]
    dx_f, g_f = bptt_backward(s["fwd"], dy[..., :hd])
    dx_b, g_b = bptt_backward(s["bwd"], np.ascontiguousarray(dy[:, ::-1, hd:]))
    return dx_f + dx_b[:, ::-1], g_f, g_b
