"""Forward/backward kernels for the non-recurrent layers.

Every forward returns ``(output, cache)``; the matching backward consumes the
cache exactly once. Arrays are plain numpy arrays laid out row-major with the
channel/feature axis last: sequences are ``(B, T, C)``, vectors ``(B, D)``.
Unbatched ``(T, C)`` inputs are accepted by the sequence kernels.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericError, UsageError

SIGMOID_CLAMP = 40.0


class Cache:
    """Values saved by a forward pass for its backward pass."""

    __slots__ = ("kind", "saved", "used")

    def __init__(self, kind, **saved):
        self.kind = kind
        self.saved = saved
        self.used = False

    def consume(self, kind):
        if self.kind != kind:
            raise UsageError(f"cache of kind {self.kind!r} passed to {kind} backward")
        if self.used:
            raise UsageError(f"{kind} cache already consumed; run forward again")
        self.used = True
        return self.saved


def check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"expected (T, C) or (B, T, C), got shape {x.shape}")
    return x, False


def same_padding(kernel):
    """Left/right zero padding that keeps the temporal length (left gets the smaller half)."""
    total = kernel - 1
    left = total // 2
    return left, total - left


# ---------------------------------------------------------------- conv1d

def conv1d_forward(x, weights, bias):
    """Stride-1 'same' convolution. ``weights`` has layout (K, C_in, C_out)."""
    xb, squeeze = _as_batch(x)
    if weights.ndim != 3:
        raise DimensionError(f"conv weights must be (K, C_in, C_out), got {weights.shape}")
    k, c_in, c_out = weights.shape
    if xb.shape[2] != c_in:
        raise DimensionError(f"input has {xb.shape[2]} channels, weights expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    check_finite(xb, "conv1d input")
    b, t, _ = xb.shape
    left, right = same_padding(k)
    xp = np.pad(xb, ((0, 0), (left, right), (0, 0)))
    # windows: (B, T, C_in, K) -> (B, T, K, C_in) to match the weight layout
    cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(b * t, k * c_in)
    y = (cols @ weights.reshape(k * c_in, c_out)).reshape(b, t, c_out) + bias
    cache = Cache("conv1d", cols=cols, weights=weights, in_shape=xb.shape, squeeze=squeeze)
    return (y[0] if squeeze else y), cache


def conv1d_backward(cache, dy, input_grad=True):
    """Returns ``(dx, dW, db)``; ``dx`` is None when ``input_grad`` is False."""
    s = cache.consume("conv1d")
    weights, (b, t, c_in) = s["weights"], s["in_shape"]
    k, _, c_out = weights.shape
    dyb = dy[None] if s["squeeze"] else dy
    if dyb.shape != (b, t, c_out):
        raise DimensionError(f"upstream gradient shape {dy.shape} does not match conv output")
    dy2 = dyb.reshape(b * t, c_out)
    dw = (s["cols"].T @ dy2).reshape(k, c_in, c_out)
    db = dy2.sum(axis=0)
    if not input_grad:
        return None, dw, db
    dcols = (dy2 @ weights.reshape(k * c_in, c_out).T).reshape(b, t, k, c_in)
    left, right = same_padding(k)
    dxp = np.zeros((b, t + k - 1, c_in), dtype=dcols.dtype)
    for j in range(k):
        dxp[:, j:j + t, :] += dcols[:, :, j, :]
    dx = dxp[:, left:left + t, :]
    return (dx[0] if s["squeeze"] else dx), dw, db


# ---------------------------------------------------------------- max pooling

def maxpool1d_forward(x, pool=2):
    xb, squeeze = _as_batch(x)
    b, t, c = xb.shape
    if t < pool:
        raise DimensionError(f"sequence length {t} shorter than pool size {pool}")
    t_out = t // pool
    if pool == 2:
        # fast path; strict > keeps ties on the earlier index
        first, second = xb[:, 0:2 * t_out:2], xb[:, 1:2 * t_out:2]
        idx = second > first
        y = np.where(idx, second, first)
    else:
        windows = xb[:, :t_out * pool, :].reshape(b, t_out, pool, c)
        # argmax picks the first maximum, so ties route to the earlier index
        idx = windows.argmax(axis=2)
        y = np.ascontiguousarray(np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :])
    cache = Cache("maxpool1d", idx=idx, in_shape=xb.shape, pool=pool, squeeze=squeeze)
    return (y[0] if squeeze else y), cache


def maxpool1d_backward(cache, dy):
    s = cache.consume("maxpool1d")
    b, t, c = s["in_shape"]
    pool, idx = s["pool"], s["idx"]
    dyb = dy[None] if s["squeeze"] else dy
    t_out = t // pool
    if dyb.shape != (b, t_out, c):
        raise DimensionError(f"upstream gradient shape {dy.shape} does not match pool output")
    dx = np.zeros((b, t, c), dtype=dyb.dtype)
    if pool == 2:
        dx[:, 0:2 * t_out:2] = np.where(idx, 0, dyb)
        dx[:, 1:2 * t_out:2] = np.where(idx, dyb, 0)
    else:
        dwin = np.zeros((b, t_out, pool, c), dtype=dyb.dtype)
        np.put_along_axis(dwin, idx[:, :, None, :], dyb[:, :, None, :], axis=2)
        dx[:, :t_out * pool, :] = dwin.reshape(b, t_out * pool, c)
    return dx[0] if s["squeeze"] else dx


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    @classmethod
    def fresh(cls, channels, dtype=np.float64, momentum=0.99, epsilon=1e-3):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm_forward(x, state, mode):
    """Normalise over every axis but the last (batch and time for sequences)."""
    c = x.shape[-1]
    if state.gamma.shape != (c,):
        raise DimensionError(f"batch norm has {state.gamma.shape[0]} channels, input has {c}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        n = x.size // c
        if n < 2:
            raise DimensionError("batch norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        xc = x - mean
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = xc * inv_std
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
        cache = Cache("batchnorm", xhat=xhat, inv_std=inv_std, gamma=state.gamma, mode=mode)
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean) * inv_std
        cache = Cache("batchnorm", xhat=xhat, inv_std=inv_std, gamma=state.gamma, mode=mode)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return state.gamma * xhat + state.beta, cache


def batchnorm_backward(cache, dy):
    """Returns ``(dx, dgamma, dbeta)``."""
    s = cache.consume("batchnorm")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if s["mode"] == "infer":
        return dy * gamma * inv_std, dgamma, dbeta
    n = dy.size // dy.shape[-1]
    dxhat = dy * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- dropout

def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")


def spatial_dropout_forward(x, rate, mode, rng=None, mask=None):
    """Drop whole channels: one draw per (batch item, channel), shared over time.

    ``mask`` (shape ``(B, 1, C)``, already scaled) freezes the draw, which is how
    gradient checks make the layer deterministic.
    """
    _check_rate(rate)
    if mode == "infer" or (rate == 0.0 and mask is None):
        return x, Cache("dropout", mask=None)
    if mask is None:
        if rng is None:
            raise UsageError("spatial dropout in train mode needs an rng or a frozen mask")
        b, _, c = x.shape
        keep = rng.random((b, 1, c)) >= rate
        mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, Cache("dropout", mask=mask)


def dropout_forward(x, rate, mode, rng=None, mask=None):
    """Elementwise inverted dropout."""
    _check_rate(rate)
    if mode == "infer" or (rate == 0.0 and mask is None):
        return x, Cache("dropout", mask=None)
    if mask is None:
        if rng is None:
            raise UsageError("dropout in train mode needs an rng or a frozen mask")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, Cache("dropout", mask=mask)


def dropout_backward(cache, dy):
    mask = cache.consume("dropout")["mask"]
    return dy if mask is None else dy * mask


spatial_dropout_backward = dropout_backward


# ---------------------------------------------------------------- dense

def dense_forward(x, weights, bias):
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"cannot apply dense {weights.shape} to input {x.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    check_finite(x, "dense input")
    return x @ weights + bias, Cache("dense", x=x, weights=weights)


def dense_backward(cache, dy):
    """Returns ``(dx, dW, db)``."""
    s = cache.consume("dense")
    return dy @ s["weights"].T, s["x"].T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------- activations

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)))


def activation_forward(x, kind):
    if kind == "relu":
        y = np.maximum(x, 0)
    elif kind == "sigmoid":
        y = sigmoid(x)
    elif kind == "tanh":
        y = np.tanh(x)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return y, Cache(kind, x=x, y=y)


def activation_backward(cache, dy):
    kind = cache.kind
    s = cache.consume(kind)
    if kind == "relu":
        return dy * (s["x"] > 0)
    y = s["y"]
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    return dy * (1.0 - y * y)


# ---------------------------------------------------------------- global average pooling

def gap_forward(x):
    if x.ndim != 3:
        raise DimensionError(f"global average pooling expects (B, T, C), got {x.shape}")
    if x.shape[1] == 0:
        raise DimensionError("global average pooling over an empty sequence")
    return x.mean(axis=1), Cache("gap", t=x.shape[1])


def gap_backward(cache, dy):
    t = cache.consume("gap")["t"]
    return np.repeat(dy[:, None, :] / t, t, axis=1)

