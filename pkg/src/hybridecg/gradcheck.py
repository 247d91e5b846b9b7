"""Central finite-difference verification of analytic gradients."""

import numpy as np

from . import model as M
from .errors import UsageError

DEFAULT_H = 1e-5
# Conv/dense biases feeding batch norm have an exactly-zero gradient; a wider
# step keeps their round-off noise below the 1e-8 denominator floor.
MODEL_H = 1e-4
FLOOR = 1e-8
# Central differences cannot resolve derivatives below eps*|loss|/h; entries
# under NOISE_FACTOR times that level are effectively compared in absolute terms.
NOISE_FACTOR = 1e4


def relative_error(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def normwise_relative_error(analytic, numeric, floor=FLOOR):
    """``||a - n|| / max(||a||, ||n||)``; insensitive to cancelling near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _require_frozen(layer, mode):
    if mode == "train" and getattr(layer, "stochastic", False) and layer.rate > 0 \
            and layer.frozen_mask is None:
        raise UsageError(f"{layer.name}: stochastic layer needs a frozen mask for gradient checking")


def _require_float64(arrays):
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise UsageError(f"gradient checks run in 64-bit precision; {name} is {arr.dtype}")


def finite_difference_errors(layer, x, h=DEFAULT_H, mode="train", seed=0, grad_scale=1.0,
                             normwise=False):
    """Per-array max relative error between analytic and central-difference gradients.

    The scalar loss is ``0.5 * sum((y - target)**2)`` with a fixed random target.
    ``grad_scale`` multiplies the analytic gradients; it exists to plant faults.
    """
    _require_frozen(layer, mode)
    x = np.array(x, dtype=np.float64)
    _require_float64({"input": x, **layer.params})
    saved_state = {k: v.copy() for k, v in layer.state.items()}

    def run(inp):
        return layer.forward(inp, mode, None)

    y, cache = run(x)
    target = np.random.default_rng(seed).standard_normal(y.shape)

    def loss(inp):
        out, _ = run(inp)
        return 0.5 * float(np.sum((out - target) ** 2))

    floor = max(FLOOR, NOISE_FACTOR * np.finfo(np.float64).eps * abs(loss(x)) / h)

    dx, grads = layer.backward(cache, y - target)
    analytic = {name: g * grad_scale for name, g in grads.items()}
    if dx is not None:
        analytic["input"] = dx * grad_scale

    targets = dict(layer.params)
    targets["input"] = x
    errors = {}
    for name, grad in analytic.items():
        arr = targets[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss(x)
            flat[j] = orig - h
            down = loss(x)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        if not grad.size:
            errors[name] = 0.0
        elif normwise:
            errors[name] = normwise_relative_error(grad, numeric)
        else:
            errors[name] = float(relative_error(grad, numeric, floor).max())
    for k, v in saved_state.items():
        layer.state[k][...] = v
    return errors


def finite_difference_check(layer, x, h=DEFAULT_H, mode="train", seed=0, grad_scale=1.0,
                            normwise=False):
    """Max relative error over every parameter and input entry."""
    return max(finite_difference_errors(layer, x, h, mode, seed, grad_scale, normwise).values())


def model_gradient_errors(model, x, h=MODEL_H, seed=0, mask_seed=1, max_entries=None):
    """End-to-end check on a float64 model in train mode with dropout masks frozen.

    Masks are frozen by reseeding the dropout rng identically for every forward.
    ``max_entries`` subsamples large arrays (deterministically) to bound runtime.
    """
    _require_float64(model.parameters())
    x = np.asarray(x, dtype=np.float64)
    state = {k: v.copy() for k, v in model.state_arrays().items()}
    pick = np.random.default_rng(seed + 1)

    def forward():
        return model.forward(x, "train", np.random.default_rng(mask_seed))

    probs, caches = forward()
    target = np.random.default_rng(seed).random(probs.shape)

    def loss():
        p, _ = forward()
        return 0.5 * float(np.sum((p - target) ** 2))

    grads, _ = model.backward(caches, dprobs=probs - target)
    errors = {}
    for name, arr in model.parameters().items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(pick.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + h
            up = loss()
            flat[j] = orig - h
            down = loss()
            flat[j] = orig
            numeric[n] = (up - down) / (2 * h)
        errors[name] = float(relative_error(grads[name].reshape(-1)[idx], numeric).max())
    for k, v in model.state_arrays().items():
        v[...] = state[k]
    return errors


# ---------------------------------------------------------------- suite

def tiny_spec(stack=(("lstm", 3),), num_classes=2, gating=True):
    return M.ArchitectureSpec(
        name="tiny",
        conv_blocks=(M.ConvBlock(4, 15, 2, 0.1), M.ConvBlock(4, 10, 2, 0.1), M.ConvBlock(4, 5, 2, 0.0)),
        recurrent_stack=tuple(M.RecurrentLayer(k, h) for k, h in stack),
        gating_enabled=gating,
        head=(M.HeadLayer(8, 0.5),),
        num_classes=num_classes,
    )


def _freeze_mask(layer, shape, rng, spatial):
    mshape = (shape[0], 1, shape[2]) if spatial else shape
    keep = rng.random(mshape) >= layer.rate
    layer.frozen_mask = keep / (1.0 - layer.rate)


def layer_cases(rng):
    """One randomised ``(label, layer, x, mode)`` case per layer kind."""
    f64 = np.float64
    b = int(rng.integers(1, 4))
    t = int(rng.integers(3, 9))
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 4, 5]))
    d = int(rng.integers(2, 6))
    h = int(rng.integers(1, 4))
    seq = lambda c: rng.standard_normal((b, t, c))  # noqa: E731
    cases = [("conv1d", M.Conv1D("conv1d", c_in, c_out, k, rng, f64), seq(c_in), "train")]

    bn = M.BatchNorm("batchnorm", c_in, f64)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, c_in)
    bn.params["beta"][...] = rng.standard_normal(c_in)
    cases.append(("batchnorm", bn, rng.standard_normal((max(b, 2), t, c_in)), "train"))
    cases.append(("maxpool1d", M.MaxPool("maxpool1d", 2), seq(c_in), "train"))

    sd = M.SpatialDropout("spatial_dropout", 0.3)
    xs = seq(c_in)
    _freeze_mask(sd, xs.shape, rng, spatial=True)
    cases.append(("spatial_dropout", sd, xs, "train"))
    dr = M.Dropout("dropout", 0.3)
    xd = rng.standard_normal((b, d))
    _freeze_mask(dr, xd.shape, rng, spatial=False)
    cases.append(("dropout", dr, xd, "train"))

    cases.append(("dense", M.Dense("dense", d, c_out, rng, f64), rng.standard_normal((b, d)), "train"))
    for fn in ("relu", "sigmoid", "tanh"):
        cases.append((fn, M.Activation(fn, fn), rng.standard_normal((b, d)) * 2, "train"))
    cases.append(("gap", M.GlobalAvgPool("gap"), seq(c_in), "train"))
    gate_d = int(rng.integers(4, 10))
    gating = M.Gating("gating", gate_d, 4, rng, f64)
    gating.params["fc1_bias"][...] = rng.standard_normal(gating.params["fc1_bias"].shape) * 0.5
    cases.append(("gating", gating, rng.standard_normal((b, gate_d)), "train"))
    for kind in ("lstm", "gru"):
        cell = M.Recurrent(kind, kind, c_in, h, rng, f64)
        for arr in cell.params.values():
            arr[...] += rng.standard_normal(arr.shape) * 0.3
        cases.append((kind, cell, seq(c_in), "train"))
    bi = M.BiLSTM("bilstm", c_in, h, rng, f64)
    cases.append(("bilstm", bi, seq(c_in), "train"))
    return cases


def run_suite(seeds=range(3), rtol=1e-4, fault=None, include_model=True, model_rtol=1e-3):
    """Gradient-check every layer kind (and a tiny end-to-end model).

    Returns rows ``(label, max_relative_error, passed)``. ``fault`` names a layer
    kind whose analytic gradient is doubled, to prove the harness catches bugs.
    """
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for label, layer, x, mode in layer_cases(rng):
            scale = 2.0 if label == fault else 1.0
            err = finite_difference_check(layer, x, mode=mode, seed=seed, grad_scale=scale)
            worst[label] = max(worst.get(label, 0.0), err)
    rows = [(label, err, err < rtol) for label, err in worst.items()]
    if include_model:
        model = M.build(tiny_spec(stack=(("gru", 3), ("bilstm", 3), ("lstm", 3))), seed=0,
                        dtype=np.float64)
        x = np.random.default_rng(0).standard_normal((4, 32, 12))
        err = max(model_gradient_errors(model, x, max_entries=24).values())
        rows.append(("model", err, err < model_rtol))
    return rows
