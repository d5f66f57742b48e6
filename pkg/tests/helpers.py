"""Shared oracles for the test-suite."""
import time
from contextlib import contextmanager

import numpy as np

ACCEPTANCE_LINES: list = []


@contextmanager
def criterion(number, title):
    """Record one pass/fail line for an acceptance criterion.

    The body may add measurements to the yielded dict; they are shown after the verdict.
    """
    details: dict = {}
    start = time.perf_counter()
    verdict = "FAIL"
    try:
        yield details
        verdict = details.pop("verdict", "PASS")
    finally:
        shown = " ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {number}: {verdict} {title} [{time.perf_counter() - start:.1f} s] {shown}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)


def numeric_grad(f, arr, step=1e-5):
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def rel_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error; arrays whose gradients both vanish count as exact."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < floor:
        return 0.0 if np.linalg.norm(a - n) < floor else np.inf
    return float(np.linalg.norm(a - n) / denom)


def einsum_conv(x, w, b, pads):
    """Reference cross-correlation in logical layout: x (B,H,W,F), w (K,kh,kw,F)."""
    top, bottom, left, right = pads
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    k, kh, kw, _ = w.shape
    h_out = xp.shape[1] - kh + 1
    w_out = xp.shape[2] - kw + 1
    out = np.zeros((x.shape[0], h_out, w_out, k))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bhwf,kf->bhwk", xp[:, i:i + h_out, j:j + w_out, :], w[:, i, j, :])
    return out + b


def sine(freq, fs, n, amp=1.0, phase=0.0):
    t = np.arange(n) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def whole_model_gradient_errors(seed=0, step=1e-5):
    """Relative error of every learnable array of a small float64 model against finite differences.

    Uses C=3, fs=20 Hz (k=2), T=40 samples and a batch of 2.
    """
    from cleegn.model import CleegnConfig, backward, build_model, forward
    from cleegn.neuralcore import mse_loss

    model = build_model(CleegnConfig(3, 20.0, window_sec=2.0), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name in ("bn1", "bn2", "bn3", "bn4"):
        bn = getattr(model, name)
        bn.gamma[:] = rng.uniform(0.5, 1.5, size=bn.gamma.shape)
        bn.beta[:] = rng.normal(size=bn.beta.shape)
    for name in ("enc_spatial", "enc_temporal", "dec_temporal", "dec_spatial", "dec_out"):
        getattr(model, name).bias[:] = rng.normal(size=getattr(model, name).bias.shape)
    x = rng.normal(size=(2, 3, 40, 1))
    y = rng.normal(size=(2, 3, 40, 1))

    def loss():
        return mse_loss(forward(model, x, "train")[0], y)[0]

    out, cache = forward(model, x, "train")
    grads, _ = backward(model, cache, mse_loss(out, y)[1])
    return {name: rel_error(grads[name], numeric_grad(loss, arr, step)) for name, arr in model.params().items()}


def affinity_error(model, x1, x2):
    """Max relative deviation of f(x1+x2) from f(x1)+f(x2)-f(0) in infer mode."""
    f = model
    lhs = f(x1 + x2).astype(np.float64)
    rhs = f(x1).astype(np.float64) + f(x2) - f(np.zeros_like(x1))
    return float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)))
