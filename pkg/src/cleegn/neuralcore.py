"""Deterministic numerical kernel for the denoiser: 4-axis tensors, convolution,
batch normalization, MSE, Adam and the exponential learning-rate schedule.

Tensors are plain ``numpy.ndarray`` objects with logical shape
``(batch, height, width, feature)``. Internally the convolution kernels run on
a (batch, height, feature, width) memory layout; results are returned as
transposed views of that storage, so chaining layers never copies. Callers that
need C-ordered memory can use ``np.ascontiguousarray``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

PADDING_MODES = ("valid", "same_zero")


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is handed a cache it cannot use."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def same_padding(k: int) -> tuple[int, int]:
    """Zero padding (before, after) that keeps an axis length under a width-k kernel."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _check_rank4(x, what="input"):
    if np.ndim(x) != 4:
        raise ShapeMismatchError(f"{what} must be a 4-axis tensor, got shape {np.shape(x)}")


def _to_internal(x):
    # (B, H, W, F) -> contiguous (B, H, F, W); free when x came out of this module
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2))


def _to_logical(xi):
    return xi.transpose(0, 1, 3, 2)


# -- convolution ----------------------------------------------------------------


@dataclass
class ConvLayer:
    """2-D cross-correlation layer.

    ``weights`` has shape (K_out, k_h, k_w, F_in); ``bias`` has shape (K_out,).
    """

    weights: np.ndarray
    bias: np.ndarray
    padding: str = "valid"

    def __post_init__(self):
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeMismatchError(f"conv weights must be (K_out, k_h, k_w, F_in) >= 1, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match K_out={self.weights.shape[0]}")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[1], self.weights.shape[2]

    @property
    def in_features(self) -> int:
        return self.weights.shape[3]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def pads(self) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        kh, kw = self.kernel_size
        return (*same_padding(kh), *same_padding(kw))


def _conv_output_hw(layer, h, w, pads):
    kh, kw = layer.kernel_size
    return h + pads[0] + pads[1] - kh + 1, w + pads[2] + pads[3] - kw + 1


def _check_conv_input(x, layer, pads):
    _check_rank4(x)
    b, h, w, f = x.shape
    if f != layer.in_features:
        raise ShapeMismatchError(
            f"input shape {x.shape} has {f} features but kernel {layer.weights.shape} expects {layer.in_features}")
    h_out, w_out = _conv_output_hw(layer, h, w, pads)
    if h_out < 1 or w_out < 1:
        raise ShapeMismatchError(f"input shape {x.shape} is smaller than kernel {layer.weights.shape}")
    return h_out, w_out


def conv2d_forward(x: np.ndarray, layer: ConvLayer, pads=None) -> np.ndarray:
    """Cross-correlate ``x`` (B, H, W, F_in) with ``layer``; returns (B, H', W', K_out).

    ``pads`` overrides the layer's padding mode with explicit
    (top, bottom, left, right) amounts; the streaming path uses this to compute
    only the trailing columns of a window.
    """
    pads = layer.pads() if pads is None else tuple(pads)
    h_out, w_out = _check_conv_input(x, layer, pads)
    xi = _to_internal(x.astype(layer.weights.dtype, copy=False))
    out = _kernels.conv_forward(xi, layer.weights, layer.bias, pads, h_out, w_out)
    return _to_logical(out)


def conv2d_backward(x, layer: ConvLayer, grad_out, need_input_grad=True, pads=None):
    """Gradients of a scalar loss through :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false.
    """
    pads = layer.pads() if pads is None else tuple(pads)
    h_out, w_out = _check_conv_input(x, layer, pads)
    expected = (x.shape[0], h_out, w_out, layer.out_features)
    if np.shape(grad_out) != expected:
        raise ShapeMismatchError(f"grad_out shape {np.shape(grad_out)} does not match output shape {expected}")
    dtype = layer.weights.dtype
    xi = _to_internal(x.astype(dtype, copy=False))
    gi = _to_internal(grad_out.astype(dtype, copy=False))
    kh, kw = layer.kernel_size
    grad_w = _kernels.conv_backward_weight(xi, gi, pads, kh, kw)
    grad_b = gi.sum(axis=(0, 1, 3))
    grad_x = None
    if need_input_grad:
        gx = _kernels.conv_backward_input(gi, layer.weights, pads, x.shape[1], x.shape[2])
        grad_x = _to_logical(gx)
    return grad_x, grad_w, grad_b


# -- batch normalization -------------------------------------------------------


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ShapeMismatchError(f"{name} shape {getattr(self, name).shape} != gamma shape {n}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def fresh(cls, n_features, dtype=np.float32, eps=1e-3, momentum=0.99):
        return cls(
            gamma=np.ones(n_features, dtype),
            beta=np.zeros(n_features, dtype),
            running_mean=np.zeros(n_features, dtype),
            running_var=np.ones(n_features, dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def n_features(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    consumed: bool = False


def batchnorm_forward(x, layer: BatchNormLayer, mode="train"):
    """Normalize over every axis but the last.

    Returns ``(out, cache)``. In ``"train"`` mode batch statistics (biased
    variance) are used, the running statistics are updated in place and
    ``cache`` feeds :func:`batchnorm_backward`; in ``"infer"`` mode the running
    statistics are used and ``cache`` is None.
    """
    _check_rank4(x)
    if x.shape[3] != layer.n_features:
        raise ShapeMismatchError(
            f"input shape {x.shape} has {x.shape[3]} features, batch norm expects {layer.n_features}")
    dtype = layer.gamma.dtype
    x = x.astype(dtype, copy=False)
    if mode == "infer":
        scale = layer.gamma / np.sqrt(layer.running_var + dtype.type(layer.eps))
        shift = layer.beta - layer.running_mean * scale
        return x * scale + shift, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    out, x_hat, mean, var, inv_std = _kernels.bn_train_forward(
        _to_internal(x), layer.gamma, layer.beta, layer.eps)
    mom = dtype.type(layer.momentum)
    layer.running_mean[...] = mom * layer.running_mean + (1 - mom) * mean
    layer.running_var[...] = mom * layer.running_var + (1 - mom) * var
    return _to_logical(out), BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=layer.gamma.copy())


def batchnorm_backward(cache: BatchNormCache, grad_out):
    """Returns ``(grad_input, grad_gamma, grad_beta)``; a cache can be used once."""
    if cache.consumed:
        raise StaleCacheError("batch-norm cache was already consumed by a backward pass")
    x_hat = cache.x_hat  # internal layout
    logical_shape = (x_hat.shape[0], x_hat.shape[1], x_hat.shape[3], x_hat.shape[2])
    if np.shape(grad_out) != logical_shape:
        raise ShapeMismatchError(f"grad_out shape {np.shape(grad_out)} != forward shape {logical_shape}")
    cache.consumed = True
    g = _to_internal(grad_out.astype(x_hat.dtype, copy=False))
    grad_x, grad_gamma, grad_beta = _kernels.bn_backward(x_hat, g, cache.gamma, cache.inv_std)
    return _to_logical(grad_x), grad_gamma, grad_beta


# -- reshaping, loss --------------------------------------------------------------


def permute_hc(x):
    """(B, 1, T, C) -> (B, C, T, 1) with out[b, c, t, 0] = x[b, 0, t, c]."""
    _check_rank4(x)
    if x.shape[1] != 1:
        raise ShapeMismatchError(f"permute_hc needs height 1, got shape {x.shape}")
    return x.transpose(0, 3, 2, 1)


def permute_hc_backward(grad_out):
    return grad_out.transpose(0, 3, 2, 1)


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    if np.shape(pred) != np.shape(target):
        raise ShapeMismatchError(f"pred shape {np.shape(pred)} != target shape {np.shape(target)}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * diff.dtype.type(2.0 / diff.size)
    return loss, grad


# -- optimization ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, without weight decay.

    All gradients are checked before any parameter moves, so a rejected step
    leaves params and state untouched.
    """
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise KeyError("params, grads and optimizer state must share the same names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps_adam)
        p -= step.astype(p.dtype, copy=False)


def lr_schedule(epoch: int, lr0: float, gamma: float) -> float:
    """Exponential decay: ``lr0 * gamma ** epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if lr0 < 0 or not 0 < gamma <= 1:
        raise ValueError(f"need lr0 >= 0 and 0 < gamma <= 1, got lr0={lr0}, gamma={gamma}")
    return lr0 * gamma ** epoch
