"""The CLEEGN network: build, run, differentiate, count and serialize.

Layer stack, with tensors shaped (batch, height, width, feature)::

    input           (B, C, T, 1)
    enc_spatial     C kernels (C, 1), valid      -> (B, 1, T, C)
    permute                                      -> (B, C, T, 1)
    bn1
    enc_temporal    N_F kernels (1, k), same     -> (B, C, T, N_F)
    bn2
    dec_temporal    N_F kernels (1, k), same     -> (B, C, T, N_F)
    bn3
    dec_spatial     C kernels (C, 1), same       -> (B, C, T, C)
    bn4
    dec_out         1 kernel (C, 1), same        -> (B, C, T, 1)

with k = floor(fs / 10). There is no nonlinearity anywhere in the stack.
"""
from __future__ import annotations

import copy
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .neuralcore import (
    BatchNormLayer,
    ConvLayer,
    ShapeMismatchError,
    StaleCacheError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    permute_hc,
    permute_hc_backward,
    same_padding,
)

CONV_NAMES = ("enc_spatial", "enc_temporal", "dec_temporal", "dec_spatial", "dec_out")
BN_NAMES = ("bn1", "bn2", "bn3", "bn4")
LAYER_ORDER = (
    "enc_spatial", "permute", "bn1", "enc_temporal", "bn2",
    "dec_temporal", "bn3", "dec_spatial", "bn4", "dec_out",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CleegnConfig:
    n_channels: int
    fs: float
    n_filters: int | None = None
    window_sec: float = 4.0

    def __post_init__(self):
        if self.n_filters is None:
            object.__setattr__(self, "n_filters", self.n_channels)
        if self.n_channels < 2:
            raise ConfigError(f"need at least 2 channels, got {self.n_channels}")
        if not self.fs > 0:
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        if self.kernel_width < 1:
            raise ConfigError(f"fs={self.fs} Hz gives temporal kernel width floor(fs/10) = 0")
        if self.n_filters < 1:
            raise ConfigError(f"need at least one temporal filter, got {self.n_filters}")
        if self.window_len < self.kernel_width:
            raise ConfigError(
                f"window of {self.window_len} samples is shorter than the kernel width {self.kernel_width}")

    @property
    def kernel_width(self) -> int:
        return math.floor(self.fs / 10)

    @property
    def window_len(self) -> int:
        return math.floor(self.fs * self.window_sec)


def param_count(config: CleegnConfig) -> int:
    """Learnable parameters (conv weights and biases, BN gamma and beta)."""
    c, k, nf = config.n_channels, config.kernel_width, config.n_filters
    return k * nf * nf + (k + 6 + c * c) * nf + 2 * c * c + 4 * c + 3


def layer_shapes(config: CleegnConfig, length: int | None = None) -> list[tuple[str, tuple]]:
    """(layer name, per-example output shape (H, W, F)) in execution order."""
    c, nf = config.n_channels, config.n_filters
    t = config.window_len if length is None else length
    shapes = {
        "input": (c, t, 1), "enc_spatial": (1, t, c), "permute": (c, t, 1), "bn1": (c, t, 1),
        "enc_temporal": (c, t, nf), "bn2": (c, t, nf), "dec_temporal": (c, t, nf), "bn3": (c, t, nf),
        "dec_spatial": (c, t, c), "bn4": (c, t, c), "dec_out": (c, t, 1),
    }
    return [(name, shapes[name]) for name in ("input", *LAYER_ORDER)]


def _glorot(rng, shape):
    k_out, kh, kw, f_in = shape
    fan_in, fan_out = kh * kw * f_in, kh * kw * k_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class CleegnModel:
    config: CleegnConfig
    enc_spatial: ConvLayer
    bn1: BatchNormLayer
    enc_temporal: ConvLayer
    bn2: BatchNormLayer
    dec_temporal: ConvLayer
    bn3: BatchNormLayer
    dec_spatial: ConvLayer
    bn4: BatchNormLayer
    dec_out: ConvLayer
    generation: int = field(default=0, compare=False)

    @property
    def dtype(self):
        return self.enc_spatial.weights.dtype

    def params(self) -> dict:
        """Live learnable arrays keyed ``"<layer>.<name>"``; updating them in place updates the model."""
        out = {}
        for name in CONV_NAMES:
            layer = getattr(self, name)
            out[f"{name}.weight"] = layer.weights
            out[f"{name}.bias"] = layer.bias
        for name in BN_NAMES:
            layer = getattr(self, name)
            out[f"{name}.gamma"] = layer.gamma
            out[f"{name}.beta"] = layer.beta
        return out

    def running_stats(self) -> dict:
        out = {}
        for name in BN_NAMES:
            layer = getattr(self, name)
            out[f"{name}.running_mean"] = layer.running_mean
            out[f"{name}.running_var"] = layer.running_var
        return out

    def n_learnable(self) -> int:
        return sum(p.size for p in self.params().values())

    def mark_updated(self):
        """Invalidate outstanding training caches after an in-place parameter update."""
        self.generation += 1

    def copy(self) -> CleegnModel:
        return copy.deepcopy(self)

    def astype(self, dtype) -> CleegnModel:
        m = copy.deepcopy(self)
        for arr_dict in (m.params(), m.running_stats()):
            for key, arr in arr_dict.items():
                layer_name, attr = key.split(".")
                attr = {"weight": "weights"}.get(attr, attr)
                setattr(getattr(m, layer_name), attr, arr.astype(dtype))
        return m

    def __call__(self, batch):
        return forward(self, batch, "infer")[0]


def build_model(config: CleegnConfig, seed: int = 0, dtype=np.float32,
                eps: float = 1e-3, momentum: float = 0.99) -> CleegnModel:
    """Allocate and initialize the network (Glorot-uniform conv weights, zero biases)."""
    rng = np.random.default_rng(seed)
    c, k, nf = config.n_channels, config.kernel_width, config.n_filters
    shapes = {
        "enc_spatial": ((c, c, 1, 1), "valid"),
        "enc_temporal": ((nf, 1, k, 1), "same_zero"),
        "dec_temporal": ((nf, 1, k, nf), "same_zero"),
        "dec_spatial": ((c, c, 1, nf), "same_zero"),
        "dec_out": ((1, c, 1, c), "same_zero"),
    }
    convs = {
        name: ConvLayer(_glorot(rng, shape).astype(dtype), np.zeros(shape[0], dtype), padding)
        for name, (shape, padding) in shapes.items()
    }
    bn_sizes = {"bn1": 1, "bn2": nf, "bn3": nf, "bn4": c}
    bns = {name: BatchNormLayer.fresh(n, dtype, eps, momentum) for name, n in bn_sizes.items()}
    return CleegnModel(config=config, **convs, **bns)


# -- forward / backward ------------------------------------------------------------


@dataclass
class ForwardCache:
    generation: int
    conv_inputs: dict
    bn_caches: dict
    consumed: bool = False


def _check_batch(model, batch):
    if np.ndim(batch) != 4 or batch.shape[3] != 1:
        raise ShapeMismatchError(f"batch must be (B, C, T, 1), got shape {np.shape(batch)}")
    c = model.config.n_channels
    if batch.shape[1] != c:
        raise ShapeMismatchError(f"model expects C={c} channels, batch has shape {batch.shape}")
    if batch.shape[2] < model.config.kernel_width:
        raise ShapeMismatchError(
            f"batch length {batch.shape[2]} is shorter than kernel width {model.config.kernel_width}")


def forward(model: CleegnModel, batch, mode="infer", trace=None):
    """Run the network. Returns ``(output, cache)``; ``cache`` is None in infer mode.

    If ``trace`` is a list, ``(layer_name, tensor)`` pairs are appended for every
    layer output in execution order.
    """
    _check_batch(model, batch)
    train = mode == "train"
    if not train and mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    conv_inputs, bn_caches = {}, {}
    x = batch.astype(model.dtype, copy=False)
    for name in LAYER_ORDER:
        if name == "permute":
            x = permute_hc(x)
        elif name.startswith("bn"):
            x, cache = batchnorm_forward(x, getattr(model, name), mode)
            bn_caches[name] = cache
        else:
            conv_inputs[name] = x
            x = conv2d_forward(x, getattr(model, name))
        if trace is not None:
            trace.append((name, x))
    if not train:
        return x, None
    return x, ForwardCache(model.generation, conv_inputs, bn_caches)


def backward(model: CleegnModel, cache: ForwardCache, grad_out, need_input_grad=False):
    """Back-propagate ``grad_out`` through a train-mode forward.

    Returns ``(grads, grad_input)`` where ``grads`` is keyed like
    :meth:`CleegnModel.params`.
    """
    if cache is None:
        raise StaleCacheError("backward needs the cache of a train-mode forward")
    if cache.consumed or cache.generation != model.generation:
        raise StaleCacheError("forward cache is stale: parameters changed or it was already used")
    cache.consumed = True
    grads = {}
    g = grad_out
    for name in reversed(LAYER_ORDER):
        if name == "permute":
            g = permute_hc_backward(g)
        elif name.startswith("bn"):
            g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = batchnorm_backward(cache.bn_caches[name], g)
        else:
            first = name == "enc_spatial"
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv2d_backward(
                cache.conv_inputs[name], getattr(model, name), g,
                need_input_grad=need_input_grad or not first)
    ordered = {k: grads[k] for k in model.params()}
    return ordered, g


def infer_tail(model: CleegnModel, batch, n_out: int):
    """Infer-mode output restricted to the last ``n_out`` time steps.

    Equal in exact arithmetic to ``model(batch)[:, :, -n_out:, :]`` but only
    evaluates the columns that feed those outputs.
    """
    _check_batch(model, batch)
    t = batch.shape[2]
    left, right = same_padding(model.config.kernel_width)
    start = t - n_out - 2 * left
    if start <= 0 or n_out >= t:
        return model(batch)[:, :, t - n_out:, :]
    x = batch[:, :, start:, :].astype(model.dtype, copy=False)
    x = conv2d_forward(x, model.enc_spatial)
    x = permute_hc(x)
    x, _ = batchnorm_forward(x, model.bn1, "infer")
    x = conv2d_forward(x, model.enc_temporal, pads=(0, 0, 0, right))
    x, _ = batchnorm_forward(x, model.bn2, "infer")
    x = conv2d_forward(x, model.dec_temporal, pads=(0, 0, 0, right))
    x, _ = batchnorm_forward(x, model.bn3, "infer")
    x = conv2d_forward(x, model.dec_spatial)
    x, _ = batchnorm_forward(x, model.bn4, "infer")
    return conv2d_forward(x, model.dec_out)


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"CLGN"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class CheckpointMeta:
    epoch: int = 0
    val_loss: float = float("nan")
    seed: int = 0


def _array_entries(model):
    return list(model.params().items()) + list(model.running_stats().items())


def save_checkpoint(model: CleegnModel, meta: CheckpointMeta | None = None) -> bytes:
    """Serialize to the little-endian ``CLGN`` v1 layout; payloads are float32."""
    meta = meta or CheckpointMeta()
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<IfIfff", cfg.n_channels, cfg.fs, cfg.n_filters, cfg.window_sec,
                          model.bn1.eps, model.bn1.momentum))
    for name, arr in _array_entries(model):
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<IfQ", meta.epoch, meta.val_loss, meta.seed))
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(data: bytes) -> tuple[CleegnModel, CheckpointMeta]:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic, not a CLGN checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    c, fs, nf, window_sec, eps, momentum = r.unpack("<IfIfff", "config block")
    try:
        config = CleegnConfig(c, float(fs), nf, float(window_sec))
        model = build_model(config, 0, np.float32, float(eps), float(momentum))
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(f"invalid config block: {exc}", 6) from exc
    for name, target in _array_entries(model):
        offset = r.pos
        (n,) = r.unpack("<H", "name length")
        got = bytes(r.take(n, "array name")).decode("ascii", errors="replace")
        if got != name:
            raise CheckpointError(f"expected array {name!r}, found {got!r}", offset)
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        if tuple(dims) != target.shape:
            raise CheckpointError(f"array {name!r} has shape {dims}, config implies {target.shape}", offset)
        payload = r.take(4 * target.size, f"payload of {name!r}")
        target[...] = np.frombuffer(payload, dtype="<f4").reshape(target.shape)
    epoch, val_loss, seed = r.unpack("<IfQ", "metadata block")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after metadata block", r.pos)
    return model, CheckpointMeta(epoch=epoch, val_loss=float(val_loss), seed=seed)


def save_checkpoint_file(path, model, meta=None):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model, meta))


def load_checkpoint_file(path):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
