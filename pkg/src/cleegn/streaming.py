"""Sliding-window reconstruction, online (chunked pushes) and offline.

Online mode keeps the latest window of ``T`` samples. Once it is full, and
again after every further hop of ``H_s`` samples, the model runs on the window
and the newest ``H_s`` output samples are emitted. Every emitted sample
therefore depends only on input that has already arrived.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data.recording import Recording
from .model import CleegnModel, infer_tail

HOP_SEC = 0.5
_BATCH = 32


class MergePolicy(str, enum.Enum):
    LATEST_HOP = "latest_hop"
    OVERLAP_AVERAGE = "overlap_average"


class StreamError(ValueError):
    """Invalid streaming request."""


def hop_size(fs: float) -> int:
    return int(np.floor(HOP_SEC * fs))


@dataclass
class StreamState:
    model: CleegnModel
    fs: float
    window: int
    hop: int
    policy: MergePolicy
    buffer: np.ndarray
    fill: int = 0
    staged: int = 0
    emitted: int = 0
    consumed: int = 0


def _check_fs(model: CleegnModel, fs: float):
    if not np.isclose(model.config.fs, fs):
        raise StreamError(f"model was configured for fs={model.config.fs} Hz, stream is {fs} Hz")


def stream_init(model: CleegnModel, fs: float, policy=MergePolicy.LATEST_HOP) -> StreamState:
    _check_fs(model, fs)
    T = model.config.window_len
    hop = hop_size(fs)
    c = model.config.n_channels
    # the window plus one hop of staging room for samples not yet shifted in
    buf = np.zeros((c, T + hop), dtype=model.dtype)
    return StreamState(model, float(fs), T, hop, MergePolicy(policy), buf)


def _emit(state: StreamState) -> np.ndarray:
    win = state.buffer[None, :, : state.window, None]
    out = infer_tail(state.model, win, state.hop)[0, :, :, 0]
    state.emitted += state.hop
    return out


def stream_push(state: StreamState, chunk) -> np.ndarray:
    """Append ``chunk`` (C×m) and return whatever became ready (C×m', m' a multiple of the hop)."""
    if state.policy is not MergePolicy.LATEST_HOP:
        raise StreamError(f"merge policy {state.policy.value!r} needs lookahead and is offline-only")
    chunk = np.asarray(chunk)
    c = state.buffer.shape[0]
    if chunk.ndim != 2 or chunk.shape[0] != c:
        raise StreamError(f"chunk must be ({c}, m), got shape {chunk.shape}")
    T, H = state.window, state.hop
    out = []
    pos, m = 0, chunk.shape[1]
    while pos < m:
        if state.fill < T:
            take = min(T - state.fill, m - pos)
            state.buffer[:, state.fill:state.fill + take] = chunk[:, pos:pos + take]
            state.fill += take
            pos += take
            if state.fill == T:
                out.append(_emit(state))
        else:
            take = min(H - state.staged, m - pos)
            start = T + state.staged
            state.buffer[:, start:start + take] = chunk[:, pos:pos + take]
            state.staged += take
            pos += take
            if state.staged == H:
                state.buffer[:, :T] = state.buffer[:, H:T + H]
                state.staged = 0
                out.append(_emit(state))
    state.consumed += m
    if not out:
        return np.zeros((c, 0), dtype=state.buffer.dtype)
    return np.concatenate(out, axis=1)


def _windows(x: np.ndarray, starts, T):
    return np.stack([x[:, s:s + T] for s in starts])[..., None]


def offline_reconstruct(model: CleegnModel, rec: Recording, policy=MergePolicy.LATEST_HOP) -> Recording:
    """Reconstruct a whole recording with the same windows the online path would use.

    ``latest_hop`` matches the online emissions; the first ``T - H_s`` samples
    come from the first window and a trailing remainder shorter than a hop
    from a final window aligned to the end. ``overlap_average`` averages all
    window outputs covering each sample.
    """
    policy = MergePolicy(policy)
    _check_fs(model, rec.fs)
    T = model.config.window_len
    H = hop_size(rec.fs)
    n = rec.n_samples
    if n < T:
        raise StreamError(f"recording has {n} samples, shorter than one window of {T}")
    x = rec.samples.astype(model.dtype)
    starts = list(range(0, n - T + 1, H))
    tail_start = n - T if starts[-1] != n - T else None
    out = np.zeros((rec.n_channels, n))
    if policy is MergePolicy.LATEST_HOP:
        head = model(_windows(x, [0], T))[0, :, :, 0]
        out[:, : T - H] = head[:, : T - H]
        for i in range(0, len(starts), _BATCH):
            batch = starts[i:i + _BATCH]
            y = infer_tail(model, _windows(x, batch, T), H)[:, :, :, 0]
            for s, yy in zip(batch, y):
                out[:, s + T - H:s + T] = yy
        if tail_start is not None:
            last = model(_windows(x, [tail_start], T))[0, :, :, 0]
            r = n - (starts[-1] + T)
            out[:, n - r:] = last[:, T - r:]
    else:
        count = np.zeros(n)
        if tail_start is not None:
            starts.append(tail_start)
        for i in range(0, len(starts), _BATCH):
            batch = starts[i:i + _BATCH]
            y = model(_windows(x, batch, T))[:, :, :, 0]
            for s, yy in zip(batch, y):
                out[:, s:s + T] += yy
                count[s:s + T] += 1
        out /= count
    return rec.replace(samples=out, kind="reconstructed")
