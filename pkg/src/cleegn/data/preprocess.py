"""Re-referencing, filtering, resampling, windowing and epoching."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .recording import EventList, Recording

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowPair:
    noisy: np.ndarray
    reference: np.ndarray
    subject_id: str
    start_sample: int


def car_reference(rec: Recording) -> Recording:
    """Subtract the cross-channel mean from every sample column."""
    x = rec.samples
    return rec.replace(samples=x - x.mean(axis=0, keepdims=True))


def _zero_phase(taps: np.ndarray, x: np.ndarray) -> np.ndarray:
    # even-mode extension mirrors about the edge sample (reflection padding)
    padlen = min(3 * taps.size, x.shape[-1] - 1)
    return signal.filtfilt(taps, [1.0], x, axis=-1, padtype="even", padlen=padlen)


def fir_bandpass_taps(lo_hz: float, hi_hz: float, taps: int, fs: float) -> np.ndarray:
    """Hamming windowed-sinc band-pass coefficients."""
    if not 0 < lo_hz < hi_hz < fs / 2:
        raise ValueError(f"band must satisfy 0 < lo < hi < fs/2, got lo={lo_hz}, hi={hi_hz}, fs={fs}")
    if taps < 3 or taps % 2 == 0:
        raise ValueError(f"taps must be odd and >= 3, got {taps}")
    return signal.firwin(taps, [lo_hz, hi_hz], pass_zero=False, window="hamming", fs=fs)


def bandpass_fir(rec: Recording, lo_hz: float, hi_hz: float, taps: int = 513) -> Recording:
    """Zero-phase band-pass of every channel.

    Parameters
    ----------
    rec : Recording
    lo_hz, hi_hz : float
        Pass band edges, ``0 < lo_hz < hi_hz < fs / 2``.
    taps : int
        Odd FIR length. The filter runs forward then backward, so the
        effective magnitude response is the square of the designed one.

    Returns
    -------
    Recording
        Same length as the input; edges use mirror padding.
    """
    h = fir_bandpass_taps(lo_hz, hi_hz, taps, rec.fs)
    return rec.replace(samples=_zero_phase(h, rec.samples))


def downsample(rec: Recording, factor: int, taps: int | None = None) -> Recording:
    """Anti-alias low-pass at 0.45 of the new rate, then keep every ``factor``-th sample."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return rec.replace()
    n_out = rec.n_samples // factor
    if n_out < 1:
        raise ValueError(f"factor {factor} leaves no samples from {rec.n_samples}")
    fs_new = rec.fs / factor
    if taps is None:
        taps = 40 * factor + 1
    h = signal.firwin(taps, 0.45 * fs_new, window="hamming", fs=rec.fs)
    y = _zero_phase(h, rec.samples)[:, : n_out * factor : factor]
    return rec.replace(samples=y, fs=fs_new)


def preprocess(rec: Recording, target_fs: float | None = None, lo_hz: float = 1.0,
               hi_hz: float = 40.0, taps: int = 513) -> Recording:
    """Downsample to ``target_fs`` (integer factor), re-reference to the common average, band-pass."""
    if target_fs is not None and target_fs != rec.fs:
        factor = rec.fs / target_fs
        if abs(factor - round(factor)) > 1e-9:
            raise ValueError(f"cannot reach {target_fs} Hz from {rec.fs} Hz with an integer factor")
        rec = downsample(rec, int(round(factor)))
    rec = car_reference(rec)
    return bandpass_fir(rec, lo_hz, hi_hz, taps)


def window_bounds(n_samples: int, window: int, stride: int) -> np.ndarray:
    if n_samples < window:
        return np.zeros(0, dtype=np.int64)
    return np.arange((n_samples - window) // stride + 1, dtype=np.int64) * stride


def segment_windows(noisy: Recording, reference: Recording, window_sec: float = 4.0,
                    stride_fraction: float = 0.5) -> list[WindowPair]:
    """Cut time-aligned (noisy, reference) window pairs."""
    if noisy.samples.shape != reference.samples.shape or noisy.fs != reference.fs:
        raise ValueError(
            f"misaligned pair: noisy {noisy.samples.shape} @ {noisy.fs} Hz vs "
            f"reference {reference.samples.shape} @ {reference.fs} Hz"
        )
    T = int(np.floor(noisy.fs * window_sec))
    stride = int(np.floor(stride_fraction * T))
    if T < 1 or stride < 1:
        raise ValueError(f"window of {T} samples at stride {stride} is empty")
    return [
        WindowPair(noisy.samples[:, s:s + T], reference.samples[:, s:s + T], noisy.subject_id, int(s))
        for s in window_bounds(noisy.n_samples, T, stride)
    ]


def stack_windows(pairs: list[WindowPair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into model-ready (N, C, T, 1) noisy and reference arrays."""
    x = np.stack([p.noisy for p in pairs]).astype(dtype)[..., None]
    y = np.stack([p.reference for p in pairs]).astype(dtype)[..., None]
    return x, y


def extract_epochs(rec: Recording, events: EventList, t0_sec: float, t1_sec: float):
    """Cut one (label, C×L) epoch per event.

    Returns
    -------
    epochs : list of (int, ndarray)
    skipped : list of (int, int)
        ``(sample, label)`` for events whose epoch leaves the recording.
    """
    if not t0_sec < t1_sec:
        raise ValueError(f"need t0 < t1, got {t0_sec}, {t1_sec}")
    off0 = int(np.floor(t0_sec * rec.fs))
    off1 = int(np.floor(t1_sec * rec.fs))
    epochs, skipped = [], []
    for ts, label in events:
        a, b = ts + off0, ts + off1
        if ts >= rec.n_samples or a < 0 or b > rec.n_samples:
            skipped.append((ts, label))
            continue
        epochs.append((label, rec.samples[:, a:b]))
    if skipped:
        log.warning("skipped %d of %d epochs outside the recording: %s", len(skipped), len(events), skipped)
    return epochs, skipped
