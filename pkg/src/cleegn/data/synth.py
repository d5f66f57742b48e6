"""Synthetic EEG with known ground truth.

The clean part mixes a handful of band-limited cortical sources through
smooth scalp topographies and adds a small independent 1/f floor per channel.
Artifacts are blinks (frontal), muscle bursts (temporal, one side at a time)
and an optional mains tone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recording import Recording

# Ordered so that any prefix spreads over the scalp and starts with the channels
# artifacts land on.
STANDARD_ORDER = (
    "Fp1", "Fp2", "T7", "T8", "Cz", "O1", "O2", "Pz", "F3", "F4",
    "C3", "C4", "P3", "P4", "F7", "F8", "P7", "P8", "Fz", "Oz",
)
# top view, x: left(-) to right(+), y: back(-) to front(+)
POSITIONS = {
    "Fp1": (-0.31, 0.95), "Fp2": (0.31, 0.95), "F7": (-0.81, 0.59), "F3": (-0.39, 0.55),
    "Fz": (0.0, 0.5), "F4": (0.39, 0.55), "F8": (0.81, 0.59), "T7": (-1.0, 0.0),
    "C3": (-0.5, 0.0), "Cz": (0.0, 0.0), "C4": (0.5, 0.0), "T8": (1.0, 0.0),
    "P7": (-0.81, -0.59), "P3": (-0.39, -0.55), "Pz": (0.0, -0.5), "P4": (0.39, -0.55),
    "P8": (0.81, -0.59), "O1": (-0.31, -0.95), "Oz": (0.0, -1.0), "O2": (0.31, -0.95),
}
CLEAN_BAND = (1.0, 45.0)
LINE_HZ = 50.0


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings. Amplitudes are in microvolts.

    ``background_uv`` is the RMS of the clean signal averaged over channels;
    ``blink_uv`` the peak range of a blink at the frontal pole; ``emg_uv`` the
    RMS of a muscle burst at its centre channel.
    """

    n_channels: int = 8
    fs: float = 128.0
    duration_sec: float = 60.0
    seed: int = 0
    blinks_per_min: float = 20.0
    emg_per_min: float = 6.0
    background_uv: float = 4.0
    blink_uv: tuple = (50.0, 150.0)
    emg_uv: float = 30.0
    line_noise: bool = False
    line_uv: float = 10.0

    def __post_init__(self):
        if self.n_channels < 2:
            raise ValueError("need at least 2 channels")
        if self.fs <= 2 * CLEAN_BAND[0] or self.duration_sec <= 0:
            raise ValueError("fs and duration must be positive")
        for name in ("blinks_per_min", "emg_per_min", "background_uv", "emg_uv", "line_uv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.blink_uv
        if not 0 <= lo <= hi:
            raise ValueError(f"blink_uv must be an increasing non-negative range, got {self.blink_uv}")


def channel_layout(n_channels: int):
    """Names and (x, y) scalp coordinates for ``n_channels`` electrodes."""
    names = list(STANDARD_ORDER[:n_channels])
    pos = [POSITIONS[n] for n in names]
    extra = n_channels - len(names)
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(extra):
        r = np.sqrt((i + 0.5) / extra)
        names.append(f"E{len(names) + 1}")
        pos.append((r * np.cos(i * golden), r * np.sin(i * golden)))
    return names, np.array(pos)


def band_noise(rng, n: int, fs: float, lo: float, hi: float, size=(), pink: bool = False):
    """Unit-variance Gaussian noise restricted to ``[lo, hi]`` Hz by FFT masking."""
    spec = np.fft.rfft(rng.standard_normal((*size, n)), axis=-1)
    f = np.fft.rfftfreq(n, 1 / fs)
    gain = ((f >= lo) & (f <= hi)).astype(float)
    if pink:
        gain[1:] /= np.sqrt(f[1:])
    x = np.fft.irfft(spec * gain, n=n, axis=-1)
    sd = x.std(axis=-1, keepdims=True)
    return x / np.where(sd > 0, sd, 1.0)


def _topography(pos, centre, width):
    d2 = ((pos - np.asarray(centre)) ** 2).sum(axis=1)
    return np.exp(-d2 / (2 * width ** 2))


def _clean(spec: SynthSpec, pos, rng, n):
    fs = spec.fs
    nyq_hi = min(CLEAN_BAND[1], 0.45 * fs)
    alpha = rng.uniform(9.0, 11.0)
    theta = rng.uniform(5.0, 7.0)
    # (centre, band, relative amplitude)
    sources = [
        ((0.0, -0.75), (alpha - 1.5, alpha + 1.5), 1.0),
        ((0.0, 0.45), (theta - 1.0, theta + 1.0), 0.6),
        ((-0.5, 0.0), (13.0, 25.0), 0.5),
        ((0.5, 0.0), (13.0, 25.0), 0.5),
        ((0.0, 0.0), (CLEAN_BAND[0], nyq_hi), 0.8),
    ]
    out = np.zeros((len(pos), n))
    for centre, (lo, hi), amp in sources:
        c = np.asarray(centre) + rng.uniform(-0.1, 0.1, 2)
        topo = _topography(pos, c, 0.55) * rng.uniform(0.8, 1.2, len(pos))
        lo, hi = max(lo, CLEAN_BAND[0]), min(hi, nyq_hi)
        pink = (lo, hi) == (CLEAN_BAND[0], nyq_hi)
        out += amp * topo[:, None] * band_noise(rng, n, fs, lo, hi, pink=pink)
    out += 0.3 * band_noise(rng, n, fs, CLEAN_BAND[0], nyq_hi, size=(len(pos),), pink=True)
    rms = np.sqrt((out ** 2).mean())
    return out * (spec.background_uv / rms)


def _event_onsets(rng, rate_per_min, duration, min_gap, length):
    if rate_per_min <= 0:
        return []
    onsets, t = [], 0.0
    while True:
        t += max(rng.exponential(60.0 / rate_per_min), min_gap)
        if t + length > duration:
            return onsets
        onsets.append(t)


def _blinks(spec: SynthSpec, pos, rng, n):
    fs = spec.fs
    topo = np.exp(-(1.0 - pos[:, 1]) / 0.3) * (1.0 - 0.15 * np.abs(pos[:, 0]))
    out = np.zeros((len(pos), n))
    for t0 in _event_onsets(rng, spec.blinks_per_min, n / fs, 0.7, 0.5):
        dur = rng.uniform(0.3, 0.5)
        m = int(round(dur * fs))
        u = np.arange(m) / m
        # positive lid-closure lobe then a small opposite-sign overshoot
        split = 0.7
        shape = np.where(u < split, np.sin(np.pi * u / split) ** 2,
                         -0.2 * np.sin(np.pi * (u - split) / (1 - split)) ** 2)
        amp = rng.uniform(*spec.blink_uv)
        s = int(t0 * fs)
        out[:, s:s + m] += amp * topo[:, None] * shape[: n - s]
    return out


def _muscle(spec: SynthSpec, pos, rng, n):
    fs = spec.fs
    hi = min(40.0, 0.45 * fs)
    out = np.zeros((len(pos), n))
    if hi <= 20.0:
        return out
    for t0 in _event_onsets(rng, spec.emg_per_min, n / fs, 0.5, 1.5):
        m = int(round(rng.uniform(0.5, 1.5) * fs))
        side = rng.choice([-1.0, 1.0])
        topo = _topography(pos, (side, 0.0), 0.4)
        amp = spec.emg_uv * rng.uniform(0.5, 1.5)
        burst = band_noise(rng, m, fs, 20.0, hi, size=(len(pos),)) * np.hanning(m)
        s = int(t0 * fs)
        out[:, s:s + m] += amp * topo[:, None] * burst
    return out


def synth_subject(spec: SynthSpec) -> tuple[Recording, Recording]:
    """Generate a time-aligned (noisy, clean) pair.

    Clean activity and each artifact family draw from independent streams of
    ``spec.seed``, so changing an artifact rate never changes the clean signal.
    """
    names, pos = channel_layout(spec.n_channels)
    n = int(round(spec.duration_sec * spec.fs))
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]
    clean = _clean(spec, pos, streams[0], n)
    noisy = clean.copy()
    if spec.blinks_per_min > 0:
        noisy += _blinks(spec, pos, streams[1], n)
    if spec.emg_per_min > 0:
        noisy += _muscle(spec, pos, streams[2], n)
    if spec.line_noise and spec.line_uv > 0 and LINE_HZ < spec.fs / 2:
        rng = streams[3]
        t = np.arange(n) / spec.fs
        gains = rng.uniform(0.5, 1.0, spec.n_channels)
        noisy += spec.line_uv * gains[:, None] * np.sin(2 * np.pi * LINE_HZ * t + rng.uniform(0, 2 * np.pi))
    sid = f"s{spec.seed:02d}"
    return (
        Recording(names, spec.fs, noisy, sid, "raw"),
        Recording(names, spec.fs, clean, sid, "clean_truth"),
    )
