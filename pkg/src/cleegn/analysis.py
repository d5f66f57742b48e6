"""Fitness metrics, Welch spectra and PCA projections of latent feature maps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .data.preprocess import extract_epochs
from .data.recording import EventList, Recording
from .model import CONV_NAMES, CleegnModel, forward


class DegenerateDataError(ValueError):
    """Data has too little rank for the requested decomposition."""


# -- fitness ---------------------------------------------------------------------------


@dataclass
class Fitness:
    channel_names: list
    per_channel: np.ndarray
    overall: float

    def to_dict(self) -> dict:
        return {
            "overall_mse": self.overall,
            "per_channel_mse": dict(zip(self.channel_names, map(float, self.per_channel))),
        }


def mse_fitness(recon: Recording, reference: Recording) -> Fitness:
    """Per-channel and overall mean squared error."""
    if recon.samples.shape != reference.samples.shape:
        raise ValueError(
            f"reconstruction shape {recon.samples.shape} does not match reference {reference.samples.shape}")
    sq = (recon.samples - reference.samples) ** 2
    return Fitness(list(reference.channel_names), sq.mean(axis=1), float(sq.mean()))


def epoched_fitness(recon: Recording, reference: Recording, events: EventList, t0_sec: float,
                    t1_sec: float) -> Fitness:
    """MSE restricted to event-locked epochs.

    Samples outside every ``[event + t0, event + t1)`` window are ignored and
    overlapping epochs count once per epoch. Events whose epoch leaves the
    recording are skipped, as in :func:`extract_epochs`.
    """
    if recon.samples.shape != reference.samples.shape:
        raise ValueError(
            f"reconstruction shape {recon.samples.shape} does not match reference {reference.samples.shape}")
    diff = recon.replace(samples=recon.samples - reference.samples)
    epochs, _ = extract_epochs(diff, events, t0_sec, t1_sec)
    if not epochs:
        raise ValueError("no epoch lies inside the recording")
    sq = np.concatenate([e for _, e in epochs], axis=1) ** 2
    return Fitness(list(reference.channel_names), sq.mean(axis=1), float(sq.mean()))


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# -- spectra ---------------------------------------------------------------------------


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray  # (C, n_freqs), µV²/Hz
    channel_names: list
    segment_len: int
    overlap: float
    window: str

    @property
    def resolution(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def band_power(self) -> np.ndarray:
        """Per-channel power integrated over all frequencies (≈ variance)."""
        return self.power.sum(axis=1) * self.resolution

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq", *self.channel_names])
            for i, f in enumerate(self.freqs):
                w.writerow([repr(float(f)), *(repr(float(p)) for p in self.power[:, i])])


def welch_psd(rec: Recording, segment_sec: float = 2.0, overlap: float = 0.5, window: str = "hann") -> PsdEstimate:
    """One-sided, density-scaled Welch estimate per channel.

    Segments are not detrended, so a DC offset shows up at 0 Hz (and, through
    the window's main lobe, the first bin).
    """
    nperseg = int(round(segment_sec * rec.fs))
    if nperseg < 2:
        raise ValueError(f"segment of {segment_sec} s at {rec.fs} Hz is too short")
    if rec.n_samples < nperseg:
        raise ValueError(f"recording has {rec.n_samples} samples, fewer than one {nperseg}-sample segment")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    noverlap = int(round(overlap * nperseg))
    freqs, power = signal.welch(rec.samples, fs=rec.fs, window=window, nperseg=nperseg, noverlap=noverlap,
                                detrend=False, return_onesided=True, scaling="density", axis=-1)
    return PsdEstimate(freqs, power, list(rec.channel_names), nperseg, overlap, window)


# -- PCA of channels ------------------------------------------------------------------


@dataclass
class PcaBasis:
    mean: np.ndarray  # (T_seg,)
    axes: np.ndarray  # (2, T_seg), orthonormal rows
    explained: np.ndarray  # (2,) variance fractions

    @property
    def length(self) -> int:
        return self.mean.size

    def project(self, rows) -> np.ndarray:
        rows = np.atleast_2d(rows)
        if rows.shape[1] != self.length:
            raise ValueError(f"series of length {rows.shape[1]} cannot use a basis fitted on length {self.length}")
        return (rows - self.mean) @ self.axes.T


def _segment(rec: Recording, segment):
    start, stop = segment
    if not 0 <= start < stop <= rec.n_samples:
        raise ValueError(f"segment {segment} outside recording of {rec.n_samples} samples")
    return rec.samples[:, start:stop]


def fit_pca_basis(noisy: Recording, segment) -> PcaBasis:
    """Two leading principal axes with channels as observations and samples as variables.

    Parameters
    ----------
    noisy : Recording
    segment : (int, int)
        Sample range ``[start, stop)``.
    """
    m = _segment(noisy, segment)
    c, t = m.shape
    if c < 3:
        raise ValueError(f"need at least 3 channels, got {c}")
    if t < c:
        raise ValueError(f"segment length {t} is shorter than the channel count {c}")
    mean = m.mean(axis=0)
    _, s, vt = np.linalg.svd(m - mean, full_matrices=False)
    total = float(np.sum(s ** 2))
    if total == 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateDataError("channel matrix has rank < 2 after centering; the second axis is undefined")
    return PcaBasis(mean, vt[:2].copy(), s[:2] ** 2 / total)


# layer index -> what gets projected
LATENT_LAYERS = ("input", *CONV_NAMES[:4], "output")


@dataclass
class LatentProjection:
    layer: int
    points: np.ndarray  # (n, 2)
    rows: np.ndarray  # (n,) row index within the layer

    def tags(self):
        return [(self.layer, int(r)) for r in self.rows]


def latent_rows(model: CleegnModel | None, window: np.ndarray, layer: int) -> np.ndarray:
    """Every length-T series of one layer, enumerated over (height, feature) pairs."""
    if not 0 <= layer < len(LATENT_LAYERS):
        raise ValueError(f"layer must be in 0..{len(LATENT_LAYERS) - 1}, got {layer}")
    if layer == 0:
        return window
    if model is None:
        raise ValueError(f"layer {layer} needs a model")
    window = window.astype(model.dtype)
    trace = []
    forward(model, window[None, :, :, None], "infer", trace=trace)
    tensors = dict(trace)
    if layer == len(LATENT_LAYERS) - 1:
        return tensors["dec_out"][0, :, :, 0]
    z = tensors[LATENT_LAYERS[layer]][0]  # (H, T, F)
    return z.transpose(0, 2, 1).reshape(-1, z.shape[1])


def project_latents(model: CleegnModel | None, noisy: Recording, basis: PcaBasis, layer: int,
                    segment) -> LatentProjection:
    """Project one layer's feature-map rows onto the channel PCA plane.

    Layer 0 is the input channels (no model needed), 1 to 4 the outputs of the
    first four convolutions (before batch norm), 5 the reconstructed channels.
    """
    window = _segment(noisy, segment)
    if window.shape[1] != basis.length:
        raise ValueError(f"segment length {window.shape[1]} differs from the basis length {basis.length}")
    rows = latent_rows(model, window, layer).astype(np.float64)
    return LatentProjection(layer, basis.project(rows), np.arange(rows.shape[0]))


def write_projections_csv(projections, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "layer", "row"])
        for p in projections:
            for (x, y), r in zip(p.points, p.rows):
                w.writerow([repr(float(x)), repr(float(y)), p.layer, int(r)])
