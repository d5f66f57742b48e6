"""Recording container and its on-disk formats (EEGR binary, CSV, event CSV)."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("raw", "reference", "reconstructed", "clean_truth")
EEGR_MAGIC = b"EEGR"
EEGR_VERSION = 1


class RecordingError(ValueError):
    """Malformed recording data or file."""


@dataclass
class Recording:
    """Multi-channel EEG in microvolts, ``samples`` shaped (C, T_total)."""

    channel_names: list
    fs: float
    samples: np.ndarray
    subject_id: str = ""
    kind: str = "raw"

    def __post_init__(self):
        self.channel_names = [str(c) for c in self.channel_names]
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise RecordingError(f"samples must be (channels, time), got shape {self.samples.shape}")
        n_ch, n_t = self.samples.shape
        if n_ch != len(self.channel_names):
            raise RecordingError(f"{len(self.channel_names)} channel names for {n_ch} channels")
        if n_ch < 2:
            raise RecordingError(f"need at least 2 channels, got {n_ch}")
        if n_t < 1:
            raise RecordingError("recording has no samples")
        if not self.fs > 0:
            raise RecordingError(f"sampling rate must be positive, got {self.fs}")
        if self.kind not in KINDS:
            raise RecordingError(f"kind must be one of {KINDS}, got {self.kind!r}")
        bad = np.argwhere(~np.isfinite(self.samples))
        if bad.size:
            c, t = bad[0]
            raise RecordingError(f"non-finite sample at channel {self.channel_names[c]!r}, sample {t}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def replace(self, **changes) -> Recording:
        fields = dict(channel_names=self.channel_names, fs=self.fs, samples=self.samples,
                      subject_id=self.subject_id, kind=self.kind)
        fields.update(changes)
        return Recording(**fields)

    def head(self, n_samples: int) -> Recording:
        return self.replace(samples=self.samples[:, :n_samples])


# -- EEGR binary ----------------------------------------------------------------------


def encode_eegr(rec: Recording) -> bytes:
    buf = io.BytesIO()
    buf.write(EEGR_MAGIC)
    buf.write(struct.pack("<HIfQB", EEGR_VERSION, rec.n_channels, rec.fs, rec.n_samples, KINDS.index(rec.kind)))
    for name in rec.channel_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    # frame-interleaved: T_total frames of C values
    buf.write(np.ascontiguousarray(rec.samples.T, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_eegr(data: bytes, subject_id: str = "") -> Recording:
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise RecordingError(f"truncated EEGR data while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != EEGR_MAGIC:
        raise RecordingError("bad magic at byte 0, not an EEGR file")
    version, n_ch, fs, n_t, kind = struct.unpack("<HIfQB", take(19, "header"))
    if version != EEGR_VERSION:
        raise RecordingError(f"unsupported EEGR version {version} at byte 4")
    if kind >= len(KINDS):
        raise RecordingError(f"unknown recording kind code {kind} at byte 22")
    names = []
    for _ in range(n_ch):
        (n,) = struct.unpack("<H", take(2, "channel name length"))
        names.append(bytes(take(n, "channel name")).decode("utf-8"))
    frames = np.frombuffer(take(4 * n_ch * n_t, "sample frames"), dtype="<f4").reshape(n_t, n_ch)
    if pos != len(view):
        raise RecordingError(f"{len(view) - pos} trailing bytes after sample frames at byte {pos}")
    bad = np.argwhere(~np.isfinite(frames))
    if bad.size:
        t, c = bad[0]
        raise RecordingError(f"non-finite sample in frame {t}, channel {c} ({names[c]!r})")
    return Recording(names, float(fs), frames.T.astype(np.float64), subject_id, KINDS[kind])


# -- CSV -------------------------------------------------------------------------------


def write_csv(rec: Recording, path):
    t = np.arange(rec.n_samples) / rec.fs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *rec.channel_names])
        for i in range(rec.n_samples):
            w.writerow([repr(float(t[i])), *(repr(float(v)) for v in rec.samples[:, i])])


def read_csv(path, fs: float | None = None, subject_id: str = "", kind: str = "raw") -> Recording:
    """Read a CSV with a header row, a time column in seconds, then one column per channel.

    ``fs`` is inferred from the first two time stamps when not given.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise RecordingError(f"{path}: empty CSV, header row required")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3:
        raise RecordingError(f"{path}: header needs a time column and at least 2 channels, got {header}")
    width = len(header)
    times = []
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise RecordingError(f"{path}: line {lineno} has {len(row)} fields, header has {width}")
        try:
            nums = [float(v) for v in row]
        except ValueError as exc:
            raise RecordingError(f"{path}: line {lineno}: {exc}") from exc
        for col, v in enumerate(nums):
            if not np.isfinite(v):
                raise RecordingError(f"{path}: non-finite value at line {lineno}, column {header[col]!r}")
        times.append(nums[0])
        values.append(nums[1:])
    if not values:
        raise RecordingError(f"{path}: no data rows")
    if fs is None:
        if len(times) < 2 or times[1] <= times[0]:
            raise RecordingError(f"{path}: cannot infer sampling rate from the time column; pass fs")
        fs = 1.0 / (times[1] - times[0])
        if abs(fs - round(fs)) < 1e-6 * fs:
            fs = float(round(fs))
    return Recording(header[1:], fs, np.array(values).T, subject_id, kind)


# -- generic load/save -----------------------------------------------------------------


def subject_from_path(path) -> str:
    return Path(path).stem.split("_")[0]


def save_recording(rec: Recording, path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(rec, path)
    else:
        path.write_bytes(encode_eegr(rec))


def load_recording(path, fs: float | None = None, subject_id: str | None = None) -> Recording:
    """Load an EEGR or CSV file. ``subject_id`` defaults to the file-name prefix before ``_``."""
    path = Path(path)
    sid = subject_from_path(path) if subject_id is None else subject_id
    if path.suffix.lower() == ".csv":
        return read_csv(path, fs=fs, subject_id=sid)
    try:
        return decode_eegr(path.read_bytes(), subject_id=sid)
    except RecordingError as exc:
        raise RecordingError(f"{path}: {exc}") from None


# -- events ------------------------------------------------------------------------------


@dataclass
class EventList:
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape != self.labels.shape or self.samples.ndim != 1:
            raise RecordingError("event samples and labels must be equal-length 1-D sequences")
        if np.any(np.diff(self.samples) <= 0):
            raise RecordingError("event timestamps must be strictly increasing")
        if self.samples.size and self.samples[0] < 0:
            raise RecordingError("event timestamps must be non-negative")

    def __len__(self):
        return self.samples.size

    def __iter__(self):
        return zip(self.samples.tolist(), self.labels.tolist())


def load_events(path) -> EventList:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["sample", "label"]:
        raise RecordingError(f"{path}: event file needs header 'sample,label'")
    samples, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            s, lab = (int(v) for v in row)
        except ValueError as exc:
            raise RecordingError(f"{path}: line {lineno}: {exc}") from exc
        samples.append(s)
        labels.append(lab)
    return EventList(samples, labels)


def save_events(events: EventList, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "label"])
        for s, lab in events:
            w.writerow([s, lab])
