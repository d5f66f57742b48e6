"""Recordings, file formats, preprocessing and synthetic data."""
from .preprocess import (
    WindowPair,
    bandpass_fir,
    car_reference,
    downsample,
    extract_epochs,
    preprocess,
    segment_windows,
    stack_windows,
)
from .recording import (
    KINDS,
    EventList,
    Recording,
    RecordingError,
    load_events,
    load_recording,
    save_events,
    save_recording,
)
from .synth import SynthSpec, channel_layout, synth_subject

__all__ = [
    "KINDS", "EventList", "Recording", "RecordingError", "SynthSpec", "WindowPair",
    "bandpass_fir", "car_reference", "channel_layout", "downsample", "extract_epochs",
    "load_events", "load_recording", "preprocess", "save_events", "save_recording",
    "segment_windows", "stack_windows", "synth_subject",
]
