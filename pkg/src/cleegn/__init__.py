"""Lightweight convolutional autoencoder for calibration-free EEG artifact removal."""
from ._backend import BACKEND
from .model import CleegnConfig, CleegnModel, build_model, param_count

__version__ = "0.1.0"

__all__ = ["BACKEND", "CleegnConfig", "CleegnModel", "build_model", "param_count", "__version__"]
