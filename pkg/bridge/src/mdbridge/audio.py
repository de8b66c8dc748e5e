"""Waveform loading.

The extraction contract assumes corpora are already resampled: every
input must be 16 kHz, mono, 16-bit PCM. Anything else is rejected
rather than silently resampled, so feature frame counts stay honest.
"""

import wave
from pathlib import Path
from typing import Union

import numpy as np

from .errors import AudioFormatError

SAMPLE_RATE = 16_000


def read_wav(path: Union[str, Path]) -> np.ndarray:
    """Read one wav file into a float64 waveform scaled to [-1, 1)."""
    path = Path(path)
    if not path.exists():
        raise AudioFormatError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a wav file ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, want {SAMPLE_RATE}")
    if n_channels != 1:
        raise AudioFormatError(f"{path}: {n_channels} channels, want mono")
    if width != 2:
        raise AudioFormatError(f"{path}: {8 * width}-bit samples, want 16-bit")
    if n == 0:
        raise AudioFormatError(f"{path}: empty waveform")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0
