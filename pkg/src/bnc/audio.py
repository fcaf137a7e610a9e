"""Waveform container and 32-bit float RIFF/WAVE I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile


@dataclass
class AudioBuffer:
    """Mono [T] or stereo [2, T] float waveform with its sample rate."""

    data: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim not in (1, 2):
            raise ValueError(f"audio must be [T] or [channels, T], got shape {self.data.shape}")
        if self.data.ndim == 2 and self.data.shape[0] > 2:
            raise ValueError(f"at most 2 channels supported, got {self.data.shape[0]}")

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 1 else self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[-1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


def write_wav(path: str, buf: AudioBuffer) -> None:
    data = buf.data
    if data.ndim == 2:
        data = data.T  # scipy expects [T, channels]
    wavfile.write(path, buf.sample_rate, np.ascontiguousarray(data, dtype=np.float32))


def read_wav(path: str) -> AudioBuffer:
    sr, data = wavfile.read(path)
    if data.dtype != np.float32:
        # normalize integer PCM to [-1, 1)
        info = np.iinfo(data.dtype)
        data = data.astype(np.float32) / max(abs(info.min), info.max)
    if data.ndim == 2:
        data = data.T
    return AudioBuffer(data, int(sr))
