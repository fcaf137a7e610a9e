"""Signal-processing kernels: STFT, mel spectrogram, pooled downsampling and
pose-track resampling.

The STFT is computed as framed matmuls against fixed DFT matrices so that the
loss paths stay differentiable through both magnitude and phase. All
functions are stateless and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .tensor import Tensor


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256

    def __post_init__(self):
        if self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size {self.fft_size} is not a power of two")
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 24000.0
    sample_rate: int = 48000
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError(f"mel band [{self.f_min}, {self.f_max}] invalid for sr {self.sample_rate}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


@lru_cache(maxsize=16)
def _dft_matrices(fft_size: int) -> tuple[np.ndarray, np.ndarray]:
    # one-sided DFT: X_k = sum_n x_n exp(-2i pi k n / N)
    n = np.arange(fft_size)
    k = np.arange(fft_size // 2 + 1)
    ang = 2.0 * np.pi * np.outer(k, n) / fft_size
    return np.cos(ang), -np.sin(ang)          # weights for re and im, each [bins, fft]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(mel_cfg: MelConfig, fft_size: int) -> np.ndarray:
    """Triangular mel filters [n_mels, bins]; every filter has nonzero weight."""
    bins = fft_size // 2 + 1
    freqs = np.arange(bins) * mel_cfg.sample_rate / fft_size
    pts = mel_to_hz(np.linspace(hz_to_mel(mel_cfg.f_min), hz_to_mel(mel_cfg.f_max),
                                mel_cfg.n_mels + 2))
    fb = np.zeros((mel_cfg.n_mels, bins))
    for m in range(mel_cfg.n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not fb[m].any():
            # too few FFT bins under this triangle: take the nearest bin
            fb[m, int(np.argmin(np.abs(freqs - ctr)))] = 1.0
    return fb


def mel_band_centers(mel_cfg: MelConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(mel_cfg.f_min), hz_to_mel(mel_cfg.f_max),
                                mel_cfg.n_mels + 2))
    return pts[1:-1]


def stft(x: Tensor | np.ndarray, cfg: StftConfig) -> tuple[Tensor, Tensor]:
    """One-sided STFT of a single channel.

    Returns (magnitude, phase), each [frames, bins], with
    frames = (T - fft_size)//hop + 1 and no implicit padding. Phase lies in
    (-pi, pi]. Differentiable w.r.t. x through both outputs.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    t = xt.data.shape[-1]
    if xt.ndim != 1:
        raise tc.ShapeError(f"stft expects a single channel [T], got {xt.shape}")
    if t < cfg.fft_size:
        raise tc.ShapeError(f"signal length {t} shorter than fft_size {cfg.fft_size}")
    frames = tc.frame_signal(xt, cfg.fft_size, cfg.hop)
    count = frames.data.shape[0]
    win = np.broadcast_to(_hann(cfg.fft_size).astype(xt.data.dtype), (count, cfg.fft_size)).copy()
    windowed = frames * Tensor(win)
    cos_w, sin_w = _dft_matrices(cfg.fft_size)
    re = tc.linear(windowed, Tensor(cos_w.astype(xt.data.dtype)))
    im = tc.linear(windowed, Tensor(sin_w.astype(xt.data.dtype)))
    mag = tc.complex_magnitude(re, im)
    phase = tc.atan2(im, re)
    return mag, phase


def mel_spectrogram(x: Tensor | np.ndarray, stft_cfg: StftConfig, mel_cfg: MelConfig) -> Tensor:
    """log(max(mel_filter @ magnitude, log_floor)) with shape [frames, n_mels]."""
    mag, _ = stft(x, stft_cfg)
    fb = mel_filterbank(mel_cfg, stft_cfg.fft_size)
    mel = tc.linear(mag, Tensor(fb.astype(mag.data.dtype)))
    return tc.log(tc.clamp(mel, lo=mel_cfg.log_floor))


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Strided average pooling of [C, T] by 1, 2 or 4 (zero-pads the tail)."""
    if factor not in (1, 2, 4):
        raise ValueError(f"downsample factor must be 1, 2 or 4, got {factor}")
    if factor == 1:
        return x
    c, t = x.data.shape
    rem = (-t) % factor
    if rem:
        x = tc.pad1d(x, 0, rem)
        t += rem
    return tc.reduce_mean(tc.reshape(x, (c, t // factor, factor)), axis=2)


def resample_condition(track, target_len: int, target_rate_hint: float) -> np.ndarray:
    """Sample a pose track on a uniform grid of target_len points.

    Positions are linearly interpolated; quaternions are interpolated linearly
    on the shortest arc and renormalized to unit norm. Queries beyond the
    track's span clamp to its endpoints. Returns [target_len, 14] rows laid
    out as tx position (3), tx quaternion (4), rx position (3), rx quaternion (4).
    """
    times = np.asarray(track.times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("resample_condition: empty pose track")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("resample_condition: timestamps are not strictly increasing")
    rows = track.rows()
    query = np.arange(target_len) / float(target_rate_hint)
    query = np.clip(query, times[0], times[-1])
    if times.size == 1:
        return np.repeat(rows, target_len, axis=0)

    hi = np.clip(np.searchsorted(times, query, side="right"), 1, times.size - 1)
    lo = hi - 1
    w = (query - times[lo]) / (times[hi] - times[lo])
    out = rows[lo] * (1.0 - w[:, None]) + rows[hi] * w[:, None]

    for sl in (slice(3, 7), slice(10, 14)):
        qa, qb = rows[lo][:, sl], rows[hi][:, sl]
        flip = np.sum(qa * qb, axis=1) < 0.0
        qb = np.where(flip[:, None], -qb, qb)
        q = qa * (1.0 - w[:, None]) + qb * w[:, None]
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        out[:, sl] = np.where(norm > 1e-12, q / np.maximum(norm, 1e-12), q)
    if not np.all(np.isfinite(out)):
        raise ValueError("resample_condition produced non-finite rows")
    return out
