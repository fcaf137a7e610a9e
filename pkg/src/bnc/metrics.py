"""Objective evaluation: waveform and log-mel distances plus analytic
interaural time/level measurements."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

from . import tensor as tc
from .dsp import MelConfig, StftConfig, mel_spectrogram
from .tensor import Tensor


def wave_l2(pred: np.ndarray, ref: np.ndarray) -> float:
    """Per-sample RMS distance between two equal-shape waveforms."""
    if pred.shape != ref.shape:
        raise ValueError(f"waveform shapes differ: {pred.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean((pred.astype(np.float64) - ref.astype(np.float64)) ** 2)))


def mel_l2(pred: np.ndarray, ref: np.ndarray, stft_cfg: StftConfig, mel_cfg: MelConfig) -> float:
    """Per-cell RMS distance between log-mel spectrograms, averaged over channels."""
    vals = []
    with tc.no_grad():
        for ch in range(pred.shape[0]):
            mp = mel_spectrogram(Tensor(pred[ch].astype(np.float64)), stft_cfg, mel_cfg).data
            mr = mel_spectrogram(Tensor(ref[ch].astype(np.float64)), stft_cfg, mel_cfg).data
            vals.append(np.sqrt(np.mean((mp - mr) ** 2)))
    return float(np.mean(vals))


def measure_itd(stereo: np.ndarray, max_lag: int | None = None) -> int:
    """Lag (samples) of the cross-correlation peak between ears.

    Positive means the right ear is delayed relative to the left (source on
    the left side).
    """
    left = stereo[0].astype(np.float64)
    right = stereo[1].astype(np.float64)
    # correlate(right, left)[lag] peaks at lag = d when right(t) = left(t - d)
    c = correlate(right, left, mode="full")
    lags = np.arange(-(len(left) - 1), len(right))
    if max_lag is not None:
        keep = np.abs(lags) <= max_lag
        c, lags = c[keep], lags[keep]
    return int(lags[int(np.argmax(c))])


def measure_ild(stereo: np.ndarray) -> float:
    """Level difference 20*log10(rms_left / rms_right) in dB."""
    rms = np.sqrt(np.mean(stereo.astype(np.float64) ** 2, axis=1))
    return float(20.0 * np.log10(max(rms[0], 1e-12) / max(rms[1], 1e-12)))


@dataclass
class EvalRow:
    clip_id: str
    wave_l2: float
    mel_l2: float
    itd_err_samples: float
    ild_err_db: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {k: 0.0 for k in ("wave_l2", "mel_l2", "itd_err_samples", "ild_err_db")}
        return {
            "wave_l2": float(np.mean([r.wave_l2 for r in self.rows])),
            "mel_l2": float(np.mean([r.mel_l2 for r in self.rows])),
            "itd_err_samples": float(np.mean([r.itd_err_samples for r in self.rows])),
            "ild_err_db": float(np.mean([r.ild_err_db for r in self.rows])),
        }


def evaluate_pair(clip_id: str, pred: np.ndarray, ref: np.ndarray,
                  stft_cfg: StftConfig, mel_cfg: MelConfig, max_lag: int | None = None) -> EvalRow:
    itd_p = measure_itd(pred, max_lag)
    itd_r = measure_itd(ref, max_lag)
    return EvalRow(
        clip_id=clip_id,
        wave_l2=wave_l2(pred, ref),
        mel_l2=mel_l2(pred, ref, stft_cfg, mel_cfg),
        itd_err_samples=float(abs(itd_p - itd_r)),
        ild_err_db=float(abs(measure_ild(pred) - measure_ild(ref))),
    )
