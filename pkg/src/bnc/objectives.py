"""Training objectives: interaural difference, angular phase, hinge
adversarial, feature matching and log-mel losses, combined with configurable
weights into a per-step report.

Normalization choices keep every term length-invariant (RMS-style for
waveform terms, per-element for features, mean-over-cells for mel) so one
weight combination works across clip lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .dsp import MelConfig, StftConfig, mel_spectrogram, stft
from .tensor import Tensor

PHASE_MAG_FLOOR = 1e-8  # bins quieter than this carry no phase information


class NumericError(RuntimeError):
    """A loss term became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    diff: float = 1.0
    phase: float = 0.01
    adversarial: float = 1.0
    feature: float = 2.0
    mel: float = 45.0

    def __post_init__(self):
        for name in ("diff", "phase", "adversarial", "feature", "mel"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


# the earlier monaural-codec weighting that proved unsuitable here, kept as a
# named alternative for comparison runs
LEGACY_CODEC_WEIGHTS = LossWeights(diff=1.0, phase=0.01, adversarial=1.0, feature=100.0, mel=1.0)


@dataclass
class LossReport:
    step: int
    l_diff: float = 0.0
    l_pha: float = 0.0
    l_adv_g: float = 0.0
    l_fm: float = 0.0
    l_mel: float = 0.0
    total: float = 0.0

    CSV_HEADER = "step,l_diff,l_pha,l_adv_g,l_fm,l_mel,total"

    def csv_line(self) -> str:
        return (f"{self.step},{self.l_diff:.10g},{self.l_pha:.10g},{self.l_adv_g:.10g},"
                f"{self.l_fm:.10g},{self.l_mel:.10g},{self.total:.10g}")

    def recompute_total(self, w: LossWeights) -> float:
        return (w.diff * self.l_diff + w.phase * self.l_pha + w.adversarial * self.l_adv_g
                + w.feature * self.l_fm + w.mel * self.l_mel)


def _check_stereo_pair(pred: Tensor, target: Tensor | np.ndarray, name: str) -> Tensor:
    tt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != tt.shape:
        raise tc.ShapeError(f"{name}: prediction {pred.shape} vs target {tt.shape}")
    if pred.ndim != 2 or pred.data.shape[0] != 2:
        raise tc.ShapeError(f"{name}: expected stereo [2, T], got {pred.shape}")
    return tt


def difference_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """L2 norm of the interaural difference error, scaled by 1/sqrt(T)."""
    tt = _check_stereo_pair(pred, target, "difference_loss")
    t = pred.data.shape[1]
    d = (pred[0] - pred[1]) - (tt.data[0] - tt.data[1])
    return tc.l2_norm(d) * (1.0 / np.sqrt(t))


def phase_term_from_spec(p_mag: Tensor, p_phase: Tensor, t_mag: np.ndarray,
                         t_phase: np.ndarray) -> Tensor:
    """Magnitude-weighted mean of squared wrapped phase error for one channel."""
    mask = (t_mag > PHASE_MAG_FLOOR) & (p_mag.data > PHASE_MAG_FLOOR)
    if not mask.any():
        return tc.reduce_sum(p_phase * Tensor(np.zeros_like(t_phase)))
    weights = np.where(mask, t_mag, 0.0)
    weights = weights / weights.sum()
    delta = p_phase - Tensor(t_phase.astype(p_phase.data.dtype))
    wrapped = tc.atan2(tc.sin(delta), tc.cos(delta))
    return tc.reduce_sum(wrapped * wrapped * Tensor(weights.astype(p_phase.data.dtype)))


def _masked_phase_term(pred_ch: Tensor, target_ch: np.ndarray, cfg: StftConfig,
                       target_spec: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    if target_spec is None:
        with tc.no_grad():
            tm, tp = stft(Tensor(target_ch), cfg)
        target_spec = (tm.data, tp.data)
    p_mag, p_phase = stft(pred_ch, cfg)
    return phase_term_from_spec(p_mag, p_phase, *target_spec)


def phase_loss(pred: Tensor, target: Tensor | np.ndarray, cfg: StftConfig,
               target_specs: list[tuple[np.ndarray, np.ndarray]] | None = None) -> Tensor:
    """Angular-space phase error summed over both ears.

    Bins are masked in only where both spectra carry energy, and weighted by
    the normalized target magnitude.
    """
    tt = _check_stereo_pair(pred, target, "phase_loss")
    terms = []
    for ch in range(2):
        spec = target_specs[ch] if target_specs is not None else None
        terms.append(_masked_phase_term(pred[ch], tt.data[ch], cfg, spec))
    return terms[0] + terms[1]


def hinge_discriminator_loss(real_logits: list[Tensor], fake_logits: list[Tensor]) -> Tensor:
    """Mean over discriminators of max(0, 1 - real) + max(0, 1 + fake)."""
    if len(real_logits) != len(fake_logits):
        raise ValueError("hinge_discriminator_loss: mismatched logit lists")
    terms = []
    for r, f in zip(real_logits, fake_logits):
        terms.append(tc.reduce_mean(tc.relu(1.0 - r)) + tc.reduce_mean(tc.relu(1.0 + f)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def hinge_generator_loss(fake_logits: list[Tensor]) -> Tensor:
    """Mean over discriminators of max(0, 1 - fake)."""
    terms = [tc.reduce_mean(tc.relu(1.0 - f)) for f in fake_logits]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def feature_matching_loss(real_feats: list[list[Tensor]],
                          fake_feats: list[list[Tensor]]) -> Tensor:
    """Mean over discriminators and layers of ||real - fake||_2 / element_count."""
    if len(real_feats) != len(fake_feats):
        raise ValueError("feature_matching_loss: mismatched discriminator counts")
    terms = []
    for rf, ff in zip(real_feats, fake_feats):
        if len(rf) != len(ff):
            raise ValueError("feature_matching_loss: mismatched layer counts")
        for r, f in zip(rf, ff):
            terms.append(tc.l2_norm(f - r.detach()) * (1.0 / r.size))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def mel_from_magnitude(mag: Tensor, stft_cfg: StftConfig, mel_cfg: MelConfig) -> Tensor:
    """log-mel from an already computed magnitude spectrogram."""
    from .dsp import mel_filterbank
    fb = mel_filterbank(mel_cfg, stft_cfg.fft_size)
    return tc.log(tc.clamp(tc.linear(mag, Tensor(fb.astype(mag.data.dtype))),
                           lo=mel_cfg.log_floor))


def mel_loss(pred: Tensor, target: Tensor | np.ndarray, stft_cfg: StftConfig,
             mel_cfg: MelConfig, target_mels: list[np.ndarray] | None = None) -> Tensor:
    """L1 between log-mel spectrograms, mean over cells, summed over ears."""
    tt = _check_stereo_pair(pred, target, "mel_loss")
    terms = []
    for ch in range(2):
        pm = mel_spectrogram(pred[ch], stft_cfg, mel_cfg)
        if target_mels is None:
            with tc.no_grad():
                tm = mel_spectrogram(Tensor(tt.data[ch]), stft_cfg, mel_cfg).data
        else:
            tm = target_mels[ch]
        terms.append(tc.reduce_mean(tc.absolute(pm - Tensor(tm.astype(pm.data.dtype)))))
    return terms[0] + terms[1]


def total_generator_loss(step: int, weights: LossWeights, l_diff: Tensor | None = None,
                         l_pha: Tensor | None = None, l_adv: Tensor | None = None,
                         l_fm: Tensor | None = None, l_mel: Tensor | None = None
                         ) -> tuple[Tensor | None, LossReport]:
    """Weighted sum of the supplied terms plus a report of unweighted values.

    Raises NumericError naming the first non-finite term.
    """
    report = LossReport(step)
    total: Tensor | None = None
    for name, attr, term, w in (("l_diff", "l_diff", l_diff, weights.diff),
                                ("l_pha", "l_pha", l_pha, weights.phase),
                                ("l_adv", "l_adv_g", l_adv, weights.adversarial),
                                ("l_fm", "l_fm", l_fm, weights.feature),
                                ("l_mel", "l_mel", l_mel, weights.mel)):
        if term is None:
            continue
        val = term.item()
        if not np.isfinite(val):
            raise NumericError(f"loss term {name} is not finite: {val}")
        setattr(report, attr, val)
        weighted = term * w
        total = weighted if total is None else total + weighted
    report.total = total.item() if total is not None else 0.0
    return total, report
