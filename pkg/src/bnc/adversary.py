"""Discriminators: a single-scale spectrogram discriminator and a three-scale
waveform discriminator whose logits carry a projection term on the pose
signal. Both expose their intermediate features for feature matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .dsp import StftConfig, downsample_avg, stft
from .layers import Conv1d, Conv2d, Linear, prefix_params
from .tensor import Tensor


@dataclass(frozen=True)
class DiscConfig:
    stft_fft: int = 1024
    stft_hop: int = 256
    stft_units: int = 6
    stft_base: int = 16
    stft_cap: int = 128
    msd_base: int = 16
    msd_cap: int = 256
    msd_layers: int = 4
    msd_kernel: int = 41
    msd_stride: int = 4
    msd_groups: int = 16
    cond_dim: int = 14
    use_projection: bool = True
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class DiscOutput:
    logits: Tensor
    features: list[Tensor] = field(default_factory=list)


class SpecResUnit:
    """Stride-2 residual reduction over (frames x bins)."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        self.c1 = Conv2d(c_in, c_out, (3, 3), rng, dtype, stride=(2, 2), pad=(1, 1))
        self.c2 = Conv2d(c_out, c_out, (3, 3), rng, dtype, stride=(1, 1), pad=(1, 1))
        self.skip = Conv2d(c_in, c_out, (1, 1), rng, dtype, stride=(2, 2))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c1(tc.elu(x))
        h = self.c2(tc.elu(h))
        return self.skip(x) + h

    def params(self):
        return {**prefix_params("c1", self.c1.params()),
                **prefix_params("c2", self.c2.params()),
                **prefix_params("skip", self.skip.params())}


class SpectrogramDiscriminator:
    """Judges the stacked per-channel magnitude spectrograms of a stereo clip."""

    def __init__(self, cfg: DiscConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.stft_cfg = StftConfig(cfg.stft_fft, cfg.stft_hop)
        self.inp = Conv2d(2, cfg.stft_base, (3, 3), rng, dtype, pad=(1, 1))
        self.units = []
        ch = cfg.stft_base
        for _ in range(cfg.stft_units):
            nxt = min(2 * ch, cfg.stft_cap)
            self.units.append(SpecResUnit(ch, nxt, rng, dtype))
            ch = nxt
        self.head = Conv2d(ch, 1, (3, 3), rng, dtype, pad=(1, 1))

    def __call__(self, y: Tensor) -> DiscOutput:
        if y.ndim != 2 or y.data.shape[0] != 2:
            raise tc.ShapeError(f"spectrogram discriminator expects [2, T], got {y.shape}")
        mags = []
        for ch in range(2):
            mag, _ = stft(y[ch], self.stft_cfg)
            mags.append(tc.reshape(mag, (1, *mag.shape)))
        x = tc.concat(mags, axis=0)
        feats = []
        h = self.inp(x)
        feats.append(h)
        for u in self.units:
            h = u(h)
            feats.append(h)
        logits = self.head(tc.elu(h))
        return DiscOutput(tc.reshape(logits, (logits.size,)), feats)

    def params(self):
        out = prefix_params("inp", self.inp.params())
        for i, u in enumerate(self.units):
            out.update(prefix_params(f"u{i}", u.params()))
        out.update(prefix_params("head", self.head.params()))
        return out


def projection_logit(phi: Tensor, cond_rows: np.ndarray, embed: Linear,
                     uncond: Tensor) -> Tensor:
    """Conditional logits: unconditional head plus <embed(c_t), phi_t> per step.

    phi: [frames_d, F_d] time-distributed features; cond_rows: [frames_d, cond_dim].
    """
    if cond_rows.shape[0] != phi.data.shape[0]:
        raise tc.ShapeError(f"projection_logit: condition length {cond_rows.shape[0]} "
                            f"!= feature frames {phi.data.shape[0]}")
    emb = embed(Tensor(cond_rows.astype(phi.data.dtype)))
    return uncond + tc.reduce_sum(phi * emb, axis=1)


def _rows_for_frames(rows_t: np.ndarray, frames: int) -> np.ndarray:
    """Linearly subsample audio-rate condition rows [T, C] onto `frames` points."""
    t = rows_t.shape[0]
    pos = np.linspace(0.0, t - 1.0, frames)
    lo = np.clip(np.floor(pos).astype(int), 0, t - 2) if t > 1 else np.zeros(frames, int)
    frac = (pos - lo)[:, None] if t > 1 else np.zeros((frames, 1))
    hi = np.minimum(lo + 1, t - 1)
    return rows_t[lo] * (1.0 - frac) + rows_t[hi] * frac


class ScaleDiscriminator:
    """Strided grouped conv stack over one temporal scale of the waveform."""

    def __init__(self, cfg: DiscConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.inp = Conv1d(2, cfg.msd_base, 15, rng, dtype, pad=7)
        self.layers = []
        ch = cfg.msd_base
        k, s = cfg.msd_kernel, cfg.msd_stride
        for _ in range(cfg.msd_layers):
            nxt = min(4 * ch, cfg.msd_cap)
            g = cfg.msd_groups if (ch % cfg.msd_groups == 0 and nxt % cfg.msd_groups == 0) else 1
            self.layers.append(Conv1d(ch, nxt, k, rng, dtype, stride=s,
                                      pad=((k - 1) // 2, k - 1 - (k - 1) // 2), groups=g))
            ch = nxt
        self.post = Conv1d(ch, ch, 5, rng, dtype, pad=2)
        self.head = Conv1d(ch, 1, 3, rng, dtype, pad=1)
        self.embed = Linear(cfg.cond_dim, ch, rng, dtype, bias=False)

    def __call__(self, y: Tensor, rows_t: np.ndarray | None) -> DiscOutput:
        feats = []
        h = self.inp(y)
        feats.append(h)
        for layer in self.layers:
            h = layer(tc.leaky_relu(h, 0.2))
            feats.append(h)
        phi_ct = self.post(tc.leaky_relu(h, 0.2))           # [F_d, frames_d]
        feats.append(phi_ct)
        uncond = tc.reshape(self.head(tc.leaky_relu(phi_ct, 0.2)), (phi_ct.data.shape[1],))
        if self.cfg.use_projection and rows_t is not None:
            phi = tc.transpose(phi_ct)                      # [frames_d, F_d]
            rows_d = _rows_for_frames(rows_t, phi.data.shape[0])
            logits = projection_logit(phi, rows_d, self.embed, uncond)
        else:
            logits = uncond
        return DiscOutput(logits, feats)

    def params(self):
        out = prefix_params("inp", self.inp.params())
        for i, l in enumerate(self.layers):
            out.update(prefix_params(f"l{i}", l.params()))
        out.update(prefix_params("post", self.post.params()))
        out.update(prefix_params("head", self.head.params()))
        out.update(prefix_params("embed", self.embed.params()))
        return out


class MultiScaleDiscriminator:
    """Three scale discriminators fed 1x / 2x / 4x averaged-down audio."""

    def __init__(self, cfg: DiscConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.subs = [ScaleDiscriminator(cfg, rng) for _ in range(3)]

    def __call__(self, y: Tensor, rows_t: np.ndarray | None) -> list[DiscOutput]:
        outs = []
        for factor, sub in zip((1, 2, 4), self.subs):
            ys = downsample_avg(y, factor)
            rows = _rows_for_frames(rows_t, ys.data.shape[1]) if rows_t is not None else None
            outs.append(sub(ys, rows))
        return outs

    def params(self):
        out = {}
        for i, s in enumerate(self.subs):
            out.update(prefix_params(f"s{i}", s.params()))
        return out


class AdversarySet:
    """All discriminators used during training: 3 waveform scales + 1 spectrogram."""

    def __init__(self, cfg: DiscConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 777)))
        self.cfg = cfg
        self.msd = MultiScaleDiscriminator(cfg, rng)
        self.spec = SpectrogramDiscriminator(cfg, rng)

    def __call__(self, y: Tensor, rows_t: np.ndarray | None) -> list[DiscOutput]:
        return self.msd(y, rows_t) + [self.spec(y)]

    def params(self):
        return {**prefix_params("msd", self.msd.params()),
                **prefix_params("spec", self.spec.params())}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"disc.{k}": v.data for k, v in self.params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        dtype = self.cfg.np_dtype
        for k, v in self.params().items():
            v.data = arrays[f"disc.{k}"].astype(dtype)
