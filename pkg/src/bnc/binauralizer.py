"""Receiver-side binaural decoder.

Latent frames are upsampled by a mirror of the encoder; the last few blocks
are feature-wise conditioned (per-channel scale and shift) on a Fourier-encoded
pose signal, and the two output channels are finished by a monotone time-warp
layer that realizes per-ear propagation delays plus a learned correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .codec import ModelConfig, ResidualUnit
from .geometry import geometric_delay_samples
from .layers import Conv1d, ConvTranspose1d, Linear, prefix_params
from .tensor import Tensor


@dataclass
class ConditionSignal:
    """Pose rows [len, 14]: tx position (3), tx quaternion (4), rx position (3),
    rx quaternion (4). All-zero rows are permitted (the "no pose" signal used
    while pretraining)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 14:
            raise ValueError(f"condition rows must be [len, 14], got {self.values.shape}")

    def validate(self, room_horizontal: float, room_vertical: float, tol: float = 1e-4) -> None:
        rows = self.values
        live = np.any(rows != 0.0, axis=1)
        for sl in (slice(3, 7), slice(10, 14)):
            norms = np.linalg.norm(rows[live][:, sl], axis=1)
            if norms.size and np.any(np.abs(norms - 1.0) > tol):
                raise ValueError("condition quaternions are not unit norm")
        for sl in (slice(0, 3), slice(7, 10)):
            pos = rows[live][:, sl]
            if pos.size and (np.any(pos[:, :2] < -tol) or np.any(pos[:, :2] > room_horizontal + tol)
                             or np.any(pos[:, 2] < -tol) or np.any(pos[:, 2] > room_vertical + tol)):
                raise ValueError("condition positions outside the room bounds")


def normalize_condition(rows: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Map positions into [-1, 1] using the room extents; quaternions pass through.

    All-zero rows stay all-zero so a blank condition really is a zero vector.
    """
    rows = np.asarray(rows, dtype=np.float64)
    out = rows.copy()
    live = np.any(rows != 0.0, axis=1)
    for start in (0, 7):
        out[live, start + 0] = 2.0 * rows[live, start + 0] / cfg.room_horizontal - 1.0
        out[live, start + 1] = 2.0 * rows[live, start + 1] / cfg.room_horizontal - 1.0
        out[live, start + 2] = 2.0 * rows[live, start + 2] / cfg.room_vertical - 1.0
    return out


def fourier_encode(rows: Tensor | np.ndarray, basis: np.ndarray) -> Tensor:
    """Random Fourier features: [sin(2 pi B c), cos(2 pi B c)] -> [len, 2F]."""
    rt = rows if isinstance(rows, Tensor) else Tensor(rows)
    proj = tc.linear(rt, Tensor(basis.astype(rt.data.dtype)))
    ang = proj * (2.0 * np.pi)
    return tc.concat([tc.sin(ang), tc.cos(ang)], axis=1)


class ConditionEncoder:
    """Frozen Gaussian Fourier basis followed by a three-layer ReLU MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.basis = (rng.normal(0.0, cfg.fourier_sigma,
                                 size=(cfg.fourier_features, cfg.cond_dim))).astype(dtype)
        f2 = 2 * cfg.fourier_features
        self.l1 = Linear(f2, cfg.cond_hidden, rng, dtype)
        self.l2 = Linear(cfg.cond_hidden, cfg.cond_hidden, rng, dtype)
        self.l3 = Linear(cfg.cond_hidden, cfg.cond_hidden, rng, dtype)

    def __call__(self, rows: Tensor | np.ndarray) -> Tensor:
        h = fourier_encode(rows, self.basis)
        h = tc.relu(self.l1(h))
        h = tc.relu(self.l2(h))
        return self.l3(h)

    def params(self):
        return {**prefix_params("l1", self.l1.params()),
                **prefix_params("l2", self.l2.params()),
                **prefix_params("l3", self.l3.params())}

    def buffers(self):
        return {"basis": self.basis}


def film_apply(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel, per-frame affine modulation: gamma * features + beta."""
    if gamma.shape != features.shape or beta.shape != features.shape:
        raise tc.ShapeError(f"film_apply: modulation {gamma.shape}/{beta.shape} "
                            f"does not match features {features.shape}")
    return features * gamma + beta


def _upsample_rows(rows_t: Tensor, frames: int) -> Tensor:
    """Linearly upsample [C, len] along time to [C, frames]."""
    length = rows_t.data.shape[1]
    if frames > 1:
        pos = np.arange(frames) * ((length - 1) / (frames - 1)) if length > 1 else np.zeros(frames)
    else:
        pos = np.zeros(1)
    return tc.interp_time(rows_t, Tensor(pos.astype(rows_t.data.dtype)))


class FilmSite:
    """One conditioned location: a linear head mapping pose features to a
    per-channel scale delta and shift, upsampled to the feature frame rate."""

    def __init__(self, hidden: int, channels: int, rng, dtype):
        self.head = Linear(hidden, 2 * channels, rng, dtype, init_scale=0.1)
        self.channels = channels

    def __call__(self, features: Tensor, cond_feats: Tensor) -> Tensor:
        frames = features.data.shape[1]
        mod = _upsample_rows(tc.transpose(self.head(cond_feats)), frames)
        gamma = 1.0 + mod[:self.channels]
        beta = mod[self.channels:]
        return film_apply(features, gamma, beta)

    def params(self):
        return prefix_params("head", self.head.params())


class DecoderBlock:
    def __init__(self, c_in: int, stride: int, rng, dtype, cond_hidden: int | None):
        c_out = c_in // 2
        self.up = ConvTranspose1d(c_in, c_out, 2 * stride, stride, rng, dtype)
        self.units = [ResidualUnit(c_out, d, rng, dtype) for d in (1, 3, 9)]
        self.films = ([FilmSite(cond_hidden, c_out, rng, dtype) for _ in range(4)]
                      if cond_hidden else None)

    def __call__(self, x: Tensor, cond_feats: Tensor | None) -> Tensor:
        x = self.up(tc.elu(x))
        conditioned = self.films is not None and cond_feats is not None
        if conditioned:
            x = self.films[0](x, cond_feats)
        for i, u in enumerate(self.units):
            x = u(x)
            if conditioned:
                x = self.films[i + 1](x, cond_feats)
        return x

    def params(self):
        out = prefix_params("up", self.up.params())
        for i, u in enumerate(self.units):
            out.update(prefix_params(f"res{i}", u.params()))
        if self.films:
            for i, f in enumerate(self.films):
                out.update(prefix_params(f"film{i}", f.params()))
        return out


class Decoder:
    """Latents [L, D] -> pre-warp stereo [2, L * frame_stride] in [-1, 1]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        n = len(cfg.strides)
        ch_top = cfg.base_channels * (2 ** n)
        self.inp = Conv1d(cfg.latent_dim, ch_top, 1, rng, dtype)
        self.blocks = []
        ch = ch_top
        for i, s in enumerate(reversed(cfg.strides)):
            conditioned = i >= n - cfg.film_blocks
            self.blocks.append(DecoderBlock(ch, s, rng, dtype,
                                            cfg.cond_hidden if conditioned else None))
            ch //= 2
        self.pre_out = Conv1d(ch, ch, 7, rng, dtype, pad=3)
        self.out = Conv1d(ch, 2, 1, rng, dtype)

    def __call__(self, latents: Tensor, cond_feats: Tensor | None = None) -> Tensor:
        h = self.inp(tc.transpose(latents))
        for b in self.blocks:
            h = b(h, cond_feats)
        h = self.pre_out(tc.elu(h))
        return tc.tanh(self.out(tc.elu(h)))

    def params(self):
        out = prefix_params("inp", self.inp.params())
        for i, b in enumerate(self.blocks):
            out.update(prefix_params(f"b{i}", b.params()))
        out.update(prefix_params("pre_out", self.pre_out.params()))
        out.update(prefix_params("out", self.out.params()))
        return out


@dataclass
class WarpField:
    """Per-ear real-valued read positions [2, T], monotone non-decreasing and
    confined to [0, T-1]."""

    positions: Tensor

    def __post_init__(self):
        p = self.positions.data
        if p.ndim != 2 or p.shape[0] != 2:
            raise ValueError(f"warp field must be [2, T], got {p.shape}")

    def check(self, tol: float = 1e-9) -> None:
        p = self.positions.data
        t = p.shape[1]
        if np.any(np.diff(p, axis=1) < -tol):
            raise ValueError("warp positions are not monotone")
        if p.min() < -tol or p.max() > t - 1 + tol:
            raise ValueError("warp positions outside [0, T-1]")


class WarpNet:
    """Small conv net over Fourier-encoded pose predicting per-ear warp
    increments, plus one learned delay offset per ear. The final layer starts
    at zero so the initial warp is purely geometric."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        f2 = 2 * cfg.fourier_features
        w = cfg.warp_channels
        self.c1 = Conv1d(f2, w, 3, rng, dtype, pad=1)
        self.c2 = Conv1d(w, w, 3, rng, dtype, pad=1)
        self.c3 = Conv1d(w, 2, 3, rng, dtype, pad=1)
        self.c3.w.data[:] = 0.0
        self.offsets = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)

    def raw_increments(self, encoded: Tensor) -> Tensor:
        """encoded: [T, 2F] Fourier features at audio rate -> raw a(t) [2, T]."""
        h = tc.transpose(encoded)
        h = tc.elu(self.c1(h))
        h = tc.elu(self.c2(h))
        return self.c3(h)

    def params(self):
        return {**prefix_params("c1", self.c1.params()),
                **prefix_params("c2", self.c2.params()),
                **prefix_params("c3", self.c3.params()),
                "offsets": self.offsets}


def warp_field(raw_rows: np.ndarray | None, encoded: Tensor | None, warp_net: WarpNet | None,
               cfg: ModelConfig, length: int, use_geometric: bool = True,
               use_neural: bool = True) -> WarpField:
    """Build per-ear read positions for a signal of the given length.

    Geometric part: t - distance(tx, ear)/c * sample_rate from raw pose rows
    at audio rate. Neural part: increments 2*sigmoid(a(t)) in (0, 2) are
    cumulatively summed; their zero-mean deviation from the identity ramp,
    anchored at a learned per-ear offset, is added as a correction. Positions
    are clamped to [0, T-1]; a running maximum makes monotonicity uncondi-
    tional even for unphysical pose velocities.
    """
    base = np.tile(np.arange(length, dtype=np.float64), (2, 1))
    if use_geometric:
        if raw_rows is None:
            raise ValueError("warp_field: geometric delay requested without pose rows")
        base = base - geometric_delay_samples(raw_rows, cfg.sample_rate, cfg.ear_offset_m,
                                              cfg.speed_of_sound)
    dtype = cfg.np_dtype
    if use_neural and warp_net is not None and encoded is not None:
        a = warp_net.raw_increments(encoded)
        delta = 2.0 * tc.sigmoid(a)
        ramp = tc.cumsum(delta, axis=-1)
        wander = ramp - Tensor(np.tile(np.arange(1, length + 1, dtype=dtype), (2, 1)))
        centered = tc.channel_bias(wander, tc.neg(tc.reduce_mean(wander, axis=1)))
        correction = tc.channel_bias(centered, warp_net.offsets)
        raw = correction + Tensor(base.astype(dtype))
    else:
        raw = Tensor(base.astype(dtype))
    clamped = tc.clamp(raw, 0.0, float(length - 1))
    return WarpField(tc.cummax_last(clamped))


def warp_apply(signal: Tensor, field: WarpField) -> Tensor:
    """Read the stereo signal [2, T] at the field's positions (linear interp)."""
    return tc.interp_time(signal, field.positions)
