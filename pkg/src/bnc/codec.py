"""Transmitter-side audio codec: convolutional downsampling encoder followed
by a residual vector quantizer with EMA-trained codebooks.

The encoder is a stack of blocks, one per configured stride; each block runs
three dilated residual units and then a strided conv that doubles the channel
count. Latents are discretized layer by layer: each quantizer layer picks the
codeword nearest to the running residual, and the decoder-side gradient flows
straight through the quantizer to the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .layers import Conv1d, prefix_params
from .tensor import Tensor

EMA_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 48000
    strides: tuple[int, ...] = (2, 4, 5, 8)
    base_channels: int = 32
    latent_dim: int = 128
    rvq_layers: int = 8
    codebook_size: int = 1024
    film_blocks: int = 2
    fourier_features: int = 32
    fourier_sigma: float = 1.0
    cond_dim: int = 14
    cond_hidden: int = 256
    warp_channels: int = 16
    ear_offset_m: float = 0.09
    speed_of_sound: float = 343.0
    room_horizontal: float = 4.6
    room_vertical: float = 2.4
    dtype: str = "float32"

    def __post_init__(self):
        if self.codebook_size < 2 or self.codebook_size & (self.codebook_size - 1):
            raise ValueError(f"codebook_size {self.codebook_size} is not a power of two")
        if self.rvq_layers < 1:
            raise ValueError("rvq_layers must be >= 1")
        if not (0 <= self.film_blocks <= len(self.strides)):
            raise ValueError(f"film_blocks {self.film_blocks} outside [0, {len(self.strides)}]")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")

    @property
    def frame_stride(self) -> int:
        """Samples of audio per latent frame (product of the block strides)."""
        return math.prod(self.strides)

    @property
    def codebook_bits(self) -> int:
        return int(self.codebook_size).bit_length() - 1

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def fingerprint(self) -> tuple:
        return (self.sample_rate, tuple(self.strides), self.rvq_layers, self.codebook_size)


@dataclass
class CodeGrid:
    """Quantizer indices [frames, layers] plus the producing configuration."""

    indices: np.ndarray
    fingerprint: tuple

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError(f"code grid must be [frames, layers], got {self.indices.shape}")
        size = self.fingerprint[3]
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= size):
            raise ValueError(f"code index outside [0, {size})")

    @property
    def frames(self) -> int:
        return self.indices.shape[0]

    @property
    def layers(self) -> int:
        return self.indices.shape[1]


class Codebooks:
    """Per-layer codeword tables with EMA cluster statistics."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        bound = 1.0 / cfg.codebook_size
        self.tables = [rng.uniform(-bound, bound, size=(cfg.codebook_size, cfg.latent_dim)).astype(dtype)
                       for _ in range(cfg.rvq_layers)]
        for t in self.tables:
            # a zero codeword guarantees a layer can never grow the residual
            t[0] = 0.0
        # ema_sum / (ema_count + eps) reproduces the codeword exactly at init
        self.ema_count = [np.zeros(cfg.codebook_size, dtype=np.float64)
                          for _ in range(cfg.rvq_layers)]
        self.ema_sum = [t.astype(np.float64) * EMA_EPS for t in self.tables]
        self.cfg = cfg

    def state_arrays(self, prefix: str = "rvq") -> dict[str, np.ndarray]:
        out = {}
        for n, (t, c, s) in enumerate(zip(self.tables, self.ema_count, self.ema_sum)):
            out[f"{prefix}.{n}.table"] = t
            out[f"{prefix}.{n}.count"] = c
            out[f"{prefix}.{n}.sum"] = s
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "rvq") -> None:
        dtype = self.cfg.np_dtype
        for n in range(len(self.tables)):
            self.tables[n] = arrays[f"{prefix}.{n}.table"].astype(dtype)
            self.ema_count[n] = arrays[f"{prefix}.{n}.count"].astype(np.float64)
            self.ema_sum[n] = arrays[f"{prefix}.{n}.sum"].astype(np.float64)

    def ema_update(self, assignments: list[tuple[np.ndarray, np.ndarray]], decay: float) -> None:
        """Fold one batch of assignments into the EMA statistics.

        assignments[n] = (indices [L], residual vectors [L, D]) fed to layer n.
        Per entry: count <- decay*count + (1-decay)*batch_count, likewise for
        the vector sum, and codeword <- sum / (count + eps).
        """
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {decay}")
        size = self.cfg.codebook_size
        for n, (idx, vecs) in enumerate(assignments):
            batch_count = np.bincount(idx, minlength=size).astype(np.float64)
            batch_sum = np.zeros_like(self.ema_sum[n])
            np.add.at(batch_sum, idx, vecs.astype(np.float64))
            self.ema_count[n] = decay * self.ema_count[n] + (1.0 - decay) * batch_count
            self.ema_sum[n] = decay * self.ema_sum[n] + (1.0 - decay) * batch_sum
            self.tables[n] = (self.ema_sum[n] / (self.ema_count[n][:, None] + EMA_EPS)
                              ).astype(self.cfg.np_dtype)

    def used_fraction(self) -> float:
        used = sum(int(np.count_nonzero(c > 0)) for c in self.ema_count)
        return used / (len(self.tables) * self.cfg.codebook_size)


def rvq_quantize(z: Tensor, books: Codebooks):
    """Residual vector quantization of latents [L, D].

    Returns (grid, quantized, residual_norms, assignments): the index grid,
    the straight-through quantized latents, the mean residual L2 after each
    layer, and per-layer (indices, residual input) pairs for EMA updates.
    """
    cfg = books.cfg
    if z.data.ndim != 2 or z.data.shape[1] != cfg.latent_dim:
        raise tc.ShapeError(f"rvq_quantize: latents must be [L, {cfg.latent_dim}], got {z.shape}")
    residual = z.data.astype(np.float64)
    quantized = np.zeros_like(residual)
    idx_cols = []
    residual_norms = []
    assignments = []
    for n, table in enumerate(books.tables):
        tbl = table.astype(np.float64)
        d2 = (np.sum(residual * residual, axis=1, keepdims=True)
              - 2.0 * residual @ tbl.T
              + np.sum(tbl * tbl, axis=1)[None, :])
        idx = np.argmin(d2, axis=1)
        assignments.append((idx, residual.copy()))
        chosen = tbl[idx]
        quantized += chosen
        residual = residual - chosen
        idx_cols.append(idx)
        residual_norms.append(float(np.mean(np.linalg.norm(residual, axis=1))))
    grid = CodeGrid(np.stack(idx_cols, axis=1), cfg.fingerprint())
    qt = tc.straight_through(z, quantized.astype(z.data.dtype))
    return grid, qt, residual_norms, assignments


def rvq_dequantize(grid: CodeGrid, books: Codebooks) -> Tensor:
    """Sum the indexed codewords per layer; exact inverse of the quantized sum."""
    cfg = books.cfg
    if grid.fingerprint != cfg.fingerprint():
        raise ValueError(f"code grid fingerprint {grid.fingerprint} does not match "
                         f"model {cfg.fingerprint()}")
    if grid.layers != cfg.rvq_layers:
        raise ValueError(f"grid has {grid.layers} layers, model expects {cfg.rvq_layers}")
    total = np.zeros((grid.frames, cfg.latent_dim), dtype=np.float64)
    for n, table in enumerate(books.tables):
        idx = grid.indices[:, n]
        if idx.size and idx.max() >= table.shape[0]:
            raise ValueError(f"corrupt code grid: index {idx.max()} out of range at layer {n}")
        total += table.astype(np.float64)[idx]
    return Tensor(total.astype(cfg.np_dtype))


class ResidualUnit:
    """Dilated conv (kernel 7) plus pointwise conv with ELU activations and a skip."""

    def __init__(self, channels: int, dilation: int, rng, dtype):
        self.c1 = Conv1d(channels, channels, 7, rng, dtype, dilation=dilation, pad=3 * dilation)
        self.c2 = Conv1d(channels, channels, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c1(tc.elu(x))
        h = self.c2(tc.elu(h))
        return x + h

    def params(self):
        return {**prefix_params("c1", self.c1.params()), **prefix_params("c2", self.c2.params())}


class EncoderBlock:
    def __init__(self, c_in: int, stride: int, rng, dtype):
        self.units = [ResidualUnit(c_in, d, rng, dtype) for d in (1, 3, 9)]
        k = 2 * stride
        pad = (stride - stride // 2, stride // 2) if stride > 1 else (k // 2, k - 1 - k // 2)
        self.down = Conv1d(c_in, 2 * c_in, k, rng, dtype, stride=stride, pad=pad)

    def __call__(self, x: Tensor) -> Tensor:
        for u in self.units:
            x = u(x)
        return self.down(tc.elu(x))

    def params(self):
        out = {}
        for i, u in enumerate(self.units):
            out.update(prefix_params(f"res{i}", u.params()))
        out.update(prefix_params("down", self.down.params()))
        return out


class Encoder:
    """Mono waveform [T] -> latents [L, D] with L = ceil(T / frame_stride)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.inp = Conv1d(1, cfg.base_channels, 7, rng, dtype, pad=3)
        self.blocks = []
        ch = cfg.base_channels
        for s in cfg.strides:
            self.blocks.append(EncoderBlock(ch, s, rng, dtype))
            ch *= 2
        self.out = Conv1d(ch, cfg.latent_dim, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 1:
            raise tc.ShapeError(f"encoder expects mono audio [T], got shape {x.shape}")
        t = x.data.shape[0]
        if t == 0:
            raise tc.ShapeError("encoder input is empty")
        rem = (-t) % self.cfg.frame_stride
        if rem:
            x = tc.pad1d(x, 0, rem)
        h = tc.reshape(x, (1, t + rem))
        h = self.inp(h)
        for b in self.blocks:
            h = b(h)
        h = self.out(h)
        return tc.transpose(h)

    def params(self):
        out = prefix_params("inp", self.inp.params())
        for i, b in enumerate(self.blocks):
            out.update(prefix_params(f"b{i}", b.params()))
        out.update(prefix_params("out", self.out.params()))
        return out
