"""End-to-end generator: encoder + residual quantizer + conditioned decoder +
time warp, with flat-named parameter save/load."""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from . import checkpoint
from . import dsp
from . import tensor as tc
from .binauralizer import (ConditionEncoder, Decoder, WarpNet, fourier_encode,
                           normalize_condition, warp_apply, warp_field)
from .codec import CodeGrid, Codebooks, Encoder, ModelConfig, rvq_dequantize, rvq_quantize
from .tensor import Tensor

POSE_RATE = 240.0  # pose tracking rate, frames per second

_CFG_SCALARS = ("sample_rate", "base_channels", "latent_dim", "rvq_layers", "codebook_size",
                "film_blocks", "fourier_features", "fourier_sigma", "cond_dim", "cond_hidden",
                "warp_channels", "ear_offset_m", "speed_of_sound", "room_horizontal",
                "room_vertical")


def config_to_arrays(cfg: ModelConfig, prefix: str = "cfg") -> dict[str, np.ndarray]:
    # float64 entries so float-valued settings round-trip bit-exactly
    out = {f"{prefix}.strides": np.asarray(cfg.strides, dtype=np.float64)}
    for name in _CFG_SCALARS:
        out[f"{prefix}.{name}"] = np.asarray([getattr(cfg, name)], dtype=np.float64)
    out[f"{prefix}.dtype64"] = np.asarray([1.0 if cfg.dtype == "float64" else 0.0],
                                          dtype=np.float64)
    return out


def config_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "cfg") -> ModelConfig:
    kwargs = {"strides": tuple(int(s) for s in arrays[f"{prefix}.strides"])}
    types = {f.name: f.type for f in fields(ModelConfig)}
    for name in _CFG_SCALARS:
        val = float(arrays[f"{prefix}.{name}"][0])
        kwargs[name] = val if types[name] == "float" else int(round(val))
    kwargs["dtype"] = "float64" if float(arrays[f"{prefix}.dtype64"][0]) else "float32"
    return ModelConfig(**kwargs)


class BinauralCodec:
    """The trainable transmitter/receiver pair."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, 9000)))
        self.encoder = Encoder(cfg, rng)
        self.books = Codebooks(cfg, rng)
        self.cond = ConditionEncoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.warp = WarpNet(cfg, rng)

    # ---------------------------------------------------------------- params

    def params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("enc", self.encoder), ("dec", self.decoder),
                            ("cond", self.cond), ("warp", self.warp)):
            for k, v in mod.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params().items()}
        out["cond.basis.buf"] = self.cond.basis
        out.update(self.books.state_arrays())
        out.update(config_to_arrays(self.cfg))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        dtype = self.cfg.np_dtype
        for k, v in self.params().items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if arrays[k].shape != v.data.shape:
                raise ValueError(f"checkpoint parameter {k!r} has shape {arrays[k].shape}, "
                                 f"expected {v.data.shape}")
            v.data = arrays[k].astype(dtype)
        self.cond.basis = arrays["cond.basis.buf"].astype(dtype)
        self.books.load_state(arrays)

    def save(self, path: str) -> None:
        checkpoint.save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path: str) -> "BinauralCodec":
        arrays = checkpoint.load_arrays(path)
        model = cls(config_from_arrays(arrays))
        model.load_state(arrays)
        return model

    # --------------------------------------------------------------- condition

    def condition_rows(self, track, length: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw audio-rate rows, normalized audio-rate rows and normalized
        pose-rate rows for a clip of `length` samples."""
        sr = self.cfg.sample_rate
        raw_t = dsp.resample_condition(track, length, sr)
        pose_len = max(1, int(round(length / sr * POSE_RATE)))
        raw_pose = dsp.resample_condition(track, pose_len, POSE_RATE)
        return raw_t, normalize_condition(raw_t, self.cfg), normalize_condition(raw_pose, self.cfg)

    def zero_condition(self, length: int) -> np.ndarray:
        pose_len = max(1, int(round(length / self.cfg.sample_rate * POSE_RATE)))
        return np.zeros((pose_len, self.cfg.cond_dim))

    # ----------------------------------------------------------------- pieces

    def encode(self, x: Tensor | np.ndarray) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        return self.encoder(xt)

    def encode_to_codes(self, x: np.ndarray) -> CodeGrid:
        with tc.no_grad():
            grid, _, _, _ = rvq_quantize(self.encode(x), self.books)
        return grid

    def decode_latents(self, latents: Tensor, cond_pose_norm: np.ndarray | None) -> Tensor:
        feats = None
        if cond_pose_norm is not None and self.cfg.film_blocks > 0:
            feats = self.cond(Tensor(cond_pose_norm.astype(self.cfg.np_dtype)))
        return self.decoder(latents, feats)

    def apply_warp(self, pre: Tensor, raw_rows_t: np.ndarray | None,
                   norm_rows_t: np.ndarray | None, use_geometric: bool = True,
                   use_neural: bool = True):
        length = pre.data.shape[1]
        encoded = None
        if use_neural and norm_rows_t is not None:
            encoded = fourier_encode(Tensor(norm_rows_t.astype(self.cfg.np_dtype)),
                                     self.cond.basis)
        field = warp_field(raw_rows_t, encoded, self.warp, self.cfg, length,
                           use_geometric=use_geometric, use_neural=use_neural)
        return warp_apply(pre, field), field

    # ------------------------------------------------------------------ full

    def forward_train(self, x: np.ndarray, cond_pose_norm: np.ndarray | None,
                      raw_rows_t: np.ndarray | None, norm_rows_t: np.ndarray | None,
                      use_warp: bool = True, quantize: bool = True,
                      x_tensor: Tensor | None = None) -> dict:
        """One on-tape generator pass; returns output and quantizer bookkeeping."""
        xt = x_tensor if x_tensor is not None else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        length = xt.data.shape[0]
        latents = self.encode(xt)
        grid = assignments = None
        residual_norms: list[float] = []
        if quantize:
            grid, latents, residual_norms, assignments = rvq_quantize(latents, self.books)
        pre = self.decode_latents(latents, cond_pose_norm)
        if pre.data.shape[1] != length:
            pre = pre[:, :length]
        if use_warp:
            out, field = self.apply_warp(pre, raw_rows_t, norm_rows_t)
        else:
            out, field = pre, None
        return {"output": out, "pre_warp": pre, "grid": grid, "assignments": assignments,
                "residual_norms": residual_norms, "field": field}

    def binauralize(self, source, track, use_warp: bool = True, quantize: bool = True) -> Tensor:
        """Render stereo audio from mono samples or a code grid plus a pose track."""
        with tc.no_grad():
            if isinstance(source, CodeGrid):
                if source.fingerprint != self.cfg.fingerprint():
                    raise ValueError("code grid was produced by an incompatible configuration")
                length = source.frames * self.cfg.frame_stride
                latents = rvq_dequantize(source, self.books)
                raw_t, norm_t, norm_pose = self.condition_rows(track, length)
                pre = self.decode_latents(latents, norm_pose)
                out, _ = self.apply_warp(pre, raw_t, norm_t) if use_warp else (pre, None)
                return out
            x = np.asarray(source, dtype=self.cfg.np_dtype)
            raw_t, norm_t, norm_pose = self.condition_rows(track, x.shape[0])
            res = self.forward_train(x, norm_pose, raw_t, norm_t,
                                     use_warp=use_warp, quantize=quantize)
            return res["output"]
