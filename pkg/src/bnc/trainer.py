"""Two-stage training: mono pretraining with a zero pose vector and the warp
bypassed, then binaural fine-tuning with alternating discriminator/generator
updates, EMA codebook updates, loss tracing and resumable checkpoints."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as tc
from .adversary import AdversarySet, DiscConfig
from .dsp import MelConfig, StftConfig, mel_spectrogram, stft
from .model import BinauralCodec, config_from_arrays
from .objectives import (LossReport, LossWeights, NumericError, difference_loss,
                         feature_matching_loss, hinge_discriminator_loss,
                         hinge_generator_loss, mel_from_magnitude, phase_term_from_spec,
                         total_generator_loss)
from .spatialsim import ClipRecord, PoseTrack
from .tensor import Tensor

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"
_STAGE_CODES = {STAGE_PRETRAIN: 0, STAGE_FINETUNE: 1}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = STAGE_FINETUNE
    steps: int = 100
    batch: int = 1
    clip_len: int = 16384
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.9)
    seed: int = 0
    # ablation toggles
    use_mel: bool = True
    use_adversarial: bool = False
    mono_pretrain_init: bool = False
    partial_conditioning: bool = True
    projection_disc: bool = False
    # loss transform settings
    loss_fft: int = 1024
    loss_hop: int = 256
    n_mels: int = 80
    mel_floor: float = 1e-5
    ema_decay: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in _STAGE_CODES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas: tuple[float, float],
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.b1 ** self.t
        b2c = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.asarray([float(self.t)], dtype=np.float64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for k, p in self.params.items():
            self.m[k] = arrays[f"{prefix}.m.{k}"].astype(p.data.dtype)
            self.v[k] = arrays[f"{prefix}.v.{k}"].astype(p.data.dtype)


@dataclass
class PreparedClip:
    """Per-crop tensors and cached target transforms."""
    x: np.ndarray
    target: np.ndarray                       # [2, T]; duplicated mono while pretraining
    cond_pose: np.ndarray | None             # normalized pose-rate rows (or zeros)
    raw_rows_t: np.ndarray | None
    norm_rows_t: np.ndarray | None
    target_mels: list[np.ndarray] | None = None
    target_specs: list[tuple[np.ndarray, np.ndarray]] | None = None


@dataclass
class TrainResult:
    reports: list[LossReport]
    disc_losses: list[float]
    checkpoint_path: str | None
    trace_path: str | None


def _shift_track(track: PoseTrack, start_s: float) -> PoseTrack:
    if start_s == 0.0:
        return track
    return PoseTrack(track.times - start_s, track.tx_pos, track.tx_quat,
                     track.rx_pos, track.rx_quat)


class Trainer:
    def __init__(self, model: BinauralCodec, cfg: TrainConfig,
                 disc_cfg: DiscConfig | None = None, adversary: AdversarySet | None = None):
        if cfg.clip_len % model.cfg.frame_stride:
            raise ConfigError(f"clip_len {cfg.clip_len} is not a multiple of the "
                              f"frame stride {model.cfg.frame_stride}")
        self.model = model
        self.cfg = cfg
        self.stft_cfg = StftConfig(cfg.loss_fft, cfg.loss_hop)
        sr = model.cfg.sample_rate
        self.mel_cfg = MelConfig(cfg.n_mels, 0.0, sr / 2.0, sr, cfg.mel_floor)
        self.adversary = adversary
        if cfg.use_adversarial and self.adversary is None:
            base = disc_cfg if disc_cfg is not None else DiscConfig()
            self.adversary = AdversarySet(replace(base, use_projection=cfg.projection_disc,
                                                  dtype=model.cfg.dtype), seed=cfg.seed)
        self.opt_g = Adam(model.params(), cfg.lr, cfg.adam_betas)
        self.opt_d = (Adam(self.adversary.params(), cfg.lr, cfg.adam_betas)
                      if self.adversary is not None else None)
        self.step_index = 0
        self.stage = cfg.stage
        self._cache: dict[tuple, PreparedClip] = {}

    # ------------------------------------------------------------------ data

    def _step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence((self.cfg.seed, _STAGE_CODES[self.stage], step)))

    def prepare(self, record: ClipRecord, offset: int, length: int) -> PreparedClip:
        key = (record.clip_id, offset, length, self.stage)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        dtype = self.model.cfg.np_dtype
        x = record.mono.data[offset:offset + length].astype(dtype)
        if self.stage == STAGE_PRETRAIN:
            target = np.stack([x, x])
            prep = PreparedClip(x, target, self.model.zero_condition(length), None, None)
        else:
            if record.binaural is None or record.track is None:
                raise ConfigError(f"clip {record.clip_id} lacks binaural audio or pose; "
                                  "fine-tuning needs both")
            target = record.binaural.data[:, offset:offset + length].astype(dtype)
            track = _shift_track(record.track, offset / self.model.cfg.sample_rate)
            raw_t, norm_t, norm_pose = self.model.condition_rows(track, length)
            prep = PreparedClip(x, target, norm_pose, raw_t, norm_t)
        with tc.no_grad():
            prep.target_mels = [mel_spectrogram(Tensor(prep.target[ch]), self.stft_cfg,
                                                self.mel_cfg).data for ch in range(2)]
            specs = []
            for ch in range(2):
                m, p = stft(Tensor(prep.target[ch]), self.stft_cfg)
                specs.append((m.data, p.data))
            prep.target_specs = specs
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = prep
        return prep

    def sample_batch(self, dataset: list[ClipRecord], step: int) -> list[PreparedClip]:
        rng = self._step_rng(step)
        batch = []
        for _ in range(self.cfg.batch):
            rec = dataset[int(rng.integers(len(dataset)))]
            max_off = rec.mono.length - self.cfg.clip_len
            if max_off < 0:
                raise ConfigError(f"clip {rec.clip_id} shorter than clip_len {self.cfg.clip_len}")
            offset = int(rng.integers(max_off + 1)) if max_off else 0
            batch.append(self.prepare(rec, offset, self.cfg.clip_len))
        return batch

    # ---------------------------------------------------------------- losses

    def _generator_terms(self, prep: PreparedClip, use_warp: bool):
        res = self.model.forward_train(prep.x, prep.cond_pose, prep.raw_rows_t,
                                       prep.norm_rows_t, use_warp=use_warp, quantize=True)
        out = res["output"]
        terms = {"diff": difference_loss(out, prep.target)}
        # one transform per ear feeds both the phase and the mel terms
        pha_terms, mel_terms = [], []
        for ch in range(2):
            p_mag, p_phase = stft(out[ch], self.stft_cfg)
            pha_terms.append(phase_term_from_spec(p_mag, p_phase, *prep.target_specs[ch]))
            if self.cfg.use_mel:
                pm = mel_from_magnitude(p_mag, self.stft_cfg, self.mel_cfg)
                tm = prep.target_mels[ch]
                mel_terms.append(tc.reduce_mean(tc.absolute(
                    pm - Tensor(tm.astype(pm.data.dtype)))))
        terms["pha"] = pha_terms[0] + pha_terms[1]
        if self.cfg.use_mel:
            terms["mel"] = mel_terms[0] + mel_terms[1]
        return res, out, terms

    @staticmethod
    def _mean_terms(all_terms: list[dict]) -> dict:
        scale = 1.0 / len(all_terms)
        keys = all_terms[0].keys()
        out = {}
        for k in keys:
            acc = all_terms[0][k]
            for other in all_terms[1:]:
                acc = acc + other[k]
            out[k] = acc * scale
        return out

    def _discriminator_step(self, batch: list[PreparedClip], use_warp: bool) -> float:
        with tc.scoped_tape():
            real_logits, fake_logits = [], []
            for prep in batch:
                with tc.no_grad():
                    res = self.model.forward_train(prep.x, prep.cond_pose, prep.raw_rows_t,
                                                   prep.norm_rows_t, use_warp=use_warp,
                                                   quantize=True)
                fake = Tensor(res["output"].data)
                real = Tensor(prep.target)
                for out_r in self.adversary(real, prep.norm_rows_t):
                    real_logits.append(out_r.logits)
                for out_f in self.adversary(fake, prep.norm_rows_t):
                    fake_logits.append(out_f.logits)
            d_loss = hinge_discriminator_loss(real_logits, fake_logits)
            val = d_loss.item()
            if not np.isfinite(val):
                raise NumericError(f"discriminator loss is not finite: {val}")
            self.opt_d.zero_grad()
            tc.backward(d_loss)
            self.opt_d.step()
            self.opt_d.zero_grad()
        return val

    def _generator_step(self, batch: list[PreparedClip], use_warp: bool) -> LossReport:
        with tc.scoped_tape():
            all_terms = []
            adv_fake_logits = []
            fm_real, fm_fake = [], []
            ema_batches = []
            for prep in batch:
                res, out, terms = self._generator_terms(prep, use_warp)
                all_terms.append(terms)
                if res["assignments"] is not None:
                    ema_batches.append(res["assignments"])
                if self.adversary is not None and self.cfg.use_adversarial:
                    fake_outs = self.adversary(out, prep.norm_rows_t)
                    with tc.no_grad():
                        real_outs = self.adversary(Tensor(prep.target), prep.norm_rows_t)
                    adv_fake_logits.extend(o.logits for o in fake_outs)
                    fm_fake.append([f for o in fake_outs for f in o.features])
                    fm_real.append([f for o in real_outs for f in o.features])
            mean = self._mean_terms(all_terms)
            l_adv = l_fm = None
            if adv_fake_logits:
                l_adv = hinge_generator_loss(adv_fake_logits)
                l_fm = feature_matching_loss(fm_real, fm_fake)
            total, report = total_generator_loss(
                self.step_index, self.cfg.weights, l_diff=mean["diff"], l_pha=mean["pha"],
                l_adv=l_adv, l_fm=l_fm, l_mel=mean.get("mel"))
            self.opt_g.zero_grad()
            tc.backward(total)
            self.opt_g.step()
            self.opt_g.zero_grad()
            if self.opt_d is not None:
                self.opt_d.zero_grad()
        # one EMA codebook refresh per step, after the parameter update
        if ema_batches:
            merged = []
            for layer in range(len(ema_batches[0])):
                idx = np.concatenate([b[layer][0] for b in ema_batches])
                vecs = np.concatenate([b[layer][1] for b in ema_batches])
                merged.append((idx, vecs))
            self.model.books.ema_update(merged, self.cfg.ema_decay)
        return report

    # ----------------------------------------------------------------- steps

    def pretrain_step(self, batch: list[PreparedClip]) -> tuple[LossReport, float]:
        d_val = 0.0
        if self.cfg.use_adversarial and self.adversary is not None:
            d_val = self._discriminator_step(batch, use_warp=False)
        report = self._generator_step(batch, use_warp=False)
        self.step_index += 1
        return report, d_val

    def finetune_step(self, batch: list[PreparedClip]) -> tuple[LossReport, float]:
        d_val = 0.0
        if self.cfg.use_adversarial and self.adversary is not None:
            d_val = self._discriminator_step(batch, use_warp=True)
        report = self._generator_step(batch, use_warp=True)
        self.step_index += 1
        return report, d_val

    def run(self, dataset: list[ClipRecord], out_dir: str | None = None) -> TrainResult:
        if not dataset:
            raise ConfigError("dataset is empty")
        trace_path = ckpt_path = None
        trace_fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            trace_path = os.path.join(out_dir, "trace.csv")
            trace_fh = open(trace_path, "w")
            trace_fh.write(LossReport.CSV_HEADER + "\n")
        reports, d_losses = [], []
        step_fn = self.pretrain_step if self.stage == STAGE_PRETRAIN else self.finetune_step
        try:
            while self.step_index < self.cfg.steps:
                batch = self.sample_batch(dataset, self.step_index)
                report, d_val = step_fn(batch)
                reports.append(report)
                d_losses.append(d_val)
                if trace_fh:
                    trace_fh.write(report.csv_line() + "\n")
                if (out_dir and self.cfg.checkpoint_every
                        and self.step_index % self.cfg.checkpoint_every == 0
                        and self.step_index < self.cfg.steps):
                    self.save_checkpoint(os.path.join(out_dir, f"ckpt_{self.step_index}.bnc"))
            if out_dir:
                ckpt_path = os.path.join(out_dir, "ckpt_final.bnc")
                self.save_checkpoint(ckpt_path)
        finally:
            if trace_fh:
                trace_fh.close()
        return TrainResult(reports, d_losses, ckpt_path, trace_path)

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path: str) -> None:
        arrays = self.model.state_arrays()
        arrays.update(self.opt_g.state_arrays("optg"))
        if self.adversary is not None:
            arrays.update(self.adversary.state_arrays())
            arrays.update(self.opt_d.state_arrays("optd"))
        arrays["__trailer__"] = np.asarray(
            [float(_STAGE_CODES[self.stage]), float(self.step_index), float(self.cfg.seed)],
            dtype=np.float64)
        ckpt_io.save_arrays(path, arrays)

    def load_checkpoint(self, path: str, resume: bool = True) -> None:
        arrays = ckpt_io.load_arrays(path)
        self.model.load_state(arrays)
        if resume:
            if "optg.t" in arrays:
                self.opt_g.load_state(arrays, "optg")
            if self.adversary is not None and "disc.msd.s0.inp.w" in arrays:
                self.adversary.load_state(arrays)
                if self.opt_d is not None and "optd.t" in arrays:
                    self.opt_d.load_state(arrays, "optd")
            trailer = arrays.get("__trailer__")
            if trailer is not None:
                stage_code, step, _seed = trailer
                if int(stage_code) == _STAGE_CODES[self.stage]:
                    self.step_index = int(step)

    def init_from_pretrain(self, path: str) -> None:
        """Load generator weights (and codebooks) without optimizer state."""
        arrays = ckpt_io.load_arrays(path)
        stored = config_from_arrays(arrays)
        if stored.fingerprint() != self.model.cfg.fingerprint():
            raise ConfigError(f"pretrain checkpoint fingerprint {stored.fingerprint()} "
                              f"does not match model {self.model.cfg.fingerprint()}")
        self.model.load_state(arrays)
