"""Command line surface: dataset synthesis, two-stage training, encode /
decode, objective evaluation and spectrogram dumps.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
BNC_SEED is the seed fallback when --seed is not given.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import tensor as tc
from . import wire
from .adversary import DiscConfig
from .audio import AudioBuffer, read_wav, write_wav
from .checkpoint import CheckpointError
from .codec import ModelConfig
from .dsp import MelConfig, StftConfig, stft
from .metrics import EvalReport, evaluate_pair
from .model import BinauralCodec
from .objectives import LossWeights, NumericError
from .spatialsim import (DatasetError, RoomSpec, read_dataset, read_pose_csv,
                         synth_dataset, write_dataset)
from .tensor import Tensor
from .trainer import ConfigError, TrainConfig, Trainer

ABLATION_TOGGLES = {
    "A": "use_mel",
    "B": "use_adversarial",
    "C": "mono_pretrain_init",
    "D": "partial_conditioning",
    "E": "projection_disc",
}


# ------------------------------------------------------------ config files

def parse_kv_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _coerce(val: str, annotation: str):
    if annotation == "int":
        return int(val)
    if annotation == "float":
        return float(val)
    if annotation == "bool":
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {val!r}")
    if annotation.startswith("tuple"):
        parts = [p for p in val.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = float if "float" in annotation else int
        return tuple(elem(p) for p in parts)
    return val


def _dataclass_from_kv(cls, kv: dict[str, str], prefix: str, base=None):
    known = {f.name: f.type for f in fields(cls)}
    known.pop("weights", None)  # loss weights use the train.weight_* keys
    kwargs = {}
    for key, val in kv.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name.startswith("weight_"):
            continue  # handled by _weights_from_kv
        if name not in known:
            raise ConfigError(f"unknown {prefix} setting {name!r}")
        kwargs[name] = _coerce(val, str(known[name]))
    source = base if base is not None else cls()
    return replace(source, **kwargs) if kwargs else source


def _weights_from_kv(kv: dict[str, str], base: LossWeights) -> LossWeights:
    kwargs = {}
    for name in ("diff", "phase", "adversarial", "feature", "mel"):
        key = f"train.weight_{name}"
        if key in kv:
            kwargs[name] = float(kv[key])
    return replace(base, **kwargs) if kwargs else base


def _resolve_seed(arg_seed: int | None) -> int:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("BNC_SEED")
    return int(env) if env else 0


def _apply_ablation(tcfg: TrainConfig, spec: str) -> TrainConfig:
    letters = set(spec.replace("+", "").upper())
    unknown = letters - set(ABLATION_TOGGLES)
    if unknown:
        raise ConfigError(f"unknown ablation components {sorted(unknown)}; valid: A..E")
    updates = {toggle: (letter in letters) for letter, toggle in ABLATION_TOGGLES.items()}
    return replace(tcfg, **updates)


# ---------------------------------------------------------------- commands

def cmd_synth_data(args) -> int:
    seed = _resolve_seed(args.seed)
    room = RoomSpec(horizontal=args.room_horizontal, vertical=args.room_vertical,
                    rt60=args.rt60, noise_floor_db=args.noise_db)
    records = synth_dataset(room, hours=args.hours, seed=seed, sample_rate=args.sr,
                            clip_seconds=args.clip_seconds, source_peak=args.source_peak)
    manifest = write_dataset(records, args.out)
    total_s = sum(r.mono.duration for r in records)
    print(f"wrote {len(records)} clips ({total_s:.1f} s) to {manifest}")
    return 0


def _build_configs(args):
    kv = parse_kv_file(args.config) if args.config else {}
    mcfg = _dataclass_from_kv(ModelConfig, kv, "model")
    tcfg = _dataclass_from_kv(TrainConfig, kv, "train")
    dcfg = _dataclass_from_kv(DiscConfig, kv, "disc")
    tcfg = replace(tcfg, weights=_weights_from_kv(kv, tcfg.weights))
    return mcfg, tcfg, dcfg


def cmd_train(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    mcfg, tcfg, dcfg = _build_configs(args)
    overrides = {"stage": args.stage}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None or "train.seed" not in kv:
        overrides["seed"] = _resolve_seed(args.seed)
    tcfg = replace(tcfg, **overrides)
    if args.ablation:
        tcfg = _apply_ablation(tcfg, args.ablation)
    if not tcfg.partial_conditioning:
        mcfg = replace(mcfg, film_blocks=len(mcfg.strides))
    if tcfg.mono_pretrain_init and args.stage == "finetune" and not args.init_from:
        raise ConfigError("mono_pretrain_init is enabled but --init-from was not given")

    records = read_dataset(args.data)
    if args.stage == "finetune":
        missing = [r.clip_id for r in records if r.binaural is None or r.track is None]
        if missing:
            raise DatasetError(f"fine-tuning needs binaural audio and poses; missing for {missing}")

    model = BinauralCodec(mcfg, seed=tcfg.seed)
    trainer = Trainer(model, tcfg, disc_cfg=dcfg)
    if args.init_from:
        trainer.init_from_pretrain(args.init_from)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    result = trainer.run(records, out_dir=args.out)
    last = result.reports[-1] if result.reports else None
    print(f"finished {trainer.step_index} steps; final total loss "
          f"{last.total if last else float('nan'):.6g}; trace: {result.trace_path}")
    return 0


def cmd_encode(args) -> int:
    model = BinauralCodec.load(args.ckpt)
    buf = read_wav(args.infile)
    if buf.channels != 1:
        raise DatasetError(f"{args.infile}: encoder expects mono audio")
    if buf.sample_rate != model.cfg.sample_rate:
        raise DatasetError(f"{args.infile}: sample rate {buf.sample_rate} != model "
                           f"{model.cfg.sample_rate}")
    grid = model.encode_to_codes(buf.data.astype(np.float64))
    blob = wire.pack(grid)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    rate = wire.bitrate(model.cfg)
    print(f"encoded {buf.length} samples -> {grid.frames} frames, {len(blob)} bytes "
          f"({rate:.0f} bps payload)")
    return 0


def cmd_decode(args) -> int:
    with open(args.infile, "rb") as fh:
        grid = wire.unpack(fh.read())
    model = BinauralCodec.load(args.ckpt)
    if grid.fingerprint != model.cfg.fingerprint():
        raise DatasetError(f"bitstream fingerprint {grid.fingerprint} does not match "
                           f"checkpoint {model.cfg.fingerprint()}")
    track = read_pose_csv(args.pose)
    out = model.binauralize(grid, track).data
    if args.length is not None:
        out = out[:, :args.length]
    write_wav(args.out, AudioBuffer(out.astype(np.float32), model.cfg.sample_rate))
    print(f"decoded {grid.frames} frames -> {out.shape[1]} samples x2 at "
          f"{model.cfg.sample_rate} Hz")
    return 0


def cmd_eval(args) -> int:
    stft_cfg = StftConfig(args.fft, args.hop)
    preds = sorted(f for f in os.listdir(args.pred) if f.endswith(".wav"))
    refs = sorted(f for f in os.listdir(args.ref) if f.endswith(".wav"))
    unmatched = sorted(set(preds) ^ set(refs))
    if unmatched:
        raise DatasetError(f"unmatched clips between {args.pred} and {args.ref}: {unmatched}")
    if not preds:
        raise DatasetError("no wav files to evaluate")
    report = EvalReport()
    for name in preds:
        p = read_wav(os.path.join(args.pred, name))
        r = read_wav(os.path.join(args.ref, name))
        mel_cfg = MelConfig(args.mels, 0.0, r.sample_rate / 2.0, r.sample_rate, 1e-5)
        pd = p.data if p.data.ndim == 2 else np.stack([p.data, p.data])
        rd = r.data if r.data.ndim == 2 else np.stack([r.data, r.data])
        report.rows.append(evaluate_pair(name, pd, rd, stft_cfg, mel_cfg))
    agg = report.aggregate()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("clip_id,wave_l2,mel_l2,itd_err_samples,ild_err_db\n")
            for row in report.rows:
                fh.write(f"{row.clip_id},{row.wave_l2:.10g},{row.mel_l2:.10g},"
                         f"{row.itd_err_samples:.10g},{row.ild_err_db:.10g}\n")
    print(f"clips={len(report.rows)} wave_l2={agg['wave_l2']:.6g} mel_l2={agg['mel_l2']:.6g} "
          f"itd_err={agg['itd_err_samples']:.3g} ild_err={agg['ild_err_db']:.3g}")
    return 0


def cmd_spectrogram(args) -> int:
    buf = read_wav(args.infile)
    data = buf.data if buf.data.ndim == 2 else buf.data[None, :]
    cfg = StftConfig(args.fft, args.hop)
    floor = 1e-7
    for ch in range(data.shape[0]):
        with tc.no_grad():
            mag, _ = stft(Tensor(data[ch].astype(np.float64)), cfg)
        logm = np.log10(np.maximum(mag.data, floor)).T      # [bins, frames]
        logm = logm[::-1]                                   # low frequencies at the bottom
        lo, hi = logm.min(), logm.max()
        span = hi - lo if hi > lo else 1.0
        img = np.round((logm - lo) / span * 255.0).astype(np.uint8)
        pgm_path = f"{args.out_prefix}.ch{ch}.pgm"
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(img.tobytes())
        csv_path = f"{args.out_prefix}.ch{ch}.csv"
        np.savetxt(csv_path, logm, delimiter=",", fmt="%.8g")
        print(f"channel {ch}: {img.shape[0]} bins x {img.shape[1]} frames -> "
              f"{pgm_path}, {csv_path}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnc",
                                description="binaural speech codec toolbox")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="generate a synthetic binaural dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("--hours", type=float, default=0.01)
    sd.add_argument("--seed", type=int, default=None)
    sd.add_argument("--sr", type=int, default=48000)
    sd.add_argument("--clip-seconds", type=float, default=2.0)
    sd.add_argument("--room-horizontal", type=float, default=4.6)
    sd.add_argument("--room-vertical", type=float, default=2.4)
    sd.add_argument("--rt60", type=float, default=0.3)
    sd.add_argument("--noise-db", type=float, default=-50.0)
    sd.add_argument("--source-peak", type=float, default=0.2)
    sd.set_defaults(fn=cmd_synth_data)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", choices=["pretrain", "finetune"], required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None, help="flat key=value settings file")
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.add_argument("--init-from", default=None, help="pretrain checkpoint for initialization")
    tr.add_argument("--ablation", default=None,
                    help="enabled components, e.g. A, AB, ABC, ABCD, ABCDE")
    tr.set_defaults(fn=cmd_train)

    en = sub.add_parser("encode", help="encode mono wav to a bitstream")
    en.add_argument("--in", dest="infile", required=True)
    en.add_argument("--ckpt", required=True)
    en.add_argument("--out", required=True)
    en.set_defaults(fn=cmd_encode)

    de = sub.add_parser("decode", help="decode a bitstream to binaural wav")
    de.add_argument("--in", dest="infile", required=True)
    de.add_argument("--pose", required=True)
    de.add_argument("--ckpt", required=True)
    de.add_argument("--out", required=True)
    de.add_argument("--length", type=int, default=None)
    de.set_defaults(fn=cmd_decode)

    ev = sub.add_parser("eval", help="objective metrics between two wav directories")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--fft", type=int, default=1024)
    ev.add_argument("--hop", type=int, default=256)
    ev.add_argument("--mels", type=int, default=80)
    ev.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("spectrogram", help="dump per-channel log spectrograms")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--fft", type=int, default=1024)
    sp.add_argument("--hop", type=int, default=256)
    sp.set_defaults(fn=cmd_spectrogram)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, wire.WireError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
