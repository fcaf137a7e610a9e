import hashlib
import os
import shutil

import numpy as np
import pytest

from bnc.audio import AudioBuffer, read_wav, write_wav
from bnc.cli import main
from bnc.spatialsim import RoomSpec, read_dataset, spatialize_oracle, static_track

SR = 8000

TINY_MODEL_KV = """
model.sample_rate=8000
model.strides=2,2
model.base_channels=8
model.latent_dim=8
model.rvq_layers=2
model.codebook_size=16
model.film_blocks=1
model.fourier_features=8
model.cond_hidden=32
model.warp_channels=8
train.clip_len=4000
train.lr=0.001
train.loss_fft=256
train.loss_hop=64
train.n_mels=40
disc.stft_fft=256
disc.stft_hop=64
disc.stft_units=3
disc.stft_base=4
disc.stft_cap=16
disc.msd_base=4
disc.msd_cap=16
disc.msd_layers=2
disc.msd_kernel=15
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_MODEL_KV)
    data = root / "data"
    rc = main(["synth-data", "--out", str(data), "--hours", "0.001", "--seed", "7",
               "--sr", str(SR), "--clip-seconds", "0.5", "--rt60", "0", "--noise-db", "-60"])
    assert rc == 0
    run = root / "run"
    rc = main(["train", "--stage", "finetune", "--data", str(data), "--out", str(run),
               "--config", str(cfg), "--steps", "3", "--seed", "1"])
    assert rc == 0
    return {"root": root, "cfg": str(cfg), "data": str(data),
            "ckpt": str(run / "ckpt_final.bnc"), "run": str(run)}


def dir_digest(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        h.update(open(os.path.join(path, name), "rb").read())
    return h.hexdigest()


class TestSynthData:
    def test_duration_split_into_clips(self, tmp_path):
        out = str(tmp_path / "ds")
        rc = main(["synth-data", "--out", out, "--hours", "0.01", "--seed", "3",
                   "--sr", str(SR), "--clip-seconds", "2.0", "--rt60", "0.1"])
        assert rc == 0
        records = read_dataset(out)
        total = sum(r.mono.duration for r in records)
        assert total == pytest.approx(36.0, abs=2.0)

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            rc = main(["synth-data", "--out", out, "--hours", "0.001", "--seed", "11",
                       "--sr", str(SR), "--clip-seconds", "0.5"])
            assert rc == 0
        assert dir_digest(a) == dir_digest(b)

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        monkeypatch.setenv("BNC_SEED", "11")
        rc = main(["synth-data", "--out", a, "--hours", "0.001",
                   "--sr", str(SR), "--clip-seconds", "0.5"])
        assert rc == 0
        monkeypatch.delenv("BNC_SEED")
        rc = main(["synth-data", "--out", b, "--hours", "0.001", "--seed", "11",
                   "--sr", str(SR), "--clip-seconds", "0.5"])
        assert rc == 0
        assert dir_digest(a) == dir_digest(b)


class TestTrain:
    def test_loss_trace_rows(self, workdir):
        lines = open(os.path.join(workdir["run"], "trace.csv")).read().strip().splitlines()
        assert len(lines) == 4 and lines[0].startswith("step,")

    def test_mono_pretrain_init_without_checkpoint_is_usage_error(self, workdir):
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", workdir["data"] + "_x", "--config", workdir["cfg"],
                   "--steps", "1", "--ablation", "ABC"])
        assert rc == 2

    def test_invalid_config_rejected_before_compute(self, workdir, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text(TINY_MODEL_KV + "\ntrain.steps=0\n")
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", str(tmp_path / "o"), "--config", str(bad)])
        assert rc == 2

    def test_unknown_config_key_rejected(self, workdir, tmp_path):
        bad = tmp_path / "bad2.cfg"
        bad.write_text("model.bogus_field=3\n")
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", str(tmp_path / "o"), "--config", str(bad), "--steps", "1"])
        assert rc == 2

    def test_ablation_flags_parse(self, workdir, tmp_path):
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", str(tmp_path / "abl"), "--config", workdir["cfg"],
                   "--steps", "1", "--seed", "0", "--ablation", "A+B+D+E"])
        assert rc == 0

    def test_unknown_ablation_letter_rejected(self, workdir, tmp_path):
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", str(tmp_path / "o"), "--config", workdir["cfg"],
                   "--steps", "1", "--ablation", "AXB"])
        assert rc == 2


class TestEncodeDecode:
    def test_round_trip_preserves_length(self, workdir, tmp_path):
        mono = os.path.join(workdir["data"], "clip00000_mono.wav")
        pose = os.path.join(workdir["data"], "clip00000_pose.csv")
        bits = str(tmp_path / "clip.bits")
        out = str(tmp_path / "dec.wav")
        assert main(["encode", "--in", mono, "--ckpt", workdir["ckpt"], "--out", bits]) == 0
        assert main(["decode", "--in", bits, "--pose", pose, "--ckpt", workdir["ckpt"],
                     "--out", out, "--length", "4000"]) == 0
        dec = read_wav(out)
        src = read_wav(mono)
        assert dec.channels == 2
        assert dec.length == src.length

    def test_bitstream_size_matches_bitrate(self, workdir, tmp_path):
        mono = os.path.join(workdir["data"], "clip00000_mono.wav")
        bits = str(tmp_path / "clip.bits")
        assert main(["encode", "--in", mono, "--ckpt", workdir["ckpt"], "--out", bits]) == 0
        # tiny config: 0.5 s at stride 4 -> 1000 frames of 2x4-bit payload (1 byte) + 4-byte index
        blob = open(bits, "rb").read()
        header_len = 4 + 1 + 4 + 1 + 2 + 1 + 1
        assert len(blob) == header_len + 1000 * (4 + 1)

    def test_decode_with_mismatched_checkpoint_is_data_error(self, workdir, tmp_path):
        cfg2 = tmp_path / "other.cfg"
        cfg2.write_text(TINY_MODEL_KV.replace("model.rvq_layers=2", "model.rvq_layers=3"))
        other_run = str(tmp_path / "run2")
        rc = main(["train", "--stage", "finetune", "--data", workdir["data"],
                   "--out", other_run, "--config", str(cfg2), "--steps", "1", "--seed", "0"])
        assert rc == 0
        mono = os.path.join(workdir["data"], "clip00000_mono.wav")
        pose = os.path.join(workdir["data"], "clip00000_pose.csv")
        bits = str(tmp_path / "c.bits")
        assert main(["encode", "--in", mono, "--ckpt", workdir["ckpt"], "--out", bits]) == 0
        rc = main(["decode", "--in", bits, "--pose", pose,
                   "--ckpt", os.path.join(other_run, "ckpt_final.bnc"),
                   "--out", str(tmp_path / "x.wav")])
        assert rc == 3

    def test_stereo_input_rejected_for_encode(self, workdir, tmp_path):
        stereo = os.path.join(workdir["data"], "clip00000_binaural.wav")
        rc = main(["encode", "--in", stereo, "--ckpt", workdir["ckpt"],
                   "--out", str(tmp_path / "y.bits")])
        assert rc == 3


class TestEval:
    def test_identical_dirs_give_zero(self, workdir, tmp_path):
        pred = tmp_path / "pred"; ref = tmp_path / "ref"
        pred.mkdir(); ref.mkdir()
        src = os.path.join(workdir["data"], "clip00000_binaural.wav")
        shutil.copy(src, pred / "c.wav")
        shutil.copy(src, ref / "c.wav")
        out = str(tmp_path / "report.csv")
        rc = main(["eval", "--pred", str(pred), "--ref", str(ref), "--out", out,
                   "--fft", "256", "--hop", "64", "--mels", "40"])
        assert rc == 0
        row = open(out).read().strip().splitlines()[1].split(",")
        assert float(row[1]) == 0.0 and float(row[2]) == 0.0
        assert float(row[3]) == 0.0 and float(row[4]) == 0.0

    def test_channel_inversion_hits_wave_but_not_mel(self, workdir, tmp_path):
        pred = tmp_path / "pred"; ref = tmp_path / "ref"
        pred.mkdir(); ref.mkdir()
        src = read_wav(os.path.join(workdir["data"], "clip00000_binaural.wav"))
        write_wav(str(ref / "c.wav"), src)
        inverted = AudioBuffer(np.stack([-src.data[0], src.data[1]]), src.sample_rate)
        write_wav(str(pred / "c.wav"), inverted)
        from bnc.metrics import evaluate_pair
        from bnc.dsp import MelConfig, StftConfig
        row = evaluate_pair("c", inverted.data, src.data, StftConfig(256, 64),
                            MelConfig(40, 0.0, SR / 2, SR))
        assert row.wave_l2 > 0.0
        assert row.mel_l2 < 1e-9  # magnitude-based metric ignores a sign flip

    def test_oracle_noise_seed_gap_visible_in_wave_l2(self):
        # two renders differing only in their stochastic seed are far apart in
        # the waveform metric: exactly the gap that point-wise losses can't close
        room = RoomSpec(rt60=0.2, noise_floor_db=-30.0)
        track = static_track(0.5, tx_pos=(3.0, 2.3, 1.2), rx_pos=(2.3, 2.3, 1.2))
        x = np.random.default_rng(0).uniform(-0.2, 0.2, 4000)
        a = spatialize_oracle(x, track, room, SR, seed=1)
        b = spatialize_oracle(x, track, room, SR, seed=2)
        from bnc.metrics import wave_l2
        assert wave_l2(a, b) > 0.01

    def test_unmatched_ids_listed(self, workdir, tmp_path):
        pred = tmp_path / "p"; ref = tmp_path / "r"
        pred.mkdir(); ref.mkdir()
        src = os.path.join(workdir["data"], "clip00000_binaural.wav")
        shutil.copy(src, pred / "a.wav")
        shutil.copy(src, ref / "b.wav")
        rc = main(["eval", "--pred", str(pred), "--ref", str(ref)])
        assert rc == 3


class TestSpectrogram:
    def test_zero_signal_uniform_image(self, tmp_path):
        wav = str(tmp_path / "z.wav")
        write_wav(wav, AudioBuffer(np.zeros(2048, dtype=np.float32), SR))
        prefix = str(tmp_path / "spec")
        rc = main(["spectrogram", "--in", wav, "--out-prefix", prefix,
                   "--fft", "256", "--hop", "64"])
        assert rc == 0
        blob = open(prefix + ".ch0.pgm", "rb").read()
        header, pixels = blob.split(b"\n255\n", 1)
        assert header.startswith(b"P5")
        assert len(set(pixels)) == 1  # uniform intensity

    def test_image_height_is_bin_count(self, tmp_path):
        wav = str(tmp_path / "s.wav")
        t = np.arange(2048) / SR
        write_wav(wav, AudioBuffer((0.5 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32), SR))
        prefix = str(tmp_path / "spec")
        assert main(["spectrogram", "--in", wav, "--out-prefix", prefix,
                     "--fft", "256", "--hop", "64"]) == 0
        blob = open(prefix + ".ch0.pgm", "rb").read()
        dims = blob.split(b"\n")[1].split()
        width, height = int(dims[0]), int(dims[1])
        assert height == 256 // 2 + 1

    def test_sine_produces_bright_line_at_expected_row(self, tmp_path):
        freq, fft = 1000.0, 256
        wav = str(tmp_path / "s.wav")
        t = np.arange(4096) / SR
        write_wav(wav, AudioBuffer((0.5 * np.sin(2 * np.pi * freq * t)).astype(np.float32), SR))
        prefix = str(tmp_path / "spec")
        assert main(["spectrogram", "--in", wav, "--out-prefix", prefix,
                     "--fft", str(fft), "--hop", "64"]) == 0
        data = np.genfromtxt(prefix + ".ch0.csv", delimiter=",")
        bins = fft // 2 + 1
        expected_bin = round(freq * fft / SR)
        expected_row = bins - 1 - expected_bin  # low frequencies render at the bottom
        assert int(np.argmax(data.mean(axis=1))) == expected_row
