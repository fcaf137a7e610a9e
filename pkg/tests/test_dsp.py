import numpy as np
import pytest

from bnc import dsp
from bnc import tensor as tc
from bnc.spatialsim import PoseTrack, static_track
from bnc.tensor import Tensor


def naive_dft_magnitudes(x, fft_size, hop):
    """Direct double-loop windowed DFT, independent of the library path."""
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(fft_size) / fft_size)
    count = (len(x) - fft_size) // hop + 1
    bins = fft_size // 2 + 1
    mags = np.zeros((count, bins))
    for f in range(count):
        frame = x[f * hop:f * hop + fft_size] * win
        for k in range(bins):
            re = im = 0.0
            for n in range(fft_size):
                ang = 2.0 * np.pi * k * n / fft_size
                re += frame[n] * np.cos(ang)
                im -= frame[n] * np.sin(ang)
            mags[f, k] = np.hypot(re, im)
    return mags


class TestStft:
    CFG = dsp.StftConfig(fft_size=256, hop=64)

    def test_zero_signal_zero_magnitude(self):
        mag, _ = dsp.stft(Tensor(np.zeros(512)), self.CFG)
        assert np.all(mag.data == 0.0)

    def test_frame_count_no_padding(self):
        mag, _ = dsp.stft(Tensor(np.zeros(500)), self.CFG)
        assert mag.data.shape == ((500 - 256) // 64 + 1, 129)

    def test_short_signal_rejected(self):
        with pytest.raises(tc.ShapeError, match="shorter"):
            dsp.stft(Tensor(np.zeros(100)), self.CFG)

    def test_bin_center_sine_peaks_20db(self):
        sr = 8000
        k = 12
        freq = k * sr / self.CFG.fft_size
        t = np.arange(512) / sr
        mag, _ = dsp.stft(Tensor(np.sin(2 * np.pi * freq * t)), self.CFG)
        frame = mag.data[0]
        others = np.delete(frame, [k - 1, k, k + 1])
        assert frame[k] > 10 ** (20 / 20) * np.max(others)

    def test_matches_naive_dft(self, rng):
        x = rng.standard_normal(2048)
        cfg = dsp.StftConfig(fft_size=128, hop=256 // 2)
        mag, _ = dsp.stft(Tensor(x), cfg)
        want = naive_dft_magnitudes(x, cfg.fft_size, cfg.hop)
        assert np.max(np.abs(mag.data - want)) < 1e-9

    def test_phase_range(self, rng):
        mag, phase = dsp.stft(Tensor(rng.standard_normal(512)), self.CFG)
        assert phase.data.min() > -np.pi
        assert phase.data.max() <= np.pi

    def test_parseval_per_frame(self, rng):
        x = rng.standard_normal(256)
        mag, _ = dsp.stft(Tensor(x), self.CFG)
        win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(256) / 256)
        frame_energy = np.sum((x * win) ** 2)
        weights = np.ones(129)
        weights[1:-1] = 2.0  # one-sided spectrum: double the interior bins
        spec_energy = np.sum(weights * mag.data[0] ** 2) / 256
        assert abs(spec_energy - frame_energy) / frame_energy < 1e-6

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal(96))
        cfg = dsp.StftConfig(fft_size=32, hop=16)
        def f(t):
            mag, phase = dsp.stft(t, cfg)
            return tc.reduce_sum(mag * mag) + tc.reduce_mean(tc.sin(phase))
        assert tc.grad_check(f, x) < 1e-4


class TestMel:
    SCFG = dsp.StftConfig(fft_size=256, hop=64)
    MCFG = dsp.MelConfig(n_mels=20, f_min=0.0, f_max=4000.0, sample_rate=8000, log_floor=1e-5)

    def test_zero_signal_hits_log_floor(self):
        mel = dsp.mel_spectrogram(Tensor(np.zeros(512)), self.SCFG, self.MCFG)
        assert np.allclose(mel.data, np.log(1e-5))

    def test_deterministic(self, rng):
        x = rng.standard_normal(512)
        a = dsp.mel_spectrogram(Tensor(x), self.SCFG, self.MCFG).data
        b = dsp.mel_spectrogram(Tensor(x.copy()), self.SCFG, self.MCFG).data
        assert np.array_equal(a, b)

    def test_1khz_sine_lands_in_matching_band(self):
        sr = 8000
        t = np.arange(1024) / sr
        x = np.sin(2 * np.pi * 1000.0 * t)
        mel = dsp.mel_spectrogram(Tensor(x), self.SCFG, self.MCFG)
        band = int(np.argmax(mel.data.mean(axis=0)))
        centers = dsp.mel_band_centers(self.MCFG)
        # the winning band's center frequency must be the nearest one to 1 kHz
        assert abs(centers[band] - 1000.0) == pytest.approx(np.min(np.abs(centers - 1000.0)))

    def test_monotone_in_energy(self, rng):
        x = rng.standard_normal(512)
        lo = dsp.mel_spectrogram(Tensor(x), self.SCFG, self.MCFG).data
        hi = dsp.mel_spectrogram(Tensor(2.0 * x), self.SCFG, self.MCFG).data
        above = lo > np.log(1e-5)
        assert np.all(hi[above] >= lo[above])

    def test_every_filter_nonzero(self):
        fb = dsp.mel_filterbank(self.MCFG, 256)
        assert fb.shape == (20, 129)
        assert np.all(fb.sum(axis=1) > 0)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            dsp.MelConfig(n_mels=10, f_min=5000.0, f_max=4000.0, sample_rate=8000)
        with pytest.raises(ValueError):
            dsp.MelConfig(log_floor=0.0)
        with pytest.raises(ValueError):
            dsp.StftConfig(fft_size=300, hop=64)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal(96) * 0.5)
        scfg = dsp.StftConfig(fft_size=32, hop=16)
        mcfg = dsp.MelConfig(n_mels=8, f_min=0.0, f_max=4000.0, sample_rate=8000)
        err = tc.grad_check(lambda t: tc.reduce_mean(dsp.mel_spectrogram(t, scfg, mcfg)), x)
        assert err < 1e-4


class TestDownsample:
    def test_factor1_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 8)))
        assert dsp.downsample_avg(x, 1) is x

    def test_arithmetic_mean(self):
        out = dsp.downsample_avg(Tensor([[1.0, 3.0, 5.0, 7.0]]), 2)
        assert np.array_equal(out.data, [[2.0, 6.0]])

    def test_constant_preserved_factor4(self):
        out = dsp.downsample_avg(Tensor(np.full((3, 16), 2.5)), 4)
        assert np.allclose(out.data, 2.5)

    def test_tail_zero_padded(self):
        out = dsp.downsample_avg(Tensor([[4.0, 4.0, 4.0]]), 2)
        assert out.data.shape == (1, 2)
        assert np.array_equal(out.data, [[4.0, 2.0]])

    def test_commutes_with_channel_permutation(self, rng):
        x = rng.standard_normal((3, 12))
        perm = [2, 0, 1]
        a = dsp.downsample_avg(Tensor(x[perm]), 4).data
        b = dsp.downsample_avg(Tensor(x), 4).data[perm]
        assert np.array_equal(a, b)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            dsp.downsample_avg(Tensor(np.zeros((1, 8))), 3)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 11)))
        err = tc.grad_check(lambda t: tc.reduce_sum(dsp.downsample_avg(t, 4) ** 2.0), x)
        assert err < 1e-4


class TestResampleCondition:
    def test_constant_pose_repeats(self):
        track = static_track(0.5, tx_pos=(1.0, 2.0, 1.5), rx_pos=(2.3, 2.3, 1.2))
        rows = dsp.resample_condition(track, 50, 100.0)
        assert rows.shape == (50, 14)
        assert np.allclose(rows, rows[0])
        assert np.allclose(rows[0, 0:3], [1.0, 2.0, 1.5])

    def test_midpoint_is_arithmetic_mean(self):
        track = PoseTrack(times=[0.0, 1.0],
                          tx_pos=[[0.0, 0.0, 0.0], [2.0, 4.0, 6.0]],
                          tx_quat=[[1, 0, 0, 0], [1, 0, 0, 0]],
                          rx_pos=[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]],
                          rx_quat=[[1, 0, 0, 0], [1, 0, 0, 0]])
        rows = dsp.resample_condition(track, 3, 2.0)  # queries at t = 0, 0.5, 1.0
        assert np.allclose(rows[1, 0:3], [1.0, 2.0, 3.0])
        assert np.allclose(rows[1, 7:10], [2.0, 1.0, 1.0])

    def test_interpolated_quaternions_unit_norm(self, rng):
        n = 40
        quats = rng.standard_normal((n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        track = PoseTrack(times=np.arange(n) / 240.0,
                          tx_pos=rng.uniform(0, 4, (n, 3)), tx_quat=quats,
                          rx_pos=np.tile([2.3, 2.3, 1.2], (n, 1)),
                          rx_quat=np.tile([1.0, 0, 0, 0], (n, 1)))
        rows = dsp.resample_condition(track, 500, 8000.0)
        norms = np.linalg.norm(rows[:, 3:7], axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-6

    def test_empty_track_rejected(self):
        with pytest.raises(ValueError):
            PoseTrack(times=[], tx_pos=np.zeros((0, 3)), tx_quat=np.zeros((0, 4)),
                      rx_pos=np.zeros((0, 3)), rx_quat=np.zeros((0, 4)))

    def test_non_monotone_timestamps_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            PoseTrack(times=[0.0, 0.2, 0.1],
                      tx_pos=np.zeros((3, 3)), tx_quat=np.tile([1.0, 0, 0, 0], (3, 1)),
                      rx_pos=np.zeros((3, 3)), rx_quat=np.tile([1.0, 0, 0, 0], (3, 1)))
