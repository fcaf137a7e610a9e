import numpy as np
import pytest

from bnc import tensor as tc
from bnc.adversary import (AdversarySet, DiscConfig, MultiScaleDiscriminator,
                           ScaleDiscriminator, SpectrogramDiscriminator, projection_logit)
from bnc.layers import Linear
from bnc.tensor import Tensor


@pytest.fixture
def dcfg():
    return DiscConfig(stft_fft=128, stft_hop=32, stft_units=3, stft_base=4, stft_cap=16,
                      msd_base=4, msd_cap=16, msd_layers=3, msd_kernel=15, msd_stride=4,
                      msd_groups=2, dtype="float64")


@pytest.fixture
def stereo(rng):
    return Tensor(rng.standard_normal((2, 512)) * 0.3)


class TestSpectrogramDiscriminator:
    def test_zero_weights_zero_logits(self, dcfg, stereo, rng):
        disc = SpectrogramDiscriminator(dcfg, rng)
        for p in disc.params().values():
            p.data[:] = 0.0
        out = disc(stereo)
        assert np.all(out.logits.data == 0.0)

    def test_feature_count_matches_layers(self, dcfg, stereo, rng):
        disc = SpectrogramDiscriminator(dcfg, rng)
        out = disc(stereo)
        assert len(out.features) == dcfg.stft_units + 1  # input conv + each unit

    def test_short_input_rejected(self, dcfg, rng):
        disc = SpectrogramDiscriminator(dcfg, rng)
        with pytest.raises(tc.ShapeError):
            disc(Tensor(rng.standard_normal((2, 64))))

    def test_gradient_of_mean_logit(self, dcfg, rng):
        disc = SpectrogramDiscriminator(dcfg, rng)
        x = Tensor(rng.standard_normal((2, 160)) * 0.5)
        err = tc.grad_check(lambda t: tc.reduce_mean(disc(t).logits), x, eps=1e-6)
        assert err < 1e-4


class TestMultiScale:
    def test_three_outputs(self, dcfg, stereo, rng):
        msd = MultiScaleDiscriminator(dcfg, rng)
        outs = msd(stereo, None)
        assert len(outs) == 3

    def test_scale_inputs_are_downsampled_lengths(self, dcfg, rng):
        seen = []
        orig = ScaleDiscriminator.__call__
        def spy(self, y, rows):
            seen.append(y.data.shape[1])
            return orig(self, y, rows)
        msd = MultiScaleDiscriminator(dcfg, rng)
        try:
            ScaleDiscriminator.__call__ = spy
            msd(Tensor(np.zeros((2, 512))), None)
        finally:
            ScaleDiscriminator.__call__ = orig
        assert seen == [512, 256, 128]

    def test_features_differentiable(self, dcfg, rng):
        msd = MultiScaleDiscriminator(dcfg, rng)
        x = Tensor(rng.standard_normal((2, 128)) * 0.5)
        rows = rng.standard_normal((128, 14))
        def f(t):
            outs = msd(t, rows)
            return tc.reduce_mean(outs[1].features[-1])
        assert tc.grad_check(f, x, eps=1e-6) < 1e-4

    def test_conditioning_sensitivity(self, dcfg, stereo, rng):
        msd = MultiScaleDiscriminator(dcfg, rng)
        rows_a = rng.standard_normal((512, 14))
        rows_b = rows_a + 0.5
        a = msd(stereo, rows_a)[0].logits.data
        b = msd(stereo, rows_b)[0].logits.data
        assert np.max(np.abs(a - b)) > 0.0

    def test_projection_disabled_ignores_condition(self, stereo, rng):
        cfg = DiscConfig(stft_fft=128, stft_hop=32, msd_base=4, msd_cap=16, msd_layers=2,
                         msd_kernel=15, use_projection=False, dtype="float64")
        msd = MultiScaleDiscriminator(cfg, rng)
        a = msd(stereo, rng.standard_normal((512, 14)))[0].logits.data
        b = msd(stereo, rng.standard_normal((512, 14)) + 2.0)[0].logits.data
        assert np.array_equal(a, b)


class TestProjectionLogit:
    def test_zero_embedding_equals_unconditional(self, rng):
        embed = Linear(14, 6, rng, np.float64, bias=False)
        embed.w.data[:] = 0.0
        phi = Tensor(rng.standard_normal((5, 6)))
        uncond = Tensor(rng.standard_normal(5))
        out = projection_logit(phi, rng.standard_normal((5, 14)), embed, uncond)
        assert np.allclose(out.data, uncond.data)

    def test_zero_features_leave_bias(self, rng):
        embed = Linear(14, 6, rng, np.float64, bias=False)
        phi = Tensor(np.zeros((4, 6)))
        uncond = Tensor(np.full(4, 1.25))
        out = projection_logit(phi, rng.standard_normal((4, 14)), embed, uncond)
        assert np.allclose(out.data, 1.25)

    def test_hand_computed_inner_product(self, rng):
        # phi(t) = (1, 2), embed(c) = (3, 4), head = 0 -> logit 11
        embed = Linear(2, 2, rng, np.float64, bias=False)
        embed.w.data = np.array([[3.0, 0.0], [0.0, 4.0]])
        phi = Tensor(np.array([[1.0, 2.0]]))
        out = projection_logit(phi, np.array([[1.0, 1.0]]), embed, Tensor(np.zeros(1)))
        assert out.data[0] == pytest.approx(11.0)

    def test_length_mismatch_rejected(self, rng):
        embed = Linear(14, 6, rng, np.float64, bias=False)
        with pytest.raises(tc.ShapeError, match="length"):
            projection_logit(Tensor(np.zeros((5, 6))), np.zeros((4, 14)), embed,
                             Tensor(np.zeros(5)))


class TestAdversarySet:
    def test_four_discriminators(self, dcfg, stereo):
        adv = AdversarySet(dcfg, seed=0)
        outs = adv(stereo, np.random.default_rng(0).standard_normal((512, 14)))
        assert len(outs) == 4

    def test_no_cross_item_leakage(self, dcfg, rng):
        # each clip's logits depend only on that clip
        adv = AdversarySet(dcfg, seed=0)
        a = Tensor(rng.standard_normal((2, 512)) * 0.3)
        b = Tensor(rng.standard_normal((2, 512)) * 0.3)
        la1 = adv(a, None)[0].logits.data
        _ = adv(b, None)
        la2 = adv(a, None)[0].logits.data
        assert np.array_equal(la1, la2)
