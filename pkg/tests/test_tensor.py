import numpy as np
import pytest

from bnc import tensor as tc
from bnc.tensor import ShapeError, Tensor


def naive_conv1d(x, w, b=None, stride=1, dilation=1, padding=0):
    """Triple-loop reference convolution."""
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    t_out = (t + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, t_out))
    for co in range(c_out):
        for to in range(t_out):
            acc = 0.0
            for ci in range(c_in):
                for kk in range(k):
                    acc += w[co, ci, kk] * xp[ci, to * stride + kk * dilation]
            out[co, to] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv1d:
    def test_identity_kernel(self):
        out = tc.conv1d(Tensor([[1.0, 2, 3, 4]]), Tensor(np.ones((1, 1, 1))))
        assert np.array_equal(out.data, [[1.0, 2, 3, 4]])

    def test_sliding_dot_stride2(self):
        # windows (1,2) and (3,4) against kernel (1,1)
        out = tc.conv1d(Tensor([[1.0, 2, 3, 4]]), Tensor(np.ones((1, 1, 2))), stride=2)
        assert np.array_equal(out.data, [[3.0, 7.0]])

    def test_matches_naive_reference_dilated(self, rng):
        x = rng.standard_normal((2, 16))
        w = rng.standard_normal((3, 2, 7))
        b = rng.standard_normal(3)
        got = tc.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=3, padding=9).data
        want = naive_conv1d(x, w, b, dilation=3, padding=9)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("stride,dilation,padding,groups", [
        (1, 1, 0, 1), (2, 1, 3, 1), (1, 3, 6, 1), (3, 2, 4, 1), (2, 1, 2, 2),
    ])
    def test_matches_naive_reference_grid(self, rng, stride, dilation, padding, groups):
        c_in, c_out = 4, 4
        x = rng.standard_normal((c_in, 21))
        w = rng.standard_normal((c_out, c_in // groups, 3))
        got = tc.conv1d(Tensor(x), Tensor(w), stride=stride, dilation=dilation,
                        padding=padding, groups=groups).data
        if groups == 1:
            want = naive_conv1d(x, w, None, stride, dilation, padding)
        else:
            blocks = []
            cg_in, cg_out = c_in // groups, c_out // groups
            for g in range(groups):
                blocks.append(naive_conv1d(x[g * cg_in:(g + 1) * cg_in],
                                           w[g * cg_out:(g + 1) * cg_out],
                                           None, stride, dilation, padding))
            want = np.concatenate(blocks, axis=0)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_shape_errors_name_dimension(self):
        with pytest.raises(ShapeError, match="channels"):
            tc.conv1d(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 2, 3))))
        with pytest.raises(ShapeError, match="span"):
            tc.conv1d(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 1, 3))), dilation=4)


class TestConvTranspose:
    def test_no_crop_length4(self):
        out = tc.conv1d_transpose(Tensor([[1.0, 1.0]]), Tensor(np.ones((1, 1, 2))), stride=2)
        assert out.data.shape == (1, 4)
        assert np.array_equal(out.data, [[1.0, 1, 1, 1]])

    def test_gradient_matches_finite_differences(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 4)))
        x = Tensor(rng.standard_normal((2, 5)))
        err = tc.grad_check(lambda t: tc.reduce_sum(tc.conv1d_transpose(t, w, stride=2)), x)
        assert err < 1e-4

    def test_inverse_shape_arithmetic(self, rng):
        x = Tensor(rng.standard_normal((3, 10)))
        for stride in (1, 2, 3, 5):
            w_up = Tensor(rng.standard_normal((3, 4, 2 * stride)))
            up = tc.conv1d_transpose(x, w_up, stride=stride)
            assert up.data.shape[1] == 10 * stride
            w_dn = Tensor(rng.standard_normal((3, 4, 2 * stride)))
            total_pad = stride
            padded = tc.pad1d(up, total_pad - total_pad // 2, total_pad // 2)
            down = tc.conv1d(padded, w_dn, stride=stride)
            assert down.data.shape[1] == 10


class TestLinear:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = tc.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, x.data)

    def test_hand_matrix_multiply(self):
        out = tc.linear(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]),
                        Tensor([0.0, 0.0]))
        assert np.array_equal(out.data, [3.0, 7.0])

    def test_gradient(self, rng):
        w = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal(3))
        x = Tensor(rng.standard_normal((5, 4)))
        assert tc.grad_check(lambda t: tc.reduce_sum(tc.tanh(tc.linear(t, w, b))), x) < 1e-4
        assert tc.grad_check(lambda t: tc.reduce_sum(tc.tanh(tc.linear(x, t, b))), w) < 1e-4
        assert tc.grad_check(lambda t: tc.reduce_sum(tc.tanh(tc.linear(x, w, t))), b) < 1e-4


class TestActivations:
    def test_relu_values(self):
        assert np.array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_tanh_zero(self):
        assert tc.tanh(Tensor([0.0])).item() == 0.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown activation"):
            tc.activation(Tensor([1.0]), "gelu")

    @pytest.mark.parametrize("kind", ["elu", "relu", "leaky_relu", "tanh", "sigmoid", "softplus"])
    def test_gradients_away_from_kinks(self, rng, kind):
        x = rng.standard_normal(40)
        if kind in ("relu", "leaky_relu"):
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep clear of the kink
        err = tc.grad_check(lambda t: tc.reduce_sum(tc.activation(t, kind) ** 2.0), Tensor(x))
        assert err < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        tc.backward(tc.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tc.backward(tc.reduce_sum(x * x))
        assert np.array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_composite_graph_matches_finite_differences(self, rng):
        w = Tensor(rng.standard_normal((2, 1, 3)))
        x = Tensor(rng.standard_normal((1, 12)))
        def f(t):
            return tc.reduce_mean(tc.elu(tc.conv1d(t, w, stride=2)) ** 2.0)
        assert tc.grad_check(f, x) < 1e-4

    def test_two_consumers_sum_contributions(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = x * x
        tc.backward(tc.reduce_sum(y + y))
        assert np.array_equal(x.grad, [4.0, 8.0, 12.0])

    def test_repeated_backward_accumulates_additively(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = tc.reduce_sum(x * x)
        tc.backward(loss)
        tc.backward(loss)
        assert np.array_equal(x.grad, [4.0, 8.0, 12.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tc.backward(x * x)

    def test_detached_loss_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError, match="recorded"):
            tc.backward(x)

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with tc.no_grad():
            y = tc.reduce_sum(x * x)
        assert y._backward_fn is None and not y.requires_grad


class TestGradCheckHarness:
    def test_sum_error_is_tiny(self, rng):
        assert tc.grad_check(tc.reduce_sum, Tensor(rng.standard_normal(7))) < 1e-10

    def test_sum_of_squares_error(self, rng):
        err = tc.grad_check(lambda t: tc.reduce_sum(t * t), Tensor(rng.standard_normal(9)))
        assert err < 1e-7

    def test_rejects_non_scalar_function(self, rng):
        with pytest.raises(ValueError, match="scalar"):
            tc.grad_check(lambda t: t * 2.0, Tensor(rng.standard_normal(3)))


def _op_cases(rng):
    """(name, fn, input) triples covering the differentiable op set."""
    c = Tensor(rng.standard_normal((3, 5)))
    pos = Tensor(rng.uniform(0.2, 3.8, size=4))
    cases = [
        ("add", lambda t: tc.reduce_sum((t + c) ** 2.0)),
        ("sub", lambda t: tc.reduce_sum((t - c) ** 2.0)),
        ("mul", lambda t: tc.reduce_sum(t * c)),
        ("div", lambda t: tc.reduce_sum(t / (c * c + 1.0))),
        ("scalar_ops", lambda t: tc.reduce_sum(2.5 * t - 1.0 + t / 4.0)),
        ("neg", lambda t: tc.reduce_sum(-t * c)),
        ("abs", lambda t: tc.reduce_sum(tc.absolute(t))),
        ("exp", lambda t: tc.reduce_sum(tc.exp(t * 0.3))),
        ("log", lambda t: tc.reduce_sum(tc.log(t * t + 1.0))),
        ("sqrt", lambda t: tc.reduce_sum(tc.sqrt(t * t + 0.5))),
        ("sin", lambda t: tc.reduce_sum(tc.sin(t))),
        ("cos", lambda t: tc.reduce_sum(tc.cos(t))),
        ("atan2", lambda t: tc.reduce_sum(tc.atan2(t, c + 3.0))),
        ("clamp", lambda t: tc.reduce_sum(tc.clamp(t * 3.0, -1.0, 1.0) * c)),
        ("sum_axis", lambda t: tc.reduce_sum(tc.reduce_sum(t, axis=0) ** 2.0)),
        ("mean_axis", lambda t: tc.reduce_sum(tc.reduce_mean(t, axis=1) ** 2.0)),
        ("reshape", lambda t: tc.reduce_sum(tc.reshape(t, (t.size,)) ** 2.0)),
        ("transpose", lambda t: tc.reduce_sum(tc.transpose(t) * tc.transpose(c))),
        ("concat", lambda t: tc.reduce_sum(tc.concat([t, t * 2.0], axis=0) ** 2.0)),
        ("slice", lambda t: tc.reduce_sum(t[1:, 2:] ** 2.0)),
        ("pad", lambda t: tc.reduce_sum(tc.pad1d(t, 2, 1) * 1.5)),
        ("l1_norm", lambda t: tc.l1_norm(t)),
        ("l2_norm", lambda t: tc.l2_norm(t)),
        ("cumsum", lambda t: tc.reduce_sum(tc.cumsum(t) ** 2.0)),
        ("cummax", lambda t: tc.reduce_sum(tc.cummax_last(t) * c)),
        ("channel_bias", lambda t: tc.reduce_sum(tc.channel_bias(t, Tensor([0.5, -1.0, 2.0])) ** 2.0)),
        ("magnitude", lambda t: tc.reduce_sum(tc.complex_magnitude(t, c + 2.0))),
        ("interp_signal", lambda t: tc.reduce_sum(tc.interp_time(t, pos) ** 2.0)),
        ("frame", lambda t: tc.reduce_sum(tc.frame_signal(tc.reshape(t, (t.size,)), 4, 3) ** 2.0)),
        ("softplus", lambda t: tc.reduce_sum(tc.softplus(t))),
        ("sigmoid", lambda t: tc.reduce_sum(tc.sigmoid(t) ** 2.0)),
        ("tanh", lambda t: tc.reduce_sum(tc.tanh(t) * c)),
        ("elu_shifted", lambda t: tc.reduce_sum(tc.elu(t + 0.05) ** 2.0)),
    ]
    return cases


def test_every_op_passes_grad_check_on_three_shapes():
    """Every differentiable op: rel. error < 1e-4 at 64-bit on 3 random shapes."""
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 5)) + 0.1)
        for name, fn in _op_cases(rng):
            err = tc.grad_check(fn, x)
            assert err < 1e-4, f"{name} failed grad check at seed {seed}: {err}"


def test_interp_time_position_gradient(rng):
    sig = Tensor(rng.standard_normal((2, 8)))
    pos = Tensor(rng.uniform(0.3, 6.7, size=(2, 5)))
    err = tc.grad_check(lambda p: tc.reduce_sum(tc.interp_time(sig, p) ** 2.0), pos)
    assert err < 1e-4


def test_forward_bit_identical_across_runs(rng):
    x = rng.standard_normal((2, 32))
    w = rng.standard_normal((3, 2, 5))
    def run():
        out = tc.conv1d(Tensor(x), Tensor(w), stride=2, padding=2)
        return tc.tanh(out).data.tobytes()
    assert run() == run()


def test_straight_through_passes_gradient(rng):
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    values = rng.standard_normal(6)
    out = tc.straight_through(x, values)
    assert np.array_equal(out.data, values)
    tc.backward(tc.reduce_sum(out * out))
    assert np.allclose(x.grad, 2.0 * values)
