import numpy as np
import pytest

from helpers import direct_conv, layer_grad_errors, numeric_grad, rel_error
from radiomap.network.layers import (
    AvgPool,
    BEMOutput,
    Conv,
    ConvTranspose,
    Dense,
    LeakyReLU,
    MissingCacheError,
    PReLU,
    Upsample,
)
from radiomap.propagation import BasisSet


def to_cnhw(img):
    return np.ascontiguousarray(img.transpose(2, 0, 1)[:, None])


def from_cnhw(t):
    return t[:, 0].transpose(1, 2, 0)


def make_layers(rng):
    return [
        Conv(3, 2, 3, rng),
        Conv(3, 2, 1, rng),
        ConvTranspose(3, 2, 3, rng),
        ConvTranspose(3, 2, 1, rng),
        AvgPool(),
        Upsample(),
        PReLU(3, init=0.3),
        LeakyReLU(3, leak=0.2),
        Dense((3, 4, 4), (2, 1, 1), rng),
        BEMOutput(rng.random((3, 5))),
    ]


class TestConv:
    def test_delta_kernel_is_identity(self, rng):
        layer = Conv(2, 2, 3, rng)
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
        layer.params["w"] = w
        x = rng.standard_normal((2, 1, 5, 5))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_all_ones(self):
        layer = Conv(1, 1, 3)
        layer.params["w"] = np.ones((1, 1, 3, 3))
        y = layer.forward(np.ones((1, 1, 5, 5)))
        assert y[0, 0, 2, 2] == 9 and y[0, 0, 0, 0] == 4

    @pytest.mark.parametrize("case", range(5))
    def test_matches_direct(self, rng, case):
        layer = Conv(2, 3, 3, rng)
        layer.params["b"] = rng.standard_normal(3)
        img = rng.standard_normal((6, 6, 2))
        y = from_cnhw(layer.forward(to_cnhw(img)))
        np.testing.assert_allclose(y, direct_conv(img, layer.params["w"], layer.params["b"]), atol=1e-12)

    def test_transpose_is_adjoint(self, rng):
        conv = Conv(2, 3, 3, rng)
        convt = ConvTranspose(3, 2, 3)
        convt.params["w"] = conv.params["w"].copy()
        x = rng.standard_normal((2, 2, 5, 4))
        y = rng.standard_normal((3, 2, 5, 4))
        assert (conv.forward(x) * y).sum() == pytest.approx((x * convt.forward(y)).sum(), rel=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            Conv(2, 3, 3, rng).forward(np.zeros((3, 1, 4, 4)))
        with pytest.raises(ValueError):
            ConvTranspose(2, 3, 3, rng).forward(np.zeros((3, 1, 4, 4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Conv(1, 1, 2)

    def test_init_variance(self):
        layer = Conv(32, 64, 3, np.random.default_rng(0), leak=0.25)
        expected = 2.0 / (9 * 32 * (1 + 0.25**2))
        assert layer.params["w"].var() == pytest.approx(expected, rel=0.05)
        assert not layer.params["b"].any()


class TestGradients:
    def test_all_layers(self, rng):
        x = rng.standard_normal((3, 2, 4, 4))
        for layer in make_layers(rng):
            errs = layer_grad_errors(layer, x.copy(), rng)
            assert max(errs.values()) < 1e-5, (layer.kind, errs)

    def test_zero_upstream(self, rng):
        x = rng.standard_normal((3, 2, 4, 4))
        for layer in make_layers(rng):
            y = layer.forward(x)
            dx = layer.backward(np.zeros_like(y))
            assert not dx.any()
            assert all(not g.any() for g in layer.grads.values())

    def test_prelu_leak_gradient(self, rng):
        layer = PReLU(1, init=0.25)
        x = np.array([-1.5]).reshape(1, 1, 1, 1)
        layer.forward(x)
        layer.backward(np.array([2.0]).reshape(1, 1, 1, 1))
        assert layer.grads["a"][0] == pytest.approx(-1.5 * 2.0)

    def test_missing_cache(self, rng):
        for layer in make_layers(rng):
            with pytest.raises(MissingCacheError):
                layer.backward(np.zeros((3, 1, 4, 4)))


class TestBEMLayer:
    def test_constant_basis(self, rng):
        layer = BEMOutput(np.full((1, 4), 0.7))
        pi = rng.random((1, 2, 3, 3))
        np.testing.assert_allclose(layer.forward(pi), np.broadcast_to(0.7 * pi, (4, 2, 3, 3)))

    def test_no_parameters(self):
        assert BEMOutput(np.ones((3, 8))).n_params() == 0

    def test_linear(self, rng):
        layer = BEMOutput(rng.random((3, 6)))
        a, b = rng.random((2, 3, 1, 4, 4))
        lhs = layer.forward(2.5 * a - 1.5 * b)
        rhs = 2.5 * layer.forward(a) - 1.5 * layer.forward(b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gradient(self, rng):
        layer = BEMOutput(BasisSet.uniform(n_signal=2, n_f=6).values)
        errs = layer_grad_errors(layer, rng.random((3, 1, 2, 2)), rng)
        assert errs["x"] < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            BEMOutput(np.ones((3, 4))).forward(np.ones((2, 1, 2, 2)))


class TestShiftEquivariance:
    @pytest.mark.parametrize("make,stride", [
        (lambda r: Conv(2, 3, 3, r), 1),
        (lambda r: ConvTranspose(2, 3, 3, r), 1),
        (lambda r: AvgPool(), 2),
        (lambda r: PReLU(2), 1),
    ])
    def test_interior(self, rng, make, stride):
        layer = make(rng)
        x = rng.standard_normal((2, 1, 12, 12))
        shift = 2 * stride
        xs = np.zeros_like(x)
        xs[..., shift:] = x[..., :-shift]
        y, ys = layer.forward(x), layer.forward(xs)
        out_shift = shift * y.shape[-1] // x.shape[-1]
        band = 2
        np.testing.assert_array_equal(
            ys[..., band:-band, out_shift + band : -band], y[..., band:-band, band : -band - out_shift]
        )
