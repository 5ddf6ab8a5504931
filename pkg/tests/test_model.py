import numpy as np
import pytest

from helpers import model_grad_error
from radiomap.grid import GridSpec, SampledMap
from radiomap.network.archive import load_model, save_model
from radiomap.network.model import CompletionAutoencoder, NetworkSpec
from radiomap.propagation import BasisSet, GeneratorConfig, bem_reconstruct, generate_dataset
from radiomap.grid import to_db


def small_spec(**kw):
    base = dict(n_y=8, n_x=8, filters=[3], n_pools=1, convs_per_stage=2, bottleneck_channels=2,
                input_offset=-60.0, input_scale=10.0)
    base.update(kw)
    return NetworkSpec(**base)


def random_sampled(rng, grid, n_f=1, frac=0.3):
    mask = (rng.random(grid.shape) < frac).astype(float)
    vals = np.where(mask[..., None] == 1, rng.uniform(-90, -40, grid.shape + (n_f,)), 0.0)
    return SampledMap(grid, vals, mask, np.arange(n_f, dtype=float))


class TestSpec:
    def test_flagship_code_length_and_depth(self):
        s = NetworkSpec.flagship()
        assert s.code_length == 64 and s.depth == 26
        m = CompletionAutoencoder(s)
        trainable = [l for l in m.layers if l.kind in ("conv", "conv_transpose", "dense")]
        assert len(trainable) == 26

    def test_toy_code_length(self):
        assert NetworkSpec.toy(16, code_length=4).code_length == 4
        assert NetworkSpec.toy(16, code_length=1).code_length == 1

    def test_indivisible_grid(self):
        with pytest.raises(ValueError, match="divisible"):
            NetworkSpec(n_y=20, n_x=20, n_pools=3)

    def test_fully_convolutional_param_count(self):
        a = CompletionAutoencoder(NetworkSpec.flagship(32))
        b = CompletionAutoencoder(NetworkSpec.flagship(64))
        assert a.n_params() == b.n_params()
        assert not any(l.kind == "dense" for l in a.layers)

    def test_dense_variant(self):
        m = CompletionAutoencoder(small_spec(dense_bottleneck=True, dense_code_length=5))
        assert m.spec.code_length == 5
        assert sum(l.kind == "dense" for l in m.layers) == 2

    def test_decoder_mirrors_encoder(self):
        m = CompletionAutoencoder(NetworkSpec.flagship())
        kinds = [l.kind for l in m.layers]
        assert kinds.count("avg_pool") == kinds.count("bilinear_upsample") == 4
        assert kinds.count("conv") == kinds.count("conv_transpose")

    def test_dict_roundtrip(self):
        s = small_spec(basis=BasisSet.uniform(n_f=4).to_dict())
        assert NetworkSpec.from_dict(s.to_dict()) == s


class TestGradients:
    @pytest.mark.parametrize("kw", [
        {},
        {"activation": "leaky_relu"},
        {"dense_bottleneck": True, "dense_code_length": 3},
    ])
    def test_end_to_end(self, rng, kw):
        spec = small_spec(**kw)
        assert spec.depth == 6
        m = CompletionAutoencoder(spec, seed=1, dtype=np.float64)
        x = m.make_input(rng.uniform(-80, -40, (2, 8, 8, 1)), (rng.random((2, 8, 8, 1)) < 0.4).astype(float))
        assert model_grad_error(m, x, rng) < 1e-5

    def test_bem_head(self, rng):
        basis = BasisSet.uniform("gaussian", n_signal=2, n_f=4)
        spec = small_spec(value_channels=4, basis=basis.to_dict())
        m = CompletionAutoencoder(spec, seed=2, dtype=np.float64)
        x = m.make_input(rng.uniform(-80, -40, (2, 8, 8, 4)), (rng.random((2, 8, 8, 1)) < 0.4).astype(float))
        assert model_grad_error(m, x, rng) < 1e-5


class TestInference:
    @pytest.fixture
    def model(self):
        return CompletionAutoencoder(NetworkSpec.flagship(16, n_pools=2, filters=4, convs_per_stage=1,
                                                          bottleneck_channels=2, input_offset=-60, input_scale=8))

    def test_deterministic(self, model, rng):
        s = random_sampled(rng, GridSpec.square(50, 16))
        np.testing.assert_array_equal(model.estimate(s).values, model.estimate(s).values)

    def test_decode_encode_is_estimate(self, model, rng):
        grid = GridSpec.square(50, 16)
        for _ in range(100):
            s = random_sampled(rng, grid, frac=rng.uniform(0.05, 0.5))
            np.testing.assert_array_equal(model.decode(model.encode(s), grid).values, model.estimate(s).values)

    def test_code_length_mismatch(self, model):
        with pytest.raises(ValueError):
            model.decode(np.zeros(model.spec.code_length + 1), GridSpec.square(50, 16))

    def test_grid_mismatch(self, model, rng):
        with pytest.raises(ValueError):
            model.estimate(random_sampled(rng, GridSpec.square(50, 8)))

    def test_interior_shift(self, rng):
        spec = NetworkSpec(n_y=32, n_x=32, filters=[4, 4], n_pools=2, convs_per_stage=1,
                           bottleneck_channels=2, input_offset=-60, input_scale=8)
        m = CompletionAutoencoder(spec, dtype=np.float64)
        vals = rng.uniform(-80, -40, (1, 32, 32, 1))
        mask = (rng.random((1, 32, 32, 1)) < 0.3).astype(float)
        shift = 4  # product of the pooling strides
        vs, ms = np.roll(vals, shift, axis=2), np.roll(mask, shift, axis=2)
        # the shift-equivariant part of the net: everything up to the first upsample
        first_up = next(i for i, l in enumerate(m.layers) if l.kind == "bilinear_upsample")
        enc = m.layers[:first_up]
        za = m._run(enc, m.make_input(vals, mask))
        zb = m._run(enc, m.make_input(vs, ms))
        s = shift // 4
        band = 3
        np.testing.assert_allclose(zb[..., band:-band, s + band : -band], za[..., band:-band, band : -band - s], atol=1e-12)

    def test_freq_separated_estimate(self, rng):
        spec = small_spec(freq_separated=True)
        m = CompletionAutoencoder(spec)
        s = random_sampled(rng, GridSpec(8, 8, 1, 1), n_f=3)
        est = m.estimate(s)
        assert est.values.shape == (8, 8, 3)
        for f in range(3):
            one = SampledMap(s.grid, s.values[..., f : f + 1], s.sample_mask)
            np.testing.assert_allclose(m.estimate(one).values[..., 0], est.values[..., f], rtol=1e-6)

    def test_bem_coefficients_reproduce_map(self, rng):
        basis = BasisSet.uniform("gaussian", n_signal=2, n_f=4)
        spec = small_spec(value_channels=4, basis=basis.to_dict())
        m = CompletionAutoencoder(spec, dtype=np.float64)
        s = random_sampled(rng, GridSpec(8, 8, 1, 1), n_f=4)
        x = m.make_input(*m.sampled_to_arrays(s))
        coeffs = m.coefficients(x)[0]
        np.testing.assert_allclose(to_db(bem_reconstruct(coeffs, basis)), m.estimate(s).values, atol=1e-9)


class TestArchive:
    def test_roundtrip(self, tmp_path, rng):
        spec = small_spec()
        m = CompletionAutoencoder(spec, seed=3)
        save_model(tmp_path / "m", m, provenance={"note": "unit"})
        m2 = load_model(tmp_path / "m")
        for (_, _, a), (_, _, b) in zip(m.parameters(), m2.parameters()):
            np.testing.assert_array_equal(a, b)
        files = sorted(p.name for p in (tmp_path / "m").iterdir())
        assert "manifest.json" in files and "layer_000_w.rmt" in files
        s = random_sampled(rng, GridSpec(8, 8, 1, 1))
        np.testing.assert_array_equal(m.estimate(s).values, m2.estimate(s).values)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nope")

    def test_shape_mismatch(self):
        m = CompletionAutoencoder(small_spec())
        with pytest.raises(ValueError):
            m.set_weights([np.zeros(1)] * len(m.parameters()))
