import numpy as np
import pytest

from radiomap.evaluation import (
    CSV_FIELDS,
    ExperimentConfig,
    LatentProbe,
    TrueMapOracle,
    latent_probe,
    latent_statistics,
    pgm_bytes,
    probe_code,
    read_csv,
    read_pgm,
    rmse,
    rmse_over_trials,
    sweep,
    trial_seed,
    write_pgm,
)
from radiomap.grid import GridSpec, MapTensor
from radiomap.network.archive import save_model
from radiomap.network.model import CompletionAutoencoder, NetworkSpec
from radiomap.propagation import GeneratorConfig


class TestRMSE:
    def test_zero(self, grid4, rng):
        m = MapTensor(grid4, rng.standard_normal((4, 4, 2)), [1.0, 2.0])
        assert rmse(m, m) == 0.0

    def test_offset(self, grid4, rng):
        v = rng.standard_normal((4, 4, 1))
        assert rmse(MapTensor(grid4, v), MapTensor(grid4, v - 2.5)) == pytest.approx(2.5, abs=1e-12)

    def test_brute_force(self, rng):
        a, b = rng.standard_normal((2, 3, 4, 5))
        acc = 0.0
        for i in range(3):
            for j in range(4):
                for f in range(5):
                    acc += (a[i, j, f] - b[i, j, f]) ** 2
        assert rmse(a, b) == pytest.approx(np.sqrt(acc / 60), abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((2, 4, 4, 1))
        assert rmse(a, b) == rmse(b, a) > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))

    def test_trials_average_before_root(self):
        r, se = rmse_over_trials([1.0, 9.0])
        assert r == pytest.approx(np.sqrt(5.0))
        assert se == pytest.approx(np.std([1.0, 9.0], ddof=1) / np.sqrt(2) / (2 * np.sqrt(5.0)))
        assert np.isnan(rmse_over_trials([4.0])[1])


class TestPGM:
    def test_format(self, tmp_path):
        v = np.array([[-110.0, -75.0], [-40.0, 0.0]])
        write_pgm(tmp_path / "a.pgm", v)
        data = (tmp_path / "a.pgm").read_bytes()
        assert data.startswith(b"P5\n# dB window [-110, -40]\n2 2\n255\n")
        pix, window = read_pgm(tmp_path / "a.pgm")
        assert window == (-110.0, -40.0)
        np.testing.assert_array_equal(pix, [[0, 128], [255, 255]])

    def test_observed_black(self):
        blob = pgm_bytes(np.full((2, 2), -40.0), observed=np.array([[1, 0], [0, 1]], bool))
        assert blob[-4:] == bytes([255, 0, 0, 255])


class TestSweep:
    def test_oracle_zero(self, tmp_path):
        cfg = ExperimentConfig(
            dataset=GeneratorConfig.gudmundson(n_grid=8).to_dict(),
            estimators=["true_oracle", "knn"],
            sweep_values=[10, 20],
            trials=1,
            output_dir=str(tmp_path),
        )
        rows = sweep(cfg)
        assert len(rows) == 4
        assert [r["rmse_db"] for r in rows if r["estimator"] == "true_oracle"] == [0.0, 0.0]
        csv_rows = read_csv(tmp_path / "results.csv")
        assert list(csv_rows[0]) == list(CSV_FIELDS)
        assert len(csv_rows) == 4
        for stem in ("true", "sampled", "estimate_knn", "estimate_true_oracle"):
            assert (tmp_path / f"point00_{stem}.pgm").exists()

    def test_deterministic_and_order_free(self):
        base = dict(dataset=GeneratorConfig.gudmundson(n_grid=8).to_dict(), estimators=["knn"], trials=3, seed=4)
        a = sweep(ExperimentConfig(sweep_values=[10, 20], **base))
        b = sweep(ExperimentConfig(sweep_values=[20, 10], **base))
        assert {r["sweep_value"]: r["rmse_db"] for r in a} == {r["sweep_value"]: r["rmse_db"] for r in b}

    def test_row_count(self):
        cfg = ExperimentConfig(dataset=GeneratorConfig.gudmundson(n_grid=8).to_dict(),
                               estimators=["knn", "kriging", "true_oracle"], sweep_values=[8, 16, 32], trials=1)
        assert len(sweep(cfg)) == 9

    def test_missing_model_names_config(self):
        cfg = ExperimentConfig(dataset=GeneratorConfig.gudmundson(n_grid=8).to_dict(), estimators=["autoencoder"],
                               sweep_variable="code_length", sweep_values=[4], trials=1)
        with pytest.raises(FileNotFoundError, match="code_length"):
            sweep(cfg)

    def test_model_estimator(self, tmp_path):
        spec = NetworkSpec(n_y=8, n_x=8, filters=[2], n_pools=1, convs_per_stage=1, bottleneck_channels=1,
                           input_offset=-60, input_scale=10)
        save_model(tmp_path / "m", CompletionAutoencoder(spec))
        cfg = ExperimentConfig(dataset=GeneratorConfig.gudmundson(n_grid=8, n_samples=20).to_dict(),
                               estimators=["autoencoder"], sweep_variable="depth", sweep_values=[6], trials=2, models={"6": str(tmp_path / "m")})
        rows = sweep(cfg)
        assert rows[0]["estimator"] == "autoencoder" and rows[0]["rmse_db"] > 0

    @pytest.mark.parametrize("kw", [{"sweep_values": []}, {"trials": 0}, {"sweep_variable": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_trial_seed(self):
        assert trial_seed(0, 25, 1) == trial_seed(0, 25, 1) != trial_seed(0, 25, 2)
        assert trial_seed(0, 25, 1) != trial_seed(0, 50, 1)


class TestLatent:
    @pytest.fixture
    def model(self):
        spec = NetworkSpec(n_y=8, n_x=8, filters=[3], n_pools=1, convs_per_stage=1, bottleneck_channels=2,
                           input_offset=-60, input_scale=10)
        return CompletionAutoencoder(spec, dtype=np.float64)

    def test_statistics(self, rng):
        codes = rng.standard_normal((200, 6)) @ rng.standard_normal((6, 6))
        st = latent_statistics(codes)
        c = (codes - codes.mean(0)).T @ (codes - codes.mean(0)) / 200
        np.testing.assert_allclose(st.covariance, c, atol=1e-12)
        assert np.all(np.diff(st.eigenvalues) <= 0)
        assert st.residual < 1e-8
        for i in range(6):
            v = st.eigenvectors[:, i]
            assert np.linalg.norm(c @ v - st.eigenvalues[i] * v) <= 1e-8 * np.linalg.norm(c, 2)

    def test_alpha_zero(self, model, rng):
        codes = rng.standard_normal((20, model.spec.code_length))
        g = GridSpec(8, 8, 1, 1)
        a = latent_probe(model, codes, LatentProbe("eigen_perturbation", alpha=0.0, index=2), g)
        b = latent_probe(model, codes, LatentProbe("mean_code"), g)
        np.testing.assert_array_equal(a.values, b.values)

    def test_single_code(self, model, rng):
        codes = rng.standard_normal((1, model.spec.code_length))
        st = latent_statistics(codes)
        assert not st.std.any()
        g = GridSpec(8, 8, 1, 1)
        a = latent_probe(model, codes, LatentProbe("std_perturbation", subset=[1, 3]), g)
        np.testing.assert_array_equal(a.values, model.decode(codes[0], g).values)

    def test_std_probe(self, rng):
        codes = rng.standard_normal((50, 4))
        st = latent_statistics(codes)
        code = probe_code(st, LatentProbe("std_perturbation", subset=[2, 4]))
        expected = st.mean.copy()
        expected[[1, 3]] -= st.std[[1, 3]]
        np.testing.assert_array_equal(code, expected)

    def test_index_out_of_range(self, rng):
        st = latent_statistics(rng.standard_normal((10, 4)))
        with pytest.raises(ValueError):
            probe_code(st, LatentProbe("eigen_perturbation", index=5))
        with pytest.raises(ValueError):
            probe_code(st, LatentProbe("std_perturbation", subset=[0]))

    def test_empty_codes(self):
        with pytest.raises(ValueError):
            latent_statistics(np.zeros((0, 3)))
