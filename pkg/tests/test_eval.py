import json

import numpy as np
import pytest

from stattok import evaluate as ev
from stattok.allocation import InferencePolicy
from stattok.data import generate_synthetic
from stattok.model import AdaptiveTokenizer, TokenizerConfig

CFG = TokenizerConfig(image_size=16, patch_size=4, hidden_dim=32, latent_len=8,
                      code_dim=4, codebook_size=32, enc_layers=1, dec_layers=1,
                      heads=2, prob_head_hidden=16)


@pytest.fixture(scope="module")
def model():
    return AdaptiveTokenizer(CFG, np.random.default_rng(0))


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(2, 48, 16, 4, patch_size=4)


class TestPSNR:
    def test_identical_capped_at_100(self):
        x = np.random.default_rng(0).uniform(-1, 1, size=(2, 3, 8, 8))
        assert ev.psnr(x, x.copy()) == 100.0

    def test_constant_offset_oracle(self):
        # 0.1 offset on the [0,1] scale = 0.2 in [-1,1] units -> 20 dB
        x = np.zeros((1, 3, 8, 8))
        assert ev.psnr(x, x + 0.2) == pytest.approx(20.0, abs=1e-9)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 0.5, size=(2, 3, 8, 8))
        noise = rng.normal(size=x.shape)
        values = [ev.psnr(x, x + a * noise) for a in (0.01, 0.05, 0.2, 0.5)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ev.psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


class TestStatistics:
    def test_pearson_degenerate_flag(self):
        corr, degenerate = ev.pearson(np.full(10, 3.0), np.arange(10.0))
        assert corr == 0.0 and degenerate

    def test_pearson_perfect(self):
        corr, degenerate = ev.pearson(np.arange(10.0), 2 * np.arange(10.0) + 1)
        assert corr == pytest.approx(1.0) and not degenerate

    def test_least_squares_recovers_exact_line(self):
        x = np.linspace(0, 50, 17)
        slope, intercept, deg = ev.least_squares(x, 0.25 * x + 4.0)
        assert slope == pytest.approx(0.25, abs=1e-9)
        assert intercept == pytest.approx(4.0, abs=1e-9)
        assert not deg

    def test_upward_step_mass(self):
        probs = np.array([[0.2, 0.5, 0.4, 0.9]])
        assert ev.upward_step_mass(probs)[0] == pytest.approx(0.8 / 4)

    def test_quartile_token_gap(self):
        proxies = np.arange(8.0)
        t = np.array([1, 1, 2, 2, 3, 3, 9, 9.0])
        assert ev.quartile_token_gap(proxies, t) == pytest.approx(8.0)


class TestAnalysis:
    def test_report_fields_and_types(self, model, dataset):
        report, table = ev.token_complexity_analysis(model, dataset, InferencePolicy("threshold", tau=0.5))
        assert report.n_samples == 48
        assert 1 <= report.mean_tokens <= CFG.latent_len
        assert -1 <= report.pearson_tokens_vs_proxy <= 1
        assert len(report.token_count_histogram) == CFG.latent_len + 1
        assert sum(report.token_count_histogram) == 48
        assert table.probs.shape == (48, CFG.latent_len)

    def test_untrained_head_has_negligible_correlation(self):
        big = generate_synthetic(5, 512, 16, 4, patch_size=4)
        m = AdaptiveTokenizer(CFG, np.random.default_rng(7))
        report, _ = ev.token_complexity_analysis(m, big, InferencePolicy("threshold", tau=0.5))
        assert abs(report.pearson_tokens_vs_proxy) < 0.1

    def test_identical_images_degenerate_corr(self, model):
        from stattok.data import Dataset
        one = generate_synthetic(3, 4, 16, 4, patch_size=4)
        pix = np.tile(one.pixels[:1], (8, 1, 1, 1))
        ds = Dataset(pix, np.arange(8), np.zeros(8, dtype=np.int64), np.zeros(8, dtype=np.int64))
        report, _ = ev.token_complexity_analysis(model, ds, InferencePolicy("threshold", tau=0.5))
        assert report.variance_degenerate and report.pearson_tokens_vs_proxy == 0.0

    def test_deterministic_reports(self, model, dataset):
        a, _ = ev.token_complexity_analysis(model, dataset, InferencePolicy("threshold", tau=0.5))
        b, _ = ev.token_complexity_analysis(model, dataset, InferencePolicy("threshold", tau=0.5))
        assert a == b


class TestVariants:
    def test_fixcount_exact_constant(self, model, dataset):
        report, table = ev.run_variant("fixcount", model, dataset, fixed_k=5)
        assert report.mean_tokens == 5.0
        assert np.all(table.kept == 5)

    def test_fixcount_defaults_to_rounded_stat_mean(self, model, dataset):
        stat, _ = ev.run_variant("stat", model, dataset)
        fix, _ = ev.run_variant("fixcount", model, dataset)
        assert fix.mean_tokens == float(np.floor(stat.mean_tokens + 0.5))
        assert abs(fix.mean_tokens - stat.mean_tokens) <= 1.0

    def test_harddrop_masks_are_prefixes(self, model, dataset):
        from stattok.allocation import apply_policy
        from stattok.model import encode_corpus
        _, probs = encode_corpus(model, dataset.pixels)
        mask = apply_policy(probs, InferencePolicy("expected_count", extra=0))
        assert np.all(np.diff(mask, axis=1) <= 0)

    def test_unknown_variant(self, model, dataset):
        with pytest.raises(ValueError):
            ev.run_variant("bogus", model, dataset)


class TestPersistence:
    def test_report_json_round_trip(self, tmp_path, model, dataset):
        report, table = ev.token_complexity_analysis(model, dataset, InferencePolicy("fixed_count", k=3))
        path = str(tmp_path / "report.json")
        ev.write_report_json(path, report)
        loaded = json.load(open(path))
        assert loaded["mean_tokens"] == report.mean_tokens
        assert loaded["policy"] == "fixed:3"
        assert list(loaded) == ["mean_mse", "mean_psnr_db", "mean_tokens", "token_count_histogram",
                                "pearson_tokens_vs_proxy", "regression_slope", "regression_intercept",
                                "mean_upward_violation", "variance_degenerate", "policy", "n_samples"]

    def test_per_sample_csv_schema(self, tmp_path, model, dataset):
        _, table = ev.token_complexity_analysis(model, dataset, InferencePolicy("threshold", tau=0.5))
        path = str(tmp_path / "samples.csv")
        ev.write_per_sample_csv(path, table)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "id,label,proxy_bytes,T,k_threshold,mse,psnr"
        assert len(lines) == 1 + 48

    def test_profiles_csv_schema(self, tmp_path, model, dataset):
        _, table = ev.token_complexity_analysis(model, dataset, InferencePolicy("threshold", tau=0.5))
        path = str(tmp_path / "profiles.csv")
        ev.write_profiles_csv(path, table.ids, table.probs)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "id," + ",".join(f"p_{i}" for i in range(CFG.latent_len))
        row = lines[1].split(",")
        np.testing.assert_allclose([float(v) for v in row[1:]], table.probs[0], rtol=1e-5)
