import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sane.analyze import (
    esd,
    linear_probe,
    log_spectral_norm,
    plot_layer_feature,
    plot_scatter,
    power_law_alpha,
    probe_features,
    spectral_report,
    weight_statistics,
    weighted_alpha,
)
from sane.errors import ArgumentError, DataError

from .conftest import DESK_ARCHS, random_checkpoint


def pareto(alpha, xmin, n, seed):
    # density ~ x^-alpha above xmin: inverse-CDF sampling
    u = np.random.default_rng(seed).uniform(size=n)
    return xmin * (1.0 - u) ** (-1.0 / (alpha - 1.0))


class TestEsd:
    def test_diagonal(self):
        assert esd([[3.0, 0.0], [0.0, 1.0]]).tolist() == [9.0, 1.0]

    def test_identity(self):
        assert np.array_equal(esd(np.eye(5)), np.ones(5))

    @pytest.mark.parametrize("shape", [(20, 50), (50, 20), (7, 7)])
    def test_svd_oracle(self, shape):
        w = np.random.default_rng(0).normal(size=shape)
        sv = np.linalg.svd(w, compute_uv=False) ** 2
        got = esd(w)
        assert np.abs(got - sv).max() / sv.max() < 1e-8
        assert np.all(np.abs(got - sv) <= 1e-8 * sv)

    def test_transpose_invariant(self):
        w = np.random.default_rng(1).normal(size=(9, 4))
        assert np.allclose(esd(w), esd(w.T), rtol=1e-12, atol=0)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            esd(np.zeros((0, 3)))


class TestSpectralNorm:
    def test_diagonal(self):
        assert log_spectral_norm([[3.0, 0.0], [0.0, 1.0]]) == pytest.approx(math.log10(9), abs=1e-15)
        assert log_spectral_norm(np.eye(4)) == 0.0

    def test_homogeneity(self):
        w = np.random.default_rng(2).normal(size=(6, 8))
        for c in (0.1, 3.0, 17.0):
            assert log_spectral_norm(c * w) == pytest.approx(log_spectral_norm(w) + 2 * math.log10(c), abs=1e-12)

    def test_zero_matrix(self):
        with pytest.raises(ArgumentError):
            log_spectral_norm(np.zeros((3, 3)))


class TestPowerLaw:
    @pytest.mark.parametrize("seed", range(3))
    def test_pareto_known_xmin(self, seed):
        fit = power_law_alpha(pareto(3.0, 1.0, 10_000, seed), xmin=1.0)
        assert fit.ok and 2.85 <= fit.alpha <= 3.15

    def test_pareto_fitted_xmin(self):
        fit = power_law_alpha(pareto(3.0, 1.0, 10_000, 5))
        assert fit.ok and 2.85 <= fit.alpha <= 3.15

    def test_exponential_fits_worse(self):
        ks_pareto = power_law_alpha(pareto(3.0, 1.0, 2000, 1)).ks
        ks_exp = power_law_alpha(np.random.default_rng(1).exponential(size=2000) + 1e-3).ks
        assert ks_exp > ks_pareto

    def test_scale_invariance(self):
        x = pareto(2.5, 0.5, 500, 3)
        a, b = power_law_alpha(x), power_law_alpha(2 * x)
        assert a.alpha == pytest.approx(b.alpha, rel=1e-10) and b.xmin == 2 * a.xmin

    def test_too_few_points_flagged(self):
        fit = power_law_alpha([1.0, 2.0, 3.0])
        assert not fit.ok and math.isnan(fit.alpha)
        assert not power_law_alpha(pareto(3.0, 1.0, 50, 0), xmin=100.0).ok

    def test_weighted_alpha(self):
        assert weighted_alpha(2.0, 100.0) == 4.0


def test_spectral_report_fields():
    rep = spectral_report(random_checkpoint(DESK_ARCHS["cnn"], 0), min_tail=3)
    assert len(rep.layers) == 3
    for row in rep.layers:
        assert row["lambda_max"] > 0
        assert not row["fit_ok"] or row["alpha"] > 1
    assert set(rep.means) == {"log_spectral_norm", "alpha", "weighted_alpha"}


class TestWeightStatistics:
    def test_constant_layer(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
        ckpt.tensors["1.weight"][:] = 0.25
        ckpt.tensors["1.bias"][:] = 0.25
        s = weight_statistics(ckpt).reshape(-1, 7)
        assert s[1, 1] == 0.0 and (s[1, 2:] == 0.25).all() and s[1, 0] == 0.25

    @pytest.mark.parametrize("name", sorted(DESK_ARCHS))
    def test_length(self, name):
        ckpt = random_checkpoint(DESK_ARCHS[name], 0)
        assert len(weight_statistics(ckpt)) == 7 * len(ckpt.arch.learned_indices)

    def test_percentile_oracle(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp_wide"], 3)
        s = weight_statistics(ckpt).reshape(-1, 7)
        for row, i in zip(s, ckpt.arch.learned_indices):
            vals = sorted(float(v) for v in ckpt.row_matrix(i).astype(np.float64).ravel())
            for q, got in zip((0, 25, 50, 75, 100), row[2:]):
                pos = q / 100 * (len(vals) - 1)
                lo = math.floor(pos)
                hi = min(lo + 1, len(vals) - 1)
                assert got == vals[lo] + (pos - lo) * (vals[hi] - vals[lo])
            assert row[2] == vals[0] and row[6] == vals[-1]


class TestProbe:
    def test_linear_target(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(80, 5))
        y = 3.0 * x[:, 2] - 1.0
        rep = linear_probe(x[:60], y[:60], x[60:], y[60:])
        assert rep.ok and rep.r2 > 0.999 and rep.lam == 1e-3

    def test_noise_target(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(400, 5))
        y = rng.normal(size=400)
        assert linear_probe(x[:300], y[:300], x[300:], y[300:]).r2 <= 0.1

    def test_constant_target_flagged(self):
        x = np.random.default_rng(2).normal(size=(30, 3))
        rep = linear_probe(x[:20], np.ones(20), x[20:], np.ones(10))
        assert not rep.ok and math.isnan(rep.r2)

    def test_too_few_rows(self):
        with pytest.raises(ArgumentError):
            linear_probe(np.zeros((5, 2)), np.arange(5), np.zeros((3, 2)), np.arange(3))

    def test_leakage_rejected(self):
        x = np.random.default_rng(3).normal(size=(30, 2))
        with pytest.raises(DataError):
            linear_probe(x[:20], x[:20, 0], x[20:], x[20:, 0], train_ids=range(20), test_ids=[5] * 10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_r2_at_most_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(40, 3))
        y = x @ rng.normal(size=3) + rng.normal(size=40)
        assert linear_probe(x[:25], y[:25], x[25:], y[25:]).r2 <= 1.0

    def test_probe_features_uses_splits(self, small_mlp_zoo):
        m = small_mlp_zoo.manifest
        feats = {(r["model_id"], r["epoch"]): np.array([r["epoch"], r["model_id"] % 3], float) for r in m.rows()}
        rep = probe_features(feats, m, "ep", source="toy")
        assert rep.r2 == pytest.approx(1.0, abs=1e-6)
        assert rep.n_train == len(m.rows("train")) and rep.n_test == len(m.rows("test"))


def test_svg_plots(tmp_path):
    plot_layer_feature(tmp_path / "a.svg", {1: {1: 0.1, 2: 0.3}, 2: {1: 0.2, 2: 0.1}}, "spread")
    plot_scatter(tmp_path / "b.svg", [1, 2, 3], [3, 1, 2], "x", "y")
    assert (tmp_path / "a.svg").read_text().lstrip().startswith("<?xml")
    first = (tmp_path / "b.svg").read_bytes()
    plot_scatter(tmp_path / "b.svg", [1, 2, 3], [3, 1, 2], "x", "y")
    assert (tmp_path / "b.svg").read_bytes() == first
