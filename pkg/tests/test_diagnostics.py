import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtri

from safefield.diagnostics import (
    binned_residuals, between_year_correlation, compute_residuals, heterogeneity_gap_ppc,
    load_ratings_csv, posterior_predictive_binned, posterior_mean_betas, residual_bins,
    residual_covariate_table, write_correlations, write_rows,
)
from safefield.gibbs import ChainConfig, HierModel, PosteriorDraws, Prior, make_rng, run_gibbs
from safefield.probit import DesignMatrix, fit_probit_mle, probit_cdf
from safefield.safe import SafeResult

MU = np.array([0.4, -1.0, 0.5, 0.2])


def simulate_designs(seed, n_players, n_obs, sd):
    rng = make_rng(seed)
    designs = []
    for _ in range(n_players):
        X = np.column_stack([np.ones(n_obs), rng.standard_normal((n_obs, 3))])
        beta = MU + np.asarray(sd) * rng.standard_normal(4)
        designs.append(DesignMatrix(X, rng.random(n_obs) < probit_cdf(X @ beta)))
    return designs


def fit(designs, seed=0):
    return run_gibbs(HierModel(designs, Prior(), "illustration"),
                     ChainConfig(n_iter=1000, burn_in=500, thin=5, n_chains=2, seed=seed))


@pytest.fixture(scope="module")
def fitted():
    designs = simulate_designs(3, 20, 750, [0.3, 0.2, 0.1, 0.1])
    return designs, fit(designs, 3)


class TestResiduals:
    @pytest.mark.parametrize("y, p, want", [(1, 1.0, 0.0), (0, 0.72, -0.72), (1, 0.5, 0.5)])
    def test_examples(self, y, p, want):
        eta = 40.0 if p == 1.0 else float(ndtri(p))
        res = compute_residuals({"a": DesignMatrix(np.ones((1, 1)), np.array([y]))},
                                {"a": np.array([eta])})
        assert res.residual[0] == pytest.approx(want, abs=1e-12)

    def test_missing_player(self):
        with pytest.raises(KeyError, match="missing player fit"):
            compute_residuals({"a": DesignMatrix(np.ones((1, 1)), np.array([1]))}, {})

    def test_range(self, fitted):
        designs, draws = fitted
        res = compute_residuals(dict(zip(draws.player_ids, designs)), posterior_mean_betas(draws))
        assert np.all(np.abs(res.residual) < 1)
        assert len(res.residual) == 20 * 750


class TestBinning:
    def test_two_bins(self, rng):
        b = binned_residuals(rng.normal(size=300), rng.random(300), 150)
        assert b.n_bins == 2 and list(b.count) == [150, 150]

    def test_constant_prediction_single_bin(self, rng):
        b = binned_residuals(rng.normal(size=600), np.full(600, 0.3), 150)
        assert b.n_bins == 1

    def test_ties_share_bin(self):
        pred = np.repeat([0.1, 0.2, 0.3], [100, 150, 50])
        order, edges = residual_bins(pred, 150)
        for lo, hi in zip(edges[:-1], edges[1:]):
            inside = set(pred[order[lo:hi]])
            for other_lo, other_hi in zip(edges[:-1], edges[1:]):
                if other_lo != lo:
                    assert not inside & set(pred[order[other_lo:other_hi]])

    def test_small_sample_warns(self, rng):
        with pytest.warns(UserWarning, match="single bin"):
            b = binned_residuals(rng.normal(size=40), rng.random(40), 150)
        assert b.n_bins == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            binned_residuals([], [], 150)

    def test_calibrated_data_within_two_se(self):
        rng = make_rng(11)
        p = rng.uniform(0.05, 0.95, 15_000)
        y = (rng.random(15_000) < p).astype(float)
        b = binned_residuals(y - p, p, 150)
        # binomial variance of each bin's mean residual
        se = np.sqrt(b.bin_means(p * (1 - p)) / b.count)
        assert np.mean(np.abs(b.mean_residual) <= 2 * se) >= 0.93

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 2000), st.integers(0, 2**31 - 1), st.integers(20, 300))
    def test_weighted_bin_means_equal_global(self, n, seed, size):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=n)
        p = np.round(rng.random(n), 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            b = binned_residuals(r, p, size)
        assert abs(np.sum(b.mean_residual * b.count) / n - r.mean()) < 1e-12
        assert b.count.sum() == n


class TestPredictiveCheck:
    def test_zero_sims(self, fitted):
        designs, draws = fitted
        with pytest.raises(ValueError):
            posterior_predictive_binned(draws, designs, n_sims=0, rng=make_rng(0))

    def test_self_simulated_coverage(self, fitted):
        designs, draws = fitted
        chk = posterior_predictive_binned(draws, designs, 500, make_rng(1))
        assert chk.observed.n_bins == 100
        assert 0.92 <= chk.coverage <= 0.99
        assert np.all(chk.lower <= chk.upper)

    def test_envelope_width_stable_under_fewer_draws(self, fitted):
        # replicate spread is dominated by Bernoulli noise, so thinning the
        # retained draws does not widen the envelopes
        designs, draws = fitted
        widths = []
        for k in (100, 50, 25, 10):
            sub = PosteriorDraws(draws.beta[:k], draws.mu[:k], draws.sigma2[:k], draws.chain[:k],
                                 draws.player_ids, draws.model_form)
            chk = posterior_predictive_binned(sub, designs, 500, make_rng(2))
            widths.append(np.mean(chk.upper - chk.lower))
        assert np.ptp(widths) / np.mean(widths) < 0.05

    def test_deterministic_and_csv(self, fitted, tmp_path):
        designs, draws = fitted
        a = posterior_predictive_binned(draws, designs, 50, make_rng(5))
        b = posterior_predictive_binned(draws, designs, 50, make_rng(5))
        np.testing.assert_array_equal(a.replicates, b.replicates)
        a.to_csv(tmp_path / "ppc.csv")
        lines = (tmp_path / "ppc.csv").read_text().splitlines()
        assert lines[0].startswith("bin,count,mean_predicted")
        assert len(lines) == 1 + a.observed.n_bins


class TestGapCheck:
    def test_homogeneous_observed_inside_pooled(self):
        designs = simulate_designs(21, 20, 300, [0, 0, 0, 0])
        draws = fit(designs, 21)
        pooled = fit_probit_mle(DesignMatrix(np.vstack([d.rows for d in designs]),
                                             np.concatenate([d.outcomes for d in designs])))
        chk = heterogeneity_gap_ppc(draws, designs, pooled, 15, 300, make_rng(4))
        lo, hi = np.percentile(chk.pooled, [2.5, 97.5])
        assert lo <= chk.observed_gap <= hi
        assert len(chk.players) == 15

    def test_heterogeneous_pooled_too_narrow(self):
        designs = simulate_designs(22, 20, 300, [0.5, 0.1, 0.1, 0.1])
        draws = fit(designs, 22)
        pooled = fit_probit_mle(DesignMatrix(np.vstack([d.rows for d in designs]),
                                             np.concatenate([d.outcomes for d in designs])))
        chk = heterogeneity_gap_ppc(draws, designs, pooled, 15, 300, make_rng(4))
        assert np.percentile(chk.pooled, 97.5) < np.median(chk.partial)

    def test_summary_json(self, fitted, tmp_path):
        designs, draws = fitted
        pooled = fit_probit_mle(DesignMatrix(np.vstack([d.rows for d in designs]),
                                             np.concatenate([d.outcomes for d in designs])))
        chk = heterogeneity_gap_ppc(draws, designs, pooled, 15, 20, make_rng(4))
        chk.to_json(tmp_path / "gap.json")
        out = json.loads((tmp_path / "gap.json").read_text())
        assert set(out) == {"observed_gap", "partial_quantiles", "pooled_quantiles", "players"}

    def test_too_few_players(self, fitted):
        designs, draws = fitted
        with pytest.raises(ValueError):
            heterogeneity_gap_ppc(draws, designs, fit_probit_mle(designs[0]), 30, 5, make_rng(0))


def res(pid, pos, mean):
    return SafeResult(pid, pos, 2005, {}, np.array([mean]), mean, (mean, mean), 600)


class TestCorrelation:
    def test_identical(self):
        a = [res(p, "CF", v) for p, v in zip("abcd", (1.0, 3.0, 2.0, 7.0))]
        assert between_year_correlation(a, a)["CF"] == pytest.approx(1.0)

    def test_anti_ordered(self):
        a = {("a", "SS"): 1, ("b", "SS"): 2, ("c", "SS"): 3}
        b = {("a", "SS"): 3, ("b", "SS"): 2, ("c", "SS"): 1}
        assert between_year_correlation(a, b)["SS"] == pytest.approx(-1.0)

    def test_too_few_pairs(self):
        a = {("a", "SS"): 1, ("b", "SS"): 2, ("c", "CF"): 1, ("d", "CF"): 2, ("e", "CF"): 0}
        out = between_year_correlation(a, {("a", "SS"): 2, ("b", "SS"): 1, **{
            k: v for k, v in a.items() if k[1] == "CF"}})
        assert out["SS"] is None and out["CF"] == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=30))
    def test_symmetric(self, pairs):
        a = {(str(i), "CF"): x for i, (x, _) in enumerate(pairs)}
        b = {(str(i), "CF"): y for i, (_, y) in enumerate(pairs)}
        ab, ba = between_year_correlation(a, b), between_year_correlation(b, a)
        assert ab.keys() == ba.keys()
        for k in ab:
            if ab[k] is None:
                assert ba[k] is None
            else:
                assert ab[k] == pytest.approx(ba[k], abs=1e-12)

    def test_csv_roundtrip(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("player_id,year,position,rating\na,2004,CF,1.5\na,2005,CF,2.0\n")
        assert load_ratings_csv(p, 2005) == {("a", "CF"): 2.0}
        write_correlations({"CF": 0.5, "Total": None}, tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text() == "position,pearson_r\nCF,0.5000\nTotal,\n"


def test_covariate_table(tmp_path):
    rows = residual_covariate_table([0, 10, 30, 60], [1, 1, 2, 3], [0, 1, 1, 0],
                                    np.array([0.1, -0.1, 0.2, 0.4]))
    dist = {r["level"]: r for r in rows if r["covariate"] == "distance"}
    assert dist["0-25"]["count"] == 2 and dist["0-25"]["mean_residual"] == pytest.approx(0.0)
    assert dist["50-75"]["mean_residual"] == pytest.approx(0.4)
    write_rows(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("covariate,level,count,mean_residual\n")
