import numpy as np
import pytest

from safefield.bip_data import Centroid
from safefield.gibbs import ChainConfig, HierModel, PosteriorDraws, Prior, run_gibbs
from safefield.probit import DesignMatrix, design_rows, fit_probit_mle, probit_cdf
from safefield.safe import (
    ProbCurve, SafeResult, average_curve, integrate_gap, integrate_safe, rank_players,
    safe_posterior, safe_values, summarize, total_safe, write_curve_difference,
)
from safefield.weights import build_weight_field

CF = Centroid.at("CF", "Flyball", 0, 320)
BETA = np.array([1.6, -0.016, 0.004, -0.001, 0.0])


@pytest.fixture(scope="module")
def fly_weights(small_league):
    return build_weight_field(small_league[0], "Flyball")


class Shifted:
    def __init__(self, base, delta):
        self.base, self.delta = base, delta

    def evaluate(self, grid):
        return self.base.evaluate(grid) + self.delta


def draws_of(betas, pid="p"):
    betas = np.asarray(betas, dtype=float)
    n = len(betas)
    return PosteriorDraws(betas[:, None, :], betas, np.ones_like(betas), np.zeros(n, int), (pid,),
                          "full")


class TestIntegrate:
    def test_identical_curves_zero(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        assert integrate_safe(avg, avg, fly_weights, "CF") == 0.0

    def test_uniform_shift_factorizes(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        w = fly_weights
        W = np.sum(w.volume[None, :] * w.freq * w.run_value * w.responsibility[:, :, 5]
                   * w.grid.cell_measure)
        got = integrate_safe(Shifted(avg, 0.1), avg, w, "CF")
        assert got == pytest.approx(0.1 * W, abs=1e-9)

    def test_antisymmetric(self, fly_weights):
        a = ProbCurve(BETA, "full", CF)
        b = ProbCurve(BETA + [0.2, 0.001, 0, 0, 0], "full", CF)
        assert integrate_safe(a, b, fly_weights, "CF") == pytest.approx(
            -integrate_safe(b, a, fly_weights, "CF"), abs=1e-12)

    def test_monotone(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        better = ProbCurve(BETA + [0.1, 0, 0, 0, 0], "full", CF)
        assert integrate_safe(better, avg, fly_weights, "CF") > 0

    def test_grid_mismatch(self, fly_weights):
        grounder = ProbCurve([1.5, -0.1, 0, 0, 0], "full", Centroid.at("SS", "Grounder", -40, 145))
        with pytest.raises(ValueError, match="grid mismatch"):
            integrate_safe(grounder, grounder, fly_weights, "SS")
        with pytest.raises(ValueError, match="grid mismatch"):
            integrate_gap(np.zeros((3, 3)), fly_weights, "CF")

    def test_vectorised_matches_single(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        betas = BETA + np.array([[0.1, 0, 0, 0, 0], [-0.2, 0.002, 0, 0, 0]])
        got = safe_values(betas, avg, fly_weights, "CF")
        want = [integrate_safe(avg.with_beta(b), avg, fly_weights, "CF") for b in betas]
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestAverageCurve:
    def test_single_player_pooled_is_own_mle(self, rng):
        d = rng.uniform(0, 250, 400)
        v = rng.integers(1, 4, 400).astype(float)
        f = (rng.random(400) < 0.5).astype(float)
        X = design_rows(d, v, f, "full")
        design = DesignMatrix(X, rng.random(400) < probit_cdf(X @ BETA))
        curve = average_curve("pooled", CF, "full", players=[design])
        np.testing.assert_allclose(curve.beta, fit_probit_mle(design).beta_hat)
        assert curve.mode == "pooled"

    def _two_group_designs(self, rng, n):
        # two players alone leave the variance posterior with infinite variance
        designs = []
        for shift in (-0.4,) * 5 + (0.4,) * 5:
            d = rng.uniform(0, 1, (n, 3)) - 0.5
            X = np.column_stack([np.ones(n), d])
            beta = np.array([0.3 + shift, -1.0, 0.5, 0.2])
            designs.append(DesignMatrix(X, rng.random(n) < probit_cdf(X @ beta)))
        return designs

    def test_mu_curve_between_players(self, rng):
        designs = self._two_group_designs(rng, 1500)
        model = HierModel(designs, Prior(), "illustration")
        draws = run_gibbs(model, ChainConfig(n_iter=1200, burn_in=200, thin=2, n_chains=2))
        mu_curve = average_curve("mu", CF, "illustration", draws=draws)
        grid = np.column_stack([np.ones(200), rng.uniform(-0.5, 0.5, (200, 3))])
        p_mu = probit_cdf(grid @ mu_curve.beta)
        p0, p1 = (probit_cdf(grid @ draws.beta[:, i].mean(axis=0)) for i in (0, 9))
        assert np.all((p_mu >= np.minimum(p0, p1)) & (p_mu <= np.maximum(p0, p1)))

    def test_modes_agree_on_balanced_data(self, rng):
        designs = []
        for _ in range(8):
            X = np.column_stack([np.ones(1500), rng.uniform(-0.5, 0.5, (1500, 3))])
            beta = np.array([0.4, -1.0, 0.5, 0.2]) + rng.normal(0, 0.05, 4)
            designs.append(DesignMatrix(X, rng.random(1500) < probit_cdf(X @ beta)))
        draws = run_gibbs(HierModel(designs, Prior(), "illustration"),
                          ChainConfig(n_iter=1000, burn_in=300, thin=2, n_chains=2))
        a = average_curve("pooled", CF, "illustration", players=designs)
        b = average_curve("mu", CF, "illustration", draws=draws)
        grid = np.column_stack([np.ones(500), rng.uniform(-0.5, 0.5, (500, 3))])
        assert np.max(np.abs(probit_cdf(grid @ a.beta) - probit_cdf(grid @ b.beta))) < 0.01

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            average_curve("median", CF, "full", players=[])


class TestPosterior:
    def test_equal_draws_degenerate_interval(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        vals = safe_posterior(draws_of(np.tile(BETA + [0.1, 0, 0, 0, 0], (50, 1))), avg,
                              fly_weights, "p", "CF")
        mean, lo, hi = summarize(vals)
        assert lo == mean == hi

    def test_symmetric_perturbation_centred(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        delta = np.array([1e-3, 1e-5, 0, 0, 0])
        vals = safe_posterior(draws_of(np.vstack([np.tile(BETA + delta, (25, 1)),
                                                  np.tile(BETA - delta, (25, 1))])),
                              avg, fly_weights, "p", "CF")
        # first-order terms cancel; the remainder is second order in delta
        assert abs(vals.mean()) < 1e-3 * np.abs(vals).max()

    def test_few_draws_warn(self, fly_weights):
        avg = ProbCurve(BETA, "full", CF)
        with pytest.warns(UserWarning, match="interval unreliable"):
            safe_posterior(draws_of(np.tile(BETA, (10, 1))), avg, fly_weights, "p", "CF")


class TestTotals:
    def test_outfielder_zero_liner(self):
        fly = np.array([1.0, 2.0, 3.0, 6.0])
        r = total_safe({"Flyball": fly, "Liner": np.zeros(4)}, "CF")
        assert (r.mean, r.interval_95) == summarize(fly)[:1] + (summarize(fly)[1:],)

    def test_infielder_missing_grounder(self):
        with pytest.raises(ValueError, match="Grounder"):
            total_safe({"Flyball": np.zeros(3), "Liner": np.zeros(3)}, "SS")

    def test_linearity(self, rng):
        parts = {t: m + rng.normal(size=400) for t, m in
                 zip(("Flyball", "Liner", "Grounder"), (3.0, -1.0, 2.0))}
        parts = {t: v - v.mean() + m for (t, v), m in zip(parts.items(), (3.0, -1.0, 2.0))}
        r = total_safe(parts, "2B")
        assert r.mean == pytest.approx(4.0, abs=1e-12)
        assert r.interval_95[0] <= r.mean <= r.interval_95[1]


def result(pid, mean, n_bip, year=2005):
    return SafeResult(pid, "CF", year, {}, np.array([mean]), mean, (mean - 1, mean + 1), n_bip)


class TestRanking:
    def test_threshold_strict(self):
        board = rank_players([result("a", 3, 500), result("b", 1, 501)])
        assert [r.player_id for r in board.rows] == ["b"]

    def test_order(self):
        board = rank_players([result("a", -5, 900), result("b", 5, 900)])
        assert [r.mean for r in board.rows] == [5, -5]
        assert [r.mean for r in board.worst] == [-5, 5]

    def test_player_years_separate(self):
        board = rank_players([result("a", 2, 900, 2004), result("a", 4, 900, 2005)])
        assert [(r.player_id, r.year) for r in board.rows] == [("a", 2005), ("a", 2004)]

    def test_empty(self):
        assert rank_players([]).rows == []

    def test_text_and_csv(self, tmp_path):
        board = rank_players([result("jones", 11.8, 600)], top_k=5, bottom_k=5)
        text = board.to_text("CF")
        assert "jones, 2005" in text and "11.8" in text and "(10.8, 12.8)" in text
        board.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_text().splitlines()[1].startswith("jones,2005,CF,600,11.8000")


def test_curve_difference_csv(tmp_path, fly_weights):
    avg = ProbCurve(BETA, "full", CF)
    write_curve_difference(avg.with_beta(BETA + [0.1, 0, 0, 0, 0]), avg, fly_weights.grid,
                           tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "x,y,velocity,p_player,p_average,difference"
    assert len(lines) == 1 + 3 * fly_weights.grid.n_points
