import numpy as np
import pytest

from safefield.convergence import (
    convergence_diagnostics, diagnose_chains, effective_sample_size, split_rhat,
)
from safefield.gibbs import PosteriorDraws, make_rng

from oracles import ar1_ess, split_rhat_longhand


def ar1(rng, phi, m, n):
    x = np.empty((m, n))
    x[:, 0] = rng.normal(size=m) / np.sqrt(1 - phi**2)
    eps = rng.normal(size=(m, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + eps[:, t]
    return x


def fake_draws(mu_chains, beta_chains=None):
    m, n = mu_chains.shape
    mu = np.repeat(mu_chains.reshape(-1)[:, None], 4, axis=1)
    beta = mu[:, None, :] if beta_chains is None else beta_chains
    return PosteriorDraws(beta, mu, np.ones_like(mu), np.repeat(np.arange(m), n), ("p",),
                          "illustration")


class TestRhat:
    def test_iid_chains(self, rng):
        r = split_rhat(rng.normal(size=(2, 2000)))
        assert 0.99 <= r <= 1.02

    def test_offset_chains_flagged(self, rng):
        x = rng.normal(size=(2, 1000))
        x[1] += 10
        d = diagnose_chains("x", x)
        assert d.rhat > 1.05 and d.flagged

    def test_matches_longhand(self, rng):
        x = ar1(rng, 0.6, 3, 400)
        assert split_rhat(x) == pytest.approx(split_rhat_longhand(x), rel=1e-12)

    def test_trend_detected_by_split(self):
        t = np.linspace(0, 1, 1000)
        x = np.stack([t, t]) + 0.01 * make_rng(1).normal(size=(2, 1000))
        assert split_rhat(x) > 1.5


class TestEss:
    def test_iid_close_to_total(self, rng):
        ess = effective_sample_size(rng.normal(size=(4, 1000)))
        assert 3200 < ess < 4800

    def test_ar1_matches_theory(self, rng):
        x = ar1(rng, 0.8, 4, 5000)
        assert effective_sample_size(x) == pytest.approx(ar1_ess(0.8, 20000), rel=0.2)

    def test_constant_chain_is_error_not_nan(self):
        d = diagnose_chains("c", np.ones((2, 100)))
        assert d.flagged and d.error == "zero variance"
        assert d.rhat is None and d.ess is None


class TestReport:
    def test_names_and_flags(self, rng):
        x = rng.normal(size=(2, 200))
        rep = convergence_diagnostics(fake_draws(x))
        names = [r.name for r in rep.rows]
        assert names[:4] == ["mu[intercept]", "mu[dist]", "mu[vel]", "mu[dir]"]
        assert "beta[p,dir]" in names
        assert rep.get("mu[dist]").rhat == pytest.approx(split_rhat(x))
        # sigma2 draws are constant here
        assert "sigma2[vel]" in rep.flagged

    def test_single_chain_warns(self, rng):
        with pytest.warns(UserWarning, match="single chain"):
            rep = convergence_diagnostics(fake_draws(rng.normal(size=(1, 200))))
        r = rep.get("mu[intercept]")
        assert r.rhat is None and r.ess > 0

    def test_short_chains_noted(self, rng):
        rep = convergence_diagnostics(fake_draws(rng.normal(size=(2, 50))))
        assert any("50 draws per chain" in w for w in rep.warnings)

    def test_csv(self, tmp_path, rng):
        rep = convergence_diagnostics(fake_draws(rng.normal(size=(2, 200))))
        rep.to_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "parameter,rhat,ess,flagged,error"
        assert len(lines) == 1 + len(rep.rows)
