"""Residual checks, posterior predictive checks and correlation reports."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats

from .gibbs import PosteriorDraws
from .probit import DesignMatrix, ProbitFit

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


@dataclass
class Residuals:
    residual: np.ndarray
    predicted: np.ndarray
    player: np.ndarray


def compute_residuals(designs: Mapping[str, DesignMatrix], betas: Mapping[str, np.ndarray]) -> Residuals:
    """Outcome minus fitted probability for every observation.

    ``betas`` should hold each player's posterior-mean coefficients.
    """
    res, pred, who = [], [], []
    for pid, design in designs.items():
        if pid not in betas:
            raise KeyError(f"missing player fit for {pid}")
        p = special.ndtr(design.rows @ np.asarray(betas[pid], dtype=float))
        res.append(design.outcomes - p)
        pred.append(p)
        who.append(np.full(design.n, pid, dtype=object))
    return Residuals(np.concatenate(res), np.concatenate(pred), np.concatenate(who))


def posterior_mean_betas(draws: PosteriorDraws) -> dict:
    means = draws.beta.mean(axis=0)
    return {pid: means[i] for i, pid in enumerate(draws.player_ids)}


@dataclass
class BinnedResiduals:
    mean_predicted: np.ndarray
    mean_residual: np.ndarray
    count: np.ndarray
    order: np.ndarray      # observation indices sorted by prediction
    edges: np.ndarray      # bin boundaries into ``order``

    @property
    def n_bins(self) -> int:
        return len(self.count)

    def bin_means(self, values: np.ndarray) -> np.ndarray:
        """Per-bin means of ``values`` (observation-aligned, last axis)."""
        ordered = np.take(values, self.order, axis=-1)
        sums = np.add.reduceat(ordered, self.edges[:-1], axis=-1)
        return sums / self.count


def residual_bins(predicted, bin_size: int = 150) -> tuple[np.ndarray, np.ndarray]:
    """Sort order and bin edges for roughly ``bin_size`` observations per bin.

    Observations with identical predictions always share a bin, so a bin may
    grow beyond ``bin_size``.
    """
    predicted = np.asarray(predicted, dtype=float)
    n = len(predicted)
    if n == 0:
        raise ValueError("no residuals to bin")
    if n < bin_size:
        warnings.warn(f"{n} observations is fewer than one bin; using a single bin", stacklevel=2)
    order = np.argsort(predicted, kind="stable")
    sp = predicted[order]
    n_bins = max(1, n // bin_size)
    cuts = []
    for b in range(1, n_bins):
        c = int(round(b * n / n_bins))
        while 0 < c < n and sp[c] == sp[c - 1]:
            c += 1
        if 0 < c < n and (not cuts or c > cuts[-1]):
            cuts.append(c)
    edges = np.array([0, *cuts, n])
    return order, edges


def binned_residuals(residuals, predicted, bin_size: int = 150) -> BinnedResiduals:
    """Average residual and prediction within bins ordered by prediction."""
    residuals = np.asarray(residuals, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    order, edges = residual_bins(predicted, bin_size)
    count = np.diff(edges)
    mp = np.add.reduceat(predicted[order], edges[:-1]) / count
    mr = np.add.reduceat(residuals[order], edges[:-1]) / count
    return BinnedResiduals(mp, mr, count, order, edges)


def _draw_schedule(n_draws: int, n_sims: int) -> np.ndarray:
    return np.floor(np.arange(n_sims) * n_draws / n_sims).astype(int)


@dataclass
class PredictiveCheck:
    observed: BinnedResiduals
    replicates: np.ndarray    # (n_sims, bins)
    lower: np.ndarray
    upper: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        m = self.observed.mean_residual
        return (m >= self.lower) & (m <= self.upper)

    @property
    def coverage(self) -> float:
        return float(self.inside.mean())

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["bin", "count", "mean_predicted", "mean_residual", "lower95",
                          "upper95", "inside"])
            o = self.observed
            for b in range(o.n_bins):
                out.writerow([b, int(o.count[b]), f"{o.mean_predicted[b]:.6f}",
                              f"{o.mean_residual[b]:.6f}", f"{self.lower[b]:.6f}",
                              f"{self.upper[b]:.6f}", int(self.inside[b])])


def posterior_predictive_binned(
    draws: PosteriorDraws,
    designs: Sequence[DesignMatrix],
    n_sims: int = 500,
    rng=None,
    bin_size: int = 150,
) -> PredictiveCheck:
    """Binned residuals of observed data against replicate data sets.

    Replicates keep the observed design rows and draw new outcomes from the
    coefficients of successive retained draws.  Residuals of observed and
    replicated outcomes are taken against the same posterior-mean
    predictions and binned identically.
    """
    if n_sims < 1:
        raise ValueError("n_sims must be at least 1")
    if rng is None:
        raise ValueError("an explicit rng is required")
    designs = list(designs)
    if len(designs) != len(draws.player_ids):
        raise ValueError("one design per player in the draws is required")
    X = np.vstack([d.rows for d in designs])
    y = np.concatenate([d.outcomes for d in designs])
    idx = np.repeat(np.arange(len(designs)), [d.n for d in designs])
    mean_beta = draws.beta.mean(axis=0)
    p_hat = special.ndtr(np.einsum("ij,ij->i", X, mean_beta[idx]))
    observed = binned_residuals(y - p_hat, p_hat, bin_size)
    reps = np.empty((n_sims, observed.n_bins))
    for s, d in enumerate(_draw_schedule(draws.n_draws, n_sims)):
        p = special.ndtr(np.einsum("ij,ij->i", X, draws.beta[d][idx]))
        y_rep = (rng.random(len(p)) < p).astype(float)
        reps[s] = observed.bin_means(y_rep - p_hat)
    lower, upper = np.percentile(reps, [2.5, 97.5], axis=0)
    return PredictiveCheck(observed, reps, lower, upper)


@dataclass
class GapCheck:
    observed_gap: float
    partial: np.ndarray
    pooled: np.ndarray
    players: list

    def summary(self) -> dict:
        return {
            "observed_gap": float(self.observed_gap),
            "partial_quantiles": dict(zip(map(str, QUANTILES),
                                          np.percentile(self.partial, QUANTILES).tolist())),
            "pooled_quantiles": dict(zip(map(str, QUANTILES),
                                         np.percentile(self.pooled, QUANTILES).tolist())),
            "players": list(self.players),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _gap(pcts: np.ndarray) -> float:
    return float(pcts.max() - pcts.min())


def heterogeneity_gap_ppc(
    draws: PosteriorDraws,
    designs: Sequence[DesignMatrix],
    pooled_fit: ProbitFit,
    top_n: int = 15,
    n_sims: int = 500,
    rng=None,
) -> GapCheck:
    """Best-minus-worst success percentage among the ``top_n`` busiest players.

    Replicates come from the partial-pooling posterior (one retained draw
    each) and from the complete-pooling fit, whose coefficients are drawn
    from the normal approximation at the maximum likelihood estimate.
    """
    if rng is None:
        raise ValueError("an explicit rng is required")
    designs = list(designs)
    if len(designs) < top_n:
        raise ValueError(f"need at least {top_n} players")
    if not pooled_fit.converged or pooled_fit.cov is None:
        raise ValueError("pooled fit did not converge")
    sizes = np.array([d.n for d in designs])
    top = sorted(range(len(designs)), key=lambda i: (-sizes[i], i))[:top_n]
    observed = _gap(np.array([100 * designs[i].outcomes.mean() for i in top]))
    partial = np.empty(n_sims)
    pooled = np.empty(n_sims)
    chol = np.linalg.cholesky(pooled_fit.cov)
    for s, d in enumerate(_draw_schedule(draws.n_draws, n_sims)):
        pct = []
        for i in top:
            p = special.ndtr(designs[i].rows @ draws.beta[d, i])
            pct.append(100 * (rng.random(len(p)) < p).mean())
        partial[s] = _gap(np.array(pct))
        beta = pooled_fit.beta_hat + chol @ rng.standard_normal(len(pooled_fit.beta_hat))
        pct = []
        for i in top:
            p = special.ndtr(designs[i].rows @ beta)
            pct.append(100 * (rng.random(len(p)) < p).mean())
        pooled[s] = _gap(np.array(pct))
    return GapCheck(observed, partial, pooled, [draws.player_ids[i] for i in top])


def between_year_correlation(a, b, min_pairs: int = 3) -> dict:
    """Pearson correlation per position and in total over players in both sets.

    ``a`` and ``b`` are either sequences of SAFE results or mappings from
    (player_id, position) to a rating.  Cells with fewer than ``min_pairs``
    joined players are reported as ``None``.
    """
    ra, rb = _as_ratings(a), _as_ratings(b)
    keys = sorted(set(ra) & set(rb))
    out: dict = {}
    for pos in sorted({k[1] for k in keys}):
        ks = [k for k in keys if k[1] == pos]
        out[pos] = _pearson([ra[k] for k in ks], [rb[k] for k in ks], min_pairs)
    out["Total"] = _pearson([ra[k] for k in keys], [rb[k] for k in keys], min_pairs)
    return out


def _pearson(x, y, min_pairs):
    if len(x) < min_pairs:
        return None
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(stats.pearsonr(x, y)[0])


def _as_ratings(obj) -> dict:
    if isinstance(obj, Mapping):
        return {tuple(k): float(v) for k, v in obj.items()}
    return {(r.player_id, r.position): float(r.mean) for r in obj}


def load_ratings_csv(path: str | Path, year: int | None = None) -> dict:
    """Ratings keyed by (player_id, position) from a CSV with columns
    player_id, year, position, rating (a SAFE leaderboard's ``mean`` column
    is accepted as the rating)."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if year is not None and int(row["year"]) != year:
                continue
            value = row.get("rating", row.get("mean"))
            out[(row["player_id"], row["position"])] = float(value)
    return out


def write_correlations(corr: dict, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["position", "pearson_r"])
        for pos, r in corr.items():
            out.writerow([pos, "" if r is None else f"{r:.4f}"])


def residual_covariate_table(distance, velocity, direction, residuals,
                             distance_bin: float = 25.0) -> list[dict]:
    """Mean residual by distance bin, by velocity and by direction."""
    distance = np.asarray(distance, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    rows = []
    bins = np.floor(distance / distance_bin).astype(int)
    for b in np.unique(bins):
        sel = bins == b
        rows.append({"covariate": "distance", "level": f"{b * distance_bin:g}-{(b + 1) * distance_bin:g}",
                     "count": int(sel.sum()), "mean_residual": float(residuals[sel].mean())})
    for name, values in (("velocity", velocity), ("direction", direction)):
        values = np.asarray(values)
        for lv in np.unique(values):
            sel = values == lv
            rows.append({"covariate": name, "level": f"{lv:g}", "count": int(sel.sum()),
                         "mean_residual": float(residuals[sel].mean())})
    return rows


def write_rows(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with Path(path).open("w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        out.writeheader()
        for r in rows:
            out.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
