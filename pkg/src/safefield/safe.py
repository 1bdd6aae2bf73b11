"""Runs saved or cost relative to the average fielder (SAFE).

A player's SAFE for one BIP type is the weighted integral, over grid points
and velocities, of the gap between his success-probability surface and the
average fielder's, with weights = BIP frequency x run consequence x
shared responsibility.  The integral is a midpoint Riemann sum on the
weight-field grid.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .bip_data import INFIELD, OUTFIELD, Centroid, angle_features, fly_features
from .gibbs import PosteriorDraws
from .probit import DesignMatrix, Standardization, design_rows, fit_probit_mle, normalize_form
from .weights import VELOCITIES, Grid, WeightField

AVERAGE_MODES = ("pooled", "mu")
MIN_DRAWS = 40
REQUIRED_TYPES = {
    **{p: ("Flyball", "Liner") for p in OUTFIELD},
    **{p: ("Flyball", "Liner", "Grounder") for p in INFIELD},
}


def grid_features(grid: Grid, centroid: Centroid):
    """(distance-or-angle, direction) at each grid point relative to a centroid."""
    if (grid.kind == "angular") != (centroid.bip_type == "Grounder"):
        raise ValueError(f"grid mismatch: {grid.kind} grid for {centroid.bip_type} curve")
    if grid.kind == "planar":
        return fly_features(grid.points[:, 0], grid.points[:, 1], centroid)
    return angle_features(grid.points, centroid)


def grid_design(grid: Grid, centroid: Centroid, model_form: str,
                scaling: Standardization | None = None) -> np.ndarray:
    """Model rows at every (point, velocity), shape (points, 3, k)."""
    dist, direction = grid_features(grid, centroid)
    n = len(dist)
    d = np.repeat(dist[:, None], len(VELOCITIES), axis=1)
    f = np.repeat(direction[:, None], len(VELOCITIES), axis=1)
    v = np.broadcast_to(np.asarray(VELOCITIES, dtype=float), (n, len(VELOCITIES)))
    return design_rows(d, v, f, model_form, scaling)


@dataclass
class ProbCurve:
    """Success probability surface implied by one coefficient vector."""

    beta: np.ndarray
    model_form: str
    centroid: Centroid
    scaling: Standardization | None = None
    mode: str = ""

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.model_form = normalize_form(self.model_form)

    def evaluate(self, grid: Grid) -> np.ndarray:
        x = grid_design(grid, self.centroid, self.model_form, self.scaling)
        return special.ndtr(x @ self.beta)

    def at(self, distance, velocity, direction) -> np.ndarray:
        return special.ndtr(design_rows(distance, velocity, direction, self.model_form,
                                        self.scaling) @ self.beta)

    def with_beta(self, beta) -> "ProbCurve":
        return ProbCurve(beta, self.model_form, self.centroid, self.scaling)


def _stack(players: Sequence[DesignMatrix]) -> DesignMatrix:
    return DesignMatrix(np.vstack([p.rows for p in players]),
                        np.concatenate([p.outcomes for p in players]))


def average_curve(
    mode: str,
    centroid: Centroid,
    model_form: str,
    scaling: Standardization | None = None,
    players: Sequence[DesignMatrix] | None = None,
    draws: PosteriorDraws | None = None,
) -> ProbCurve:
    """Curve of the average fielder at a position.

    ``mode="pooled"`` fits one probit to all players' data combined;
    ``mode="mu"`` uses the posterior mean of the population mean vector.
    """
    if mode == "pooled":
        if not players:
            raise ValueError("pooled average needs player designs")
        fit = fit_probit_mle(_stack(players))
        if not fit.converged:
            raise ValueError(f"pooled fit failed: {fit.diagnostic}")
        beta = fit.beta_hat
    elif mode == "mu":
        if draws is None:
            raise ValueError("posterior-mean average needs draws")
        beta = draws.mu.mean(axis=0)
    else:
        raise ValueError(f"unknown average mode {mode!r}")
    return ProbCurve(beta, model_form, centroid, scaling, mode=mode)


def integrate_gap(gap: np.ndarray, weights: WeightField, position: str) -> float:
    """Sum of ``weights x gap`` over grid points and velocities."""
    w = weights.integration_weights(position)
    gap = np.asarray(gap, dtype=float)
    if gap.shape != w.shape:
        raise ValueError(f"grid mismatch: gap shape {gap.shape}, weights {w.shape}")
    return float(np.sum(w * gap))


def integrate_safe(player_curve, avg_curve, weights: WeightField, position: str) -> float:
    """SAFE of one curve against the average curve for one BIP type."""
    pf = getattr(player_curve, "model_form", None)
    af = getattr(avg_curve, "model_form", None)
    if pf is not None and af is not None and pf != af:
        raise ValueError("curves use different model forms")
    gap = player_curve.evaluate(weights.grid) - avg_curve.evaluate(weights.grid)
    return integrate_gap(gap, weights, position)


def safe_values(betas: np.ndarray, avg_curve: ProbCurve, weights: WeightField,
                position: str, chunk: int = 256) -> np.ndarray:
    """SAFE for each row of ``betas`` (draws, k) against ``avg_curve``."""
    x = grid_design(weights.grid, avg_curve.centroid, avg_curve.model_form, avg_curve.scaling)
    w = weights.integration_weights(position)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_w = w.reshape(-1)
    p_avg = special.ndtr(flat_x @ avg_curve.beta)
    # identical draws must give identical values; BLAS can differ per column
    betas, inverse = np.unique(np.atleast_2d(betas), axis=0, return_inverse=True)
    out = np.empty(len(betas))
    for start in range(0, len(betas), chunk):
        b = betas[start:start + chunk]
        gap = special.ndtr(flat_x @ b.T) - p_avg[:, None]
        out[start:start + chunk] = flat_w @ gap
    return out[inverse.reshape(-1)]


def summarize(values) -> tuple[float, float, float]:
    """Posterior mean and equal-tailed 95% interval."""
    values = np.asarray(values, dtype=float)
    lo, hi = np.percentile(values, [2.5, 97.5])
    if values.min() == values.max():
        v = float(values[0])
        return v, v, v
    mean = float(values.mean())
    return mean, float(lo), float(hi)


def safe_posterior(draws: PosteriorDraws, avg_curve: ProbCurve, weights: WeightField,
                   player: str, position: str) -> np.ndarray:
    """One SAFE value per retained draw of the player's coefficients."""
    if draws.n_draws < MIN_DRAWS:
        warnings.warn(f"interval unreliable: only {draws.n_draws} draws", stacklevel=2)
    return safe_values(draws.player_beta(player), avg_curve, weights, position)


def new_player_safe(draws: PosteriorDraws, avg_curve: ProbCurve, weights: WeightField,
                    position: str, rng) -> np.ndarray:
    """SAFE draws for a fielder with no data in this cell: coefficients drawn
    from the population distribution at each retained draw."""
    eps = rng.standard_normal(draws.mu.shape)
    betas = draws.mu + np.sqrt(draws.sigma2) * eps
    return safe_values(betas, avg_curve, weights, position)


@dataclass
class SafeResult:
    player_id: str
    position: str
    year: int
    per_type: dict = field(repr=False)
    draws: np.ndarray = field(repr=False)
    mean: float = 0.0
    interval_95: tuple = (0.0, 0.0)
    n_bip: int = 0

    @property
    def type_means(self) -> dict:
        return {t: float(np.mean(v)) for t, v in self.per_type.items()}


def total_safe(per_type: Mapping[str, np.ndarray], position: str, player_id: str = "",
               year: int = 0, n_bip: int = 0) -> SafeResult:
    """Draw-wise sum of per-type SAFE: fly + liner for outfielders, plus
    grounders for infielders."""
    need = REQUIRED_TYPES.get(position)
    if need is None:
        raise ValueError(f"unknown position {position!r}")
    for t in need:
        if t not in per_type:
            raise ValueError(f"missing SAFE draws for {t} at {position}")
    arrays = [np.asarray(per_type[t], dtype=float) for t in need]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("per-type SAFE draws are not aligned")
    total = np.sum(arrays, axis=0)
    mean, lo, hi = summarize(total)
    return SafeResult(player_id, position, year, {t: per_type[t] for t in need}, total,
                      mean, (lo, hi), n_bip)


@dataclass
class Leaderboard:
    rows: list          # all eligible results, best first
    best: list
    worst: list         # worst first
    min_bip: int

    def to_csv(self, path: str | Path) -> None:
        write_leaderboard_csv(self.rows, path)

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        for label, rows in (("Best", self.best), ("Worst", self.worst)):
            lines.append(f"{label}")
            lines.append(f"{'Name and year':<28}{'Post. mean':>11}  {'95% post. interval':<20}")
            for r in rows:
                lines.append(f"{r.player_id + ', ' + str(r.year):<28}{r.mean:>11.1f}  "
                             f"({r.interval_95[0]:.1f}, {r.interval_95[1]:.1f})")
        return "\n".join(lines) + "\n"


def rank_players(results: Sequence[SafeResult], min_bip: int = 500,
                 top_k: int | None = 10, bottom_k: int | None = 10) -> Leaderboard:
    """Rank player-years with more than ``min_bip`` opportunities by posterior mean."""
    kept = [r for r in results if r.n_bip > min_bip]
    ordered = sorted(kept, key=lambda r: (-r.mean, r.player_id, r.year))
    worst = sorted(kept, key=lambda r: (r.mean, r.player_id, r.year))
    return Leaderboard(ordered, ordered[:top_k], worst[:bottom_k], min_bip)


def write_leaderboard_csv(results: Sequence[SafeResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["player_id", "year", "position", "n_bip", "mean", "lo95", "hi95",
                      "fly", "liner", "grounder"])
        for r in results:
            tm = r.type_means
            out.writerow([r.player_id, r.year, r.position, r.n_bip, f"{r.mean:.4f}",
                          f"{r.interval_95[0]:.4f}", f"{r.interval_95[1]:.4f}"]
                         + [f"{tm[t]:.4f}" if t in tm else ""
                            for t in ("Flyball", "Liner", "Grounder")])


def write_curve_difference(player_curve: ProbCurve, avg_curve: ProbCurve, grid: Grid,
                           path: str | Path) -> None:
    """Plot-ready CSV of player minus average probability at each grid point."""
    p = player_curve.evaluate(grid)
    a = avg_curve.evaluate(grid)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        coord_cols = ["x", "y"] if grid.kind == "planar" else ["theta"]
        out.writerow(coord_cols + ["velocity", "p_player", "p_average", "difference"])
        for i in range(grid.n_points):
            coords = grid.points[i] if grid.kind == "planar" else [grid.points[i]]
            for j, v in enumerate(VELOCITIES):
                out.writerow([f"{c:.2f}" for c in coords] + [v, f"{p[i, j]:.6f}",
                             f"{a[i, j]:.6f}", f"{p[i, j] - a[i, j]:.6f}"])
