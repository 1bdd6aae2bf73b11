"""Synthetic leagues with known ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .bip_data import (
    BIP_TYPES, DEFAULT_PARK, BipRecord, Centroid, Park, fly_features, ground_features,
    normalize_bip_type, positions_for, ray_angle,
)
from .probit import Standardization, design_rows

# season shares of BIP types
TYPE_SHARES = {"Flyball": 0.33, "Liner": 0.25, "Grounder": 0.42}
VELOCITY_PROBS = (0.3, 0.45, 0.25)

DEFAULT_CENTROIDS = {
    "1B": (70.0, 95.0), "2B": (40.0, 145.0), "SS": (-40.0, 145.0), "3B": (-70.0, 95.0),
    "LF": (-160.0, 260.0), "CF": (0.0, 320.0), "RF": (160.0, 260.0),
}

# full-form population means and spreads (raw feet/degrees, velocity 1-3)
DEFAULT_MU = {
    "Flyball": (1.6, -0.016, 0.004, -0.001, 0.0),
    "Liner": (1.2, -0.025, 0.005, -0.002, 0.0),
    "Grounder": (1.5, -0.12, 0.01, -0.01, 0.0),
}
DEFAULT_SIGMA = {
    "Flyball": (0.15, 0.002, 0.001, 0.0005, 0.0002),
    "Liner": (0.15, 0.003, 0.001, 0.0005, 0.0002),
    "Grounder": (0.15, 0.01, 0.005, 0.003, 0.001),
}


@dataclass(frozen=True)
class LocationMixture:
    """Planar Gaussian mixture for BIP landing/fielding locations."""

    weights: tuple
    means: tuple
    sds: tuple            # per component (sd_x, sd_y)
    park: Park = DEFAULT_PARK

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must be a probability vector")
        m = np.asarray(self.means, dtype=float)
        if not np.all(self.park.contains(m[:, 0], m[:, 1])):
            raise ValueError("location model puts mass outside the park polygon")

    def sample(self, n: int, rng) -> np.ndarray:
        """``n`` locations inside the park at 0.1 ft resolution; out-of-park
        proposals are redrawn."""
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.sds, dtype=float)
        out = np.empty((n, 2))
        filled = 0
        tries = 0
        while filled < n:
            need = n - filled
            comp = rng.choice(len(w), size=need, p=w)
            pts = np.round(m[comp] + s[comp] * rng.standard_normal((need, 2)), 1)
            ok = self.park.contains(pts[:, 0], pts[:, 1]) & ~np.all(pts == 0, axis=1)
            good = pts[ok]
            out[filled:filled + len(good)] = good
            filled += len(good)
            tries += 1
            if tries > 1000:
                raise ValueError("location model puts almost no mass inside the park")
        return out


DEFAULT_MIXTURES = {
    "Flyball": LocationMixture((0.3, 0.4, 0.3),
                               ((-140.0, 250.0), (0.0, 290.0), (140.0, 250.0)),
                               ((55.0, 55.0), (60.0, 55.0), (55.0, 55.0))),
    "Liner": LocationMixture((0.3, 0.4, 0.3),
                             ((-110.0, 200.0), (0.0, 220.0), (110.0, 200.0)),
                             ((50.0, 50.0), (55.0, 50.0), (50.0, 50.0))),
    "Grounder": LocationMixture((0.35, 0.3, 0.35),
                                ((-65.0, 105.0), (0.0, 135.0), (65.0, 105.0)),
                                ((30.0, 30.0), (35.0, 30.0), (30.0, 30.0))),
}


# spread of a position's own chances around its starting spot
LOCAL_SD = {"infield": 30.0, "outfield": 50.0}
LOCAL_SHARE = 0.75


def position_mixture(position: str, bip_type: str, local_share: float = LOCAL_SHARE) -> LocationMixture:
    """Chances of one position: a component around its starting spot plus
    the league mixture of the BIP type, scaled by ``1 - local_share``."""
    bip_type = normalize_bip_type(bip_type)
    league = DEFAULT_MIXTURES[bip_type]
    sd = LOCAL_SD["outfield" if position in ("LF", "CF", "RF") else "infield"]
    return LocationMixture(
        (local_share, *[(1 - local_share) * w for w in league.weights]),
        (DEFAULT_CENTROIDS[position], *league.means),
        ((sd, sd), *league.sds),
        league.park,
    )


def default_centroid(position: str, bip_type: str) -> Centroid:
    x, y = DEFAULT_CENTROIDS[position]
    return Centroid.at(position, bip_type, x, y)


def hit_probabilities(x, y, bip_type: str) -> np.ndarray:
    """(single, double, triple) probabilities for a missed play at (x, y).

    Missed plays up the middle are mostly singles; extra bases become more
    likely deep in the outfield and near the foul lines.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    phi = ray_angle(x, y)
    line = np.exp(-np.maximum(np.minimum(phi - 45.0, 135.0 - phi), 0.0) / 8.0)
    if normalize_bip_type(bip_type) == "Grounder":
        double = 0.02 + 0.3 * line
        triple = 0.02 * line
    else:
        depth = np.clip((np.hypot(x, y) - 150.0) / 200.0, 0.0, 1.0)
        double = np.minimum(0.6, 0.05 + 0.35 * depth + 0.3 * line)
        triple = 0.1 * depth
    return np.stack([1.0 - double - triple, double, triple], axis=-1)


def simulate_players(n_players: int, mu, sigma, rng) -> np.ndarray:
    """Player coefficients drawn independently from N(mu, diag(sigma^2))."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    return mu[None, :] + sigma[None, :] * rng.standard_normal((n_players, mu.size))


def opportunity_counts(n_players: int, rng, median: float = 60.0, spread: float = 1.3,
                       low: int = 1, high: int = 531) -> np.ndarray:
    """Right-skewed opportunity counts: rounded log-normal, clipped to [low, high]."""
    raw = np.exp(np.log(median) + spread * rng.standard_normal(n_players))
    return np.clip(np.round(raw), low, high).astype(int)


def simulate_bips(
    true_beta: np.ndarray,
    counts: Sequence[int],
    location_model: LocationMixture,
    centroid: Centroid,
    bip_type: str,
    rng,
    year: int = 2005,
    model_form: str = "full",
    scaling: Standardization | None = None,
    player_ids: Sequence[str] | None = None,
    velocity_probs: Sequence[float] = VELOCITY_PROBS,
) -> list[BipRecord]:
    """Simulate each player's opportunities and Bernoulli outcomes.

    Outcomes follow the probit of the model covariates at the sampled
    location and velocity; misses get a location-dependent hit result.
    """
    bip_type = normalize_bip_type(bip_type)
    true_beta = np.atleast_2d(np.asarray(true_beta, dtype=float))
    counts = np.asarray(counts, dtype=int)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if len(counts) != len(true_beta):
        raise ValueError("one count per player required")
    position = centroid.position
    if player_ids is None:
        player_ids = [f"{position.lower()}_{i:03d}" for i in range(len(counts))]
    records: list[BipRecord] = []
    for pid, beta, n in zip(player_ids, true_beta, counts):
        if n == 0:
            continue
        loc = location_model.sample(int(n), rng)
        vel = rng.choice(3, size=int(n), p=np.asarray(velocity_probs, dtype=float)) + 1
        if bip_type == "Grounder":
            dist, direction = ground_features(loc[:, 0], loc[:, 1], centroid)
        else:
            dist, direction = fly_features(loc[:, 0], loc[:, 1], centroid)
        x = design_rows(dist, vel, direction, model_form, scaling)
        p = special.ndtr(x @ beta)
        success = rng.random(int(n)) < p
        hp = hit_probabilities(loc[:, 0], loc[:, 1], bip_type)
        u = rng.random(int(n))
        hit_idx = (u[:, None] > np.cumsum(hp, axis=1)[:, :2]).sum(axis=1)
        for j in range(int(n)):
            records.append(BipRecord(
                year=year, bip_type=bip_type,
                x=float(loc[j, 0]), y=float(loc[j, 1]),
                velocity=int(vel[j]), fielder_id=str(pid), position=position,
                outcome="Success" if success[j] else "Failure",
                hit_result=None if success[j] else ("Single", "Double", "Triple")[hit_idx[j]],
            ))
    return records


@dataclass
class LeagueConfig:
    year: int = 2005
    players_per_position: int = 30
    median_opportunities: float = 400.0
    spread: float = 0.8
    max_opportunities: int = 1400
    bip_types: tuple = BIP_TYPES
    positions: tuple | None = None
    mu: dict = field(default_factory=lambda: dict(DEFAULT_MU))
    sigma: dict = field(default_factory=lambda: dict(DEFAULT_SIGMA))


def simulate_league(config: LeagueConfig, rng) -> tuple[list[BipRecord], dict]:
    """A season for every (position, BIP type) cell plus its ground truth.

    Each fielder gets one season-long opportunity total which is split
    across BIP types by their league shares.  Chance locations follow
    :func:`position_mixture`.
    """
    records: list[BipRecord] = []
    truth = {"year": config.year, "cells": {}}
    positions = config.positions or ("1B", "2B", "3B", "SS", "LF", "CF", "RF")
    for position in positions:
        totals = opportunity_counts(config.players_per_position, rng,
                                    config.median_opportunities, config.spread, 1,
                                    config.max_opportunities)
        ids = [f"{position.lower()}_{i:03d}" for i in range(config.players_per_position)]
        for bip_type in config.bip_types:
            if position not in positions_for(bip_type):
                continue
            share = TYPE_SHARES[bip_type]
            counts = np.maximum(np.round(totals * share), 1).astype(int)
            mu, sigma = config.mu[bip_type], config.sigma[bip_type]
            beta = simulate_players(len(ids), mu, sigma, rng)
            centroid = default_centroid(position, bip_type)
            records.extend(simulate_bips(beta, counts, position_mixture(position, bip_type), centroid,
                                         bip_type, rng, year=config.year, player_ids=ids))
            truth["cells"][f"{position}/{bip_type}"] = {
                "mu": list(map(float, mu)),
                "sigma": list(map(float, sigma)),
                "centroid": [centroid.x0, centroid.y0],
                "beta": {pid: list(map(float, b)) for pid, b in zip(ids, beta)},
                "counts": {pid: int(c) for pid, c in zip(ids, counts)},
            }
    return records, truth


def write_truth(truth: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
