"""Cell-level fitting and season SAFE assembly.

A *cell* is one (year, position, BIP type) combination; each is fitted
independently.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bip_data import (
    BipRecord, Centroid, covariate_arrays, estimate_centroid, filter_eligible,
    normalize_bip_type, positions_for,
)
from .gibbs import ChainConfig, HierModel, PosteriorDraws, Prior, make_rng, run_gibbs
from .probit import (
    DesignMatrix, ProbitFit, Standardization, build_design, fit_probit_mle, normalize_form,
)
from .safe import (
    REQUIRED_TYPES, SafeResult, average_curve, new_player_safe, safe_values, total_safe,
)
from .weights import WeightField

log = logging.getLogger(__name__)

POOLING = ("none", "complete", "partial")


@dataclass
class CellData:
    """Eligible data of one cell, split into per-player designs."""

    year: int
    position: str
    bip_type: str
    centroid: Centroid
    model_form: str
    scaling: Standardization | None
    player_ids: list
    designs: list
    records: list = field(repr=False, default_factory=list)

    @property
    def n_bip(self) -> dict:
        return {pid: d.n for pid, d in zip(self.player_ids, self.designs)}

    def design_of(self, player_id: str) -> DesignMatrix:
        return self.designs[self.player_ids.index(player_id)]

    def model(self, prior: Prior | None = None) -> HierModel:
        return HierModel(self.designs, prior or Prior(), self.model_form, self.player_ids)


def prepare_cell(
    records: Sequence[BipRecord],
    position: str,
    bip_type: str,
    year: int | None = None,
    model_form: str = "full",
    centroid: Centroid | None = None,
) -> CellData:
    """Centroid, eligibility and per-player design matrices for one cell."""
    bip_type = normalize_bip_type(bip_type)
    model_form = normalize_form(model_form)
    if position not in positions_for(bip_type):
        raise ValueError(f"{position} is not modelled for {bip_type}")
    recs = [r for r in records if r.bip_type == bip_type and (year is None or r.year == year)]
    if year is None:
        years = {r.year for r in recs}
        year = years.pop() if len(years) == 1 else 0
    if centroid is None:
        centroid = estimate_centroid(recs, position, bip_type)
    eligible = filter_eligible(recs, position, bip_type, centroid)
    if not eligible:
        raise ValueError(f"no eligible plays for {position} {bip_type}")
    cov = covariate_arrays(eligible, centroid)
    scaling = None
    if model_form == "illustration":
        scaling = Standardization.fit(cov["distance"], cov["velocity"], cov["direction"])
    pids = np.array([r.fielder_id for r in eligible])
    ids = sorted(set(pids.tolist()))
    designs = []
    for pid in ids:
        sel = pids == pid
        designs.append(build_design({k: v[sel] for k, v in cov.items()}, model_form, scaling))
    return CellData(int(year), position, bip_type, centroid, model_form, scaling, ids,
                    designs, eligible)


@dataclass
class CellFit:
    data: CellData
    pooling: str
    draws: PosteriorDraws | None = None
    player_mle: dict = field(default_factory=dict)
    pooled: ProbitFit | None = None


def fit_cell(data: CellData, pooling: str = "partial", prior: Prior | None = None,
             config: ChainConfig | None = None) -> CellFit:
    """Fit one cell with no, complete or partial pooling."""
    if pooling not in POOLING:
        raise ValueError(f"unknown pooling {pooling!r}")
    pooled = fit_probit_mle(DesignMatrix(np.vstack([d.rows for d in data.designs]),
                                         np.concatenate([d.outcomes for d in data.designs])))
    fit = CellFit(data, pooling, pooled=pooled)
    if pooling == "none":
        fit.player_mle = {pid: fit_probit_mle(d) for pid, d in zip(data.player_ids, data.designs)}
    elif pooling == "partial":
        fit.draws = run_gibbs(data.model(prior), config or ChainConfig())
    return fit


def cell_safe(fit: CellFit, weights: WeightField, avg_mode: str = "pooled") -> dict:
    """Per-player SAFE draws for a partially pooled cell."""
    if fit.draws is None:
        raise ValueError("SAFE needs posterior draws (partial pooling)")
    data = fit.data
    if weights.bip_type != data.bip_type:
        raise ValueError("weight field is for a different BIP type")
    avg = average_curve(avg_mode, data.centroid, data.model_form, data.scaling,
                        players=data.designs, draws=fit.draws)
    out = {}
    for pid in data.player_ids:
        out[pid] = safe_values(fit.draws.player_beta(pid), avg, weights, data.position)
    return out


def season_safe(
    fits: dict,
    weights: dict,
    avg_mode: str = "pooled",
    seed: int = 0,
) -> list[SafeResult]:
    """Total SAFE for every fielder in a season.

    ``fits`` maps (position, bip_type) to a partial-pooling :class:`CellFit`
    and ``weights`` maps bip_type to a :class:`WeightField`.  A fielder who
    has no data in one of his position's cells gets SAFE draws from the
    population distribution of that cell.
    """
    per_cell = {key: cell_safe(fit, weights[key[1]], avg_mode) for key, fit in fits.items()}
    positions = sorted({pos for pos, _ in fits})
    results = []
    for pos in positions:
        need = REQUIRED_TYPES[pos]
        missing = [t for t in need if (pos, t) not in fits]
        if missing:
            raise ValueError(f"missing SAFE draws for {missing[0]} at {pos}")
        players = sorted({pid for t in need for pid in fits[(pos, t)].data.player_ids})
        for pid in players:
            per_type = {}
            n_bip = 0
            year = 0
            for t in need:
                fit = fits[(pos, t)]
                year = fit.data.year
                if pid in per_cell[(pos, t)]:
                    per_type[t] = per_cell[(pos, t)][pid]
                    n_bip += fit.data.n_bip[pid]
                else:
                    avg = average_curve(avg_mode, fit.data.centroid, fit.data.model_form,
                                        fit.data.scaling, players=fit.data.designs,
                                        draws=fit.draws)
                    rng = make_rng([seed, _stable_hash(f"{pid}/{pos}/{t}")])
                    per_type[t] = new_player_safe(fit.draws, avg, weights[t], pos, rng)
            results.append(total_safe(per_type, pos, pid, year, n_bip))
    return results


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))
