"""Hierarchical probit fielding models and SAFE run values."""

from .bip_data import BipDataError, BipRecord, Centroid, load_bip_records
from .gibbs import (
    ChainConfig, HierModel, ImproperPosteriorError, NumericalError, PosteriorDraws, Prior,
    make_rng, run_gibbs,
)
from .probit import DesignMatrix, build_design, fit_probit_mle, probit_cdf
from .safe import integrate_safe, rank_players, total_safe
from .weights import build_weight_field

__version__ = "0.1.0"

__all__ = [
    "BipDataError", "BipRecord", "Centroid", "ChainConfig", "DesignMatrix", "HierModel",
    "ImproperPosteriorError", "NumericalError", "PosteriorDraws", "Prior", "build_design",
    "build_weight_field", "fit_probit_mle", "integrate_safe", "load_bip_records", "make_rng",
    "probit_cdf", "rank_players", "run_gibbs", "total_safe",
]
