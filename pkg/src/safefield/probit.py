"""Probit link, likelihood and maximum-likelihood fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

PROB_CLAMP = 1e-12
MODEL_FORMS = ("full", "illustration")

FULL_TERMS = ("intercept", "dist", "dist_dir", "dist_vel", "dist_vel_dir")
ILLUSTRATION_TERMS = ("intercept", "dist", "vel", "dir")


def probit_cdf(z):
    """Standard normal CDF."""
    return special.ndtr(z)


def normalize_form(form: str) -> str:
    form = form.strip().lower()
    if form not in MODEL_FORMS:
        raise ValueError(f"unknown model form {form!r}")
    return form


def term_names(form: str) -> tuple[str, ...]:
    return FULL_TERMS if normalize_form(form) == "full" else ILLUSTRATION_TERMS


@dataclass(frozen=True)
class Standardization:
    """Affine rescaling of (distance, velocity, direction) to mean 0, sd 0.5."""

    mean: tuple[float, float, float]
    sd: tuple[float, float, float]

    @classmethod
    def fit(cls, distance, velocity, direction) -> "Standardization":
        cols = [np.asarray(c, dtype=float) for c in (distance, velocity, direction)]
        means = tuple(float(c.mean()) for c in cols)
        sds = tuple(float(c.std()) if c.std() > 0 else 1.0 for c in cols)
        return cls(means, sds)

    def apply(self, distance, velocity, direction):
        cols = (distance, velocity, direction)
        return tuple(0.5 * (np.asarray(c, dtype=float) - m) / s
                     for c, m, s in zip(cols, self.mean, self.sd))


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        outcomes = np.asarray(self.outcomes, dtype=float).ravel()
        if rows.shape[0] < 1:
            raise ValueError("design needs at least one row")
        if rows.shape[0] != outcomes.shape[0]:
            raise ValueError("rows and outcomes disagree in length")
        if not np.all(rows[:, 0] == 1.0):
            raise ValueError("first design column must be all ones")
        if not np.all(np.isfinite(rows)):
            raise ValueError("design has non-finite entries")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "outcomes", outcomes)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def k(self) -> int:
        return self.rows.shape[1]


def design_rows(distance, velocity, direction, form: str,
                scaling: Standardization | None = None) -> np.ndarray:
    """Model matrix for the full interaction form or the 4-term illustration form.

    The illustration form standardizes its three predictors with ``scaling``;
    the full form uses raw covariates.
    """
    form = normalize_form(form)
    d = np.asarray(distance, dtype=float)
    v = np.asarray(velocity, dtype=float)
    f = np.asarray(direction, dtype=float)
    ones = np.ones_like(d)
    if form == "full":
        return np.stack([ones, d, d * f, d * v, d * v * f], axis=-1)
    if scaling is None:
        raise ValueError("illustration form needs a standardization")
    ds, vs, fs = scaling.apply(d, v, f)
    return np.stack([ones, ds, vs, fs], axis=-1)


def build_design(cov: dict, form: str, scaling: Standardization | None = None) -> DesignMatrix:
    rows = design_rows(cov["distance"], cov["velocity"], cov["direction"], form, scaling)
    return DesignMatrix(rows, cov["outcome"])


def _check(design: DesignMatrix, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != design.k:
        raise ValueError(f"beta has {beta.shape[0]} entries, design has {design.k} columns")
    return beta


def log_likelihood(design: DesignMatrix, beta) -> float:
    beta = _check(design, beta)
    eta = design.rows @ beta
    p = np.clip(special.ndtr(eta), PROB_CLAMP, 1 - PROB_CLAMP)
    q = np.clip(special.ndtr(-eta), PROB_CLAMP, 1 - PROB_CLAMP)
    s = design.outcomes
    return float(np.sum(s * np.log(p) + (1 - s) * np.log(q)))


def _ratios(eta, s):
    # generalized residual phi/Phi (s=1) or -phi/(1-Phi) (s=0), and Fisher weight
    log_phi = -0.5 * eta**2 - 0.5 * np.log(2 * np.pi)
    lp = special.log_ndtr(eta)
    lq = special.log_ndtr(-eta)
    resid = np.where(s > 0.5, np.exp(log_phi - lp), -np.exp(log_phi - lq))
    weight = np.exp(2 * log_phi - lp - lq)
    return resid, weight


def probit_score(design: DesignMatrix, beta) -> np.ndarray:
    """Gradient of the log-likelihood."""
    beta = _check(design, beta)
    resid, _ = _ratios(design.rows @ beta, design.outcomes)
    return design.rows.T @ resid


def fisher_information(design: DesignMatrix, beta) -> np.ndarray:
    beta = _check(design, beta)
    _, w = _ratios(design.rows @ beta, design.outcomes)
    return design.rows.T @ (w[:, None] * design.rows)


def is_separated(design: DesignMatrix, tol: float = 1e-7) -> bool:
    """Detect complete or quasi-complete separation by linear programming.

    Separation holds when some nonzero direction ``b`` satisfies
    ``(2 s_j - 1) x_j . b >= 0`` for every row, i.e. the likelihood keeps
    increasing along ``b`` forever.
    """
    signs = 2 * design.outcomes - 1
    a = signs[:, None] * design.rows
    scale = np.maximum(np.abs(design.rows).max(axis=0), 1e-300)
    a = a / scale
    res = optimize.linprog(
        c=-a.sum(axis=0),
        A_ub=-a,
        b_ub=np.zeros(design.n),
        bounds=[(-1, 1)] * design.k,
        method="highs",
    )
    return res.status == 0 and -res.fun > tol * design.n


@dataclass
class ProbitFit:
    beta_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    diagnostic: str = ""
    cov: np.ndarray | None = field(default=None, repr=False)


def fit_probit_mle(design: DesignMatrix, max_iter: int = 100, tol: float = 1e-8) -> ProbitFit:
    """Fisher-scoring maximum likelihood with step halving.

    Separated or rank-deficient designs have no finite maximizer; these come
    back with ``converged=False`` and ``diagnostic="separation/singular"``.
    """
    k = design.k
    zeros = np.zeros(k)
    if design.n < k or np.linalg.matrix_rank(design.rows) < k:
        return ProbitFit(zeros, log_likelihood(design, zeros), False, 0, "separation/singular")
    if np.all(design.outcomes == design.outcomes[0]) or is_separated(design):
        return ProbitFit(zeros, log_likelihood(design, zeros), False, 0, "separation/singular")

    beta = zeros.copy()
    ll = log_likelihood(design, beta)
    for it in range(1, max_iter + 1):
        grad = probit_score(design, beta)
        if np.max(np.abs(grad)) < tol:
            info = fisher_information(design, beta)
            return ProbitFit(beta, ll, True, it - 1, "", np.linalg.inv(info))
        info = fisher_information(design, beta)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            return ProbitFit(beta, ll, False, it, "separation/singular")
        t = 1.0
        while True:
            cand = beta + t * step
            cand_ll = log_likelihood(design, cand)
            if cand_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, cand_ll
    grad = probit_score(design, beta)
    ok = bool(np.max(np.abs(grad)) < tol)
    cov = np.linalg.inv(fisher_information(design, beta)) if ok else None
    return ProbitFit(beta, ll, ok, max_iter, "" if ok else "no convergence", cov)
