"""Gibbs sampler for the hierarchical probit model.

Each player's coefficient vector is drawn from a shared normal population
with diagonal covariance.  Sampling uses latent-utility data augmentation:
given the latent utilities the player coefficients are conjugate normal,
and the population mean and variances follow in closed form.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .probit import DesignMatrix, fit_probit_mle, normalize_form, term_names

TAIL_SWITCH = 5.0


class NumericalError(RuntimeError):
    """A fit cannot proceed for numerical reasons."""


class ImproperPosteriorError(NumericalError):
    pass


class DegenerateConditionalError(NumericalError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) so streams reproduce across platforms."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# -- truncated normal -------------------------------------------------------

def _tail_draws(a, rng):
    # exponential-proposal rejection for N(0,1) restricted to (a, inf), a > 0
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        t = a[todo] + rng.standard_exponential(todo.size) / lam[todo]
        u = rng.random(todo.size)
        ok = u <= np.exp(-0.5 * (t - lam[todo]) ** 2)
        out[todo[ok]] = t[ok]
        todo = todo[~ok]
    return out


def _upper_truncated_std(a, rng):
    """Standard normal draws conditioned on exceeding ``a`` (elementwise)."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    deep = a > TAIL_SWITCH
    easy = ~deep
    if np.any(easy):
        ae = a[easy]
        u = 1.0 - rng.random(ae.size)  # in (0, 1]
        out[easy] = -special.ndtri(u * special.ndtr(-ae))
    if np.any(deep):
        out[deep] = _tail_draws(a[deep], rng)
    return out


def truncated_normal(mean, sd, positive, rng):
    """Vectorised draws from N(mean, sd^2) truncated to (0, inf) where
    ``positive`` is true and to (-inf, 0) elsewhere."""
    mean = np.asarray(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), mean.shape)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    sign = np.where(positive, 1.0, -1.0)
    # reflect the negative side onto the positive one
    t = _upper_truncated_std(-sign * mean / sd, rng)
    return mean + sign * sd * t


def sample_truncated_normal(mean: float, sd: float, side: str, rng, size=None):
    """Draw from N(mean, sd^2) truncated to the positive or negative half-line.

    Moderate truncation uses the inverse CDF; when zero lies more than five
    standard deviations into the tail an exponential rejection sampler is
    used instead.
    """
    side = side.lower()
    if side not in ("positive", "negative"):
        raise ValueError(f"side must be 'positive' or 'negative', got {side!r}")
    shape = () if size is None else size
    draws = truncated_normal(np.full(shape, mean, dtype=float), sd, side == "positive", rng)
    return float(draws) if size is None else draws


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    """Hyperprior on the population parameters.

    ``flat`` is p(mu_k, sigma_k) proportional to 1.  ``invgamma`` puts
    1/sigma_k^2 ~ Gamma(a, b); with ``mu_sd`` set, mu_k ~ N(mu_mean, mu_sd^2)
    (a proper prior is needed for simulation-based calibration).
    """

    kind: str = "flat"
    a: float = 1e-4
    b: float = 1e-4
    mu_mean: float = 0.0
    mu_sd: float | None = None

    def __post_init__(self):
        if self.kind not in ("flat", "invgamma"):
            raise ValueError(f"unknown prior {self.kind!r}")


@dataclass
class HierModel:
    players: Sequence[DesignMatrix]
    prior: Prior = field(default_factory=Prior)
    model_form: str = "full"
    player_ids: Sequence[str] | None = None

    def __post_init__(self):
        self.model_form = normalize_form(self.model_form)
        self.players = list(self.players)
        if not self.players:
            raise ValueError("model has no players")
        if self.player_ids is None:
            self.player_ids = [str(i) for i in range(len(self.players))]
        self.player_ids = list(self.player_ids)
        if len(self.player_ids) != len(self.players):
            raise ValueError("player_ids length mismatch")
        k = {p.k for p in self.players}
        if len(k) != 1:
            raise ValueError("players disagree on the number of design columns")
        self.k = k.pop()
        if self.k != len(term_names(self.model_form)):
            raise ValueError(f"{self.model_form} form expects {len(term_names(self.model_form))} columns")
        self.X = np.vstack([p.rows for p in self.players])
        self.y = np.concatenate([p.outcomes for p in self.players])
        self.sizes = np.array([p.n for p in self.players])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.index = np.repeat(np.arange(len(self.players)), self.sizes)
        self.XtX = np.stack([p.rows.T @ p.rows for p in self.players])
        self.positive = self.y > 0.5

    @property
    def n_players(self) -> int:
        return len(self.players)

    def check(self) -> None:
        n = self.n_players
        if self.prior.kind == "flat" and n < 2:
            raise ImproperPosteriorError("improper posterior risk: flat prior needs at least 2 players")
        if self.sizes.sum() < 5 * n:
            warnings.warn(f"only {self.sizes.sum()} observations for {n} players", stacklevel=2)

    def pooled_design(self) -> DesignMatrix:
        return DesignMatrix(self.X, self.y)


@dataclass
class GibbsState:
    z: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def copy(self) -> "GibbsState":
        return GibbsState(self.z.copy(), self.beta.copy(), self.mu.copy(), self.sigma2.copy())


def draw_latent(model: HierModel, beta, rng):
    eta = np.einsum("ij,ij->i", model.X, beta[model.index])
    return truncated_normal(eta, 1.0, model.positive, rng)


def draw_beta(model: HierModel, z, mu, sigma2, rng):
    xtz = np.add.reduceat(model.X * z[:, None], model.offsets, axis=0)
    prior_prec = 1.0 / sigma2
    prec = model.XtX + np.diag(prior_prec)[None, :, :]
    rhs = xtz + (mu * prior_prec)[None, :]
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConditionalError("degenerate conditional") from exc
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    eps = rng.standard_normal((model.n_players, model.k))
    # prec = L L^T  ->  L^{-T} eps has covariance prec^{-1}
    noise = np.linalg.solve(np.swapaxes(chol, 1, 2), eps[..., None])[..., 0]
    return mean + noise


def draw_mu(model: HierModel, beta, sigma2, rng):
    n = model.n_players
    prior = model.prior
    if prior.kind == "invgamma" and prior.mu_sd is not None:
        prec = n / sigma2 + 1.0 / prior.mu_sd**2
        mean = (beta.sum(axis=0) / sigma2 + prior.mu_mean / prior.mu_sd**2) / prec
        var = 1.0 / prec
    else:
        mean = beta.mean(axis=0)
        var = sigma2 / n
    return mean + np.sqrt(var) * rng.standard_normal(model.k)


def draw_sigma2(model: HierModel, beta, mu, rng):
    n = model.n_players
    ss = ((beta - mu[None, :]) ** 2).sum(axis=0)
    if model.prior.kind == "flat":
        # p(mu, sigma) flat => p(sigma^2) ~ 1/sigma
        shape = np.full(model.k, 0.5 * (n - 1))
        scale = 0.5 * ss
    else:
        shape = np.full(model.k, model.prior.a + 0.5 * n)
        scale = model.prior.b + 0.5 * ss
    return scale / rng.standard_gamma(shape)


def gibbs_step(model: HierModel, state: GibbsState, rng) -> GibbsState:
    """One full scan: latent utilities, player coefficients, mu, sigma^2."""
    if state.beta.shape != (model.n_players, model.k) or state.z.shape != model.y.shape:
        raise ValueError("state dimensions do not match the model")
    z = draw_latent(model, state.beta, rng)
    beta = draw_beta(model, z, state.mu, state.sigma2, rng)
    mu = draw_mu(model, beta, state.sigma2, rng)
    sigma2 = draw_sigma2(model, beta, mu, rng)
    return GibbsState(z, beta, mu, sigma2)


# -- chains -----------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 10_000
    burn_in: int = 5_000
    thin: int = 5
    n_chains: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must be in [0, n_iter)")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")

    @property
    def kept_per_chain(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass(frozen=True)
class PosteriorDraws:
    beta: np.ndarray      # (draws, players, k)
    mu: np.ndarray        # (draws, k)
    sigma2: np.ndarray    # (draws, k)
    chain: np.ndarray     # (draws,)
    player_ids: tuple
    model_form: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("beta", "mu", "sigma2", "chain"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "player_ids", tuple(self.player_ids))
        if np.any(self.sigma2 <= 0) or not np.all(np.isfinite(self.beta)):
            raise ValueError("posterior draws contain invalid values")

    @property
    def n_draws(self) -> int:
        return self.mu.shape[0]

    @property
    def terms(self) -> tuple[str, ...]:
        return term_names(self.model_form)

    def player_index(self, player_id: str) -> int:
        return self.player_ids.index(player_id)

    def player_beta(self, player_id: str) -> np.ndarray:
        return self.beta[:, self.player_index(player_id), :]

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        """Reshape draw-major ``values`` into (chains, draws per chain, ...)."""
        chains = np.unique(self.chain)
        return np.stack([values[self.chain == c] for c in chains])

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_draws(self, path, extra)


def initial_state(model: HierModel) -> GibbsState:
    pooled = fit_probit_mle(model.pooled_design())
    fallback = pooled.beta_hat if pooled.converged else np.zeros(model.k)
    beta = np.empty((model.n_players, model.k))
    for i, design in enumerate(model.players):
        fit = fit_probit_mle(design)
        ok = fit.converged and np.all(np.abs(design.rows @ fit.beta_hat) < 8.0)
        beta[i] = fit.beta_hat if ok else fallback
    mu = beta.mean(axis=0)
    sigma2 = np.maximum(beta.var(axis=0), 1e-4)
    return GibbsState(np.zeros(model.y.shape), beta, mu, sigma2)


def run_chain(model: HierModel, config: ChainConfig, rng, init: GibbsState):
    kept = config.kept_per_chain
    beta = np.empty((kept, model.n_players, model.k))
    mu = np.empty((kept, model.k))
    sigma2 = np.empty((kept, model.k))
    state = init.copy()
    j = 0
    for t in range(1, config.n_iter + 1):
        state = gibbs_step(model, state, rng)
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0 and j < kept:
            beta[j], mu[j], sigma2[j] = state.beta, state.mu, state.sigma2
            j += 1
    return beta, mu, sigma2


def run_gibbs(model: HierModel, config: ChainConfig = ChainConfig()) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains and pool the retained draws.

    Every chain starts from per-player maximum likelihood estimates (pooled
    estimate for players whose own fit is undefined); chain ``c`` uses the
    ``c``-th child of the configured seed.
    """
    model.check()
    init = initial_state(model)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    parts = [run_chain(model, config, make_rng(s), init) for s in seeds]
    kept = config.kept_per_chain
    return PosteriorDraws(
        beta=np.concatenate([p[0] for p in parts]),
        mu=np.concatenate([p[1] for p in parts]),
        sigma2=np.concatenate([p[2] for p in parts]),
        chain=np.repeat(np.arange(config.n_chains), kept),
        player_ids=tuple(model.player_ids),
        model_form=model.model_form,
        meta={"config": asdict(config), "prior": asdict(model.prior)},
    )


# -- persistence ------------------------------------------------------------
#
# <name>.bin holds the arrays back to back as little-endian C-order buffers;
# <name>.json records each array's dtype, shape and byte offset together with
# the model form, player ids and run metadata.

_ARRAYS = ("beta", "mu", "sigma2", "chain")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_draws(draws: PosteriorDraws, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path).with_suffix(".bin")
    layout = {}
    offset = 0
    with path.open("wb") as fh:
        for name in _ARRAYS:
            arr = np.asarray(getattr(draws, name))
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = np.ascontiguousarray(arr).tobytes()
            layout[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
            fh.write(buf)
            offset += len(buf)
    meta = {
        "format": "safefield-draws/1",
        "arrays": layout,
        "model_form": draws.model_form,
        "player_ids": list(draws.player_ids),
        "meta": draws.meta,
        **(extra or {}),
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_draws(path: str | Path) -> tuple[PosteriorDraws, dict]:
    path = Path(path).with_suffix(".bin")
    meta = json.loads(_sidecar(path).read_text())
    raw = path.read_bytes()
    arrays = {}
    for name, spec in meta["arrays"].items():
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count,
                                     offset=spec["offset"]).reshape(spec["shape"])
    draws = PosteriorDraws(player_ids=tuple(meta["player_ids"]),
                           model_form=meta["model_form"], meta=meta["meta"], **arrays)
    return draws, meta
