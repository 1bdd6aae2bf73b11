"""Split-R-hat and effective sample size for retained Gibbs draws."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RHAT_THRESHOLD = 1.05


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction on half-split chains, shape (m, n)."""
    chains = np.asarray(chains, dtype=float)
    half = chains.shape[1] // 2
    split = np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)
    n = split.shape[1]
    w = split.var(axis=1, ddof=1).mean()
    b = n * split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def effective_sample_size(chains: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    acov = _autocovariance(chains)
    w = (acov[:, 0] * n / (n - 1)).mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum autocorrelation pairs while positive, enforcing monotonicity
    pairs = rho[:-1:2] + rho[1::2]
    total = 0.0
    prev = np.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        total += p
        prev = p
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


@dataclass
class ParameterDiagnostic:
    name: str
    rhat: float | None
    ess: float | None
    flagged: bool
    error: str = ""


@dataclass
class ConvergenceReport:
    rows: list[ParameterDiagnostic] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> list[str]:
        return [r.name for r in self.rows if r.flagged]

    def get(self, name: str) -> ParameterDiagnostic:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["parameter", "rhat", "ess", "flagged", "error"])
            for r in self.rows:
                out.writerow([
                    r.name,
                    "" if r.rhat is None else f"{r.rhat:.6f}",
                    "" if r.ess is None else f"{r.ess:.3f}",
                    int(r.flagged), r.error,
                ])


def diagnose_chains(name: str, chains: np.ndarray) -> ParameterDiagnostic:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if np.all(chains.std(axis=1) == 0):
        return ParameterDiagnostic(name, None, None, True, "zero variance")
    ess = effective_sample_size(chains)
    if chains.shape[0] < 2:
        return ParameterDiagnostic(name, None, ess, False)
    rhat = split_rhat(chains)
    if not np.isfinite(rhat):
        return ParameterDiagnostic(name, None, ess, True, "zero within-chain variance")
    return ParameterDiagnostic(name, rhat, ess, rhat > RHAT_THRESHOLD)


def convergence_diagnostics(draws) -> ConvergenceReport:
    """Split-R-hat and ESS for every scalar in a :class:`PosteriorDraws`.

    Parameters with R-hat above 1.05 are flagged.  With one chain only ESS
    is reported.
    """
    report = ConvergenceReport()
    chains = np.unique(draws.chain)
    if chains.size < 2:
        msg = "single chain: R-hat omitted"
        warnings.warn(msg, stacklevel=2)
        report.warnings.append(msg)
    per_chain = min(int(np.sum(draws.chain == c)) for c in chains)
    if per_chain < 100:
        report.warnings.append(f"only {per_chain} draws per chain")
    terms = draws.terms
    mu = draws.by_chain(draws.mu)
    s2 = draws.by_chain(draws.sigma2)
    beta = draws.by_chain(draws.beta)
    for k, term in enumerate(terms):
        report.rows.append(diagnose_chains(f"mu[{term}]", mu[:, :, k]))
    for k, term in enumerate(terms):
        report.rows.append(diagnose_chains(f"sigma2[{term}]", s2[:, :, k]))
    with np.errstate(divide="ignore", invalid="ignore"):
        for i, pid in enumerate(draws.player_ids):
            for k, term in enumerate(terms):
                report.rows.append(diagnose_chains(f"beta[{pid},{term}]", beta[:, :, i, k]))
    return report
