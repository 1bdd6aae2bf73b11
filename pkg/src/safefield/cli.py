"""Batch command line: ingest, fit, weights, safe, diagnose, correlate, simulate.

Exit status is 0 on success, 1 on invalid input or usage and 2 when a
numerical guard trips.  Logs go to stderr; results are written to files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .bip_data import (
    BIP_TYPES, BipDataError, Centroid, estimate_centroid, load_bip_records, load_centroids,
    normalize_bip_type, positions_for, save_centroids, write_bip_records, covariate_arrays,
)
from .convergence import convergence_diagnostics
from .gibbs import ChainConfig, NumericalError, Prior, load_draws, make_rng
from .pipeline import CellFit, POOLING, fit_cell, prepare_cell, season_safe
from .safe import AVERAGE_MODES, REQUIRED_TYPES, rank_players, write_leaderboard_csv
from .synth import LeagueConfig, simulate_league, write_truth
from .weights import build_weight_field, load_weight_field, save_weight_field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("safefield")

FIT_FILE = "fit.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cell_list(position, bip_type):
    types = [normalize_bip_type(bip_type)] if bip_type else list(BIP_TYPES)
    cells = []
    for t in types:
        for p in positions_for(t):
            if position is None or p == position.upper():
                cells.append((p, t))
    if not cells:
        raise ValueError(f"{position} is not modelled for {bip_type}")
    return cells


def _year_records(records, year):
    if year is None:
        return records
    out = [r for r in records if r.year == year]
    if not out:
        raise ValueError(f"no records for year {year}")
    return out


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _out(path) -> Path:
    """Output path with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> None:
    cfg = LeagueConfig(year=args.year, players_per_position=args.players,
                       median_opportunities=args.median_opportunities)
    records, truth = simulate_league(cfg, make_rng(args.seed))
    write_bip_records(records, _out(args.out))
    if args.truth:
        write_truth(truth, _out(args.truth))
    log.info("wrote %d records to %s", len(records), args.out)


def cmd_ingest(args) -> None:
    records = _year_records(load_bip_records(args.data), args.year)
    centroids = []
    for bip_type in BIP_TYPES:
        for position in positions_for(bip_type):
            try:
                centroids.append(estimate_centroid(records, position, bip_type))
            except ValueError as exc:
                log.warning("%s %s: %s", position, bip_type, exc)
    save_centroids(centroids, _out(args.out))
    log.info("validated %d records; wrote %d centroids to %s", len(records), len(centroids),
             args.out)


def _fit_settings(args, position, bip_type, centroid: Centroid | None) -> dict:
    return {
        "position": position,
        "bip_type": bip_type,
        "year": args.year,
        "model_form": args.model_form,
        "pooling": args.pooling,
        "prior": args.prior,
        "chains": args.chains,
        "iters": args.iters,
        "burn_in": args.burn_in,
        "thin": args.thin,
        "seed": args.seed,
        "centroid": None if centroid is None else [centroid.x0, centroid.y0],
    }


def _fit_one(data_path: str, digest: str, settings: dict, out_dir: str) -> str:
    key = hashlib.sha256(json.dumps({"data": digest, "config": settings},
                                    sort_keys=True).encode()).hexdigest()[:16]
    name = f"{settings['position']}_{settings['bip_type']}_{settings['year'] or 'all'}_{key}"
    target = Path(out_dir) / name
    if (target / FIT_FILE).exists():
        log.info("%s: up to date", name)
        return str(target)
    records = load_bip_records(data_path)
    centroid = None
    if settings["centroid"] is not None:
        centroid = Centroid.at(settings["position"], settings["bip_type"], *settings["centroid"])
    data = prepare_cell(records, settings["position"], settings["bip_type"], settings["year"],
                        settings["model_form"], centroid)
    iters = settings["iters"]
    burn = settings["burn_in"] if settings["burn_in"] is not None else iters // 2
    config = ChainConfig(n_iter=iters, burn_in=burn, thin=settings["thin"],
                         n_chains=settings["chains"], seed=settings["seed"])
    fit = fit_cell(data, settings["pooling"], Prior(kind=settings["prior"]), config)
    target.mkdir(parents=True, exist_ok=True)
    summary = {
        "key": key,
        "data_sha256": digest,
        "settings": settings,
        "centroid": data.centroid.to_dict(),
        "year": data.year,
        "n_bip": data.n_bip,
        "pooled": {"beta_hat": fit.pooled.beta_hat.tolist(), "converged": fit.pooled.converged,
                   "diagnostic": fit.pooled.diagnostic},
    }
    if fit.pooling == "none":
        summary["player_mle"] = {
            pid: {"beta_hat": f.beta_hat.tolist() if f.converged else None,
                  "diagnostic": f.diagnostic}
            for pid, f in fit.player_mle.items()}
    if fit.draws is not None:
        fit.draws.save(target / "draws.bin")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = convergence_diagnostics(fit.draws)
        report.to_csv(target / "convergence.csv")
        summary["flagged"] = report.flagged
        summary["warnings"] = report.warnings
        if report.flagged:
            log.warning("%s: %d parameters with R-hat > 1.05", name, len(report.flagged))
    # written last: its presence marks a complete artifact
    _dump_json(summary, target / FIT_FILE)
    log.info("%s: done", name)
    return str(target)


def cmd_fit(args) -> None:
    if args.pooling not in POOLING:
        raise ValueError(f"unknown pooling {args.pooling!r}")
    load_bip_records(args.data)  # validate before any work
    digest = _file_digest(args.data)
    centroids = {}
    if args.centroids:
        centroids = {(c.position, c.bip_type): c for c in load_centroids(args.centroids)}
    jobs = [_fit_settings(args, p, t, centroids.get((p, t)))
            for p, t in _cell_list(args.position, args.bip_type)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            futures = [pool.submit(_fit_one, args.data, digest, s, args.out_dir) for s in jobs]
            for f in futures:
                f.result()
    else:
        for s in jobs:
            _fit_one(args.data, digest, s, args.out_dir)


def _weights_path(out_dir, year, bip_type) -> Path:
    return Path(out_dir) / f"weights_{year or 'all'}_{bip_type}.csv.gz"


def cmd_weights(args) -> None:
    records = _year_records(load_bip_records(args.data), args.year)
    types = [normalize_bip_type(args.bip_type)] if args.bip_type else list(BIP_TYPES)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    for t in types:
        wf = build_weight_field(records, t, n_teams=args.teams)
        path = _weights_path(args.out_dir, args.year, t)
        save_weight_field(wf, path)
        log.info("wrote %s", path)


def _load_fit(fit_dir: Path, records, data_digest: str) -> CellFit:
    summary = json.loads((fit_dir / FIT_FILE).read_text())
    if summary["data_sha256"] != data_digest:
        raise ValueError(f"{fit_dir} was fitted to different data")
    s = summary["settings"]
    c = summary["centroid"]
    centroid = Centroid(**c)
    data = prepare_cell(records, s["position"], s["bip_type"], s["year"], s["model_form"],
                        centroid)
    draws = None
    if (fit_dir / "draws.bin").exists():
        draws, _ = load_draws(fit_dir / "draws.bin")
    return CellFit(data, s["pooling"], draws)


def _find_fits(fits_dir, year, digest) -> dict:
    found: dict = {}
    for path in sorted(Path(fits_dir).glob(f"*/{FIT_FILE}")):
        summary = json.loads(path.read_text())
        s = summary["settings"]
        if s["pooling"] != "partial" or s["year"] != year or summary["data_sha256"] != digest:
            continue
        key = (s["position"], s["bip_type"])
        if key in found:
            raise ValueError(f"several partial-pooling fits for {key[0]} {key[1]} in {fits_dir}")
        found[key] = path.parent
    if not found:
        raise ValueError(f"no partial-pooling fits for year {year} in {fits_dir}")
    return found


def cmd_safe(args) -> None:
    records = load_bip_records(args.data)
    digest = _file_digest(args.data)
    fit_dirs = _find_fits(args.fits_dir, args.year, digest)
    fits = {key: _load_fit(d, records, digest) for key, d in fit_dirs.items()}
    weights = {}
    for t in sorted({t for _, t in fits}):
        path = _weights_path(args.weights_dir, args.year, t)
        if not path.exists():
            raise ValueError(f"missing weight field {path}; run the weights command first")
        weights[t] = load_weight_field(path)
    complete = [p for p in sorted({p for p, _ in fits})
                if all((p, t) in fits for t in REQUIRED_TYPES[p])]
    for p in sorted({p for p, _ in fits} - set(complete)):
        log.warning("%s skipped: not every BIP type is fitted", p)
    if not complete:
        raise ValueError("no position has fits for all of its BIP types")
    fits = {k: v for k, v in fits.items() if k[0] in complete}
    results = season_safe(fits, weights, args.avg_mode, seed=args.seed)
    board = rank_players(results, min_bip=args.min_bip, top_k=args.top, bottom_k=args.top)
    board.to_csv(_out(args.out))
    if args.all_players:
        write_leaderboard_csv(sorted(results, key=lambda r: (r.position, r.player_id)),
                              _out(args.all_players))
    if args.text:
        _out(args.text).write_text(board.to_text(f"SAFE {args.year}"))
    log.info("ranked %d of %d player-positions", len(board.rows), len(results))


def cmd_diagnose(args) -> None:
    records = load_bip_records(args.data)
    fit = _load_fit(Path(args.fit), records, _file_digest(args.data))
    if fit.draws is None:
        raise ValueError("diagnostics need a partial-pooling fit")
    data, draws = fit.data, fit.draws
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(args.seed)

    designs = dict(zip(data.player_ids, data.designs))
    res = diag.compute_residuals(designs, diag.posterior_mean_betas(draws))
    diag.write_rows([{"player_id": p, "predicted": float(q), "residual": float(r)}
                     for p, q, r in zip(res.player, res.predicted, res.residual)],
                    out / "residuals.csv")
    binned = diag.binned_residuals(res.residual, res.predicted, args.bin_size)
    diag.write_rows([{"bin": b, "count": int(binned.count[b]),
                      "mean_predicted": float(binned.mean_predicted[b]),
                      "mean_residual": float(binned.mean_residual[b])}
                     for b in range(binned.n_bins)], out / "binned_residuals.csv")

    cov = covariate_arrays(data.records, data.centroid)
    pids = np.array([r.fielder_id for r in data.records])
    order = np.concatenate([np.flatnonzero(pids == pid) for pid in data.player_ids])
    diag.write_rows(diag.residual_covariate_table(cov["distance"][order], cov["velocity"][order],
                                                  cov["direction"][order], res.residual),
                    out / "residual_covariates.csv")

    ppc = diag.posterior_predictive_binned(draws, data.designs, args.n_sims, rng, args.bin_size)
    ppc.to_csv(out / "ppc_binned.csv")
    report = {"coverage": ppc.coverage, "n_bins": ppc.observed.n_bins, "n_sims": args.n_sims}
    if len(data.designs) >= args.top_n:
        gap = diag.heterogeneity_gap_ppc(draws, data.designs, fit_cell(data, "complete").pooled,
                                         args.top_n, args.n_sims, rng)
        gap.to_json(out / "gap_ppc.json")
        report["observed_gap"] = gap.observed_gap
    else:
        log.warning("gap check skipped: %d players, need %d", len(data.designs), args.top_n)
    _dump_json(report, out / "summary.json")
    log.info("posterior predictive coverage %.3f", ppc.coverage)


def cmd_correlate(args) -> None:
    a = diag.load_ratings_csv(args.a, args.year_a)
    b = diag.load_ratings_csv(args.b, args.year_b)
    corr = diag.between_year_correlation(a, b)
    diag.write_correlations(corr, _out(args.out))
    log.info("wrote %s", args.out)


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safefield", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML file; flags override its values")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic league")
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--year", type=int, default=2005)
    s.add_argument("--players", type=int, default=30)
    s.add_argument("--median-opportunities", type=float, default=400.0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="validate a BIP file and estimate centroids")
    s.add_argument("--data", required=True)
    s.add_argument("--year", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", help="fit position x BIP-type cells")
    s.add_argument("--data", required=True)
    s.add_argument("--position")
    s.add_argument("--bip-type")
    s.add_argument("--year", type=int)
    s.add_argument("--model-form", choices=("full", "illustration"), default="full")
    s.add_argument("--pooling", choices=POOLING, default="partial")
    s.add_argument("--prior", choices=("flat", "invgamma"), default="flat")
    s.add_argument("--chains", type=int, default=3)
    s.add_argument("--iters", type=int, default=10_000)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--thin", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--centroids")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out-dir", default="fits")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("weights", help="estimate frequency, run and responsibility fields")
    s.add_argument("--data", required=True)
    s.add_argument("--year", type=int)
    s.add_argument("--bip-type")
    s.add_argument("--teams", type=int, default=30)
    s.add_argument("--out-dir", default="weights")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("safe", help="integrate, summarize and rank SAFE")
    s.add_argument("--data", required=True)
    s.add_argument("--year", type=int)
    s.add_argument("--fits-dir", default="fits")
    s.add_argument("--weights-dir", default="weights")
    s.add_argument("--min-bip", type=int, default=500)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--avg-mode", choices=AVERAGE_MODES, default="pooled")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="safe.csv")
    s.add_argument("--text")
    s.add_argument("--all-players")
    s.set_defaults(func=cmd_safe)

    s = sub.add_parser("diagnose", help="residual and posterior predictive checks")
    s.add_argument("--data", required=True)
    s.add_argument("--fit", required=True, help="fit directory")
    s.add_argument("--n-sims", type=int, default=500)
    s.add_argument("--bin-size", type=int, default=150)
    s.add_argument("--top-n", type=int, default=15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="diagnostics")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("correlate", help="correlate two rating files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--year-a", type=int)
    s.add_argument("--year-b", type=int)
    s.add_argument("--out", default="correlation.csv")
    s.set_defaults(func=cmd_correlate)
    return p


def _config_defaults(path: str, command: str, subparser) -> dict:
    """Values for ``command`` from a TOML file: top-level keys, then the
    ``[command]`` table.  Keys use flag spelling with dashes or underscores."""
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    known = {a.dest for a in subparser._actions}
    values = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    section = cfg.get(command, {})
    unknown = [k for k in section if k.replace("-", "_") not in known]
    if unknown:
        raise ValueError(f"unknown key(s) in [{command}] of {path}: {', '.join(unknown)}")
    values.update(section)
    return {k.replace("-", "_"): v for k, v in values.items() if k.replace("-", "_") in known}


def _subparsers(parser) -> argparse._SubParsersAction:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))


def parse_args(argv):
    parser = build_parser()
    # the config file must be applied before required flags are checked
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("-q", "--quiet", action="store_true")
    known, rest = pre.parse_known_args(argv)
    command = rest[0] if rest else None
    choices = _subparsers(parser).choices
    if known.config and command in choices:
        sub = choices[command]
        defaults = _config_defaults(known.config, command, sub)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"safefield: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except NumericalError as exc:
        log.error("%s", exc)
        return 2
    except BipDataError as exc:
        for line in exc.errors:
            log.error("%s", line)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
