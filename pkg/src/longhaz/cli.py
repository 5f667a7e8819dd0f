"""``longhaz`` command-line interface.

Every command reads a JSON run configuration; paths inside it are relative
to the configuration file. Exit codes: 0 success, 2 input error,
3 non-convergence, 4 missing prerequisite.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, LonghazError
from .expand import (
    CONTINUOUS,
    DISCRETE,
    PseudoTable,
    check_poisson_conditions,
    expand_continuous,
    expand_discrete,
    make_cutpoints,
    read_records,
    stack,
    write_records,
)
from .genetics import heritability_report, write_h2_report
from .inference import FitOptions, FitResult, fit_pql, profile_curvature, round_sig
from .model import ModelSpec, linear_predictors
from .nonparam import cumulative_incidence, kaplan_meier, stratum_times, write_curves
from .pedigree import Pedigree, load_pedigree
from .simulate import ParityTruth, parity_rates, simulate_parity, simulate_pedigree, sire_model

log = logging.getLogger("longhaz")

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_PREREQ = 0, 2, 3, 4
DIGITS = 6

REPORT = "fit_report.json"
BLUPS = "blups.csv"


class MissingPrerequisite(Exception):
    pass


@dataclass
class Source:
    path: Path
    time_type: str
    traits: dict  # trait name -> cause (None: any)
    covariates: tuple = ()
    clusters: tuple = ()
    stratified: bool = False


@dataclass
class RunConfig:
    model: ModelSpec | None
    sources: list[Source]
    pedigree: Path | None
    out: Path
    cuts: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    simulate: dict = field(default_factory=dict)
    diag: dict = field(default_factory=dict)


def _resolve(base: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else (base / p)


def load_config(args) -> RunConfig:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise LonghazError(f"config not found: {cfg_path}")
    raw = json.loads(cfg_path.read_text())
    base = cfg_path.parent
    model = ModelSpec.from_dict(raw["model"]) if "model" in raw else None
    data = raw.get("data", [])
    if isinstance(data, dict):
        data = [data]
    sources = []
    for i, d in enumerate(data):
        path = _resolve(base, d["path"])
        if args.data and i == 0:
            path = Path(args.data)
        traits = d.get("traits")
        if traits is None and model is not None:
            traits = {t.name: t.cause for t in model.traits if t.time_type == d["time_type"]}
        sources.append(Source(path, d["time_type"], dict(traits or {"1": None}), tuple(d.get("covariates", ())),
                              tuple(d.get("clusters", ())), bool(d.get("stratified", False))))
    if args.data and not sources:
        raise LonghazError("--data given but the config declares no data source")
    ped = Path(args.pedigree) if args.pedigree else _resolve(base, raw.get("pedigree"))
    out = Path(args.out) if args.out else _resolve(base, raw.get("output", "out"))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    fit = dict(raw.get("fit", {}))
    if getattr(args, "fix_dispersion", None) is not None:
        fit["fix_dispersion"] = args.fix_dispersion
    return RunConfig(model, sources, ped, out, dict(raw.get("cuts", {})), fit, seed, args.threads,
                     dict(raw.get("simulate", {})), dict(raw.get("diag", {})))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(round_sig(obj, DIGITS), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _records(src: Source):
    if not src.path.exists():
        raise LonghazError(f"data file not found: {src.path}")
    return read_records(src.path, src.time_type, src.covariates, src.clusters)


def build_table(cfg: RunConfig) -> tuple[PseudoTable, dict]:
    if not cfg.sources:
        raise LonghazError("config declares no data source")
    tables, cuts_out = [], {}
    for src in cfg.sources:
        recs = _records(src)
        if src.time_type == CONTINUOUS:
            c = cfg.cuts
            cuts = make_cutpoints(recs, K=int(c.get("K", 10)), strategy=c.get("strategy", "quantile"),
                                  explicit=c.get("explicit"), by_stratum=src.stratified)
            tab = expand_continuous(recs, cuts, src.stratified, src.traits, src.covariates, src.clusters)
            cuts_out[str(src.path.name)] = cuts.to_dict()
        else:
            tab = expand_discrete(recs, src.traits, src.covariates, src.clusters)
        tables.append(tab)
    table = stack(*tables) if len(tables) > 1 else tables[0]
    if cfg.model is not None:
        for t in cfg.model.traits:
            if t.name in table.layouts and table.layouts[t.name].family != t.family:
                table = table.with_family(t.name, t.family)
    return table, cuts_out


def _pedigree(cfg: RunConfig) -> Pedigree | None:
    if cfg.model is None or not any(c.structure == "pedigree" for c in cfg.model.random):
        return None
    if cfg.pedigree is None or not cfg.pedigree.exists():
        raise LonghazError(f"pedigree file not found: {cfg.pedigree}")
    return load_pedigree(cfg.pedigree)


def _fit_options(cfg: RunConfig) -> FitOptions:
    allowed = {"tol", "max_iter", "variance_floor", "fix_dispersion", "init_variance"}
    unknown = set(cfg.fit) - allowed
    if unknown:
        raise LonghazError(f"unknown fit options: {sorted(unknown)}")
    return FitOptions(**cfg.fit, threads=cfg.threads)


def _require_model(cfg: RunConfig) -> ModelSpec:
    if cfg.model is None:
        raise LonghazError("config declares no model")
    return cfg.model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_expand(cfg: RunConfig) -> int:
    """Write the pseudo-data table (one row per record and interval)."""
    table, cuts = build_table(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    table.to_csv(cfg.out / "pseudo.csv")
    summary = {"rows": len(table), "traits": table.summary(), "cuts": cuts}
    _write_json(cfg.out / "expand_summary.json", summary)
    for trait, s in summary["traits"].items():
        print(f"{trait}: {s['rows']} rows, {s['events']} events, intervals {s['intervals']}")
    return EXIT_OK


def _fit(cfg: RunConfig):
    spec = _require_model(cfg)
    table, _ = build_table(cfg)
    table = table.select([t for t in spec.trait_names])
    return table, fit_pql(table, spec, _fit_options(cfg), _pedigree(cfg))


def _print_fit(fit: FitResult) -> None:
    for comp, S in fit.variance.sigma.items():
        for i, t in enumerate(fit.traits):
            se = fit.se[comp][i, i]
            print(f"{comp:>10s} {t:>6s}  {S[i, i]:.6g} ({se:.3g})")
    for comp, r in fit.correlations().items():
        print(f"{comp:>10s} correlation {r if r is None else f'{r:.6g}'}")
    for t in fit.traits:
        tag = " fixed" if fit.dispersion_fixed[t] else ""
        print(f"{'dispersion':>10s} {t:>6s}  {fit.variance.dispersion[t]:.6g}{tag}")


def cmd_fit(cfg: RunConfig) -> int:
    """Fit the mixed survival model by PQL/REML; writes fit_report.json and blups.csv."""
    table, code = None, EXIT_OK
    try:
        table, fit = _fit(cfg)
    except ConvergenceError as exc:
        if exc.result is None:
            raise
        fit, code = exc.result, EXIT_CONVERGENCE
        log.error("%s", exc)
    cfg.out.mkdir(parents=True, exist_ok=True)
    fit.write_report(cfg.out / REPORT, DIGITS)
    fit.write_blups(cfg.out / BLUPS, DIGITS)
    _print_fit(fit)
    for t, lay in table.layouts.items() if table is not None else ():
        if lay.family == "poisson_approx":
            sub = table.select([t])
            p = np.exp(linear_predictors(sub, ModelSpec((fit.spec.trait(t),), fit.spec.random), fit.params))
            diag = check_poisson_conditions(sub, p)
            for w in diag.warnings:
                log.warning("%s: %s", t, w)
    return code


def _load_fit(cfg: RunConfig) -> FitResult:
    rep, bl = cfg.out / REPORT, cfg.out / BLUPS
    if not rep.exists() or not bl.exists():
        raise MissingPrerequisite(f"no fit found in {cfg.out}; run `longhaz fit` with this config first")
    return FitResult.load(rep, bl)


def cmd_h2(cfg: RunConfig) -> int:
    """Heritability on hazard and cumulative scales from a previous fit."""
    fit = _load_fit(cfg)
    table, _ = build_table(cfg)
    table = table.select(list(fit.traits))
    reports = heritability_report(fit, table)
    write_h2_report(reports, cfg.out / "h2_report.json", DIGITS)
    for r in reports:
        print(f"{r.trait} stratum {r.stratum}: t_m={r.t_m} h2_hazard={_g(r.h2_hazard)} "
              f"h2_cumulative={_g(r.h2_cumulative)}")
    return EXIT_OK


def _g(x):
    return "NA" if x is None else f"{x:.6g}"


def cmd_km(cfg: RunConfig) -> int:
    """Kaplan-Meier curves with Greenwood log-log intervals."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for src in cfg.sources:
        recs = _records(src)
        name = src.path.stem
        if src.stratified:
            curves = {}
            for s, (t, e) in stratum_times(recs).items():
                km = kaplan_meier(t, e)
                curves[str(s)] = km.curve
                summary[f"{name}/stratum {s}"] = _km_summary(km)
            write_curves(curves, cfg.out / f"km_{name}.csv", DIGITS, key="stratum")
        else:
            km = kaplan_meier(recs)
            write_curves({"all": km.curve}, cfg.out / f"km_{name}.csv", DIGITS, key="stratum")
            summary[name] = _km_summary(km)
    _write_json(cfg.out / "km_summary.json", summary)
    for k, v in summary.items():
        lo, hi = v["median_ci"]
        print(f"{k}: median {v['median']} (CI95% {lo};{hi})")
    return EXIT_OK


def _km_summary(km) -> dict:
    return {"n": km.n, "events": km.events, "median": km.median, "median_ci": list(km.median_ci)}


def cmd_cif(cfg: RunConfig) -> int:
    """Aalen-Johansen cumulative incidence per cause."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    for src in cfg.sources:
        recs = _records(src)
        name = src.path.stem
        labels = sorted({c for c in src.traits.values() if c is not None}) or None
        if src.stratified:
            curves = {}
            for s, (t, e) in stratum_times(recs).items():
                res = cumulative_incidence(t, e, labels)
                curves.update({f"{s}:{c}": cur for c, cur in res.cif.items()})
            write_curves(curves, cfg.out / f"cif_{name}.csv", DIGITS, key="stratum:cause")
        else:
            res = cumulative_incidence(recs, labels=labels)
            write_curves({str(c): cur for c, cur in res.cif.items()}, cfg.out / f"cif_{name}.csv", DIGITS,
                         key="cause")
        print(f"{name}: cumulative incidence written")
    return EXIT_OK


def cmd_diag(cfg: RunConfig) -> int:
    """Profile curvature of the genetic variance, one univariate fit per trait."""
    spec = _require_model(cfg)
    table, _ = build_table(cfg)
    ped = _pedigree(cfg)
    gen = [c for c in spec.random if c.structure == "pedigree"]
    if not gen:
        raise LonghazError("curvature diagnostic needs a pedigree component")
    rel_step = float(cfg.diag.get("rel_step", 0.1))
    opts = _fit_options(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    out, code = {"parameter": gen[0].name, "rel_step": rel_step, "traits": {}}, EXIT_OK
    for ts in spec.traits:
        uni = ModelSpec((ts,), spec.random)
        sub = table.select([ts.name])
        try:
            fit = fit_pql(sub, uni, opts, ped)
        except ConvergenceError as exc:
            fit, code = exc.result, EXIT_CONVERGENCE
        curv = profile_curvature(sub, uni, gen[0].name, fit, rel_step, ped)
        out["traits"][ts.name] = {
            "time_type": ts.time_type, "family": ts.family, "curvature": curv,
            "estimate": float(fit.variance.sigma[gen[0].name][0, 0]),
            "dispersion": fit.variance.dispersion[ts.name],
        }
        print(f"{ts.name} ({ts.time_type}): curvature {curv:.6g}")
    kinds = {v["time_type"]: v["curvature"] for v in out["traits"].values()}
    if DISCRETE in kinds and CONTINUOUS in kinds:
        out["ratio_dtm_over_ctm"] = abs(kinds[DISCRETE]) / abs(kinds[CONTINUOUS])
        print(f"curvature ratio |DTM|/|CTM| = {out['ratio_dtm_over_ctm']:.6g}")
    _write_json(cfg.out / "diag.json", out)
    return code


def cmd_simulate(cfg: RunConfig) -> int:
    """Simulate a fixture (records, pedigree, truth) from the config."""
    sim = dict(cfg.simulate)
    design = sim.pop("design", "sire_model")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if design == "sire_model":
        ped, recs, truth = sire_model(seed=cfg.seed, **sim)
        ped.to_csv(cfg.out / "pedigree.csv")
        write_records(recs, cfg.out / "records.csv", (), ("sire", "hy"))
        truth.write_json(cfg.out / "truth.json")
        print(f"simulated {len(recs)} records from {sum(1 for s in ped.sire if s < 0)} sires")
    elif design == "parity":
        ped = simulate_pedigree(int(sim.pop("n_sires")), int(sim.pop("daughters_per_sire")), cfg.seed)
        if "rates" not in sim:
            sim["rates"] = parity_rates(sim["cuts"], sim.pop("shape"), sim.pop("culling"))
        truth = ParityTruth(seed=cfg.seed, **sim)
        nd, npr = simulate_parity(ped, truth)
        ped.to_csv(cfg.out / "pedigree.csv")
        write_records(nd, cfg.out / "nd.csv", (), ("sire", "hy"))
        write_records(npr, cfg.out / "np.csv", (), ("sire", "hy"))
        truth.write_json(cfg.out / "truth.json")
        cens = float(np.mean([r.cause == 0 for r in nd]))
        print(f"simulated {len(nd)} sows, {cens:.1%} censored")
    else:
        raise LonghazError(f"unknown simulation design: {design}")
    return EXIT_OK


COMMANDS = {
    "expand": cmd_expand,
    "fit": cmd_fit,
    "h2": cmd_h2,
    "km": cmd_km,
    "cif": cmd_cif,
    "diag": cmd_diag,
    "simulate": cmd_simulate,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longhaz", description="Mixed survival models for longevity data.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        sp.add_argument("--config", required=True)
        sp.add_argument("--data")
        sp.add_argument("--pedigree")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        if name in ("fit", "diag"):
            sp.add_argument("--fix-dispersion", type=float, dest="fix_dispersion")
    return p


def _setup_logging() -> None:
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    level = levels.get(os.environ.get("LONGHAZ_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (LonghazError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
