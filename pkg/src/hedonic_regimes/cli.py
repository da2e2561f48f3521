"""Command-line entry point.

Every command writes into a fresh temporary directory next to ``--out`` and
moves its files into place only after it succeeds, together with a
``manifest.json`` recording the resolved configuration, input digests and
library versions. Exit status: 0 success, 1 data/config errors, 2
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np
import scipy
import sklearn
import yaml

from . import __version__
from .data import DatasetTag, load_listings, load_population, read_cells, trim_prices, weekly_cell_counts, write_rejections
from .design import BASELINE_TERMS, HlmSpec, build_design
from .errors import ConfigError, ConvergenceError, HedonicRegimesError
from .fitio import read_count_fit, read_price_fit, write_count_fit, write_price_fit
from .hlm import fit_hlm
from .indices import (
    SegmentDimension,
    SegmentRule,
    index_from_dummies,
    pearson_test,
    segment_indices,
    write_correlations,
    write_index,
    yoy_quantity_index,
)
from .nbcount import count_design, fit_cycle_then_freeze, fit_nb_glm
from .regimes import load_calendar, load_series, join_contextual
from .simulator import MarketConfig, oracle_check, simulate_market, write_simulation

COMMANDS = ("simulate", "fit-price", "fit-count", "index", "quantity-index", "segments", "correlate", "report")


# --------------------------------------------------------------------------
# config handling


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hedonic-regimes", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file of option values; flags override it")
        sp.add_argument("--out", help="output directory (required here or in the config)")
        return sp

    def listing_opts(sp):
        sp.add_argument("--input", help="listing file (comma or semicolon delimited)")
        sp.add_argument("--tag", choices=[t.value for t in DatasetTag], help="dataset tag of --input")
        sp.add_argument("--no-trim", dest="trim", action="store_false", default=None,
                        help="skip the price trim (default 100000..5000000)")
        sp.add_argument("--trim-lower", type=float)
        sp.add_argument("--trim-upper", type=float)

    def calendar_opts(sp):
        sp.add_argument("--calendar", help="regime family: Lockdowns, LendingStandards or PolicyRate")
        sp.add_argument("--calendar-path", help="calendar CSV (default: packaged calendars)")
        sp.add_argument("--coverage-window", help="coverage row name, e.g. @coverage-legal")

    sp = common(sub.add_parser("simulate", help="draw a synthetic market"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-listings", type=float, help="expected number of adverts")

    sp = common(sub.add_parser("fit-price", help="fit the hierarchical price model"))
    listing_opts(sp)
    calendar_opts(sp)
    sp.add_argument("--terms", help="comma-separated fixed terms (default: hedonics + quarter or split)")
    sp.add_argument("--context", action="append", help="NAME=PATH contextual series (repeatable)")
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--run-id", help="simulation run id (default: from ground_truth.json next to --input)")

    sp = common(sub.add_parser("fit-count", help="fit the negative binomial count model"))
    listing_opts(sp)
    calendar_opts(sp)
    sp.add_argument("--cells", help="panel cell CSV instead of --input")
    sp.add_argument("--population", help="state,population CSV (default: population.csv next to --input)")
    sp.add_argument("--time", choices=["quarter", "year", "none"])
    sp.add_argument("--no-cycle", dest="cycle", action="store_false", default=None)
    sp.add_argument("--freeze-cycle", action="store_true", default=None,
                    help="estimate the cycle in a regime-free base fit and pass it as an offset")
    sp.add_argument("--max-iter", "--max-iterations", dest="max_iter", type=int)
    sp.add_argument("--run-id")

    sp = common(sub.add_parser("index", help="price index from a fit-price output"))
    sp.add_argument("--fit", help="directory written by fit-price")
    sp.add_argument("--base", help="base label, or FIRST..LAST dates of a split-label window")

    sp = common(sub.add_parser("quantity-index", help="year-over-year count ratios per quarter"))
    listing_opts(sp)
    sp.add_argument("--group", choices=[d.value for d in SegmentDimension])
    sp.add_argument("--cuts", help="comma-separated cut points, e.g. 0.2,0.8")
    sp.add_argument("--first", help="first quarter of the range")
    sp.add_argument("--last", help="last quarter of the range")

    sp = common(sub.add_parser("segments", help="segment-specific price indices from a joint fit"))
    listing_opts(sp)
    calendar_opts(sp)
    sp.add_argument("--rule", choices=[d.value for d in SegmentDimension])
    sp.add_argument("--cuts")
    sp.add_argument("--terms")
    sp.add_argument("--base")
    sp.add_argument("--max-iter", type=int)

    sp = common(sub.add_parser("correlate", help="Pearson test between two index files"))
    sp.add_argument("--x", help="index CSV (optionally PATH#SEGMENT)")
    sp.add_argument("--y", help="index CSV (optionally PATH#SEGMENT)")
    sp.add_argument("--x-name")
    sp.add_argument("--y-name")
    sp.add_argument("--alternative", choices=["TwoSided", "Greater", "Less"])

    sp = common(sub.add_parser("report", help="compare fits with simulation ground truth"))
    sp.add_argument("--ground-truth")
    sp.add_argument("--price-fit", action="append", help="fit-price output directory (repeatable)")
    sp.add_argument("--count-fit", action="append", help="fit-count output directory (repeatable)")
    sp.add_argument("--z-threshold", type=float)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Config file values overlaid with every flag that was given."""
    cfg: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        cfg = {k.replace("-", "_"): v for k, v in loaded.items()}
    for key, value in vars(args).items():
        if key in ("config", "command") or value is None:
            continue
        cfg[key] = value
    cfg["command"] = args.command
    if not cfg.get("out"):
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"{cfg['command']}: missing required option {k.replace('_', '-')}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {
        "hedonic_regimes": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "python": platform.python_version(),
    }


class Run:
    """Collects inputs and writes outputs into a staging directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.inputs: dict[str, Path] = {}
        parent = self.out.parent if self.out.parent != Path("") else Path(".")
        parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.tmp-", dir=parent))

    def input(self, path, role: str) -> Path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{role}: file not found: {p}")
        self.inputs[role] = p
        return p

    def path(self, name: str) -> Path:
        return self.stage / name

    def promote(self) -> list[str]:
        names = sorted(p.name for p in self.stage.iterdir())
        outputs = {n: _sha256(self.stage / n) for n in names}
        manifest = {
            "command": self.cfg["command"],
            "config": self._config(),
            "config_sha256": hashlib.sha256(json.dumps(self._config(), sort_keys=True).encode()).hexdigest(),
            "inputs": {role: {"file": p.name, "sha256": _sha256(p)} for role, p in sorted(self.inputs.items())},
            "outputs": outputs,
            "versions": _versions(),
        }
        (self.stage / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                                                  encoding="utf-8")
        input_paths = {p.resolve() for p in self.inputs.values()}
        self.out.mkdir(parents=True, exist_ok=True)
        for n in names + ["manifest.json"]:
            target = (self.out / n).resolve()
            if target in input_paths:
                raise ConfigError(f"output {target} would overwrite an input")
        for n in names + ["manifest.json"]:
            os.replace(self.stage / n, self.out / n)
        self.discard()
        return names

    def _config(self) -> dict:
        return {k: _jsonable(v) for k, v in sorted(self.cfg.items()) if k != "out" and not k.startswith("_")}

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _jsonable(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (dt.date,)):
        return v.isoformat()
    return str(v)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# shared steps


def _listings(run: Run, cfg: dict, tag_default=None):
    _require(cfg, "input")
    tag = cfg.get("tag") or tag_default
    if tag is None:
        raise ConfigError(f"{cfg['command']}: missing required option tag")
    path = run.input(cfg["input"], "input")
    res = load_listings(path, tag)
    if res.rejections:
        write_rejections(res.rejections, run.path("rejections.csv"))
        _note(f"{len(res.rejections)} rows rejected; see rejections.csv")
    records = res.records
    cfg["_trimmed"] = 0
    if cfg.get("trim", True) is not False:
        records, removed = trim_prices(records, cfg.get("trim_lower", 100_000.0), cfg.get("trim_upper", 5_000_000.0))
        cfg["_trimmed"] = removed
        if removed:
            _note(f"{removed} records outside the price trim removed")
    return records, DatasetTag(tag)


def _calendar(cfg):
    if not cfg.get("calendar"):
        return None
    kw = {}
    if cfg.get("coverage_window"):
        kw["coverage"] = cfg["coverage_window"]
    return load_calendar(cfg["calendar"], cfg.get("calendar_path"), **kw)


def _in_coverage(records, calendar):
    if calendar is None:
        return records, 0
    kept = [r for r in records if calendar.in_coverage(r.observed_on)]
    if len(kept) < len(records):
        _note(f"{len(records) - len(kept)} records outside the {calendar.family.value} coverage excluded")
    return kept, len(records) - len(kept)


def _terms(cfg, calendar) -> tuple:
    if cfg.get("terms"):
        terms = cfg["terms"]
        return tuple(t.strip() for t in (terms.split(",") if isinstance(terms, str) else terms) if t.strip())
    return BASELINE_TERMS + ("split" if calendar is not None else "quarter",)


def _contextual(run, cfg, records):
    ctx = {}
    items = cfg.get("context") or []
    if isinstance(items, dict):
        items = [f"{k}={v}" for k, v in items.items()]
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--context expects NAME=PATH, got {item!r}")
        series = load_series(run.input(path, f"context.{name}"))
        joined = join_contextual(records, series)
        ctx[name] = joined
    if not ctx:
        return records, {}
    missing = np.zeros(len(records), dtype=bool)
    for j in ctx.values():
        missing |= j.missing
    if missing.any():
        _note(f"{int(missing.sum())} records lack a contextual value and are excluded")
    keep = np.flatnonzero(~missing)
    return [records[i] for i in keep], {k: j.values[keep] for k, j in ctx.items()}


def _run_id(cfg, run):
    if cfg.get("run_id"):
        return cfg["run_id"]
    if cfg.get("input"):
        gt = Path(cfg["input"]).parent / "ground_truth.json"
        if gt.exists():
            return json.loads(gt.read_text(encoding="utf-8"))["run_id"]
    return None


def _rule(cfg, key):
    cuts = cfg.get("cuts")
    kw = {}
    if cuts:
        kw["cut_points"] = tuple(float(c) for c in (cuts.split(",") if isinstance(cuts, str) else cuts))
    return SegmentRule(cfg[key], **kw)


def _base(text):
    if text is None or ".." not in str(text):
        return text
    a, b = str(text).split("..")
    return dt.date.fromisoformat(a), dt.date.fromisoformat(b)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(run: Run, cfg: dict) -> None:
    sim = dict(cfg.get("simulation") or {})
    if "seed" in cfg:
        sim["seed"] = cfg["seed"]
    if cfg.get("n_listings") is not None:
        sim.setdefault("count", {})
        sim["count"] = dict(sim["count"], target_listings=float(cfg["n_listings"]))
    result = simulate_market(MarketConfig.from_dict(sim))
    write_simulation(result, run.stage)
    n = result.ground_truth["records"]
    _note(f"simulated {n['adverts']} adverts, {n['brokered']} brokered, {n['deeds']} deeds")


def cmd_fit_price(run: Run, cfg: dict) -> None:
    records, tag = _listings(run, cfg)
    calendar = _calendar(cfg)
    records, excluded = _in_coverage(records, calendar)
    records, ctx = _contextual(run, cfg, records)
    spec = HlmSpec(_terms(cfg, calendar))
    bundle = build_design(records, spec, calendar=calendar, contextual=ctx)
    if bundle.dropped_empty:
        _note(f"dropped empty columns: {', '.join(bundle.dropped_empty)}")
    opts = {"max_iter": int(cfg["max_iter"])} if cfg.get("max_iter") else {}
    fit = fit_hlm(bundle, **opts)
    for w in fit.convergence.warnings:
        _note(f"warning: {w}")
    extra = {"tag": tag.value, "terms": ",".join(spec.fixed_terms), "trimmed": cfg["_trimmed"]}
    if calendar is not None:
        extra["calendar"] = calendar.family.value
    if excluded:
        extra["excluded_outside_coverage"] = excluded
    run_id = _run_id(cfg, run)
    if run_id:
        extra["run_id"] = run_id
        fit.metadata["run_id"] = run_id
    write_price_fit(fit, run.stage, extra)


def _cell_regime(cells, calendar):
    out = []
    for c in cells:
        day = c.week_start + dt.timedelta(days=3)
        out.append(calendar.status(day, c.state) if calendar.in_coverage(day) else None)
    return out


def cmd_fit_count(run: Run, cfg: dict) -> None:
    if cfg.get("cells"):
        cells = read_cells(run.input(cfg["cells"], "cells"))
        tag = DatasetTag(cfg["tag"]) if cfg.get("tag") else None
    else:
        records, tag = _listings(run, cfg)
        pop_path = cfg.get("population") or Path(cfg["input"]).parent / "population.csv"
        population = load_population(run.input(pop_path, "population"))
        cells = weekly_cell_counts(records, population)
    calendar = _calendar(cfg)
    extra_cols = {}
    if calendar is not None:
        status = _cell_regime(cells, calendar)
        keep = [i for i, s in enumerate(status) if s is not None]
        if len(keep) < len(cells):
            _note(f"{len(cells) - len(keep)} cells outside the {calendar.family.value} coverage excluded")
        cells = [cells[i] for i in keep]
        extra_cols["regime"] = [status[i] for i in keep]
    time = cfg.get("time", "quarter")
    time = None if time == "none" else time
    cycle = cfg.get("cycle", True) is not False
    max_iter = int(cfg.get("max_iter") or 100)
    refs = {"regime": "none"} if calendar is not None and calendar.family.value == "Lockdowns" else None
    extra = {"tag": tag.value if tag else "", "cells": len(cells)}
    if cfg.get("freeze_cycle"):
        if not cycle:
            raise ConfigError("--freeze-cycle needs the cycle term")
        base = count_design(cells, time=time, cycle=True)
        trend = fit_cycle_then_freeze(cells, base, max_iter=max_iter)
        X, cols = count_design(cells, time=time, cycle=False, extra=extra_cols, references=refs)
        fit = fit_nb_glm(cells, (X, cols), frozen_cycle=trend, max_iter=max_iter)
    else:
        X, cols = count_design(cells, time=time, cycle=cycle, extra=extra_cols, references=refs)
        fit = fit_nb_glm(cells, (X, cols), max_iter=max_iter)
    if fit.at_upper_bound:
        _note("dispersion at its upper bound: counts are effectively Poisson")
    run_id = _run_id(cfg, run)
    if run_id:
        extra["run_id"] = run_id
        fit.metadata["run_id"] = run_id
    write_count_fit(fit, run.stage, extra)


def cmd_index(run: Run, cfg: dict) -> None:
    _require(cfg, "fit")
    fit_dir = Path(cfg["fit"])
    run.input(fit_dir / "fit.txt", "fit")
    run.input(fit_dir / "coefficients.csv", "coefficients")
    fit = read_price_fit(fit_dir)
    series = index_from_dummies(fit, _base(cfg.get("base")))
    write_index(series, run.path("index.csv"))


def cmd_quantity_index(run: Run, cfg: dict) -> None:
    records, _ = _listings(run, cfg)
    group = _rule(cfg, "group") if cfg.get("group") else None
    quarters = (cfg["first"], cfg["last"]) if cfg.get("first") and cfg.get("last") else None
    result = yoy_quantity_index(records, group, quarters=quarters)
    series = [result] if group is None else list(result.values())
    write_index(series, run.path("quantity_index.csv"))
    with run.path("quantity_flags.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment,label,flag\n")
        for s in series:
            for label, flag in sorted(s.flags.items()):
                fh.write(f"{s.segment or ''},{label},{flag}\n")


def cmd_segments(run: Run, cfg: dict) -> None:
    _require(cfg, "rule")
    records, _ = _listings(run, cfg)
    calendar = _calendar(cfg)
    records, _ = _in_coverage(records, calendar)
    spec = HlmSpec(_terms(cfg, calendar))
    opts = {"max_iter": int(cfg["max_iter"])} if cfg.get("max_iter") else {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = segment_indices(records, spec, _rule(cfg, "rule"), calendar=calendar, base=_base(cfg.get("base")),
                              fit_options=opts)
    for w in caught:
        _note(f"warning: {w.message}")
    series = list(out.values())
    if series and series[0].reference_segment:
        _note(f"reference segment: {series[0].reference_segment}")
    write_index(series, run.path("segment_index.csv"))


def _read_index_values(spec: str) -> dict:
    path, _, segment = spec.partition("#")
    values = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if segment and row.get("segment", "") != segment:
                continue
            values.setdefault(row["label"], float(row["value"]))
    return values


def cmd_correlate(run: Run, cfg: dict) -> None:
    _require(cfg, "x", "y")
    run.input(cfg["x"].partition("#")[0], "x")
    run.input(cfg["y"].partition("#")[0], "y")
    xv, yv = _read_index_values(cfg["x"]), _read_index_values(cfg["y"])
    common = [k for k in xv if k in yv]
    if len(common) < 3:
        raise ConfigError(f"only {len(common)} shared labels between --x and --y")
    res = pearson_test([xv[k] for k in common], [yv[k] for k in common], cfg.get("alternative", "TwoSided"))
    xn = cfg.get("x_name") or Path(cfg["x"].partition("#")[0]).stem
    yn = cfg.get("y_name") or Path(cfg["y"].partition("#")[0]).stem
    write_correlations([(xn, yn, res)], run.path("correlations.csv"))


def cmd_report(run: Run, cfg: dict) -> None:
    _require(cfg, "ground_truth")
    gt = run.input(cfg["ground_truth"], "ground_truth")
    fits = {}
    for i, d in enumerate(cfg.get("price_fit") or []):
        run.input(Path(d) / "fit.txt", f"price_fit.{i}")
        fit = read_price_fit(d)
        fits[f"price:{fit.metadata.get('tag', '')}".rstrip(":")] = fit
    for i, d in enumerate(cfg.get("count_fit") or []):
        run.input(Path(d) / "fit.txt", f"count_fit.{i}")
        fit = read_count_fit(d)
        fits[f"count:{fit.metadata.get('tag', '')}".rstrip(":")] = fit
    if not fits:
        raise ConfigError("report needs at least one --price-fit or --count-fit")
    report = oracle_check(json.loads(gt.read_text(encoding="utf-8")), fits, float(cfg.get("z_threshold", 3.0)))
    report.write_csv(run.path("oracle.csv"))
    _note(f"{len(report.rows)} parameters checked, {len(report.flags)} beyond {report.z_threshold} SE")
    for r in report.flags:
        _note(f"flag: {r.model} {r.parameter} true={r.true:.6g} est={r.estimate:.6g} z={r.z:.2f}")


HANDLERS = {
    "simulate": cmd_simulate,
    "fit-price": cmd_fit_price,
    "fit-count": cmd_fit_count,
    "index": cmd_index,
    "quantity-index": cmd_quantity_index,
    "segments": cmd_segments,
    "correlate": cmd_correlate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    run = None
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        HANDLERS[cfg["command"]](run, cfg)
        written = run.promote()
        _note(f"wrote {', '.join(written + ['manifest.json'])} to {run.out}")
        return 0
    except ConvergenceError as exc:
        _note(f"error: did not converge: {exc}")
        return 2
    except (HedonicRegimesError, OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        _note(f"error: {exc}")
        return 1
    finally:
        if run is not None:
            run.discard()


if __name__ == "__main__":
    sys.exit(main())
