"""Plain-text fit summaries and coefficient tables, with readers.

``fit.txt`` holds one ``key: value`` pair per line. Factor levels and date
spans are lists joined by ``|``; a span is ``first..last`` (inclusive).
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .hlm import Convergence, HlmFit, VarianceComponents
from .nbcount import CyclicalTrend, NbFit, cycle_extrema

COEF_COLUMNS = ("term", "estimate", "se")


def _fmt(x) -> str:
    return repr(float(x))


def _spans_text(spans) -> str:
    return "|".join(f"{a.isoformat()}..{b.isoformat()}" for a, b in spans)


def _parse_spans(text: str):
    out = []
    for part in text.split("|"):
        a, b = part.split("..")
        out.append((dt.date.fromisoformat(a), dt.date.fromisoformat(b)))
    return out


def write_kv(pairs, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for k, v in pairs:
            fh.write(f"{k}: {v}\n")


def read_kv(path) -> dict:
    out: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(": ")
            if not sep:
                raise SchemaError(f"{path}: malformed line {line!r}")
            out.setdefault(key, []).append(value)
    return {k: v[0] if len(v) == 1 else v for k, v in out.items()}


def write_coefficients(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEF_COLUMNS)
        for term, est, se in rows:
            w.writerow([term, _fmt(est), "" if se is None else _fmt(se)])


def read_coefficients(path) -> list[tuple[str, float, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COEF_COLUMNS:
            raise SchemaError(f"{path}: expected columns {COEF_COLUMNS}")
        return [(r["term"], float(r["estimate"]), float(r["se"]) if r["se"] else math.nan) for r in reader]


# --------------------------------------------------------------------------
# price fits


def write_price_fit(fit: HlmFit, outdir, extra: dict | None = None) -> None:
    outdir = Path(outdir)
    v, vse = fit.variance, fit.variance_se
    pairs = [("model", "hierarchical-price")]
    pairs += [(k, val) for k, val in (extra or {}).items()]
    pairs += [
        ("n_obs", fit.n_obs),
        ("n_params", fit.n_params),
        ("loglik", _fmt(fit.loglik)),
        ("bic", _fmt(fit.bic)),
        ("sigma2_state", _fmt(v.sigma2_state)),
        ("sigma2_state_se", _fmt(vse[0])),
        ("sigma2_district", _fmt(v.sigma2_district)),
        ("sigma2_district_se", _fmt(vse[1])),
        ("sigma2_resid", _fmt(v.sigma2_resid)),
        ("sigma2_resid_se", _fmt(vse[2])),
        ("iterations", fit.convergence.iterations),
        ("grad_norm", _fmt(fit.convergence.grad_norm)),
    ]
    for name, flag in sorted(fit.convergence.at_boundary.items()):
        pairs.append((f"at_boundary.{name}", "yes" if flag else "no"))
    for msg in fit.convergence.warnings:
        pairs.append(("warning", msg))
    for factor, levels in fit.factor_levels.items():
        pairs.append((f"levels.{factor}", "|".join(levels)))
        pairs.append((f"reference.{factor}", fit.references[factor]))
    for label, spans in fit.label_spans.items():
        pairs.append((f"span.{label}", _spans_text(spans)))
    for key, val in sorted(fit.metadata.items()):
        if key not in (extra or {}):
            pairs.append((f"meta.{key}", val))
    write_kv(pairs, outdir / "fit.txt")
    write_coefficients(zip(fit.columns, fit.beta, fit.se), outdir / "coefficients.csv")
    with (outdir / "random_effects.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "name", "blup"])
        for level in ("state", "district"):
            for name, val in fit.random_effects.get(level, {}).items():
                w.writerow([level, name, _fmt(val)])


def read_price_fit(fit_dir) -> HlmFit:
    """Rebuild the parts of an :class:`HlmFit` needed for indices and oracle checks.

    Only coefficient SEs are stored, so ``cov_beta`` is diagonal.
    """
    fit_dir = Path(fit_dir)
    kv = read_kv(fit_dir / "fit.txt")
    if kv.get("model") != "hierarchical-price":
        raise SchemaError(f"{fit_dir}: not a price fit")
    rows = read_coefficients(fit_dir / "coefficients.csv")
    levels, refs, spans, meta = {}, {}, {}, {}
    for key, value in kv.items():
        if key.startswith("levels."):
            levels[key[7:]] = value.split("|")
        elif key.startswith("reference."):
            refs[key[10:]] = value
        elif key.startswith("span."):
            spans[key[5:]] = _parse_spans(value)
        elif key.startswith("meta."):
            meta[key[5:]] = value
    for key in ("run_id", "tag"):
        if key in kv:
            meta[key] = kv[key]
    se = np.array([r[2] for r in rows])
    variance = VarianceComponents(float(kv["sigma2_state"]), float(kv["sigma2_district"]), float(kv["sigma2_resid"]))
    vse = tuple(float(kv[f"{k}_se"]) for k in ("sigma2_state", "sigma2_district", "sigma2_resid"))
    conv = Convergence(int(kv["iterations"]), float(kv["grad_norm"]), math.nan)
    return HlmFit(
        columns=[r[0] for r in rows],
        beta=np.array([r[1] for r in rows]),
        cov_beta=np.diag(se**2),
        variance=variance,
        variance_se=vse,
        loglik=float(kv["loglik"]),
        bic=float(kv["bic"]),
        n_obs=int(kv["n_obs"]),
        n_params=int(kv["n_params"]),
        log_ratios=np.array([]),
        convergence=conv,
        factor_levels=levels,
        references=refs,
        label_spans=spans,
        metadata=meta,
    )


# --------------------------------------------------------------------------
# count fits


def write_count_fit(fit: NbFit, outdir, extra: dict | None = None) -> None:
    outdir = Path(outdir)
    pairs = [("model", "negative-binomial-count")]
    pairs += [(k, val) for k, val in (extra or {}).items()]
    pairs += [
        ("n_obs", fit.n_obs),
        ("n_params", fit.n_params),
        ("loglik", _fmt(fit.loglik)),
        ("bic", _fmt(fit.bic)),
        ("dispersion", _fmt(fit.dispersion)),
        ("dispersion_se", _fmt(fit.dispersion_se)),
        ("dispersion_at_upper_bound", "yes" if fit.at_upper_bound else "no"),
        ("iterations", fit.iterations),
        ("score_norm", _fmt(fit.score_norm)),
    ]
    for term in fit.offset_terms:
        pairs.append(("offset", term))
    rows = list(zip(fit.columns, fit.beta, fit.se))
    rows.append(("dispersion", fit.dispersion, fit.dispersion_se))
    trend = fit.cycle
    if trend is not None:
        pairs.append(("cycle.frozen", "yes" if fit.frozen_cycle is not None else "no"))
        block = cycle_block(trend)
        pairs += [(f"cycle.{k}", _fmt(v)) for k, v in block.items()]
        rows += [(f"cycle.{k}", v, None) for k, v in block.items()]
    for key, val in sorted(fit.metadata.items()):
        if key not in (extra or {}):
            pairs.append((f"meta.{key}", val))
    write_kv(pairs, outdir / "fit.txt")
    write_coefficients(rows, outdir / "coefficients.csv")


def cycle_block(trend: CyclicalTrend) -> dict:
    out = {"beta_cos": trend.beta_cos, "beta_sin": trend.beta_sin, "amplitude": trend.amplitude}
    if trend.amplitude > 0:
        out["t_max"], out["t_min"] = cycle_extrema(trend)
    return out


def read_count_fit(fit_dir) -> NbFit:
    fit_dir = Path(fit_dir)
    kv = read_kv(fit_dir / "fit.txt")
    if kv.get("model") != "negative-binomial-count":
        raise SchemaError(f"{fit_dir}: not a count fit")
    rows = [r for r in read_coefficients(fit_dir / "coefficients.csv")
            if r[0] != "dispersion" and not r[0].startswith("cycle.")]
    se = np.array([r[2] for r in rows])
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    for key in ("run_id", "tag"):
        if key in kv:
            meta[key] = kv[key]
    frozen = None
    if kv.get("cycle.frozen") == "yes":
        frozen = CyclicalTrend(float(kv["cycle.beta_cos"]), float(kv["cycle.beta_sin"]))
    offsets = kv.get("offset", [])
    return NbFit(
        columns=[r[0] for r in rows],
        beta=np.array([r[1] for r in rows]),
        cov_beta=np.diag(se**2),
        dispersion=float(kv["dispersion"]),
        dispersion_se=float(kv["dispersion_se"]),
        loglik=float(kv["loglik"]),
        bic=float(kv["bic"]),
        n_obs=int(kv["n_obs"]),
        n_params=int(kv["n_params"]),
        at_upper_bound=kv["dispersion_at_upper_bound"] == "yes",
        iterations=int(kv["iterations"]),
        score_norm=float(kv["score_norm"]),
        offset_terms=[offsets] if isinstance(offsets, str) else list(offsets),
        frozen_cycle=frozen,
        metadata=meta,
    )
