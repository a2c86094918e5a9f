"""Command-line interface: ``ctpanel <subcommand> ...``.

Exit codes: 0 success, 1 bad input or configuration, 2 numerical failure.
Results go to stdout or ``--out``; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dag import BUILTIN_GRAPHS, builtin_dag, check_scia, load_dag
from .errors import EstimationError, SpecificationError, UserInputError
from .estimands import build_form, canonical_kind, default_estimands
from .estimators import ModelSpec, fit
from .inference import (
    THREADS_ENV,
    ParamTarget,
    analytical_variance,
    bootstrap,
    hansen_j,
    parameter_se,
)
from .panel import PanelSchema, load_panel
from .simulate import DgpSpec, McConfig, generate, mc_experiment

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["main", "build_parser", "render_table", "render_csv", "BUILTIN_GRAPHS"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserInputError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config and I/O helpers

def _read_mapping(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UserInputError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UserInputError(f"cannot parse {path}: {exc}") from None


def _apply_config(args, parser):
    """Values from ``--config`` override command-line flags."""
    if not getattr(args, "config", None):
        return args
    cfg = _read_mapping(args.config)
    section = cfg.get(args.command, cfg) if isinstance(cfg.get(args.command), dict) else cfg
    known = {a.dest for a in parser.subcommands[args.command]._actions}
    for key, value in section.items():
        if isinstance(value, dict):
            continue
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise UserInputError(f"unknown key {key!r} in {args.config} for {args.command}")
        if dest in ("estimand", "remove_edge", "add_edge") and isinstance(value, str):
            value = [value]
        setattr(args, dest, value)
    return args


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, ensure_ascii=False) + "\n"


def _emit(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _envelope(args, command, resolved: dict) -> dict:
    doc = {"ctpanel_version": __version__, "command": command, "config": resolved}
    if not getattr(args, "no_timestamp", True):
        doc["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return doc


def _split(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return tuple(str(s).strip() for s in v)
    return tuple(s.strip() for s in str(v).split(",") if s.strip())


# --------------------------------------------------------------------------
# estimation commands

def _load(args):
    cols = dict(unit=args.unit_col, time=args.time_col, outcome=args.outcome_col,
                treatment=args.treatment_col)
    covs = _split(args.covariates)
    if covs is None:
        path = Path(args.data)
        if not path.is_file():
            raise UserInputError(f"data file not found: {path}")
        with open(path, newline="", encoding="utf-8-sig") as fh:
            header = next(csv.reader(fh), [])
        covs = tuple(h.strip() for h in header if h.strip() and h.strip() not in cols.values())
    z = _split(args.z)
    if z is None:
        z = covs[:1]
    schema = PanelSchema(**cols, covariates=covs, z=z, relaxed_support=bool(args.relaxed_support))
    return load_panel(args.data, schema), schema


def _estimand_specs(args, tau, panel) -> list:
    kinds = args.estimand or ["acrw-t", "acrw-star"]
    out = []
    for k in kinds:
        kind = canonical_kind(k)
        if kind in ("ACR_t", "ATE_t"):
            raise SpecificationError(f"{kind} needs an evaluation history; use the library API")
        out += default_estimands(tau, panel, kinds=(kind,), benchmark=args.benchmark)
    return out


def _model(args) -> ModelSpec:
    covs = _split(args.model_covariates)
    return ModelSpec(args.model, args.tau, covariates=covs, collapse=bool(args.collapse))


def _resolved(args, schema, model) -> dict:
    d = {
        "data": str(args.data),
        "schema": {"unit": schema.unit, "time": schema.time, "outcome": schema.outcome,
                   "treatment": schema.treatment, "covariates": list(schema.covariates),
                   "z": list(schema.z), "relaxed_support": schema.relaxed_support},
        "model": model.model, "tau": model.tau.to_text(),
        "covariates": None if model.covariates is None else list(model.covariates),
        "collapse": model.collapse, "weighting": args.weighting,
        "estimands": list(args.estimand or ["acrw-t", "acrw-star"]),
        "benchmark": args.benchmark, "level": args.level,
    }
    return d


def _fit_block(f) -> dict:
    s = f.summary()
    out = {"estimator": s["estimator"], "model": s["model"], "weighting": s["weighting"],
           "n_units": s["n_units"], "n_periods": s["n_periods"], "n_obs": s["n_obs"],
           "n_moments": s["n_moments"], "balanced": s["balanced"], "notes": s["notes"]}
    if "r2_within" in f.stats:
        out["r2_within"] = f.stats["r2_within"]
    if f.estimator == "gmm":
        try:
            J, dof, p = hansen_j(f)
            out["hansen_j"] = {"statistic": J, "dof": dof, "p_value": p}
        except UserInputError:
            out["hansen_j"] = None
    return out


def _run_estimation(args, use_bootstrap: bool) -> dict:
    panel, schema = _load(args)
    model = _model(args)
    f = fit(panel, model, args.weighting)
    specs = _estimand_specs(args, model.tau, panel)
    resolved = _resolved(args, schema, model)
    params, estimands = [], []
    if use_bootstrap:
        resolved.update({"se": "bootstrap", "B": args.B, "seed": args.seed, "ci": args.ci,
                         "rng": "numpy.random.Philox"})
        targets = [ParamTarget(lab) for lab in f.labels] + specs
        reps = bootstrap(panel, model, targets, B=args.B, seed=args.seed, level=args.level,
                         weighting=args.weighting, ci=args.ci, n_jobs=args.threads)
        for lab, r in zip(f.labels, reps[:len(f.labels)]):
            params.append({"label": lab, "estimate": float(f.param(lab)), "se": r.se,
                           "ci": list(r.ci)})
        for s, r in zip(specs, reps[len(f.labels):]):
            entry = {"label": s.label, "estimand": s.kind, "t": s.t, "estimate": r.estimate,
                     "se": r.se, "ci": list(r.ci), "ci_normal": list(r.ci_normal),
                     "failures": r.failures}
            if args.replicates:
                entry["replicates"] = [float(v) for v in r.replicates]
            estimands.append(entry)
    else:
        resolved["se"] = args.se
        z = _z(args.level)
        ses = None
        notes = []
        if args.se == "analytical":
            try:
                ses = parameter_se(f)
            except UserInputError as exc:
                notes.append(f"parameter SEs unavailable: {exc}")
        for j, lab in enumerate(f.labels):
            est = float(f.params[j])
            se = None if ses is None else float(ses[j])
            params.append({"label": lab, "estimate": est, "se": se,
                           "ci": None if se is None else [est - z * se, est + z * se]})
        for s in specs:
            form = build_form(model.tau, s, panel)
            entry = {"label": s.label, "estimand": s.kind, "t": s.t,
                     "estimate": form.value(f.tau_params), "se": None, "ci": None}
            if form.benchmark is not None:
                entry["benchmark"] = (list(form.benchmark) if isinstance(form.benchmark, tuple)
                                      else form.benchmark)
            if args.se == "analytical":
                try:
                    vr = analytical_variance(f, form, panel, args.level)
                    entry.update(se=vr.se, ci=list(vr.ci))
                except UserInputError as exc:
                    notes.append(f"{s.label}: {exc}")
            estimands.append(entry)
        if notes:
            resolved["se_notes"] = notes
    doc = _envelope(args, args.command, resolved)
    doc.update({"fit": _fit_block(f), "params": params, "estimands": estimands})
    return doc


def _z(level):
    from scipy import stats
    if not 0 < level < 1:
        raise SpecificationError("level must be in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2))


# --------------------------------------------------------------------------
# rendering

def _num(v, fmt="{:.4f}"):
    return "" if v is None else fmt.format(v)


def render_table(doc: dict, kinds=None) -> str:
    """Coefficient rows with SEs below, estimand rows, then sample and fit
    statistics."""
    fitb = doc["fit"]
    title = f"{fitb['model']} ({fitb['estimator'].upper()}, {doc['config'].get('se', '')} SE)"
    rows = []
    for p in doc["params"]:
        rows.append((p["label"], _num(p["estimate"])))
        rows.append(("", f"({_num(p['se'])})" if p["se"] is not None else ""))
    rows.append(("", ""))
    for e in _filter(doc["estimands"], kinds):
        rows.append((e["label"], _num(e["estimate"])))
        rows.append(("", f"({_num(e['se'])})" if e["se"] is not None else ""))
    rows.append(("", ""))
    rows.append(("N", str(fitb["n_units"])))
    rows.append(("T", str(fitb["n_periods"])))
    rows.append(("Observations", str(fitb["n_obs"])))
    if "r2_within" in fitb:
        rows.append(("Within R2", _num(fitb["r2_within"])))
    if fitb.get("hansen_j"):
        h = fitb["hansen_j"]
        rows.append(("Hansen J", f"{_num(h['statistic'], '{:.3f}')} (df={h['dof']}, p={_num(h['p_value'], '{:.3f}')})"))
    elif fitb["estimator"] == "gmm":
        rows.append(("Moments", str(fitb["n_moments"])))
    w = max(len(r[0]) for r in rows)
    v = max(len(title), max(len(r[1]) for r in rows))
    lines = [" " * w + "  " + title.rjust(v), "-" * (w + 2 + v)]
    lines += [(r[0].ljust(w) + "  " + r[1].rjust(v)).rstrip() for r in rows]
    lines.append("-" * (w + 2 + v))
    return "\n".join(lines) + "\n"


def _filter(entries, kinds):
    if not kinds:
        return entries
    want = {canonical_kind(k) for k in kinds}
    return [e for e in entries if e["estimand"] in want]


def render_csv(doc: dict, kinds=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimand", "label", "t", "estimate", "se", "ci_lower", "ci_upper"])
    for e in _filter(doc["estimands"], kinds):
        ci = e.get("ci") or [None, None]
        w.writerow([e["estimand"], e["label"], "" if e["t"] is None else e["t"],
                    *("" if x is None else repr(float(x)) for x in (e["estimate"], e["se"], *ci))])
    return buf.getvalue()


def _output(args, doc):
    fmt = args.format
    kinds = getattr(args, "estimand_filter", None)
    if fmt == "json":
        _emit(_dumps(doc), args.out)
    elif fmt == "table":
        _emit(render_table(_clean(doc), kinds), args.out)
    else:
        _emit(render_csv(_clean(doc), kinds), args.out)


# --------------------------------------------------------------------------
# subcommands

def cmd_estimate(args):
    _output(args, _run_estimation(args, use_bootstrap=False))


def cmd_bootstrap(args):
    _output(args, _run_estimation(args, use_bootstrap=True))


def cmd_report(args):
    if args.input:
        p = Path(args.input)
        if not p.is_file():
            raise UserInputError(f"report file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise UserInputError(f"cannot parse {p}: {exc}") from None
        if "fit" not in doc or "estimands" not in doc:
            raise UserInputError(f"{p} is not an estimate or bootstrap result")
    elif args.data:
        doc = _run_estimation(args, use_bootstrap=False)
    else:
        raise UserInputError("report needs --input RESULT.json or --data CSV")
    args.estimand_filter = args.estimand
    _output(args, doc)


def cmd_simulate(args):
    spec = _dgp_spec(args)
    panel, truth = generate(spec, truth=True)
    if not args.out:
        raise UserInputError("simulate needs --out PANEL.csv")
    panel.write_csv(args.out)
    doc = _envelope(args, "simulate", {"dgp": spec.to_dict()})
    doc["truth"] = truth.to_dict()
    doc["clip_rate"] = truth.clip_rate
    if args.truth:
        Path(args.truth).write_text(_dumps(doc), encoding="utf-8")
    else:
        sys.stdout.write(_dumps(doc))


def _dgp_spec(args) -> DgpSpec:
    m = _read_mapping(args.spec) if args.spec else {}
    m = {k: v for k, v in m.items() if k != "mc"}
    if args.seed is not None:
        m["seed"] = args.seed
    return DgpSpec.from_mapping(m)


def cmd_mc(args):
    spec = _dgp_spec(args)
    raw = _read_mapping(args.spec).get("mc", {}) if args.spec else {}
    kw = dict(raw)
    for key in ("model", "tau", "weighting", "inference", "B", "level"):
        v = getattr(args, key)
        if v is not None:
            kw[key] = v
    if args.estimand:
        kw["estimands"] = tuple(args.estimand)
    if args.collapse:
        kw["collapse"] = True
    R = int(args.R if args.R is not None else kw.pop("R", 100))
    kw.pop("R", None)
    try:
        cfg = McConfig(**kw)
    except TypeError as exc:
        raise UserInputError(f"bad mc settings: {exc}") from None
    summary = mc_experiment(spec, cfg, R=R)
    doc = _envelope(args, "mc", {"R": R, **summary.config})
    doc.update(summary.to_dict())
    doc.pop("config")
    _emit(_dumps(doc), args.out)


def _graph(arg):
    if arg in BUILTIN_GRAPHS:
        return builtin_dag(arg)
    p = Path(arg)
    if not p.is_file():
        raise UserInputError(f"graph file not found: {p} (builtin graphs: {', '.join(BUILTIN_GRAPHS)})")
    return load_dag(p)


def _edge(text):
    parts = [s.strip() for s in str(text).split("->")]
    if len(parts) != 2 or not all(parts):
        raise UserInputError(f"edge must look like 'A->B', got {text!r}")
    return tuple(parts)


def cmd_dag_check(args):
    g = _graph(args.graph)
    if args.remove_edge:
        g = g.without_edges([_edge(e) for e in args.remove_edge])
    if args.add_edge:
        g = g.with_edges([_edge(e) for e in args.add_edge])
    rep = check_scia(g, args.assumption, latent_policy=args.latent_policy)
    if args.format == "json":
        doc = _envelope(args, "dag-check", {
            "graph": str(args.graph), "assumption": rep.assumption,
            "remove_edge": list(args.remove_edge or []), "add_edge": list(args.add_edge or []),
            "latent_policy": args.latent_policy})
        doc["report"] = rep.to_dict()
        _emit(_dumps(doc), args.out)
    else:
        _emit(rep.to_table() + "\n", args.out)


# --------------------------------------------------------------------------
# parser

def _add_common(p, formats=("json", "table")):
    p.add_argument("--config", help="TOML or JSON file; its values override flags")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=formats, default=formats[0])
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit the creation time so repeated runs are byte-identical")


def _add_estimation(p, data_required=True):
    p.add_argument("--data", required=data_required, help="long-format CSV panel")
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--time-col", default="time")
    p.add_argument("--outcome-col", default="y")
    p.add_argument("--treatment-col", default="d")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all other columns)")
    p.add_argument("--z", help="comma-separated Z columns for interactions (default: first covariate)")
    p.add_argument("--relaxed-support", action="store_true", help="allow negative treatment values")
    p.add_argument("--model", default="FEC-STI", help="FEC-STI, FEC-SEI, DPFEC-SEI or DPFEC-STI")
    p.add_argument("--tau", default="homogeneous", help="builtin family name or term list such as 'd, d^2'")
    p.add_argument("--model-covariates", help="subset of covariates entering the model")
    p.add_argument("--collapse", "--collapse-instruments", dest="collapse", action="store_true",
                   help="collapse GMM instruments")
    p.add_argument("--weighting", default="two-step", choices=("two-step", "identity"))
    p.add_argument("--estimand", action="append",
                   help="acrw-t, acrw-star, atew-t or atew-star (repeatable)")
    p.add_argument("--benchmark", default="auto", choices=("auto", "zero", "mean"))
    p.add_argument("--level", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ctpanel", description="Continuous-treatment panel estimation.")
    ap.add_argument("--version", action="version", version=f"ctpanel {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="fit a model and report estimands")
    _add_estimation(p)
    p.add_argument("--se", default="analytical", choices=("analytical", "none"))
    _add_common(p, ("json", "table", "csv"))
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bootstrap", help="fit with cross-sectional bootstrap inference")
    _add_estimation(p)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci", default="percentile", choices=("percentile", "normal"))
    p.add_argument("--replicates", action="store_true", help="include replicate vectors in the JSON")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    _add_common(p, ("json", "table", "csv"))
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("report", help="render a saved result, or estimate and render")
    p.add_argument("--input", help="JSON written by estimate or bootstrap")
    _add_estimation(p, data_required=False)
    p.add_argument("--se", default="analytical", choices=("analytical", "none"))
    _add_common(p, ("table", "csv", "json"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="draw a panel from a DGP spec")
    p.add_argument("--spec", help="DGP spec (TOML or JSON); defaults apply when omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--truth", help="write the oracle truth JSON here (default: stdout)")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--out", help="panel CSV path")
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc", help="Monte Carlo experiment")
    p.add_argument("--spec", help="DGP spec (TOML or JSON) with an optional [mc] table")
    p.add_argument("--seed", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--model")
    p.add_argument("--tau")
    p.add_argument("--weighting")
    p.add_argument("--inference", choices=("analytical", "bootstrap", "none"))
    p.add_argument("--B", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--estimand", action="append")
    p.add_argument("--collapse", action="store_true")
    _add_common(p, ("json",))
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("dag-check", help="check SCIA-I / SCIA-II on a causal graph")
    p.add_argument("--graph", required=True,
                   help=f"graph file, or one of: {', '.join(BUILTIN_GRAPHS)}")
    p.add_argument("--assumption", default="scia1", help="scia1 or scia2")
    p.add_argument("--remove-edge", action="append", help="edge 'A->B' to drop (repeatable)")
    p.add_argument("--add-edge", action="append", help="edge 'A->B' to add (repeatable)")
    p.add_argument("--latent-policy", default="exclude-confounders",
                   choices=("exclude-confounders", "condition-all"))
    _add_common(p, ("table", "json"))
    p.set_defaults(func=cmd_dag_check)
    ap.subcommands = dict(sub.choices)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, parser)
        args.func(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EstimationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
