"""Plug-in causal-response estimands.

Every estimand is written as ``f(τ, Q̄) = Σ_e τ_{s_e} c_e Π_j Q̄_j^{p_je}``,
where Q̄ are sample averages of per-unit quantities Q_i (treatment and Z
monomials at given periods). :class:`EstimandForm` keeps that split so the
variance code can apply the delta method with the same Q_i.

Treatment monomials and Z monomials are averaged separately, so a term like
``d*z`` contributes ``mean(D_t) * mean(Z_t)`` to an average response. This is
the product-of-marginals expectation used in the definitions of the average
causal responses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import RangeError, ShapeError, SpecificationError
from .panel import PanelDataset
from .tau import Poly, TauSpec, basis_mask, history_arrays

__all__ = [
    "KINDS",
    "EstimandSpec",
    "EstimandForm",
    "EstimateReport",
    "build_form",
    "valid_periods",
    "resolve_benchmark",
    "acr_at",
    "acrw_t",
    "acrw_star",
    "ate_t",
    "atew",
    "estimate",
    "default_estimands",
]

KINDS = ("ACR_t", "ACRW_t", "ACRW_star", "ATE_t", "ATEW_t", "ATEW_star")
_KIND_ALIASES = {k.lower().replace("_", "-"): k for k in KINDS}
_KIND_ALIASES.update({"acrw*": "ACRW_star", "atew*": "ATEW_star", "acr": "ACR_t", "ate": "ATE_t"})


def canonical_kind(kind: str) -> str:
    k = str(kind).strip()
    if k in KINDS:
        return k
    try:
        return _KIND_ALIASES[k.lower().replace("_", "-")]
    except KeyError:
        raise SpecificationError(f"unknown estimand {kind!r}; choose from {', '.join(KINDS)}") from None


@dataclass(frozen=True)
class EstimandSpec:
    """What to estimate.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS` (aliases such as ``"acrw-star"`` accepted).
    t : int, optional
        Period (1-based) for the per-period kinds.
    history : sequence of float, optional
        Evaluation history d_1..d_t for ``ACR_t`` and ``ATE_t``.
    benchmark : {"auto", "zero", "mean"} or sequence of float
        Benchmark strategy for the ATE kinds. ``"auto"`` picks zero-history
        when some unit is never treated and mean-history otherwise.
    """

    kind: str
    t: int | None = None
    history: tuple | None = None
    benchmark: str | tuple | None = None

    def __post_init__(self):
        kind = canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in ("ACR_t", "ACRW_t", "ATE_t", "ATEW_t") and self.t is None:
            raise SpecificationError(f"{kind} needs a period t")
        if kind in ("ACRW_star", "ATEW_star") and self.t is not None:
            raise SpecificationError(f"{kind} averages over periods; do not pass t")
        if kind in ("ACR_t", "ATE_t"):
            if self.history is None:
                raise SpecificationError(f"{kind} needs an evaluation history")
            object.__setattr__(self, "history", tuple(float(v) for v in self.history))
        elif self.history is not None:
            raise SpecificationError(f"{kind} is aggregated over observed histories; do not pass a history")
        if kind.startswith("ATE"):
            b = "auto" if self.benchmark is None else self.benchmark
            if not isinstance(b, str):
                b = tuple(float(v) for v in b)
            elif b not in ("auto", "zero", "mean"):
                raise SpecificationError(f"unknown benchmark {b!r}")
            object.__setattr__(self, "benchmark", b)
        else:
            object.__setattr__(self, "benchmark", None)
        if self.t is not None:
            object.__setattr__(self, "t", int(self.t))

    @property
    def label(self) -> str:
        base = {"ACRW_star": "ACRW*", "ATEW_star": "ATEW*"}.get(self.kind)
        if base:
            return base
        return f"{self.kind[:-2]}_{self.t}"


# --------------------------------------------------------------------------
# forms

@dataclass(frozen=True, eq=False)
class EstimandForm:
    """``f(τ, Q̄)`` as a list of entries ``(s, coef, ((q, power), ...))``.

    ``q_units`` holds the per-unit Q_i (shape (N, q)) when every coordinate is
    observed for every unit, else None.
    """

    spec: EstimandSpec
    entries: tuple
    q_labels: tuple
    q_bar: np.ndarray
    q_units: np.ndarray | None
    S: int
    periods: tuple = ()
    benchmark: object = None
    notes: tuple = ()
    cells: tuple = field(default=(), repr=False)

    def resample_q(self, idx) -> np.ndarray:
        """Q̄ recomputed on the units ``idx`` (duplicates allowed)."""
        out = np.empty(len(self.cells))
        for j, (how, vals, m) in enumerate(self.cells):
            v, mm = vals[idx], m[idx]
            if how == "one":
                out[j] = v[mm].mean() if mm.any() else np.nan
            else:
                cnt = mm.sum(axis=0)
                per = np.where(mm, v, 0.0).sum(axis=0) / np.where(cnt > 0, cnt, 1)
                out[j] = per.mean() if (cnt > 0).all() else np.nan
        return out

    def value(self, tau: np.ndarray, q_bar: np.ndarray | None = None) -> float:
        q = self.q_bar if q_bar is None else q_bar
        total = 0.0
        for s, c, pw in self.entries:
            term = tau[s] * c
            for j, p in pw:
                term = term * (q[j] if p == 1 else q[j] ** p)
            total = total + term
        return float(total)

    def grad_tau(self, q_bar: np.ndarray | None = None) -> np.ndarray:
        q = self.q_bar if q_bar is None else q_bar
        g = np.zeros(self.S)
        for s, c, pw in self.entries:
            term = c
            for j, p in pw:
                term *= q[j] ** p
            g[s] += term
        return g

    def grad_q(self, tau: np.ndarray, q_bar: np.ndarray | None = None) -> np.ndarray:
        q = self.q_bar if q_bar is None else q_bar
        g = np.zeros(len(q))
        for s, c, pw in self.entries:
            for a, (j, p) in enumerate(pw):
                term = tau[s] * c * p * q[j] ** (p - 1)
                for b, (jj, pp) in enumerate(pw):
                    if b != a:
                        term *= q[jj] ** pp
                g[j] += term
        return g

    def decomposition(self, tau) -> dict:
        return {
            "value": self.value(np.asarray(tau, dtype=float)),
            "tau": [float(v) for v in tau],
            "q_labels": list(self.q_labels),
            "q_bar": [float(v) for v in self.q_bar],
        }


def _split(mono):
    d = tuple((v, p) for v, p in mono if v[0] == "d")
    z = tuple((v, p) for v, p in mono if v[0] == "z")
    return d, z


def _mono_text(mono) -> str:
    return Poly({mono: 1.0}).to_text() if mono else "1"


class _Builder:
    """Collect Q coordinates and their per-cell values."""

    def __init__(self, tau: TauSpec, panel: PanelDataset):
        self.tau = tau
        self.panel = panel
        self.hist = history_arrays(panel.treatment, tau.lags)
        for term in tau.terms:
            for z in term.z_names:
                self.hist[("z", z)] = panel.covariate(z)
        self.mask = basis_mask(tau, panel.present)
        self.keys = []
        self.index = {}
        self.cells = []   # (values (N,), mask (N,)) per coordinate

    def _cell(self, mono, t):
        vals = np.ones(self.panel.n_units)
        for v, p in mono:
            x = self.hist[v][:, t - 1]
            vals = vals * (x if p == 1 else x ** p)
        return vals

    def coord(self, key):
        if key in self.index:
            return self.index[key]
        kind = key[0]
        if kind == "part":
            _, mono, t = key
            if t == "avg":
                ts = self.avg_periods
                vals = np.stack([self._cell(mono, s) for s in ts], axis=1)
                m = self.mask[:, [s - 1 for s in ts]]
                self.cells.append(("avg", vals, m))
            else:
                self.cells.append(("one", self._cell(mono, t), self.mask[:, t - 1]))
        elif kind == "mean-d":
            s = key[1]
            self.cells.append(("one", self.panel.treatment[:, s - 1], self.panel.present[:, s - 1]))
        self.index[key] = len(self.keys)
        self.keys.append(key)
        return self.index[key]

    def finish(self):
        N = self.panel.n_units
        q_bar = np.empty(len(self.keys))
        units = np.empty((N, len(self.keys)))
        complete = True
        for j, (how, vals, m) in enumerate(self.cells):
            if how == "one":
                q_bar[j] = vals[m].mean()
                complete &= bool(m.all())
                units[:, j] = np.where(m, vals, np.nan)
            else:
                per = [vals[m[:, c], c].mean() for c in range(vals.shape[1])]
                q_bar[j] = float(np.mean(per))
                complete &= bool(m.all())
                units[:, j] = vals.mean(axis=1) if m.all() else np.nan
        labels = []
        for key in self.keys:
            if key[0] == "part":
                labels.append(f"mean[{_mono_text(key[1])}]@" + ("avg" if key[2] == "avg" else f"t{key[2]}"))
            else:
                labels.append(f"mean[d]@t{key[1]}")
        return q_bar, (units if complete else None), tuple(labels), tuple(self.cells)


def valid_periods(tau: TauSpec, panel: PanelDataset, min_units: int = 1) -> tuple:
    """Periods t > max lag with at least ``min_units`` units defined."""
    mask = basis_mask(tau, panel.present)
    counts = mask.sum(axis=0)
    return tuple(t for t in range(tau.max_lag + 1, panel.n_periods + 1) if counts[t - 1] >= min_units)


def resolve_benchmark(benchmark, panel: PanelDataset):
    """Turn ``"auto"`` into ``"zero"`` or ``"mean"``."""
    if benchmark != "auto":
        return benchmark
    D = np.where(panel.present, panel.treatment, 0.0)
    never = (D == 0).all(axis=1) & panel.present.any(axis=1)
    return "zero" if never.any() else "mean"


def _eval_mono(mono, history: Sequence[float], t: int) -> float:
    out = 1.0
    for (kind, lag), p in mono:
        s = t - lag
        x = history[s - 1] if s >= 1 else 0.0
        out *= x ** p
    return out


def _check_t(tau, panel, t):
    if not tau.max_lag + 1 <= t <= panel.n_periods:
        raise RangeError(f"period {t} outside the valid range {tau.max_lag + 1}..{panel.n_periods}")


def _check_history(h, t, what):
    if len(h) != t:
        raise ShapeError(f"{what} must have length t={t} (got {len(h)})")


def build_form(tau: TauSpec, spec: EstimandSpec, panel: PanelDataset) -> EstimandForm:
    """Assemble ``f(τ, Q̄)`` for ``spec`` on ``panel``."""
    tau = tau.bind(panel.z_names)
    b = _Builder(tau, panel)
    entries = []
    kind = spec.kind
    bench = resolve_benchmark(spec.benchmark, panel) if kind.startswith("ATE") else None
    notes = []
    if kind in ("ACRW_star", "ATEW_star"):
        periods = valid_periods(tau, panel, min_units=2)
        if not periods:
            raise RangeError("no period has enough units for a time average")
        b.avg_periods = periods
    elif kind in ("ACRW_t", "ATEW_t", "ACR_t", "ATE_t"):
        _check_t(tau, panel, spec.t)
        periods = (spec.t,)
        if kind in ("ACRW_t", "ATEW_t") and not b.mask[:, spec.t - 1].any():
            raise RangeError(f"no unit is observed with a complete history at period {spec.t}")
    if kind.startswith("ATE"):
        notes.append("average treatment effects follow the same plug-in rule as the causal responses")
    if isinstance(bench, tuple):
        need = spec.t if kind == "ATE_t" else max(periods)
        if len(bench) < need:
            raise ShapeError(f"benchmark history must cover t={need} (got {len(bench)})")
        if kind == "ATE_t":
            _check_history(bench, spec.t, "benchmark history")
    if kind in ("ACR_t", "ATE_t"):
        _check_history(spec.history, spec.t, "evaluation history")

    for s, term in enumerate(tau.terms):
        poly = term.partial() if kind.startswith("ACR") else term.poly
        for mono, c in poly.items():
            dm, zm = _split(mono)
            if kind == "ACRW_star":
                if not dm and not zm:
                    entries.append((s, c, ()))
                elif not dm or not zm:
                    entries.append((s, c, ((b.coord(("part", dm or zm, "avg")), 1),)))
                else:
                    w = c / len(periods)
                    for t in periods:
                        entries.append((s, w, ((b.coord(("part", dm, t)), 1),
                                               (b.coord(("part", zm, t)), 1))))
            elif kind == "ACRW_t":
                t = spec.t
                pw = tuple((b.coord(("part", part, t)), 1) for part in (dm, zm) if part)
                entries.append((s, c, pw))
            elif kind == "ACR_t":
                t = spec.t
                coef = c * _eval_mono(dm, spec.history, t)
                pw = ((b.coord(("part", zm, t)), 1),) if zm else ()
                entries.append((s, coef, pw))
            elif kind == "ATE_t":
                t = spec.t
                if not dm:
                    continue
                zpw = ((b.coord(("part", zm, t)), 1),) if zm else ()
                if isinstance(bench, tuple):
                    coef = c * (_eval_mono(dm, spec.history, t) - _eval_mono(dm, bench, t))
                    entries.append((s, coef, zpw))
                else:
                    entries.append((s, c * _eval_mono(dm, spec.history, t), zpw))
                    if bench == "mean":
                        entries.append((s, -c, _mean_history_powers(b, dm, t) + zpw))
            else:  # ATEW_t / ATEW_star
                if not dm:
                    continue
                w = c if kind == "ATEW_t" else c / len(periods)
                for t in periods:
                    zpw = ((b.coord(("part", zm, t)), 1),) if zm else ()
                    entries.append((s, w, ((b.coord(("part", dm, t)), 1),) + zpw))
                    if isinstance(bench, tuple):
                        bv = _eval_mono(dm, bench, t)
                        if bv != 0.0:
                            entries.append((s, -w * bv, zpw))
                    elif bench == "mean":
                        entries.append((s, -w, _mean_history_powers(b, dm, t) + zpw))
    q_bar, q_units, labels, cells = b.finish()
    return EstimandForm(spec, tuple(entries), labels, q_bar, q_units, tau.S, tuple(periods),
                        bench, tuple(notes), cells)


def _mean_history_powers(b: _Builder, dm, t):
    """Powers of per-period treatment means for a benchmark at the mean history."""
    # t > max lag, so every source period is inside the sample
    return tuple((b.coord(("mean-d", t - lag)), p) for (_, lag), p in dm)


# --------------------------------------------------------------------------
# reports

@dataclass
class EstimateEntry:
    spec: EstimandSpec
    estimate: float
    form: EstimandForm
    se: float | None = None
    ci: tuple | None = None
    method: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.spec.label

    def to_dict(self) -> dict:
        d = {"estimand": self.spec.kind, "label": self.label, "t": self.spec.t,
             "estimate": self.estimate, "se": self.se,
             "ci": list(self.ci) if self.ci is not None else None, "method": self.method}
        if self.form.benchmark is not None:
            d["benchmark"] = (list(self.form.benchmark) if isinstance(self.form.benchmark, tuple)
                              else self.form.benchmark)
        d.update(self.extra)
        return d


@dataclass
class EstimateReport:
    """Point estimates keyed by (kind, t), with optional SEs/CIs."""

    entries: list
    valid_start: int
    notes: tuple = ()

    def get(self, kind: str, t: int | None = None) -> EstimateEntry:
        kind = canonical_kind(kind)
        for e in self.entries:
            if e.spec.kind == kind and e.spec.t == t:
                return e
        raise KeyError((kind, t))

    def __getitem__(self, key):
        if isinstance(key, tuple):
            return self.get(*key).estimate
        return self.get(key).estimate

    def to_dict(self) -> dict:
        return {"valid_start": self.valid_start, "entries": [e.to_dict() for e in self.entries],
                "notes": list(self.notes)}


def _tau_of(fit_or_tau):
    """(TauSpec, τ̂) from a FitResult or a (TauSpec, values) pair."""
    if isinstance(fit_or_tau, tuple):
        spec, vals = fit_or_tau
        return spec, np.asarray(vals, dtype=float)
    return fit_or_tau.spec.tau, fit_or_tau.tau_params


def estimate(fit, panel: PanelDataset, spec: EstimandSpec) -> EstimateEntry:
    tau, vals = _tau_of(fit)
    form = build_form(tau, spec, panel)
    return EstimateEntry(spec, form.value(vals), form)


def default_estimands(tau: TauSpec, panel: PanelDataset, kinds=("ACRW_t", "ACRW_star"),
                      benchmark="auto") -> list:
    out = []
    for k in kinds:
        k = canonical_kind(k)
        if k in ("ACRW_t", "ATEW_t"):
            out += [EstimandSpec(k, t=t, benchmark=benchmark if k == "ATEW_t" else None)
                    for t in valid_periods(tau, panel)]
        elif k in ("ACRW_star", "ATEW_star"):
            out.append(EstimandSpec(k, benchmark=benchmark if k == "ATEW_star" else None))
        else:
            raise SpecificationError(f"{k} needs an explicit evaluation history")
    return out


def report(fit, panel: PanelDataset, specs: Sequence[EstimandSpec] | None = None) -> EstimateReport:
    tau, _ = _tau_of(fit)
    if specs is None:
        specs = default_estimands(tau, panel)
    entries = [estimate(fit, panel, s) for s in specs]
    return EstimateReport(entries, tau.max_lag + 1)


# convenience wrappers ------------------------------------------------------

def acr_at(fit, panel: PanelDataset, t: int, history: Sequence[float]) -> float:
    """Average causal response at period t for a fixed history (Z averaged at t)."""
    return estimate(fit, panel, EstimandSpec("ACR_t", t=t, history=tuple(history))).estimate


def acrw_t(fit, panel: PanelDataset, t: int) -> float:
    return estimate(fit, panel, EstimandSpec("ACRW_t", t=t)).estimate


def acrw_star(fit, panel: PanelDataset) -> float:
    return estimate(fit, panel, EstimandSpec("ACRW_star")).estimate


def ate_t(fit, panel: PanelDataset, t: int, history: Sequence[float], benchmark="zero") -> float:
    return estimate(fit, panel, EstimandSpec("ATE_t", t=t, history=tuple(history),
                                             benchmark=benchmark)).estimate


def atew(fit, panel: PanelDataset, t: int | None = None, benchmark="auto") -> float:
    kind = "ATEW_star" if t is None else "ATEW_t"
    return estimate(fit, panel, EstimandSpec(kind, t=t, benchmark=benchmark)).estimate
