"""Panel container, CSV ingestion and the fixed-effect eliminating transforms.

Everything is stored on a dense unit-by-period grid. Cells that were not
observed (or had a missing required field) are flagged in ``present`` and
hold NaN in the value arrays.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateKeyError,
    EmptyPeriodError,
    InsufficientPeriodsError,
    ParseError,
    SchemaError,
    ShapeError,
    SupportError,
)

__all__ = [
    "PanelDataset",
    "PanelSchema",
    "TransformedSeries",
    "load_panel",
    "first_difference",
    "cross_demean",
    "within_two_way",
    "dot_transform",
    "write_series_csv",
]

MISSING_TOKENS = frozenset({"", "na", "nan", "null", ".", "none"})
TRANSFORM_TAGS = ("raw", "diff", "diff_star", "dot", "ddot")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Unit-by-period panel with a presence mask.

    Parameters
    ----------
    outcome, treatment : ndarray, shape (N, T)
    covariates : ndarray, shape (N, T, k), optional
    present : ndarray of bool, shape (N, T), optional
        Defaults to cells where every field is finite.
    units, times : sequence, optional
        Original labels, used only for reporting.
    covariate_names : sequence of str, optional
    z_names : sequence of str
        Covariates that interaction terms of the treatment function may use.
    relaxed_support : bool
        Allow negative treatment values.
    dropped : int
        Number of input rows marked absent by the loader.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray | None = None
    present: np.ndarray | None = None
    units: tuple | None = None
    times: tuple | None = None
    covariate_names: tuple | None = None
    z_names: tuple = ()
    relaxed_support: bool = False
    dropped: int = 0

    def __post_init__(self):
        Y = np.asarray(self.outcome, dtype=float)
        D = np.asarray(self.treatment, dtype=float)
        if Y.ndim != 2 or D.shape != Y.shape:
            raise ShapeError("outcome and treatment must be aligned (N, T) arrays")
        N, T = Y.shape
        if self.covariates is None:
            X = np.zeros((N, T, 0))
        else:
            X = np.asarray(self.covariates, dtype=float)
            if X.ndim == 2:
                X = X[:, :, None]
            if X.shape[:2] != (N, T):
                raise ShapeError("covariates must have shape (N, T, k)")
        k = X.shape[2]
        if self.present is None:
            pres = np.isfinite(Y) & np.isfinite(D) & np.isfinite(X).all(axis=2)
        else:
            pres = np.asarray(self.present, dtype=bool)
            if pres.shape != (N, T):
                raise ShapeError("present mask must have shape (N, T)")
            bad = pres & ~(np.isfinite(Y) & np.isfinite(D) & np.isfinite(X).all(axis=2))
            if bad.any():
                i, t = np.argwhere(bad)[0]
                raise ParseError(f"non-finite value in present cell (unit index {i}, period {t + 1})")
        Y = np.where(pres, Y, np.nan)
        D = np.where(pres, D, np.nan)
        X = np.where(pres[:, :, None], X, np.nan)
        if not self.relaxed_support and (D[pres] < 0).any():
            raise SupportError(
                "negative treatment values found; declare relaxed_support to allow them"
            )
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(k))
        names = tuple(str(s) for s in names)
        if len(names) != k or len(set(names)) != k:
            raise SchemaError("covariate names must be unique and match the covariate width")
        z = tuple(str(s) for s in self.z_names)
        for s in z:
            if s not in names:
                raise SchemaError(f"Z column {s!r} is not among the covariates")
        units = tuple(range(1, N + 1)) if self.units is None else tuple(self.units)
        times = tuple(range(1, T + 1)) if self.times is None else tuple(self.times)
        if len(units) != N or len(times) != T:
            raise ShapeError("unit/time labels do not match array shape")
        if len(set(units)) != N or len(set(times)) != T:
            raise DuplicateKeyError("unit and time labels must be unique")
        object.__setattr__(self, "outcome", _readonly(Y))
        object.__setattr__(self, "treatment", _readonly(D))
        object.__setattr__(self, "covariates", _readonly(X))
        object.__setattr__(self, "present", _readonly(pres))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "z_names", z)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "times", times)

    @property
    def n_units(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.outcome.shape

    @property
    def k(self) -> int:
        return self.covariates.shape[2]

    @property
    def is_balanced(self) -> bool:
        return bool(self.present.all())

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None
        return self.covariates[:, :, j]

    def take_units(self, idx) -> "PanelDataset":
        """Panel made of the rows ``idx`` (duplicates allowed); units relabelled 1..n."""
        idx = np.asarray(idx, dtype=np.intp)
        return PanelDataset(
            self.outcome[idx], self.treatment[idx], self.covariates[idx], self.present[idx],
            times=self.times, covariate_names=self.covariate_names, z_names=self.z_names,
            relaxed_support=self.relaxed_support,
        )

    def records(self) -> Iterable[tuple]:
        """Present cells as (unit, time, y, d, *x) tuples in (unit, time) order."""
        for i, u in enumerate(self.units):
            for t, lab in enumerate(self.times):
                if self.present[i, t]:
                    yield (u, lab, self.outcome[i, t], self.treatment[i, t], *self.covariates[i, t])

    def write_csv(self, path, unit="unit", time="time", outcome="y", treatment="d") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([unit, time, outcome, treatment, *self.covariate_names])
            for rec in self.records():
                w.writerow([rec[0], rec[1], *(repr(float(v)) for v in rec[2:])])


# --------------------------------------------------------------------------
# CSV ingestion

@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for :func:`load_panel`."""

    unit: str = "unit"
    time: str = "time"
    outcome: str = "y"
    treatment: str = "d"
    covariates: tuple = ()
    z: tuple = ()
    relaxed_support: bool = False

    @classmethod
    def from_mapping(cls, m: Mapping) -> "PanelSchema":
        kw = dict(m)
        for key in ("covariates", "z"):
            v = kw.get(key, ())
            if isinstance(v, str):
                v = [s.strip() for s in v.split(",") if s.strip()]
            kw[key] = tuple(v)
        if isinstance(kw.get("relaxed_support"), str):
            kw["relaxed_support"] = kw["relaxed_support"].lower() in ("1", "true", "yes")
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_pairs(cls, pairs: Sequence[str]) -> "PanelSchema":
        """Parse ``key=value`` strings, e.g. ``["unit=country", "covariates=a,b"]``."""
        m = {}
        for p in pairs:
            if "=" not in p:
                raise SchemaError(f"schema entry {p!r} is not key=value")
            k, v = p.split("=", 1)
            m[k.strip()] = v.strip()
        return cls.from_mapping(m)


def _sort_labels(labels):
    try:
        return sorted(labels, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(labels)


def _parse_float(tok: str, column: str, line: int) -> float:
    s = tok.strip()
    if s.lower() in MISSING_TOKENS:
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"line {line}: non-numeric value {tok!r} in column {column!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"line {line}: non-finite value {tok!r} in column {column!r}")
    return v


def load_panel(path, schema: PanelSchema | Mapping | None = None) -> PanelDataset:
    """Read a long-format CSV into a :class:`PanelDataset`.

    Cells with a missing required field are kept on the grid but marked
    absent; their number is stored in ``dropped``. Line numbers in error
    messages count the header as line 1.
    """
    if schema is None:
        schema = PanelSchema()
    elif not isinstance(schema, PanelSchema):
        schema = PanelSchema.from_mapping(schema)
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        needed = [schema.unit, schema.time, schema.outcome, schema.treatment, *schema.covariates]
        for name in needed:
            if name not in header:
                raise SchemaError(f"column {name!r} not found in header of {path}")
        for name in schema.z:
            if name not in schema.covariates:
                raise SchemaError(f"Z column {name!r} must also be listed as a covariate")
        pos = [header.index(n) for n in needed]
        rows = {}
        dropped = 0
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            u, t = row[pos[0]].strip(), row[pos[1]].strip()
            if u.lower() in MISSING_TOKENS or t.lower() in MISSING_TOKENS:
                dropped += 1
                continue
            if (u, t) in rows:
                raise DuplicateKeyError(f"line {line}: duplicate (unit, time) = ({u}, {t})")
            vals = [_parse_float(row[p], needed[j + 2], line) for j, p in enumerate(pos[2:])]
            if any(math.isnan(v) for v in vals):
                dropped += 1
                vals = None
            elif vals[1] < 0 and not schema.relaxed_support:
                raise SupportError(
                    f"line {line}: negative treatment {vals[1]!r}; set relaxed_support to allow it"
                )
            rows[(u, t)] = vals
    units = _sort_labels({u for u, _ in rows})
    times = _sort_labels({t for _, t in rows})
    ui = {u: i for i, u in enumerate(units)}
    ti = {t: j for j, t in enumerate(times)}
    N, T, k = len(units), len(times), len(schema.covariates)
    Y = np.full((N, T), np.nan)
    D = np.full((N, T), np.nan)
    X = np.full((N, T, k), np.nan)
    pres = np.zeros((N, T), dtype=bool)
    for (u, t), vals in rows.items():
        if vals is None:
            continue
        i, j = ui[u], ti[t]
        Y[i, j], D[i, j] = vals[0], vals[1]
        X[i, j] = vals[2:]
        pres[i, j] = True
    return PanelDataset(
        Y, D, X, pres, units=tuple(units), times=tuple(times),
        covariate_names=tuple(schema.covariates), z_names=tuple(schema.z),
        relaxed_support=schema.relaxed_support, dropped=dropped,
    )


# --------------------------------------------------------------------------
# transforms

@dataclass(frozen=True, eq=False)
class TransformedSeries:
    """Values on the panel grid plus the transform that produced them.

    ``start`` is the first period (1-based) at which the transform can be
    defined, e.g. 2 for differenced series.
    """

    values: np.ndarray
    present: np.ndarray
    tag: str = "raw"
    start: int = 1
    notes: tuple = field(default=())

    def __post_init__(self):
        if self.tag not in TRANSFORM_TAGS:
            raise ValueError(f"unknown transform tag {self.tag!r}")
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.present, dtype=bool)
        if p.shape != v.shape[:2]:
            raise ShapeError("presence mask does not match values")
        object.__setattr__(self, "values", _readonly(np.where(_expand(p, v), v, np.nan)))
        object.__setattr__(self, "present", _readonly(p))

    def to_rows(self, panel: PanelDataset | None = None):
        units = panel.units if panel is not None else range(1, self.values.shape[0] + 1)
        times = panel.times if panel is not None else range(1, self.values.shape[1] + 1)
        for i, u in enumerate(units):
            for t, lab in enumerate(times):
                if self.present[i, t]:
                    yield u, lab, float(self.values[i, t]), self.tag


def write_series_csv(series: TransformedSeries, path, panel: PanelDataset | None = None) -> None:
    """Export as CSV with columns (unit, time, value, transform_tag)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "value", "transform_tag"])
        for u, t, v, tag in series.to_rows(panel):
            w.writerow([u, t, repr(v), tag])


def _expand(mask, values):
    return mask.reshape(mask.shape + (1,) * (values.ndim - mask.ndim))


def _masked_mean(values, mask, axis):
    m = _expand(mask, values)
    s = np.where(m, values, 0.0).sum(axis=axis)
    c = m.sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s / c


def _coerce(panel: PanelDataset | None, series) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, TransformedSeries):
        vals, pres = series.values, series.present
    else:
        vals = np.asarray(series, dtype=float)
        pres = panel.present if panel is not None else np.isfinite(vals)
        if vals.ndim > 2:
            pres = pres & np.isfinite(vals).reshape(vals.shape[:2] + (-1,)).all(axis=2)
        else:
            pres = pres & np.isfinite(vals)
    if panel is not None and vals.shape[:2] != panel.shape:
        raise ShapeError(f"series shape {vals.shape[:2]} does not match panel {panel.shape}")
    return vals, pres


def diff_array(values, mask):
    """First difference on the grid; column 0 is absent."""
    out = np.full(values.shape, np.nan)
    out[:, 1:] = values[:, 1:] - values[:, :-1]
    m = np.zeros(mask.shape, dtype=bool)
    m[:, 1:] = mask[:, 1:] & mask[:, :-1]
    return np.where(_expand(m, out), out, np.nan), m


def cross_demean_array(values, mask):
    mu = _masked_mean(values, mask, axis=0)
    out = values - mu[None]
    return np.where(_expand(mask, out), out, 0.0)


def within_array(values, mask, iterate=False, tol=1e-13, max_iter=10_000):
    """Two-way within transform on present cells; absent cells are returned as 0.

    With ``iterate=True`` on an unbalanced mask the unit and period means are
    swept alternately until convergence, giving the exact two-way dummy
    residual. On balanced masks one pass is already exact.
    """
    v = np.where(_expand(mask, values), values, 0.0)
    if mask.all() or not iterate:
        ui = _masked_mean(v, mask, axis=1)
        tj = _masked_mean(v, mask, axis=0)
        mm = _expand(mask, v)
        g = v.sum(axis=(0, 1)) / mm.sum(axis=(0, 1))
        out = v - ui[:, None] - tj[None] + g
        return np.where(mm, out, 0.0)
    r = v.copy()
    mm = _expand(mask, v)
    scale = max(1.0, float(np.abs(r).max(initial=0.0)))
    for _ in range(max_iter):
        ui = np.nan_to_num(_masked_mean(r, mask, axis=1))
        r = np.where(mm, r - ui[:, None], 0.0)
        tj = np.nan_to_num(_masked_mean(r, mask, axis=0))
        r = np.where(mm, r - tj[None], 0.0)
        if max(np.abs(ui).max(initial=0.0), np.abs(tj).max(initial=0.0)) <= tol * scale:
            break
    return r


def first_difference(panel: PanelDataset, series) -> TransformedSeries:
    """ΔV_it = V_it − V_i,t−1 for t ≥ 2; absent when either operand is absent."""
    if panel.n_periods < 2:
        raise InsufficientPeriodsError("first difference needs at least 2 periods")
    vals, pres = _coerce(panel, series)
    out, m = diff_array(vals, pres)
    return TransformedSeries(out, m, "diff", 2)


def cross_demean(series: TransformedSeries) -> TransformedSeries:
    """Subtract the period-wise mean over present units."""
    if not isinstance(series, TransformedSeries):
        vals = np.asarray(series, dtype=float)
        series = TransformedSeries(vals, np.isfinite(vals), "raw", 1)
    vals, pres = series.values, series.present
    counts = pres.sum(axis=0)
    empty = [t + 1 for t in range(series.start - 1, vals.shape[1]) if counts[t] == 0]
    if empty:
        raise EmptyPeriodError(f"no present units in period(s) {empty}")
    out = cross_demean_array(vals, pres)
    tag = {"diff": "diff_star", "dot": "ddot"}.get(series.tag, series.tag)
    notes = series.notes
    if not pres[:, series.start - 1:].all() and "unbalanced: present-cell means" not in notes:
        notes = notes + ("unbalanced: present-cell means",)
    return TransformedSeries(out, pres, tag, series.start, notes)


def within_two_way(panel: PanelDataset, series, iterate: bool = False) -> TransformedSeries:
    """V̈_it = V_it − V_i· − V_·t + V_·· using present-cell means."""
    vals, pres = _coerce(panel, series)
    out = within_array(vals, pres, iterate=iterate)
    notes = () if pres.all() else ("unbalanced: present-cell means",)
    return TransformedSeries(out, pres, "ddot", 1, notes)


def dot_transform(panel: PanelDataset, series) -> TransformedSeries:
    """Unit demeaning V̇_it = V_it − V_i· over present periods."""
    vals, pres = _coerce(panel, series)
    mu = _masked_mean(vals, pres, axis=1)
    out = np.where(_expand(pres, vals), vals - mu[:, None], np.nan)
    return TransformedSeries(out, pres, "dot", 1)
