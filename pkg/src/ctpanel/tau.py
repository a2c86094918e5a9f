"""Treatment-effect function as a linear combination of polynomial basis terms.

A term is a polynomial in the current treatment ``d`` (lag 0), lagged
treatments ``lag(d, l)`` and named covariates ``z:NAME``. Keeping every term
polynomial means derivatives in the current treatment are exact.

Text grammar (terms separated by commas)::

    term   := sum
    sum    := prod (("+" | "-") prod)*
    prod   := power ("*" power)*
    power  := atom ("^" INT)?
    atom   := NUMBER | "d" | "lag(d," INT ")" | "z" | "z:" NAME | "(" sum ")"

A bare ``z`` binds to the first Z column declared by the panel.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import SpecificationError

__all__ = [
    "Poly",
    "BasisTerm",
    "TauSpec",
    "BasisValues",
    "BUILTIN_FAMILIES",
    "builtin_spec",
    "parse_tau",
    "resolve_tau",
    "eval_basis",
    "eval_basis_partials",
]


# --------------------------------------------------------------------------
# polynomials over variables ("d", lag) and ("z", name)

def _var_key(v):
    return (v[0], v[1] if v[0] == "d" else 0, "" if v[0] == "d" or v[1] is None else v[1])


def _mono(items) -> tuple:
    acc = {}
    for var, p in items:
        if p:
            acc[var] = acc.get(var, 0) + p
    return tuple(sorted(((v, p) for v, p in acc.items() if p), key=lambda vp: _var_key(vp[0])))


class Poly:
    """Sparse polynomial: mapping monomial -> coefficient.

    A monomial is a sorted tuple of ``(variable, power)`` pairs; the empty
    tuple is the constant.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping | None = None):
        clean = {}
        for m, c in (terms or {}).items():
            c = float(c)
            if c != 0.0:
                m = _mono(m)
                clean[m] = clean.get(m, 0.0) + c
        self.terms = {m: c for m, c in clean.items() if c != 0.0}

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls({(): c})

    @classmethod
    def var(cls, v) -> "Poly":
        return cls({((v, 1),): 1.0})

    def __add__(self, other: "Poly") -> "Poly":
        t = dict(self.terms)
        for m, c in other.terms.items():
            t[m] = t.get(m, 0.0) + c
        return Poly(t)

    def __neg__(self) -> "Poly":
        return Poly({m: -c for m, c in self.terms.items()})

    def __sub__(self, other: "Poly") -> "Poly":
        return self + (-other)

    def __mul__(self, other: "Poly") -> "Poly":
        t = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = _mono(m1 + m2)
                t[m] = t.get(m, 0.0) + c1 * c2
        return Poly(t)

    def __pow__(self, p: int) -> "Poly":
        out = Poly.const(1.0)
        for _ in range(p):
            out = out * self
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, Poly) and self.terms == other.terms

    def __hash__(self):
        return hash(tuple(sorted(self.terms.items(), key=repr)))

    def __repr__(self):
        return f"Poly({self.to_text()})"

    def items(self):
        return sorted(self.terms.items(), key=lambda mc: [(_var_key(v), p) for v, p in mc[0]])

    def variables(self) -> set:
        return {v for m in self.terms for v, _ in m}

    def partial(self, var) -> "Poly":
        out = {}
        for m, c in self.terms.items():
            for j, (v, p) in enumerate(m):
                if v == var:
                    rest = m[:j] + (((v, p - 1),) if p > 1 else ()) + m[j + 1:]
                    out[rest] = out.get(rest, 0.0) + c * p
        return Poly(out)

    def rename_z(self, mapping: Mapping) -> "Poly":
        out = {}
        for m, c in self.terms.items():
            nm = _mono(((("z", mapping.get(v[1], v[1])) if v[0] == "z" else v), p) for v, p in m)
            out[nm] = out.get(nm, 0.0) + c
        return Poly(out)

    def evaluate(self, values: Mapping) -> np.ndarray | float:
        """Evaluate with ``values[var]`` arrays (broadcastable)."""
        total = 0.0
        for m, c in self.items():
            term = c
            for v, p in m:
                x = values[v]
                term = term * (x if p == 1 else x ** p)
            total = total + term
        return total

    def to_text(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.items():
            factors = [_var_text(v) + (f"^{p}" if p > 1 else "") for v, p in m]
            if not factors:
                parts.append(_num(c))
            elif c == 1.0:
                parts.append("*".join(factors))
            elif c == -1.0:
                parts.append("-" + "*".join(factors))
            else:
                parts.append(_num(c) + "*" + "*".join(factors))
        s = "+".join(parts)
        return s.replace("+-", "-")


def _num(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(c)


def _var_text(v) -> str:
    if v[0] == "d":
        return "d" if v[1] == 0 else f"lag(d,{v[1]})"
    return "z" if v[1] is None else f"z:{v[1]}"


D0 = ("d", 0)


def _lag(l: int):
    return ("d", int(l))


# --------------------------------------------------------------------------
# basis terms

@dataclass(frozen=True)
class BasisTerm:
    """One known function M_s of the treatment history and Z.

    ``kind`` is descriptive (Linear, Power, LagLinear, LagFunction,
    Interaction, Product or Polynomial); the polynomial is what is evaluated.
    """

    poly: Poly
    label: str
    kind: str = ""

    def __post_init__(self):
        if not self.poly.terms:
            raise SpecificationError(f"basis term {self.label!r} is identically zero")
        if not self.kind:
            object.__setattr__(self, "kind", classify(self.poly))

    @property
    def lag(self) -> int:
        return max((v[1] for v in self.poly.variables() if v[0] == "d"), default=0)

    @property
    def lags(self) -> set:
        return {v[1] for v in self.poly.variables() if v[0] == "d"}

    @property
    def z_names(self) -> tuple:
        return tuple(sorted({v[1] for v in self.poly.variables() if v[0] == "z"}, key=str))

    def partial(self) -> Poly:
        return self.poly.partial(D0)

    # constructors mirroring the family names
    @classmethod
    def linear(cls) -> "BasisTerm":
        return cls(Poly.var(D0), "d", "Linear")

    @classmethod
    def power(cls, p: int) -> "BasisTerm":
        if p < 2:
            raise SpecificationError("Power terms need p >= 2")
        return cls(Poly.var(D0) ** p, f"d^{p}", "Power")

    @classmethod
    def lag_linear(cls, lag: int) -> "BasisTerm":
        if lag < 1:
            raise SpecificationError("lag must be >= 1")
        return cls(Poly.var(_lag(lag)), f"lag(d,{lag})", "LagLinear")

    @classmethod
    def lag_function(cls, coefs: Sequence[float], lag: int) -> "BasisTerm":
        """g(d_{t-lag}) with ``coefs[j]`` multiplying the j-th power."""
        g = _poly1(coefs, _lag(lag))
        return cls(g, g.to_text(), "LagFunction")

    @classmethod
    def interaction(cls, z: str | None = None) -> "BasisTerm":
        p = Poly.var(D0) * Poly.var(("z", z))
        return cls(p, p.to_text(), "Interaction")

    @classmethod
    def product(cls, f: Sequence[float], g: Sequence[float], lag: int) -> "BasisTerm":
        """f(d_t) * g(d_{t-lag}), both polynomials given by coefficient lists."""
        if lag < 1:
            raise SpecificationError("lag must be >= 1")
        p = _poly1(f, D0) * _poly1(g, _lag(lag))
        return cls(p, p.to_text(), "Product")


def _poly1(coefs, var) -> Poly:
    out = Poly()
    x = Poly.var(var)
    for j, c in enumerate(coefs):
        if c:
            out = out + Poly.const(c) * (x ** j)
    return out


def classify(p: Poly) -> str:
    vars_ = p.variables()
    dvars = {v for v in vars_ if v[0] == "d"}
    zvars = vars_ - dvars
    if len(p.terms) == 1:
        (m, c), = p.terms.items()
        powers = dict(m)
        if c == 1.0 and not zvars and dvars == {D0}:
            return "Linear" if powers[D0] == 1 else "Power"
        if c == 1.0 and not zvars and len(dvars) == 1 and powers[next(iter(dvars))] == 1:
            return "LagLinear"
        if c == 1.0 and len(zvars) == 1 and dvars == {D0} and powers[D0] == 1 and len(m) == 2:
            return "Interaction"
    if not zvars and dvars and D0 not in dvars and len(dvars) == 1:
        return "LagFunction"
    if not zvars and D0 in dvars and len(dvars) == 2:
        # f(d_t) * g(d_{t-l}) iff every monomial contains both variables
        if all(len(m) == 2 for m in p.terms):
            return "Product"
    return "Polynomial"


# --------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class TauSpec:
    """Ordered basis terms; term order defines parameter order."""

    terms: tuple
    name: str = "custom"

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise SpecificationError("a treatment-effect spec needs at least one term")
        labels = [t.label for t in terms]
        if len(set(labels)) != len(labels):
            raise SpecificationError(f"duplicate term labels: {labels}")
        object.__setattr__(self, "terms", terms)

    @property
    def S(self) -> int:
        return len(self.terms)

    @property
    def max_lag(self) -> int:
        return max(t.lag for t in self.terms)

    @property
    def lags(self) -> tuple:
        return tuple(sorted(set().union(*(t.lags for t in self.terms)) - {0}))

    @property
    def labels(self) -> tuple:
        return tuple(t.label for t in self.terms)

    @property
    def uses_z(self) -> bool:
        return any(t.z_names for t in self.terms)

    def to_text(self) -> str:
        return ", ".join(self.labels)

    def bind(self, z_names: Sequence[str]) -> "TauSpec":
        """Resolve bare ``z`` to the first declared Z column and check names."""
        z_names = tuple(z_names)
        needed = {z for t in self.terms for z in t.z_names}
        if not needed:
            return self
        if not z_names:
            raise SpecificationError("treatment-effect spec uses Z but the panel declares no Z columns")
        for z in needed:
            if z is not None and z not in z_names:
                raise SpecificationError(f"Z column {z!r} is not declared by the panel (have {list(z_names)})")
        mapping = {None: z_names[0]}
        terms = tuple(BasisTerm(t.poly.rename_z(mapping), t.label, t.kind) for t in self.terms)
        return TauSpec(terms, self.name)


BUILTIN_FAMILIES = {
    "homogeneous": "d",
    "quadratic": "d, d^2",
    "quadratic-interaction": "d, d^2, d*z",
    "additive-lag": "d, lag(d,1)",
    "nonlinear-additive-lag": "d^2, lag(d,1)^2",
    "multiplicative-lag": "d*lag(d,1)",
    "nonlinear-multiplicative-lag": "d*lag(d,1), d^2*lag(d,1)",
}


def builtin_spec(name: str) -> TauSpec:
    """One of the named families in :data:`BUILTIN_FAMILIES`."""
    try:
        text = BUILTIN_FAMILIES[name]
    except KeyError:
        raise SpecificationError(
            f"unknown treatment-effect family {name!r}; valid names: {', '.join(BUILTIN_FAMILIES)}"
        ) from None
    spec = parse_tau(text)
    return TauSpec(spec.terms, name)


def resolve_tau(spec_or_text) -> TauSpec:
    """Accept a TauSpec, a builtin family name, or a text spec."""
    if isinstance(spec_or_text, TauSpec):
        return spec_or_text
    s = str(spec_or_text).strip()
    if s in BUILTIN_FAMILIES:
        return builtin_spec(s)
    return parse_tau(s)


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<lag>lag\s*\(\s*d\s*,\s*(?P<lagn>\d+)\s*\))"
    r"|(?P<z>z(?::(?P<zname>[A-Za-z_][A-Za-z0-9_.]*))?)"
    r"|(?P<d>d)"
    r"|(?P<op>[-+*^()]))"
)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise SpecificationError(f"cannot parse {self.text!r} at position {pos}")
            pos = m.end()
            if m.group("num"):
                self.toks.append(("num", float(m.group("num"))))
            elif m.group("lag"):
                self.toks.append(("var", _lag(int(m.group("lagn")))))
            elif m.group("z"):
                self.toks.append(("var", ("z", m.group("zname"))))
            elif m.group("d"):
                self.toks.append(("var", D0))
            else:
                self.toks.append(("op", m.group("op")))
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Poly:
        p = self.sum()
        if self.i != len(self.toks):
            raise SpecificationError(f"unexpected token in {self.text!r}: {self.peek()[1]!r}")
        return p

    def sum(self) -> Poly:
        sign = 1.0
        if self.peek() == ("op", "-"):
            self.take()
            sign = -1.0
        p = Poly.const(sign) * self.prod()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            q = self.prod()
            p = p + q if op == "+" else p - q
        return p

    def prod(self) -> Poly:
        p = self.power()
        while self.peek() == ("op", "*"):
            self.take()
            p = p * self.power()
        return p

    def power(self) -> Poly:
        p = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            if kind != "num" or not float(val).is_integer() or val < 1:
                raise SpecificationError(f"exponent must be a positive integer in {self.text!r}")
            p = p ** int(val)
        return p

    def atom(self) -> Poly:
        kind, val = self.take()
        if kind == "num":
            return Poly.const(val)
        if kind == "var":
            return Poly.var(val)
        if (kind, val) == ("op", "("):
            p = self.sum()
            if self.take() != ("op", ")"):
                raise SpecificationError(f"unbalanced parentheses in {self.text!r}")
            return p
        raise SpecificationError(f"unexpected token {val!r} in {self.text!r}")


def parse_tau(text: str) -> TauSpec:
    """Parse a comma-separated list of polynomial terms."""
    pieces = [s.strip() for s in str(text).split(",")]
    # commas inside lag(d,1) are not term separators: re-join them
    terms, buf = [], ""
    for piece in pieces:
        buf = piece if not buf else buf + "," + piece
        if buf.count("(") == buf.count(")"):
            terms.append(buf)
            buf = ""
    if buf:
        raise SpecificationError(f"unbalanced parentheses in {text!r}")
    out = []
    for s in terms:
        if not s:
            raise SpecificationError(f"empty term in {text!r}")
        poly = _Parser(s).parse()
        if not any(v[0] == "d" for v in poly.variables()):
            raise SpecificationError(f"term {s!r} does not involve the treatment")
        out.append(BasisTerm(poly, re.sub(r"\s+", "", s)))
    return TauSpec(tuple(out))


# --------------------------------------------------------------------------
# evaluation on a panel

@dataclass(frozen=True, eq=False)
class BasisValues:
    """Basis values on the panel grid.

    ``values`` has shape (N, T, S); ``mask`` flags cells where every term is
    defined (t > max lag and the needed lagged cells are present).
    """

    values: np.ndarray
    mask: np.ndarray
    labels: tuple

    def cells(self) -> np.ndarray:
        """Defined cells stacked in (unit, time) order: shape (cells, S)."""
        return self.values[self.mask]


def history_arrays(D: np.ndarray, lags) -> dict:
    """Lagged copies of a (N, T) treatment array; undefined leading entries are NaN."""
    out = {D0: D}
    for l in lags:
        a = np.full(D.shape, np.nan)
        if l < D.shape[1]:
            a[:, l:] = D[:, :-l]
        out[_lag(l)] = a
    return out


def basis_mask(spec: TauSpec, present: np.ndarray) -> np.ndarray:
    m = present.copy()
    L = spec.max_lag
    m[:, :L] = False
    for l in spec.lags:
        m[:, l:] &= present[:, :-l]
    return m


def _values_dict(spec: TauSpec, panel) -> dict:
    vals = history_arrays(panel.treatment, spec.lags)
    for t in spec.terms:
        for z in t.z_names:
            vals[("z", z)] = panel.covariate(z)
    return vals


def _eval(spec, panel, partial: bool) -> BasisValues:
    spec = spec.bind(panel.z_names)
    vals = _values_dict(spec, panel)
    mask = basis_mask(spec, panel.present)
    N, T = panel.shape
    out = np.full((N, T, spec.S), np.nan)
    safe = {k: np.where(mask, v, 0.0) for k, v in vals.items()}
    for s, term in enumerate(spec.terms):
        poly = term.partial() if partial else term.poly
        out[:, :, s] = np.where(mask, poly.evaluate(safe) + np.zeros((N, T)), np.nan)
    return BasisValues(out, mask, spec.labels)


def eval_basis(spec: TauSpec, panel) -> BasisValues:
    """M_its on observed histories; cells with t <= L or missing lags are absent."""
    return _eval(spec, panel, False)


def eval_basis_partials(spec: TauSpec, panel) -> BasisValues:
    """∂M_its/∂d_it on observed histories, same masking as :func:`eval_basis`."""
    return _eval(spec, panel, True)
