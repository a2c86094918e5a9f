"""Period-indexed causal DAGs: path blocking, d-separation, the backdoor
criterion and graphical checks of the sequential conditional independence
assumptions (SCIA-I, SCIA-II).

Text format, one statement per line (``#`` starts a comment)::

    node X1 role=covariate period=1
    node D1 role=treatment period=1
    node Y1 role=outcome period=1
    node U role=unit-effect
    X1 -> D1
    D1 -> Y1

Roles: ``treatment``, ``outcome``, ``covariate``, ``unit-effect``,
``time-effect`` and ``latent``.
"""
from __future__ import annotations

import re
from collections import deque
from importlib import resources
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .errors import (
    ArgumentError,
    CycleError,
    DagError,
    NodeReferenceError,
    PathError,
    SchemaError,
)

__all__ = [
    "ROLES",
    "Node",
    "Dag",
    "parse_dag",
    "load_dag",
    "builtin_dag",
    "BUILTIN_GRAPHS",
    "is_blocked",
    "d_separated",
    "open_path",
    "backdoor_satisfied",
    "SciaCheck",
    "SciaReport",
    "check_scia",
    "path_text",
    "ENUMERATION_MAX_NODES",
]

ROLES = ("treatment", "outcome", "covariate", "unit-effect", "time-effect", "latent")
_ROLE_ALIASES = {
    "d": "treatment", "y": "outcome", "x": "covariate", "u": "unit-effect",
    "v": "time-effect", "unit": "unit-effect", "time": "time-effect",
}
# effects the fixed-effects models absorb; conditioned on in SCIA checks
EFFECT_ROLES = ("unit-effect", "time-effect")
UNOBSERVED_ROLES = ("unit-effect", "time-effect", "latent")
ENUMERATION_MAX_NODES = 24
BUILTIN_GRAPHS = ("two_period", "two_period_unit_effect", "two_period_two_way_effects")


@dataclass(frozen=True)
class Node:
    name: str
    role: str
    period: int | None = None

    @property
    def observed(self) -> bool:
        return self.role not in UNOBSERVED_ROLES


class Dag:
    """Immutable DAG with role and period tags on nodes.

    Acyclicity and the temporal ordering of edges are checked on
    construction.
    """

    def __init__(self, nodes: Iterable[Node], edges: Iterable[tuple]):
        nodes = list(nodes)
        self.nodes = {}
        for n in nodes:
            if n.name in self.nodes:
                raise DagError(f"node {n.name!r} declared twice")
            if n.role not in ROLES:
                raise DagError(f"node {n.name!r}: unknown role {n.role!r}; valid roles: {', '.join(ROLES)}")
            self.nodes[n.name] = n
        seen = set()
        for a, b in edges:
            for v in (a, b):
                if v not in self.nodes:
                    raise NodeReferenceError(f"edge {a} -> {b} refers to undeclared node {v!r}")
            if a == b:
                raise CycleError(f"self-loop on {a!r}", (a, a))
            seen.add((a, b))
        self.edges = tuple(sorted(seen))
        self.parents = {v: set() for v in self.nodes}
        self.children = {v: set() for v in self.nodes}
        for a, b in self.edges:
            self.parents[b].add(a)
            self.children[a].add(b)
        self.parents = {v: frozenset(s) for v, s in self.parents.items()}
        self.children = {v: frozenset(s) for v, s in self.children.items()}
        self.order = self._toposort()
        self.rank = {v: i for i, v in enumerate(self.order)}
        self._check_roles()
        self._desc_cache = {}

    # ---------------------------------------------------------------- checks
    def _toposort(self) -> tuple:
        indeg = {v: len(p) for v, p in self.parents.items()}
        ready = sorted(v for v, k in indeg.items() if k == 0)
        out = []
        while ready:
            v = ready.pop(0)
            out.append(v)
            for c in sorted(self.children[v]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(out) < len(self.nodes):
            cycle = self._find_cycle({v for v, k in indeg.items() if k > 0})
            raise CycleError("graph has a cycle: " + " -> ".join(cycle), cycle)
        return tuple(out)

    def _find_cycle(self, candidates: set) -> tuple:
        state = {}
        stack = []

        def visit(v):
            state[v] = 1
            stack.append(v)
            for c in sorted(self.children[v] & candidates):
                if state.get(c) == 1:
                    return tuple(stack[stack.index(c):]) + (c,)
                if c not in state:
                    found = visit(c)
                    if found:
                        return found
            stack.pop()
            state[v] = 2
            return None

        for v in sorted(candidates):
            if v not in state:
                found = visit(v)
                if found:
                    return found
        return ()

    def _check_roles(self):
        taken = {}
        for n in self.nodes.values():
            if n.role in ("treatment", "outcome", "covariate") and n.period is None:
                raise DagError(f"node {n.name!r} with role {n.role} needs a period")
            if n.role in ("treatment", "outcome"):
                key = (n.role, n.period)
                if key in taken:
                    raise DagError(f"two {n.role} nodes in period {n.period}: {taken[key]}, {n.name}")
                taken[key] = n.name
        for a, b in self.edges:
            na, nb = self.nodes[a], self.nodes[b]
            if na.role in UNOBSERVED_ROLES or na.period is None or nb.period is None:
                continue
            if na.period > nb.period:
                raise DagError(f"edge {a} -> {b} points from period {na.period} back to {nb.period}")

    # ------------------------------------------------------------- queries
    def __len__(self):
        return len(self.nodes)

    def __contains__(self, name):
        return name in self.nodes

    def __eq__(self, other):
        return isinstance(other, Dag) and self.nodes == other.nodes and self.edges == other.edges

    def __repr__(self):
        return f"Dag({len(self.nodes)} nodes, {len(self.edges)} edges)"

    def adjacent(self, a: str, b: str) -> bool:
        return b in self.children[a] or b in self.parents[a]

    def neighbors(self, v: str) -> frozenset:
        return self.parents[v] | self.children[v]

    def descendants(self, v: str) -> frozenset:
        """Nodes reachable by a directed path from ``v``, excluding ``v``."""
        if v not in self._desc_cache:
            seen, todo = set(), list(self.children[v])
            while todo:
                c = todo.pop()
                if c not in seen:
                    seen.add(c)
                    todo.extend(self.children[c])
            self._desc_cache[v] = frozenset(seen)
        return self._desc_cache[v]

    def ancestors_of(self, names: Iterable[str]) -> frozenset:
        """``names`` together with all their ancestors."""
        seen, todo = set(), list(names)
        while todo:
            v = todo.pop()
            if v not in seen:
                seen.add(v)
                todo.extend(self.parents[v])
        return frozenset(seen)

    def find(self, role: str, period: int | None = None) -> tuple:
        return tuple(sorted(
            (n.name for n in self.nodes.values()
             if n.role == role and (period is None or n.period == period)),
            key=self.rank.__getitem__))

    @property
    def periods(self) -> tuple:
        return tuple(sorted({n.period for n in self.nodes.values() if n.role == "treatment"}))

    # ----------------------------------------------------------- variants
    def without_edges(self, edges: Iterable[tuple]) -> "Dag":
        drop = set(edges)
        missing = drop - set(self.edges)
        if missing:
            raise NodeReferenceError(f"edges not in graph: {sorted(missing)}")
        return Dag(self.nodes.values(), [e for e in self.edges if e not in drop])

    def with_edges(self, edges: Iterable[tuple]) -> "Dag":
        return Dag(self.nodes.values(), list(self.edges) + list(edges))

    def without_out_edges(self, names: Iterable[str]) -> "Dag":
        names = set(names)
        return Dag(self.nodes.values(), [e for e in self.edges if e[0] not in names])

    def to_text(self) -> str:
        lines = []
        for v in self.order:
            n = self.nodes[v]
            lines.append(f"node {n.name} role={n.role}" + (f" period={n.period}" if n.period is not None else ""))
        lines += [f"{a} -> {b}" for a, b in sorted(self.edges, key=lambda e: (self.rank.__getitem__(e[0]),
                                                                              self.rank.__getitem__(e[1])))]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# parsing

_NODE = re.compile(r"^node\s+(?P<name>[A-Za-z_][\w.]*)(?P<attrs>(\s+\w+=\S+)*)\s*$")
_EDGE = re.compile(r"^(?P<a>[A-Za-z_][\w.]*)\s*->\s*(?P<b>[A-Za-z_][\w.]*)\s*$")


def parse_dag(text: str) -> Dag:
    """Parse the edge-list format described in the module docstring."""
    nodes, edges = [], []
    for lineno, raw in enumerate(str(text).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _NODE.match(line)
        if m:
            attrs = dict(kv.split("=", 1) for kv in m.group("attrs").split())
            unknown = set(attrs) - {"role", "period"}
            if unknown:
                raise DagError(f"line {lineno}: unknown attribute(s) {sorted(unknown)}")
            if "role" not in attrs:
                raise DagError(f"line {lineno}: node {m.group('name')!r} needs role=...")
            role = _ROLE_ALIASES.get(attrs["role"].lower(), attrs["role"].lower())
            period = None
            if "period" in attrs:
                try:
                    period = int(attrs["period"])
                except ValueError:
                    raise DagError(f"line {lineno}: period must be an integer") from None
            nodes.append(Node(m.group("name"), role, period))
            continue
        m = _EDGE.match(line)
        if m:
            edges.append((m.group("a"), m.group("b")))
            continue
        raise DagError(f"line {lineno}: cannot parse {raw.strip()!r}")
    return Dag(nodes, edges)


def load_dag(path) -> Dag:
    with open(path, encoding="utf-8") as fh:
        return parse_dag(fh.read())


def builtin_dag(name: str) -> Dag:
    """One of the bundled two-period graphs, by name (see :data:`BUILTIN_GRAPHS`)."""
    if name not in BUILTIN_GRAPHS:
        raise ArgumentError(f"unknown builtin graph {name!r}; choose from {', '.join(BUILTIN_GRAPHS)}")
    return parse_dag(resources.files("ctpanel").joinpath("data", f"{name}.dag").read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# blocking and d-separation

def _check_names(dag: Dag, names, what: str) -> frozenset:
    names = frozenset([names] if isinstance(names, str) else names)
    missing = sorted(n for n in names if n not in dag)
    if missing:
        raise NodeReferenceError(f"{what}: unknown node(s) {missing}")
    return names


def is_blocked(dag: Dag, path: Sequence[str], Z: Iterable[str]) -> bool:
    """Whether ``Z`` blocks ``path``.

    A path is blocked iff some interior node is the middle of a chain or
    fork and lies in Z, or is a collider such that neither it nor any of
    its descendants lies in Z.
    """
    path = list(path)
    Z = _check_names(dag, Z, "conditioning set")
    if len(path) < 2:
        raise PathError("a path needs at least two nodes")
    _check_names(dag, path, "path")
    if len(set(path)) != len(path):
        raise PathError(f"path repeats a node: {path}")
    for a, b in zip(path, path[1:]):
        if not dag.adjacent(a, b):
            raise PathError(f"{a} and {b} are not adjacent")
    for prev, mid, nxt in zip(path, path[1:], path[2:]):
        if _triple_blocks(dag, prev, mid, nxt, Z, None):
            return True
    return False


def _triple_blocks(dag, prev, mid, nxt, Z, anc_z) -> bool:
    collider = prev in dag.parents[mid] and nxt in dag.parents[mid]
    if not collider:
        return mid in Z
    if anc_z is not None:
        return mid not in anc_z
    return mid not in Z and not (dag.descendants(mid) & Z)


def _open_paths(dag: Dag, sources, targets, Z, first_into: bool = False) -> Iterator[list]:
    """Yield simple paths from a source to a target that Z leaves open.

    Prefixes already blocked at an interior node are pruned, since blocking
    cannot be undone by extending a path. With ``first_into`` only paths
    whose first edge points into the source are produced.
    """
    anc_z = dag.ancestors_of(Z)
    targets = frozenset(targets)
    for s in sorted(sources, key=dag.rank.__getitem__):
        first = sorted(dag.parents[s] if first_into else dag.neighbors(s), key=dag.rank.__getitem__)
        stack = [(s, [s, v]) for v in reversed(first)]
        while stack:
            _, path = stack.pop()
            v = path[-1]
            if len(path) >= 3 and _triple_blocks(dag, path[-3], path[-2], v, Z, anc_z):
                continue
            if v in targets:
                yield path
                continue
            on_path = set(path)
            for w in sorted(dag.neighbors(v), key=dag.rank.__getitem__, reverse=True):
                if w not in on_path:
                    stack.append((s, path + [w]))


def _reachable(dag: Dag, sources, Z) -> frozenset:
    """Nodes d-connected to ``sources`` given Z (Bayes-ball reachability)."""
    anc_z = dag.ancestors_of(Z)
    visited, reached = set(), set()
    todo = deque((s, "up") for s in sources)
    while todo:
        v, d = todo.popleft()
        if (v, d) in visited:
            continue
        visited.add((v, d))
        if v not in Z:
            reached.add(v)
        if d == "up" and v not in Z:
            todo.extend((p, "up") for p in dag.parents[v])
            todo.extend((c, "down") for c in dag.children[v])
        elif d == "down":
            if v not in Z:
                todo.extend((c, "down") for c in dag.children[v])
            if v in anc_z:
                todo.extend((p, "up") for p in dag.parents[v])
    return frozenset(reached)


def d_separated(dag: Dag, A, B, Z=(), method: str = "auto") -> bool:
    """Whether Z d-separates every node of A from every node of B.

    Parameters
    ----------
    method : {"auto", "enumerate", "reachability"}
        ``auto`` runs both algorithms on graphs with at most
        :data:`ENUMERATION_MAX_NODES` nodes and insists they agree; larger
        graphs use reachability only.
    """
    A = _check_names(dag, A, "first set")
    B = _check_names(dag, B, "second set")
    Z = _check_names(dag, Z, "conditioning set")
    if A & B or A & Z or B & Z:
        raise ArgumentError("A, B and Z must be disjoint")
    if method not in ("auto", "enumerate", "reachability"):
        raise ArgumentError(f"unknown method {method!r}")
    if not A or not B:
        return True
    if method == "enumerate":
        return next(_open_paths(dag, A, B, Z), None) is None
    by_reach = not (_reachable(dag, A, Z) & B)
    if method == "auto" and len(dag) <= ENUMERATION_MAX_NODES:
        by_enum = next(_open_paths(dag, A, B, Z), None) is None
        if by_enum != by_reach:
            raise RuntimeError(f"d-separation algorithms disagree for {sorted(A)} / {sorted(B)} | {sorted(Z)}")
    return by_reach


def open_path(dag: Dag, A, B, Z=()) -> tuple | None:
    """One path from A to B left open by Z, or None if d-separated."""
    A = _check_names(dag, A, "first set")
    B = _check_names(dag, B, "second set")
    Z = _check_names(dag, Z, "conditioning set")
    p = next(_open_paths(dag, A, B, Z), None)
    return None if p is None else tuple(p)


def backdoor_satisfied(dag: Dag, T: str, Y: str, X: Iterable[str]) -> bool:
    """Backdoor criterion: no member of X descends from T, and X blocks every
    path between T and Y that starts with an arrow into T."""
    X = _check_names(dag, X, "adjustment set")
    _check_names(dag, (T, Y), "treatment/outcome")
    if T == Y:
        raise ArgumentError("treatment and outcome must differ")
    if T in X or Y in X:
        raise ArgumentError("the adjustment set may not contain the treatment or outcome")
    if X & dag.descendants(T):
        return False
    return next(_open_paths(dag, [T], [Y], X, first_into=True), None) is None


# --------------------------------------------------------------------------
# SCIA checks

def path_text(dag: Dag, path: Sequence[str]) -> str:
    """Render a path with edge directions, e.g. ``D1 <- V1 -> Y1``."""
    out = [path[0]]
    for a, b in zip(path, path[1:]):
        out.append(("-> " if b in dag.children[a] else "<- ") + b)
    return " ".join(out)


@dataclass(frozen=True)
class SciaCheck:
    """One conditional-independence statement checked at one period."""

    assumption: str
    period: int
    source: tuple
    targets: tuple
    conditioning: tuple
    latent: tuple
    unmeasured: tuple
    holds: bool
    witness: tuple | None
    witness_text: str | None = None

    def statement(self) -> str:
        return (f"{{{', '.join(self.source)}}} _||_ {{{', '.join(self.targets)}}}"
                f" | {{{', '.join(self.conditioning)}}}")

    def to_dict(self) -> dict:
        return {
            "assumption": self.assumption, "period": self.period,
            "source": list(self.source), "targets": list(self.targets),
            "conditioning": list(self.conditioning), "latent_conditioned": list(self.latent),
            "unmeasured": list(self.unmeasured), "holds": self.holds,
            "witness": None if self.witness is None else list(self.witness),
            "witness_text": self.witness_text,
        }


@dataclass(frozen=True)
class SciaReport:
    assumption: str
    checks: tuple
    latent_policy: str
    notes: tuple = field(default=())

    @property
    def holds(self) -> bool:
        return all(c.holds for c in self.checks)

    @property
    def verdict(self) -> str:
        return f"{self.assumption}: {'holds' if self.holds else 'fails'}"

    def failures(self) -> tuple:
        return tuple(c for c in self.checks if not c.holds)

    def latent(self) -> tuple:
        """Latent nodes used as conditioning variables somewhere in the report."""
        return tuple(sorted({v for c in self.checks for v in c.latent}))

    def to_dict(self) -> dict:
        return {
            "assumption": self.assumption, "holds": self.holds, "latent_policy": self.latent_policy,
            "latent_conditioned": list(self.latent()),
            "checks": [c.to_dict() for c in self.checks], "notes": list(self.notes),
        }

    def to_table(self) -> str:
        rows = [("period", "check", "verdict", "conditioning set", "witness")]
        for c in self.checks:
            rows.append((str(c.period), c.assumption, "holds" if c.holds else "FAILS",
                         ", ".join(c.conditioning) or "-",
                         c.witness_text or "-"))
        widths = [max(len(r[j]) for r in rows) for j in range(4)]
        lines = [self.verdict]
        for r in rows:
            lines.append("  ".join(r[j].ljust(widths[j]) for j in range(4)) + "  " + r[4])
        if self.latent():
            lines.append("latent conditioning variables (not observable in data): " + ", ".join(self.latent()))
        for c in self.checks:
            if c.unmeasured:
                lines.append(f"period {c.period} ({c.assumption}): {', '.join(c.unmeasured)} has an edge "
                             "into a tested treatment and is treated as an unmeasured confounder")
        return "\n".join(lines)


_ASSUMPTIONS = {"scia1": "SCIA-I", "scia-i": "SCIA-I", "scia2": "SCIA-II", "scia-ii": "SCIA-II"}
LATENT_POLICIES = ("exclude-confounders", "condition-all")


def _sorted(dag, names) -> tuple:
    return tuple(sorted(names, key=dag.rank.__getitem__))


def _conditioning(dag, base: set, treated: set, policy: str):
    """Split the nominal conditioning set into the usable part, the latent
    nodes it contains and the effects dropped as unmeasured confounders."""
    dropped = set()
    if policy == "exclude-confounders":
        dropped = {v for v in base if dag.nodes[v].role in EFFECT_ROLES
                   and dag.children[v] & treated}
    use = base - dropped
    latent = {v for v in use if not dag.nodes[v].observed}
    return _sorted(dag, use), _sorted(dag, latent), _sorted(dag, dropped)


def _nodes_upto(dag, role, t, strict=False):
    return {n.name for n in dag.nodes.values() if n.role == role and n.period is not None
            and (n.period < t if strict else n.period <= t)}


def check_scia(dag: Dag, assumption: str = "SCIA-I",
               latent_policy: str = "exclude-confounders") -> SciaReport:
    """Graphical check of SCIA-I or SCIA-II.

    SCIA-I at period t: in the graph with the out-edges of D_t removed, D_t
    is d-separated from Y_t and from every later outcome, covariate and time
    effect given the covariates up to t, treatments before t, time effects up
    to t and the unit effect. SCIA-II repeats those checks and adds, at each
    t, Y_t d-separated from the later treatments (their out-edges removed)
    given all covariates and time effects, treatments up to t and the unit
    effect.

    Unit and time effects sit inside the conditioning sets because the
    fixed-effects models condition on them. Under the default
    ``latent_policy="exclude-confounders"`` an effect with an edge into a
    treatment being tested is treated as an unmeasured confounder instead;
    ``"condition-all"`` conditions on every effect node regardless.
    """
    key = str(assumption).lower().replace("_", "-")
    if key not in _ASSUMPTIONS:
        raise ArgumentError(f"unknown assumption {assumption!r}; use SCIA-I or SCIA-II")
    name = _ASSUMPTIONS[key]
    if latent_policy not in LATENT_POLICIES:
        raise ArgumentError(f"unknown latent policy {latent_policy!r}; use one of {LATENT_POLICIES}")
    periods = dag.periods
    if not periods:
        raise SchemaError("the graph declares no treatment nodes")
    for t in periods:
        if not dag.find("outcome", t):
            raise SchemaError(f"period {t} has a treatment node but no outcome node")
    T = periods[-1]
    units = {n.name for n in dag.nodes.values() if n.role == "unit-effect"}
    treat = {t: dag.find("treatment", t)[0] for t in periods}
    outcome = {t: dag.find("outcome", t)[0] for t in periods}
    untimed_v = {n.name for n in dag.nodes.values() if n.role == "time-effect" and n.period is None}
    notes = []
    if untimed_v:
        notes.append(f"time effects without a period are conditioned at every t: {sorted(untimed_v)}")
    checks = []

    for t in periods:
        d = treat[t]
        base = (_nodes_upto(dag, "covariate", t) | {treat[s] for s in periods if s < t}
                | _nodes_upto(dag, "time-effect", t) | untimed_v | units)
        cond, latent, dropped = _conditioning(dag, base, {d}, latent_policy)
        later = {n.name for n in dag.nodes.values()
                 if n.role in ("outcome", "covariate", "time-effect")
                 and n.period is not None and n.period > t}
        targets = _sorted(dag, ({outcome[t]} | later) - set(cond))
        g = dag.without_out_edges([d])
        w = open_path(g, [d], targets, cond)
        checks.append(SciaCheck("SCIA-I", t, (d,), targets, cond, latent, dropped, w is None, w,
                                path_text(g, w) if w else None))

    if name == "SCIA-II":
        all_x = _nodes_upto(dag, "covariate", T)
        all_v = {n.name for n in dag.nodes.values() if n.role == "time-effect"}
        for t in periods:
            future = {treat[s] for s in periods if s > t}
            if not future:
                continue
            base = all_x | all_v | units | {treat[s] for s in periods if s <= t}
            cond, latent, dropped = _conditioning(dag, base, future, latent_policy)
            g = dag.without_out_edges(future)
            src = (outcome[t],)
            w = open_path(g, src, future, cond)
            checks.append(SciaCheck("SCIA-II", t, src, _sorted(dag, future), cond, latent, dropped,
                                    w is None, w, path_text(g, w) if w else None))
    return SciaReport(name, tuple(checks), latent_policy, tuple(notes))
