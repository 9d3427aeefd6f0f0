"""Junction trees over the 2-TBN with particle-table potentials.

Clique variables are labelled ``"prev:<name>"`` for previous-slice state
variables and ``"<name>"`` for current-slice variables. Potentials are
weighted :class:`~dbnmon.tables.ParticleTable` objects: product is equijoin
and summation is projection followed by duplicate merging. Calibration is
Shafer-Shenoy message passing, which needs no potential division.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from .errors import ImpossibleEvidenceError
from .model import PREV, Cpt, DbnModel, check_model
from .tables import (
    ParticleTable,
    equijoin,
    join_size,
    filter_rows,
    merge_duplicates,
    normalize,
    null_table,
    project,
)

PREV_PREFIX = "prev:"


def prev_label(name: str) -> str:
    return PREV_PREFIX + name


def _parent_label(name: str, slice_tag: str) -> str:
    return prev_label(name) if slice_tag == PREV else name


@dataclass(frozen=True)
class CliqueTree:
    cliques: tuple[frozenset[str], ...]
    edges: tuple[tuple[int, int, frozenset[str]], ...]
    prev_anchor: tuple[int, ...]
    cur_anchor: tuple[int, ...]
    clusters: tuple[tuple[str, ...], ...]

    @cached_property
    def neighbors(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in range(len(self.cliques))}
        for i, j, _ in self.edges:
            out[i].append(j)
            out[j].append(i)
        return out

    @cached_property
    def _separators(self) -> dict[tuple[int, int], frozenset[str]]:
        out = {}
        for a, b, sep in self.edges:
            out[(a, b)] = out[(b, a)] = sep
        return out

    def separator(self, i: int, j: int) -> frozenset[str]:
        return self._separators[(i, j)]

    def covering_clique(self, labels) -> int:
        """Smallest clique containing ``labels`` (lowest index on ties)."""
        labels = set(labels)
        best = None
        for i, c in enumerate(self.cliques):
            if labels <= c and (best is None or len(c) < len(self.cliques[best])):
                best = i
        if best is None:
            raise ValueError(f"no clique contains {sorted(labels)}")
        return best

    def describe(self, potential_rows: Sequence[int] | None = None) -> str:
        """Text dump of cliques and separators, optionally with each clique's potential size."""
        lines = [f"{len(self.cliques)} cliques, max size {max(len(c) for c in self.cliques)}"]
        for i, c in enumerate(self.cliques):
            rows = f" rows={potential_rows[i]}" if potential_rows is not None else ""
            lines.append(f"  C{i} ({len(c)}): {' '.join(sorted(c))}{rows}")
        for i, j, sep in self.edges:
            lines.append(f"  C{i} -- C{j}  sep={{{' '.join(sorted(sep))}}}")
        return "\n".join(lines)


def _min_fill_cliques(adjacency: dict[str, set[str]]) -> list[frozenset[str]]:
    adj = {v: set(n) for v, n in adjacency.items()}
    cliques: list[frozenset[str]] = []
    while adj:
        def fill(v):
            nb = adj[v]
            return sum(1 for a, b in combinations(sorted(nb), 2) if b not in adj[a])
        v = min(sorted(adj), key=fill)
        nb = adj[v]
        for a, b in combinations(nb, 2):
            adj[a].add(b)
            adj[b].add(a)
        cliques.append(frozenset(nb | {v}))
        for a in nb:
            adj[a].discard(v)
        del adj[v]
    maximal = []
    for i, c in enumerate(cliques):
        if not any(c < d or (c == d and j < i) for j, d in enumerate(cliques) if j != i):
            maximal.append(c)
    return maximal


def _spanning_tree(cliques: Sequence[frozenset[str]]) -> list[tuple[int, int, frozenset[str]]]:
    candidates = sorted(
        ((-len(a & b), i, j) for (i, a), (j, b) in combinations(enumerate(cliques), 2)),
    )
    parent = list(range(len(cliques)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = []
    for _, i, j in candidates:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j, cliques[i] & cliques[j]))
    return edges


def build_clique_tree(model: DbnModel, clusters: Sequence[Sequence[str]]) -> CliqueTree:
    """Junction tree of the moralized 2-TBN with every cluster forced into a clique in both slices."""
    check_model(model)
    states = set(model.state_names)
    clusters = tuple(tuple(c) for c in clusters)
    covered = set().union(*map(set, clusters)) if clusters else set()
    if covered != states:
        raise ValueError(f"clusters must cover exactly the state variables; missing {sorted(states - covered)}")
    nodes = [prev_label(s) for s in model.state_names] + list(model.names)
    adjacency: dict[str, set[str]] = {v: set() for v in nodes}

    def connect(group):
        for a, b in combinations(group, 2):
            adjacency[a].add(b)
            adjacency[b].add(a)

    for name in model.names:
        cpt = model.transition[name]
        connect([name] + [_parent_label(p, s) for p, s in cpt.parents])
    for c in clusters:
        connect([prev_label(v) for v in c])
        connect(list(c))
    cliques = tuple(_min_fill_cliques(adjacency))
    edges = tuple(_spanning_tree(cliques))
    tree = CliqueTree(cliques, edges, (), (), clusters)
    prev_anchor = tuple(tree.covering_clique(prev_label(v) for v in c) for c in clusters)
    cur_anchor = tuple(tree.covering_clique(c) for c in clusters)
    return CliqueTree(cliques, edges, prev_anchor, cur_anchor, clusters)


def running_intersection_holds(tree: CliqueTree) -> bool:
    """Every variable's cliques form a connected subtree."""
    nb = tree.neighbors
    for var in set().union(*tree.cliques):
        holding = {i for i, c in enumerate(tree.cliques) if var in c}
        start = next(iter(holding))
        seen, stack = {start}, [start]
        while stack:
            i = stack.pop()
            for j in nb[i]:
                if j in holding and j not in seen:
                    seen.add(j)
                    stack.append(j)
        if seen != holding:
            return False
    return True


def dense_cpt_to_potential(cpt: Cpt, model: DbnModel) -> ParticleTable:
    """One weighted row per (parent assignment, child value) with nonzero probability.

    Previous-slice parents are labelled with :func:`prev_label`.
    """
    cards = model.cardinalities
    shape = [cards[p] for p, _ in cpt.parents] + [cards[cpt.child]]
    rows = np.indices(shape).reshape(len(shape), -1).T
    weights = cpt.probabilities.reshape(-1)
    keep = weights > 0
    schema = tuple(_parent_label(p, s) for p, s in cpt.parents) + (cpt.child,)
    return ParticleTable(schema, rows[keep], weights[keep])


def transition_potentials(model: DbnModel) -> list[ParticleTable]:
    key = "transition_potentials"
    pots = model._cache.get(key)
    if pots is None:
        pots = [dense_cpt_to_potential(model.transition[n], model) for n in model.names]
        model._cache[key] = pots
    return pots


def product(tables: Sequence[ParticleTable]) -> ParticleTable:
    """Equijoin of ``tables``, ordered greedily to avoid large intermediates.

    Starts from the smallest table and repeatedly joins the table sharing
    the most variables with the running schema (fewest rows on ties).
    """
    pending = [t for t in tables if t.schema or len(t) != 1 or t.weights is None or t.weights[0] != 1.0]
    if not pending:
        return null_table()
    pending.sort(key=len)
    out = pending.pop(0)
    while pending:
        have = set(out.schema)
        best = max(range(len(pending)), key=lambda i: (len(have & set(pending[i].schema)), -len(pending[i])))
        out = equijoin(out, pending.pop(best))
        if len(out) == 0:
            break
    return out


STATIC_ROW_LIMIT = 1 << 16
STATIC_CACHE_ROWS = 1 << 21


@dataclass(frozen=True)
class StaticPotentials:
    """Factors shared across many calibrations, pre-assigned and pre-multiplied.

    Typical use is the transition CPTs, which stay fixed while the prior
    tables change every slice. Each clique's static factors are multiplied
    once (unless the product would exceed ``STATIC_ROW_LIMIT`` rows). Work
    that depends only on static factors and evidence -- messages out of
    subtrees without per-call factors, and a clique's static factors
    combined with such messages -- is memoized per evidence assignment, up
    to ``STATIC_CACHE_ROWS`` stored rows.
    """

    tree: CliqueTree
    assigned: tuple[tuple[ParticleTable, ...], ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False)
    _subtrees: dict = field(default_factory=dict, compare=False, repr=False)
    _stored: list = field(default_factory=lambda: [0], compare=False, repr=False)

    def subtree(self, i: int, j: int) -> tuple[frozenset[int], frozenset[str]]:
        """Cliques on ``i``'s side of edge (i, j), and the labels they cover."""
        key = (i, j)
        if key not in self._subtrees:
            nb = self.tree.neighbors
            seen, stack = {i}, [i]
            while stack:
                a = stack.pop()
                for b in nb[a]:
                    if b != j and b not in seen:
                        seen.add(b)
                        stack.append(b)
            labels = frozenset().union(*(self.tree.cliques[c] for c in seen))
            self._subtrees[key] = (frozenset(seen), labels)
        return self._subtrees[key]

    def lookup(self, key):
        return self._cache.get(key)

    def store(self, key, table: ParticleTable) -> None:
        if self._stored[0] + len(table) <= STATIC_CACHE_ROWS:
            self._cache[key] = table
            self._stored[0] += len(table)


def assign_factors(tree: CliqueTree, factors: Sequence[ParticleTable]) -> list[list[ParticleTable]]:
    assigned: list[list[ParticleTable]] = [[] for _ in tree.cliques]
    for f in factors:
        assigned[tree.covering_clique(f.schema)].append(f)
    return assigned


def prepare_static(tree: CliqueTree, factors: Sequence[ParticleTable]) -> StaticPotentials:
    out = []
    for group in assign_factors(tree, factors):
        merged = _bounded_product(group, STATIC_ROW_LIMIT) if group else None
        out.append((merged,) if merged is not None else tuple(group))
    return StaticPotentials(tree, tuple(out))


def _bounded_product(tables: Sequence[ParticleTable], limit: int) -> ParticleTable | None:
    """Greedy product of ``tables``, or None as soon as an intermediate exceeds ``limit`` rows."""
    pending = sorted(tables, key=len)
    out = pending.pop(0)
    while pending:
        have = set(out.schema)
        best = max(range(len(pending)), key=lambda i: (len(have & set(pending[i].schema)), -len(pending[i])))
        if join_size(out, pending[best]) > limit:
            return None
        out = equijoin(out, pending.pop(best))
    return out


def _filtered(factors: Sequence[ParticleTable], evidence: Mapping[str, int]) -> list[ParticleTable]:
    out = [filter_rows(f, evidence) for f in factors]
    if any(len(f) == 0 for f in out):
        raise ImpossibleEvidenceError("evidence eliminated every row of a factor")
    return out


def _join_small_first(big: ParticleTable | None, small: list[ParticleTable]) -> ParticleTable:
    """``big`` times ``small``, multiplying the small tables together first when that is cheap."""
    if big is None:
        return product(small)
    if not small:
        return big
    if np.prod([float(len(m)) for m in small]) <= max(len(big), 1):
        return equijoin(big, product(small))
    return product([big] + small)


@dataclass
class CalibratedTree:
    """Clique potentials with lazily computed, memoized Shafer-Shenoy messages.

    A message or belief is computed the first time it is needed, so
    querying a few cliques only pays for the messages flowing toward them;
    :meth:`calibrate_all` forces every message. ``assigned[i]`` holds the
    per-call factors of clique ``i``; ``static`` (optional) holds factors
    shared across calls.
    """

    tree: CliqueTree
    assigned: list[list[ParticleTable]]
    evidence: Mapping[str, int] = field(default_factory=dict)
    static: StaticPotentials | None = None
    messages: dict[tuple[int, int], ParticleTable] = field(default_factory=dict)
    _beliefs: dict[int, ParticleTable] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._nb = self.tree.neighbors
        self._dynamic = frozenset(i for i, group in enumerate(self.assigned) if group)

    def _is_static(self, i: int, j: int) -> bool:
        """True if the message i -> j depends on static factors and evidence only."""
        return self.static is not None and not self.static.subtree(i, j)[0] & self._dynamic

    def _evidence_key(self, labels) -> tuple:
        return tuple(sorted((k, v) for k, v in self.evidence.items() if k in labels))

    def _static_part(self, a: int, sources: list[int]) -> ParticleTable | None:
        """Static factors of clique ``a`` times the (static) messages from ``sources``."""
        static = self.static
        if static is None:
            return None
        labels = self.tree.cliques[a].union(*(static.subtree(k, a)[1] for k in sources))
        key = ("part", a, tuple(sources), self._evidence_key(labels))
        hit = static.lookup(key)
        if hit is None:
            factors = _filtered(static.assigned[a], self.evidence)
            incoming = [self.message(k, a) for k in sources]
            if not factors and not incoming:
                return None
            hit = _join_small_first(product(factors) if factors else None, incoming)
            static.store(key, hit)
        return hit

    def _combine(self, a: int, exclude: int | None) -> ParticleTable:
        """Product of clique ``a``'s factors and its incoming messages, except the one from ``exclude``."""
        others = [k for k in self._nb[a] if k != exclude]
        fixed = [k for k in others if self._is_static(k, a)]
        base = self._static_part(a, fixed)
        varying = _filtered(self.assigned[a], self.evidence)
        varying += [self.message(k, a) for k in others if k not in fixed]
        if base is None:
            return product(varying)
        return _join_small_first(base, varying)

    def message(self, i: int, j: int) -> ParticleTable:
        key = (i, j)
        if key not in self.messages:
            pending = [(i, j)]
            # iterative post-order so deep trees do not hit the recursion limit
            while pending:
                a, b = pending[-1]
                missing = [(k, a) for k in self._nb[a] if k != b and (k, a) not in self.messages]
                if missing:
                    pending.extend(missing)
                    continue
                pending.pop()
                if (a, b) not in self.messages:
                    self.messages[(a, b)] = self._send(a, b)
        return self.messages[key]

    def _send(self, a: int, b: int) -> ParticleTable:
        key = None
        if self._is_static(a, b):
            key = ("message", a, b, self._evidence_key(self.static.subtree(a, b)[1]))
            hit = self.static.lookup(key)
            if hit is not None:
                return hit
        prod = self._combine(a, b)
        sep = self.tree.separator(a, b)
        msg = merge_duplicates(project(prod, [v for v in prod.schema if v in sep]))
        if key is not None:
            self.static.store(key, msg)
        return msg

    def belief(self, i: int) -> ParticleTable:
        """Unnormalized calibrated clique potential (duplicates merged)."""
        if i not in self._beliefs:
            self._beliefs[i] = merge_duplicates(self._combine(i, None))
        return self._beliefs[i]

    def calibrate_all(self) -> "CalibratedTree":
        for i, j, _ in self.tree.edges:
            self.message(i, j)
            self.message(j, i)
        return self

    @property
    def total_mass(self) -> float:
        """Total weight of the factor product (the same at every clique)."""
        i = min(self._beliefs, default=0)
        mass = self.belief(i).total_weight
        if not mass > 0:
            raise ImpossibleEvidenceError("evidence has zero probability under the factor product")
        return mass

    def marginal(self, labels: Sequence[str], clique: int | None = None) -> ParticleTable:
        return clique_marginal(self, labels, clique)


def calibrate(tree: CliqueTree, factors: Sequence[ParticleTable], evidence: Mapping[str, int],
              static: StaticPotentials | None = None, eager: bool = True) -> CalibratedTree:
    """Absorb evidence by row filtering and set up message passing.

    ``factors`` are assigned to their smallest covering clique; ``static``
    optionally supplies pre-assigned factors shared across calls. With
    ``eager`` every message is computed immediately and zero total mass
    raises :class:`ImpossibleEvidenceError`; otherwise work is deferred
    until beliefs are requested.
    """
    if static is not None and static.tree is not tree:
        raise ValueError("static potentials were prepared for a different tree")
    assigned = assign_factors(tree, factors)
    calibrated = CalibratedTree(tree, assigned, dict(evidence), static)
    if eager:
        for group in assigned + list(static.assigned if static is not None else ()):
            _filtered(group, evidence)
        calibrated.calibrate_all()
        calibrated.total_mass
    return calibrated


def clique_marginal(calibrated: CalibratedTree, labels: Sequence[str], clique: int | None = None) -> ParticleTable:
    """Normalized, duplicate-merged marginal of a clique potential onto ``labels``."""
    labels = tuple(labels)
    i = calibrated.tree.covering_clique(labels) if clique is None else clique
    if not set(labels) <= calibrated.tree.cliques[i]:
        raise ValueError(f"clique {i} does not contain {labels}")
    belief = calibrated.belief(i)
    missing = [v for v in labels if v not in belief.schema]
    if missing:
        raise ValueError(f"clique potential carries no information about {missing}")
    return normalize(merge_duplicates(project(belief, labels)))
