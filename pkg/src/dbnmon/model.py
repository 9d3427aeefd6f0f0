"""Discrete dynamic Bayesian networks: representation, validation, sampling.

A model is a prior network over slice 0 and a two-slice network (2-TBN)
whose CPT parents live either in the previous slice (``"prev"``) or the
current one (``"cur"``). Variables are identified by name. Values are
integer indices in ``[0, cardinality)``.

CPT rows are enumerated over joint parent assignments in lexicographic
order, first listed parent most significant (C order), so a CPT with
parents of cardinalities ``(2, 3)`` has rows ``(0,0), (0,1), (0,2), (1,0)...``.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import ModelValidationError

STATE = "state"
OBSERVATION = "observation"
PREV = "prev"
CUR = "cur"

ROW_SUM_TOL = 1e-9

Assignment = dict  # variable name -> value index


@dataclass(frozen=True)
class Variable:
    name: str
    cardinality: int
    kind: str = STATE

    @property
    def is_state(self) -> bool:
        return self.kind == STATE


@dataclass(frozen=True, eq=False)
class Cpt:
    """Conditional probability table ``P(child | parents)``.

    ``probabilities`` has one row per joint parent assignment and one column
    per child value.
    """

    child: str
    parents: tuple[tuple[str, str], ...]
    probabilities: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probabilities, dtype=float)
        if probs.ndim == 1:
            probs = probs.reshape(1, -1)
        probs.setflags(write=False)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "parents", tuple((str(n), str(s)) for n, s in self.parents))

    @property
    def parent_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.parents)

    def __eq__(self, other):
        if not isinstance(other, Cpt):
            return NotImplemented
        return (
            self.child == other.child
            and self.parents == other.parents
            and self.probabilities.shape == other.probabilities.shape
            and np.array_equal(self.probabilities, other.probabilities)
        )

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    kind: str
    element: str
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.element}: {self.message}"


@dataclass(frozen=True)
class DbnModel:
    variables: tuple[Variable, ...]
    prior: Mapping[str, Cpt]
    transition: Mapping[str, Cpt]
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "prior", dict(self.prior))
        object.__setattr__(self, "transition", dict(self.transition))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def state_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.is_state)

    @property
    def obs_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if not v.is_state)

    @property
    def cardinalities(self) -> dict[str, int]:
        return {v.name: v.cardinality for v in self.variables}

    def variable(self, name: str) -> Variable:
        return self.variables[self.column(name)]

    def column(self, name: str) -> int:
        index = self._cache.get("columns")
        if index is None:
            index = {v.name: i for i, v in enumerate(self.variables)}
            self._cache["columns"] = index
        return index[name]

    @property
    def state_columns(self) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.variables) if v.is_state], dtype=np.int64)

    @property
    def obs_columns(self) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.variables) if not v.is_state], dtype=np.int64)

    def joint_size(self, names: Sequence[str] | None = None) -> int:
        cards = self.cardinalities
        names = self.state_names if names is None else names
        return reduce(lambda a, n: a * cards[n], names, 1)


# --------------------------------------------------------------------------
# validation


def _cycle(nodes: Sequence[str], edges: Mapping[str, Sequence[str]]) -> list[str] | None:
    """Return one directed cycle (as a node list) or None. ``edges`` maps child -> parents."""
    color = dict.fromkeys(nodes, 0)
    stack: list[str] = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for p in edges.get(n, ()):
            if p not in color:
                continue
            if color[p] == 1:
                return stack[stack.index(p):] + [p]
            if color[p] == 0:
                found = visit(p)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in nodes:
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return None


def validate_model(model: DbnModel) -> list[Violation]:
    """List every invariant violation of ``model``; an empty list means valid."""
    out: list[Violation] = []
    seen: set[str] = set()
    for v in model.variables:
        if v.name in seen:
            out.append(Violation("duplicate-id", v.name, "variable defined more than once"))
        seen.add(v.name)
        if not isinstance(v.cardinality, (int, np.integer)) or v.cardinality < 2:
            out.append(Violation("cardinality", v.name, f"cardinality {v.cardinality!r} < 2"))
        if v.kind not in (STATE, OBSERVATION):
            out.append(Violation("kind", v.name, f"unknown kind {v.kind!r}"))
    kinds = {v.name: v.kind for v in model.variables}
    cards = {v.name: v.cardinality for v in model.variables}

    for section, cpts in (("prior", model.prior), ("transition", model.transition)):
        for name in kinds:
            if name not in cpts:
                out.append(Violation("missing-cpt", f"{section}.{name}", "no CPT for variable"))
        for key, cpt in cpts.items():
            where = f"{section}.{key}"
            if cpt.child != key or key not in kinds:
                out.append(Violation("unknown-reference", where, f"CPT child {cpt.child!r} is not a model variable"))
                continue
            resolved = True
            if len(set(cpt.parents)) != len(cpt.parents):
                out.append(Violation("duplicate-parent", where, "parent listed more than once"))
            for pname, pslice in cpt.parents:
                if pname not in kinds:
                    out.append(Violation("unknown-reference", where, f"unknown parent {pname!r}"))
                    resolved = False
                    continue
                if pslice not in (PREV, CUR) or (section == "prior" and pslice != CUR):
                    out.append(Violation("slice", where, f"parent {pname!r} has invalid slice tag {pslice!r}"))
                if kinds[pname] == OBSERVATION and kinds[key] == STATE:
                    out.append(Violation("observation-child", where, f"state variable has observation parent {pname!r}"))
                if kinds[key] == OBSERVATION and pslice == PREV:
                    out.append(Violation("observation-parent", where, f"observation depends on previous slice via {pname!r}"))
                if kinds[pname] == OBSERVATION and pslice == PREV:
                    out.append(Violation("slice", where, f"previous-slice observation parent {pname!r}"))
            if not resolved:
                continue
            probs = cpt.probabilities
            n_rows = reduce(lambda a, p: a * cards[p[0]], cpt.parents, 1)
            if probs.shape != (n_rows, cards[key]):
                out.append(Violation(
                    "row-count", where,
                    f"table shape {probs.shape} != ({n_rows}, {cards[key]}) expected from parent cardinalities"))
                continue
            if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
                out.append(Violation("range", where, "probabilities outside [0, 1]"))
            bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL)
            if bad.size:
                out.append(Violation(
                    "normalization", where,
                    f"{bad.size} row(s) do not sum to 1 (first: row {bad[0]} sums to {probs[bad[0]].sum():.12g})"))

        edges = {k: [p for p, s in c.parents if s == CUR] for k, c in cpts.items() if k in kinds}
        cycle = _cycle(list(kinds), edges)
        if cycle:
            out.append(Violation("cycle", section, " <- ".join(cycle)))
    return out


def check_model(model: DbnModel) -> DbnModel:
    violations = validate_model(model)
    if violations:
        raise ModelValidationError(violations)
    return model


# --------------------------------------------------------------------------
# compiled form used by the samplers and filters


@dataclass(frozen=True)
class CompiledNode:
    column: int
    name: str
    cardinality: int
    parent_columns: np.ndarray
    parent_prev: np.ndarray
    strides: np.ndarray
    table: np.ndarray
    thresholds: np.ndarray  # cumulative row sums without the last column
    observed: bool

    def row_index(self, current: np.ndarray, previous: np.ndarray | None) -> np.ndarray:
        idx = np.zeros(current.shape[0], dtype=np.int64)
        for col, prev, stride in zip(self.parent_columns, self.parent_prev, self.strides):
            src = previous if prev else current
            idx += src[:, col] * stride
        return idx


def topological_order(model: DbnModel, section: str) -> list[str]:
    """Variables ordered so that current-slice parents precede children; ties by model order."""
    cpts = model.prior if section == "prior" else model.transition
    names = model.names
    pending = {n: {p for p, s in cpts[n].parents if s == CUR} for n in names}
    order: list[str] = []
    done: set[str] = set()
    while len(order) < len(names):
        ready = [n for n in names if n not in done and pending[n] <= done]
        if not ready:
            raise ModelValidationError([Violation("cycle", section, "current-slice graph is cyclic")])
        order.append(ready[0])
        done.add(ready[0])
    return order


def compiled(model: DbnModel, section: str) -> list[CompiledNode]:
    key = ("compiled", section)
    nodes = model._cache.get(key)
    if nodes is not None:
        return nodes
    check_model(model)
    cpts = model.prior if section == "prior" else model.transition
    cards = model.cardinalities
    nodes = []
    for name in topological_order(model, section):
        cpt = cpts[name]
        pcards = [cards[p] for p, _ in cpt.parents]
        strides = np.ones(len(pcards), dtype=np.int64)
        for i in range(len(pcards) - 2, -1, -1):
            strides[i] = strides[i + 1] * pcards[i + 1]
        table = cpt.probabilities
        nodes.append(CompiledNode(
            column=model.column(name),
            name=name,
            cardinality=cards[name],
            parent_columns=np.array([model.column(p) for p, _ in cpt.parents], dtype=np.int64),
            parent_prev=np.array([s == PREV for _, s in cpt.parents], dtype=bool),
            strides=strides,
            table=table,
            thresholds=np.cumsum(table, axis=1)[:, :-1],
            observed=not model.variable(name).is_state,
        ))
    model._cache[key] = nodes
    return nodes


def ancestral_sample(
    model: DbnModel,
    n: int,
    rng: np.random.Generator,
    previous: np.ndarray | None = None,
    evidence: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n`` slices of the model in topological order.

    Without ``previous`` the prior network is used, otherwise the 2-TBN with
    ``previous`` (shape ``(n, n_vars)``, model column order) as the slice t-1
    values. With ``evidence`` (length ``n_vars``, observation columns used),
    observation nodes are clamped and each row's weight is multiplied by the
    likelihood of the observed value; otherwise they are sampled and the
    weights stay 1.
    """
    nodes = compiled(model, "prior" if previous is None else "transition")
    values = np.zeros((n, len(model.variables)), dtype=np.int64)
    weights = np.ones(n)
    for node in nodes:
        idx = node.row_index(values, previous)
        if node.observed and evidence is not None:
            obs = int(evidence[node.column])
            values[:, node.column] = obs
            weights *= node.table[idx, obs]
        else:
            u = rng.random(n)
            values[:, node.column] = (u[:, None] >= node.thresholds[idx]).sum(axis=1)
    return values, weights


def assignment_to_row(model: DbnModel, assignment: Mapping[str, int], names: Sequence[str]) -> np.ndarray:
    row = np.zeros(len(model.variables), dtype=np.int64)
    missing = [n for n in names if n not in assignment]
    if missing:
        raise ValueError(f"incomplete assignment: missing {missing}")
    for n in names:
        value = int(assignment[n])
        if not 0 <= value < model.variable(n).cardinality:
            raise ValueError(f"value {value} out of range for {n!r}")
        row[model.column(n)] = value
    return row


def sample_slice0(model: DbnModel, rng: np.random.Generator) -> Assignment:
    """Draw one complete slice-0 assignment (states and observations) from the prior network."""
    values, _ = ancestral_sample(model, 1, rng)
    return {name: int(v) for name, v in zip(model.names, values[0])}


def sample_transition(model: DbnModel, prev: Mapping[str, int], rng: np.random.Generator) -> Assignment:
    """Draw a complete slice-t assignment given the slice t-1 state values ``prev``."""
    row = assignment_to_row(model, prev, model.state_names)
    values, _ = ancestral_sample(model, 1, rng, previous=row[None, :])
    return {name: int(v) for name, v in zip(model.names, values[0])}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Hidden states and observations for slices ``t = 0..T``.

    ``hidden`` may be ``None`` for observation-only sequences.
    """

    state_names: tuple[str, ...]
    obs_names: tuple[str, ...]
    hidden: np.ndarray | None
    observed: np.ndarray

    def __len__(self):
        return self.observed.shape[0]

    def __getitem__(self, t):
        hidden = None if self.hidden is None else dict(zip(self.state_names, map(int, self.hidden[t])))
        return hidden, dict(zip(self.obs_names, map(int, self.observed[t])))

    def observations(self) -> list[Assignment]:
        return [dict(zip(self.obs_names, map(int, row))) for row in self.observed]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_hidden = (self.hidden is None and other.hidden is None) or (
            self.hidden is not None and other.hidden is not None and np.array_equal(self.hidden, other.hidden))
        return (self.state_names == other.state_names and self.obs_names == other.obs_names
                and same_hidden and np.array_equal(self.observed, other.observed))

    def without_hidden(self) -> Trajectory:
        return dataclasses.replace(self, hidden=None)


def simulate(model: DbnModel, steps: int, rng: np.random.Generator) -> Trajectory:
    """Sample a trajectory of ``steps + 1`` slices."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    values, _ = ancestral_sample(model, 1, rng)
    rows = [values[0]]
    for _ in range(steps):
        values, _ = ancestral_sample(model, 1, rng, previous=values)
        rows.append(values[0])
    full = np.array(rows, dtype=np.int64)
    return Trajectory(
        state_names=model.state_names,
        obs_names=model.obs_names,
        hidden=full[:, model.state_columns],
        observed=full[:, model.obs_columns],
    )
