"""Weighted particle tables and the relational operations on them.

A :class:`ParticleTable` is a multiset of value rows over a schema of
variable names, each row optionally carrying a nonnegative weight. It reads
as an (unnormalized) empirical measure: row ``i`` is a point mass of weight
``w_i`` on its assignment. Particles, factored particles, junction-tree
potentials and CPTs all use this one type.

Projection keeps duplicate rows, so row multiplicity continues to encode
frequency. Equijoin multiplies the weights of the paired rows.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import EmptyJoinError, JoinBlowupError, ParticleDepletionError
from .exact import DenseDistribution

DEFAULT_EPSILON = 1e-6
MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"


@dataclass(frozen=True, eq=False)
class ParticleTable:
    schema: tuple[str, ...]
    rows: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        schema = tuple(self.schema)
        if len(set(schema)) != len(schema):
            raise ValueError(f"duplicate variable in schema {schema}")
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.size == 0 and rows.ndim != 2:
            rows = rows.reshape(0, len(schema))
        if rows.ndim != 2 or rows.shape[1] != len(schema):
            raise ValueError(f"rows of shape {rows.shape} do not match schema of arity {len(schema)}")
        if np.any(rows < 0):
            raise ValueError("negative value index in rows")
        weights = self.weights
        if weights is not None:
            weights = np.asarray(weights, dtype=float).ravel()
            if weights.shape[0] != rows.shape[0]:
                raise ValueError(f"{weights.shape[0]} weights for {rows.shape[0]} rows")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def weight_vector(self) -> np.ndarray:
        return np.ones(len(self)) if self.weights is None else self.weights

    @property
    def total_weight(self) -> float:
        return float(len(self)) if self.weights is None else float(self.weights.sum())

    def columns(self, names: Sequence[str]) -> np.ndarray:
        try:
            idx = [self.schema.index(n) for n in names]
        except ValueError:
            raise KeyError(f"variables {list(names)} not all in schema {self.schema}") from None
        return self.rows[:, idx]

    def __eq__(self, other):
        if not isinstance(other, ParticleTable):
            return NotImplemented
        if self.schema != other.schema or not np.array_equal(self.rows, other.rows):
            return False
        if self.weights is None or other.weights is None:
            return self.weights is None and other.weights is None
        return bool(np.array_equal(self.weights, other.weights))

    __hash__ = None

    def __repr__(self):
        return f"ParticleTable(schema={self.schema}, rows={len(self)}, weighted={self.weights is not None})"


def _raw(schema: tuple[str, ...], rows: np.ndarray, weights: np.ndarray | None = None) -> ParticleTable:
    # trusted internal constructor: inputs already satisfy the invariants
    t = object.__new__(ParticleTable)
    object.__setattr__(t, "schema", schema)
    object.__setattr__(t, "rows", rows)
    object.__setattr__(t, "weights", weights)
    return t


def null_table() -> ParticleTable:
    """The table over zero variables with one row of weight 1 (multiplicative identity)."""
    return ParticleTable((), np.zeros((1, 0), dtype=np.int64), np.ones(1))


def from_rows(schema: Sequence[str], rows, weights=None) -> ParticleTable:
    return ParticleTable(tuple(schema), np.asarray(rows, dtype=np.int64).reshape(-1, len(schema)), weights)


def project(table: ParticleTable, names: Sequence[str]) -> ParticleTable:
    """Restrict every row to ``names``; row count, order and weights are kept."""
    names = tuple(names)
    return _raw(names, table.columns(names), table.weights)


def _codes(rows: np.ndarray) -> np.ndarray:
    """Integer code per row, order-preserving (lexicographic) and equal iff rows are equal."""
    if rows.shape[1] == 0:
        return np.zeros(len(rows), dtype=np.int64)
    if rows.shape[1] == 1:
        return rows[:, 0]
    radices = rows.max(axis=0) + 1 if len(rows) else np.ones(rows.shape[1], dtype=np.int64)
    if np.sum(np.log2(radices.astype(float))) < 62:
        return rows @ _strides(radices)
    return np.unique(rows, axis=0, return_inverse=True)[1].ravel()


def _keys(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer keys such that equal rows (across both arrays) get equal keys."""
    codes = _codes(np.vstack([left, right]))
    return codes[: len(left)], codes[len(left):]


def _match(left_keys: np.ndarray, right_keys: np.ndarray):
    order = np.argsort(right_keys, kind="stable")
    sorted_keys = right_keys[order]
    lo = np.searchsorted(sorted_keys, left_keys, side="left")
    hi = np.searchsorted(sorted_keys, left_keys, side="right")
    return order, lo, hi - lo


def _shared(r: ParticleTable, s: ParticleTable) -> list[str]:
    in_s = set(s.schema)
    return [n for n in r.schema if n in in_s]


def join_size(r: ParticleTable, s: ParticleTable) -> int:
    """Number of rows ``equijoin(r, s)`` would produce, without building it."""
    shared = _shared(r, s)
    if not shared:
        return len(r) * len(s)
    rk, sk = _keys(r.columns(shared), s.columns(shared))
    _, _, counts = _match(rk, sk)
    return int(counts.sum())


def equijoin(r: ParticleTable, s: ParticleTable, cap: int | None = None) -> ParticleTable:
    """All pairs of rows of ``r`` and ``s`` agreeing on shared variables.

    Output schema is ``r``'s schema followed by ``s``'s remaining variables;
    rows come out ``r``-major. Weights multiply; if neither input is weighted
    neither is the output. Raises :class:`JoinBlowupError` if the result
    would exceed ``cap`` rows.
    """
    shared = _shared(r, s)
    extra = [n for n in s.schema if n not in set(shared)]
    if shared:
        rk, sk = _keys(r.columns(shared), s.columns(shared))
        order, start, counts = _match(rk, sk)
    else:
        order = np.arange(len(s))
        start = np.zeros(len(r), dtype=np.int64)
        counts = np.full(len(r), len(s), dtype=np.int64)
    total = int(counts.sum())
    if cap is not None and total > cap:
        raise JoinBlowupError(f"equijoin would produce {total} rows (cap {cap})")
    r_idx = np.repeat(np.arange(len(r)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    s_idx = order[np.repeat(start, counts) + offsets]
    if extra:
        rows = np.hstack([r.rows[r_idx], s.columns(extra)[s_idx]])
    else:
        rows = r.rows[r_idx]
    if r.weights is None and s.weights is None:
        weights = None
    else:
        weights = r.weight_vector[r_idx] * s.weight_vector[s_idx]
    return _raw(r.schema + tuple(extra), rows, weights)


def equijoin_all(tables: Sequence[ParticleTable], cap: int | None = None) -> ParticleTable:
    """Left fold of :func:`equijoin`; ``cap`` bounds every intermediate result."""
    if not tables:
        raise ValueError("equijoin_all needs at least one table")
    out = tables[0]
    if cap is not None and len(out) > cap:
        raise JoinBlowupError(f"table has {len(out)} rows (cap {cap})")
    for t in tables[1:]:
        out = equijoin(out, t, cap)
    return out


def merge_duplicates(table: ParticleTable) -> ParticleTable:
    """Coalesce identical rows, summing their weights. Rows come out sorted."""
    w = table.weight_vector
    if len(table) == 0:
        return _raw(table.schema, table.rows, np.zeros(0))
    if not table.schema:
        return _raw((), np.zeros((1, 0), dtype=np.int64), np.array([w.sum()]))
    _, first, inverse = np.unique(_codes(table.rows), return_index=True, return_inverse=True)
    return _raw(table.schema, table.rows[first], np.bincount(inverse.ravel(), weights=w, minlength=len(first)))


def normalize(table: ParticleTable) -> ParticleTable:
    total = table.total_weight
    if not total > 0:
        raise ParticleDepletionError("cannot normalize a table with zero total weight")
    return _raw(table.schema, table.rows, table.weight_vector / total)


def filter_rows(table: ParticleTable, evidence: Mapping[str, int]) -> ParticleTable:
    """Keep rows consistent with ``evidence`` on the variables the table contains."""
    keep = np.ones(len(table), dtype=bool)
    for i, name in enumerate(table.schema):
        if name in evidence:
            keep &= table.rows[:, i] == int(evidence[name])
    if keep.all():
        return table
    weights = None if table.weights is None else table.weights[keep]
    return _raw(table.schema, table.rows[keep], weights)


def resample_indices(weights: np.ndarray, n: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    total = weights.sum()
    if not total > 0:
        raise ParticleDepletionError("all particle weights are zero")
    cdf = np.cumsum(weights) / total
    if scheme == MULTINOMIAL:
        u = rng.random(n)
    elif scheme == SYSTEMATIC:
        u = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def resample(table: ParticleTable, n: int, scheme: str = MULTINOMIAL, rng: np.random.Generator | None = None) -> ParticleTable:
    """Draw ``n`` rows with probability proportional to weight; the result is unweighted."""
    rng = np.random.default_rng() if rng is None else rng
    idx = resample_indices(table.weight_vector, n, scheme, rng)
    return _raw(table.schema, table.rows[idx])


def to_dense(table: ParticleTable, cardinalities: Mapping[str, int] | Sequence[int],
             epsilon: float = DEFAULT_EPSILON) -> DenseDistribution:
    """Dense distribution of the table's normalized measure with additive smoothing.

    ``epsilon`` is a fraction of the total mass added to every joint state:
    ``p(a) = (m(a)/M + epsilon) / (1 + epsilon * |joint|)``. An empty table
    maps to the uniform distribution when ``epsilon > 0``.
    """
    if isinstance(cardinalities, Mapping):
        cards = tuple(int(cardinalities[n]) for n in table.schema)
    else:
        cards = tuple(int(c) for c in cardinalities)
    size = int(np.prod(cards, dtype=np.int64))
    total = table.total_weight
    if total > 0:
        codes = np.ravel_multi_index(table.rows.T, cards) if table.schema else np.zeros(len(table), dtype=np.int64)
        mass = np.bincount(codes, weights=table.weight_vector, minlength=size) / total
    elif epsilon > 0:
        mass = np.zeros(size)
    else:
        raise ParticleDepletionError("empty table and epsilon == 0")
    probs = (mass + epsilon) / (1.0 + epsilon * size)
    return DenseDistribution(table.schema, probs, cards)


def from_dense(dist: DenseDistribution, drop_zeros: bool = True) -> ParticleTable:
    """One weighted row per joint state (optionally omitting zero-probability states)."""
    rows = np.indices(dist.cardinalities).reshape(len(dist.cardinalities), -1).T
    weights = dist.probabilities
    if drop_zeros:
        keep = weights > 0
        rows, weights = rows[keep], weights[keep]
    return ParticleTable(dist.schema, rows, weights)


# --------------------------------------------------------------------------
# sample-join


@dataclass(frozen=True, eq=False)
class ClusterPlan:
    """Preprocessed table of one cluster.

    ``rows`` are the pruned rows sorted by the key of their bound columns
    (variables already set by earlier clusters); ``group_keys``,
    ``group_start`` and ``group_count`` index the consistent row sets.
    """

    schema: tuple[str, ...]
    rows: np.ndarray
    bound: tuple[str, ...]
    bound_strides: np.ndarray
    group_keys: np.ndarray
    group_start: np.ndarray
    group_count: np.ndarray

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def row_weights(self) -> np.ndarray:
        """|consistent set| / |pruned table| for each row under the binding selecting it."""
        return np.repeat(self.group_count, self.group_count) / self.size

    def table(self) -> ParticleTable:
        return ParticleTable(self.schema, self.rows, self.row_weights)


@dataclass(frozen=True, eq=False)
class JoinPlan:
    schema: tuple[str, ...]
    clusters: tuple[ClusterPlan, ...]


def _strides(radices: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(radices), dtype=np.int64)
    for i in range(len(radices) - 2, -1, -1):
        strides[i] = strides[i + 1] * radices[i + 1]
    return strides


def _semijoin_mask(table: ParticleTable, other: ParticleTable) -> np.ndarray:
    shared = _shared(table, other)
    if not shared:
        return np.full(len(table), len(other) > 0)
    tk, ok = _keys(table.columns(shared), other.columns(shared))
    return np.isin(tk, ok)


def preprocess_sample_join(tables: Sequence[ParticleTable]) -> JoinPlan:
    """Prune never-consistent rows and index consistent row sets for sample-join.

    Pruning applies pairwise semijoins until no table changes. Clusters are
    visited in the given order; for each cluster the rows are grouped by the
    values of the variables that earlier clusters already set.
    """
    if not tables:
        raise ValueError("sample-join needs at least one table")
    pruned = [ParticleTable(t.schema, t.rows) for t in tables]
    changed = True
    while changed:
        changed = False
        for i in range(len(pruned)):
            for j in range(len(pruned)):
                if i == j:
                    continue
                keep = _semijoin_mask(pruned[i], pruned[j])
                if not keep.all():
                    pruned[i] = ParticleTable(pruned[i].schema, pruned[i].rows[keep])
                    changed = True
    for i, t in enumerate(pruned):
        if len(t) == 0:
            raise EmptyJoinError(f"sample-join preprocessing pruned every row of cluster {i} {t.schema}")

    radix: dict[str, int] = {}
    for t in pruned:
        for k, name in enumerate(t.schema):
            radix[name] = max(radix.get(name, 1), int(t.rows[:, k].max()) + 1)

    schema: list[str] = []
    plans = []
    for t in pruned:
        bound = tuple(n for n in t.schema if n in schema)
        strides = _strides([radix[n] for n in bound])
        keys = t.columns(bound) @ strides if bound else np.zeros(len(t), dtype=np.int64)
        order = np.argsort(keys, kind="stable")
        group_keys, group_start, group_count = np.unique(keys[order], return_index=True, return_counts=True)
        plans.append(ClusterPlan(t.schema, t.rows[order], bound, strides, group_keys, group_start, group_count))
        schema.extend(n for n in t.schema if n not in schema)
    return JoinPlan(tuple(schema), tuple(plans))


def sample_join_with_stats(
    plan: JoinPlan,
    n: int,
    rng: np.random.Generator,
    max_discard_rate: float = 0.999,
    window: int = 10_000,
) -> tuple[ParticleTable, float]:
    """Draw ``n`` weighted full particles; also return the fraction of discarded draws.

    Draws that reach a cluster with no consistent row are thrown away and
    replaced. Once at least ``window`` draws were made, a discard fraction
    above ``max_discard_rate`` aborts with :class:`EmptyJoinError`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    col = {name: i for i, name in enumerate(plan.schema)}
    chunks_v, chunks_w = [], []
    need, attempts, discarded = n, 0, 0
    while need > 0:
        m = max(need, 16)
        values = np.zeros((m, len(plan.schema)), dtype=np.int64)
        w = np.ones(m)
        alive = np.ones(m, dtype=bool)
        for cp in plan.clusters:
            if cp.bound:
                code = values[:, [col[b] for b in cp.bound]] @ cp.bound_strides
                pos = np.minimum(np.searchsorted(cp.group_keys, code), len(cp.group_keys) - 1)
                alive &= cp.group_keys[pos] == code
                start, count = cp.group_start[pos], cp.group_count[pos]
            else:
                start, count = 0, cp.size
            u = rng.random(m)
            pick = np.minimum(start + (u * count).astype(np.int64), cp.size - 1)
            values[:, [col[s] for s in cp.schema]] = cp.rows[pick]
            w = w * (count / cp.size)
        attempts += m
        ok = np.flatnonzero(alive)
        discarded += m - ok.size
        ok = ok[:need]
        chunks_v.append(values[ok])
        chunks_w.append(w[ok])
        need -= ok.size
        if need > 0 and attempts >= window and discarded / attempts > max_discard_rate:
            raise EmptyJoinError(f"sample-join discarded {discarded} of {attempts} draws")
    table = ParticleTable(plan.schema, np.vstack(chunks_v), np.concatenate(chunks_w))
    return table, discarded / attempts


def sample_join(plan: JoinPlan, n: int, rng: np.random.Generator) -> ParticleTable:
    """Importance sample ``n`` weighted rows of the equijoin described by ``plan``."""
    return sample_join_with_stats(plan, n, rng)[0]
