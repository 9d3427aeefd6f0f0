"""Monitoring algorithms: exact, PF, BK and the factored-particle filters FP1-FP3.

All algorithms share one interface::

    state = init(config, model, obs_0, rng)
    state, increment = step(state, config, model, obs_t, rng)
    dist = query_marginal(state, model, names)

``increment`` is the log of the algorithm's estimate of
``P(y_t | y_0..y_{t-1})``; ``state.log_likelihood`` accumulates it.

Factored beliefs (BK, FP*) approximate the joint as the product of their
cluster marginals.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import exact
from .errors import ModelFormatError, ParticleDepletionError
from .exact import DenseDistribution
from .junction import (
    CliqueTree,
    build_clique_tree,
    calibrate,
    clique_marginal,
    prepare_static,
    prev_label,
    transition_potentials,
)
from .model import DbnModel, ancestral_sample, check_model
from .seeding import make_rng
from .tables import (
    DEFAULT_EPSILON,
    MULTINOMIAL,
    SYSTEMATIC,
    ParticleTable,
    equijoin_all,
    merge_duplicates,
    normalize,
    preprocess_sample_join,
    project,
    resample,
    resample_indices,
    sample_join_with_stats,
    to_dense,
)

EXACT, PF, BK, FP1, FP2, FP3 = "exact", "pf", "bk", "fp1", "fp2", "fp3"
ALGORITHMS = (EXACT, PF, BK, FP1, FP2, FP3)
FACTORED = (FP1, FP2, FP3)
DEFAULT_JOIN_CAP = 10 ** 6


@dataclass(frozen=True)
class Clustering:
    clusters: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(c) for c in self.clusters))

    @classmethod
    def parse(cls, text: str) -> Clustering:
        """Parse ``"A,B,C;C,D,E"``: clusters separated by ``;``, variables by ``,``."""
        clusters = []
        for i, chunk in enumerate(text.strip().split(";")):
            names = [n.strip() for n in chunk.split(",") if n.strip()]
            if not names:
                raise ModelFormatError(f"cluster {i} in {text!r} is empty")
            if len(set(names)) != len(names):
                raise ModelFormatError(f"cluster {i} in {text!r} repeats a variable")
            clusters.append(tuple(names))
        return cls(tuple(clusters))

    def format(self) -> str:
        return ";".join(",".join(c) for c in self.clusters)

    def __len__(self):
        return len(self.clusters)

    @property
    def is_disjoint(self) -> bool:
        flat = [v for c in self.clusters for v in c]
        return len(flat) == len(set(flat))

    def check(self, model: DbnModel, disjoint: bool = False) -> None:
        states = set(model.state_names)
        used = {v for c in self.clusters for v in c}
        if used - states:
            raise ValueError(f"clusters mention non-state variables {sorted(used - states)}")
        if states - used:
            raise ValueError(f"clusters do not cover {sorted(states - used)}")
        if disjoint and not self.is_disjoint:
            raise ValueError("BK requires pairwise disjoint clusters")


@dataclass(frozen=True)
class FilterConfig:
    """Settings of one filter run.

    ``particles`` is the number of full particles for PF and the number of
    sample-join draws for FP2. ``cluster_particles`` (N_c) is the number of
    factored particles per cluster; it defaults to ``particles`` and may be
    a per-cluster tuple for FP3. ``join_order`` is the order (as cluster
    indices) in which FP2's sample-join visits the clusters; by default the
    clustering's order.
    """

    algorithm: str
    particles: int = 1000
    cluster_particles: int | tuple[int, ...] | None = None
    clustering: Clustering | None = None
    resample: str = MULTINOMIAL
    seed: int = 0
    join_cap: int = DEFAULT_JOIN_CAP
    epsilon: float = DEFAULT_EPSILON
    exact_cap: int = exact.DEFAULT_CAP
    join_order: tuple[int, ...] | None = None

    def cluster_sizes(self) -> tuple[int, ...]:
        k = len(self.clustering)
        nc = self.particles if self.cluster_particles is None else self.cluster_particles
        return tuple(nc) if isinstance(nc, (tuple, list)) else (int(nc),) * k

    def check(self, model: DbnModel) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.particles < 1:
            raise ValueError("particles must be >= 1")
        if self.resample not in (MULTINOMIAL, SYSTEMATIC):
            raise ValueError(f"unknown resampling scheme {self.resample!r}")
        if self.algorithm in (BK, *FACTORED):
            if self.clustering is None:
                raise ValueError(f"{self.algorithm} requires a clustering")
            self.clustering.check(model, disjoint=self.algorithm == BK)
        if self.algorithm in FACTORED:
            sizes = self.cluster_sizes()
            if len(sizes) != len(self.clustering) or min(sizes) < 1:
                raise ValueError("cluster_particles must give one positive count per cluster")
            if self.algorithm != FP3 and len(set(sizes)) > 1:
                raise ValueError(f"{self.algorithm} needs the same particle count in every cluster")
        if self.join_order is not None:
            if self.algorithm != FP2:
                raise ValueError("join_order only applies to fp2")
            if sorted(self.join_order) != list(range(len(self.clustering))):
                raise ValueError(f"join_order {self.join_order} is not a permutation of the cluster indices")


@dataclass(frozen=True)
class FilterState:
    """Belief after slice ``t``.

    ``belief`` is a DenseDistribution (exact), a ParticleTable over the state
    variables (PF), a tuple of per-cluster DenseDistributions (BK) or a tuple
    of per-cluster ParticleTables (FP1-3).
    """

    algorithm: str
    belief: object
    t: int
    log_likelihood: float
    increment: float
    diagnostics: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# helpers


def _evidence(model: DbnModel, obs: Mapping[str, int]) -> np.ndarray:
    ev = np.zeros(len(model.variables), dtype=np.int64)
    for name in model.obs_names:
        if name not in obs:
            raise ValueError(f"observation incomplete: missing {name!r}")
        ev[model.column(name)] = int(obs[name])
    return ev


def _full_rows(model: DbnModel, states: np.ndarray) -> np.ndarray:
    full = np.zeros((states.shape[0], len(model.variables)), dtype=np.int64)
    full[:, model.state_columns] = states
    return full


def _propagate(model, previous, obs, n_out, scheme, rng, t, prior_weights=None, n_draws=None):
    """Importance-sample one slice and resample ``n_out`` state rows.

    ``previous`` is ``None`` at slice 0 (prior network, ``n_draws`` samples)
    or a state-row array. Returns (state rows, log-likelihood increment).
    """
    ev = _evidence(model, obs)
    if previous is None:
        values, w = ancestral_sample(model, n_draws, rng, evidence=ev)
    else:
        values, w = ancestral_sample(model, previous.shape[0], rng, previous=_full_rows(model, previous), evidence=ev)
    base = float(len(w)) if prior_weights is None else float(prior_weights.sum())
    if prior_weights is not None:
        w = w * prior_weights
    total = float(w.sum())
    if not total > 0:
        raise ParticleDepletionError(f"all {len(w)} particle weights are zero at t={t}")
    idx = resample_indices(w, n_out, scheme, rng)
    return values[idx][:, model.state_columns], math.log(total / base)


def _project_clusters(model: DbnModel, rows: np.ndarray, clustering: Clustering) -> tuple[ParticleTable, ...]:
    full = ParticleTable(model.state_names, rows)
    return tuple(project(full, c) for c in clustering.clusters)


def clique_tree_for(model: DbnModel, clustering: Clustering) -> CliqueTree:
    key = ("clique_tree", clustering.clusters)
    tree = model._cache.get(key)
    if tree is None:
        tree = build_clique_tree(model, clustering.clusters)
        model._cache[key] = tree
    return tree


# --------------------------------------------------------------------------
# initialization


def init(config: FilterConfig, model: DbnModel, obs0: Mapping[str, int], rng: np.random.Generator) -> FilterState:
    """Belief after conditioning the prior network on the slice-0 observation."""
    check_model(model)
    config.check(model)
    alg = config.algorithm
    diagnostics = {}
    if alg in (EXACT, BK):
        prior = exact.exact_prior(model, config.exact_cap)
        posterior, z = exact.exact_condition(prior, model, obs0, initial=True)
        belief = posterior if alg == EXACT else tuple(
            exact.marginalize(posterior, c) for c in config.clustering.clusters)
        inc = math.log(z)
    elif alg == PF:
        rows, inc = _propagate(model, None, obs0, config.particles, config.resample, rng, 0,
                               n_draws=config.particles)
        belief = ParticleTable(model.state_names, rows)
        diagnostics["particle_count"] = config.particles
    else:
        sizes = config.cluster_sizes()
        n = max(sizes)
        rows, inc = _propagate(model, None, obs0, n, config.resample, rng, 0, n_draws=n)
        tables = _project_clusters(model, rows, config.clustering)
        belief = tuple(t if len(t) == nc else resample(t, nc, config.resample, rng)
                       for t, nc in zip(tables, sizes))
        diagnostics["particle_count"] = n
    return FilterState(alg, belief, 0, inc, inc, diagnostics)


# --------------------------------------------------------------------------
# per-algorithm steps


def exact_step(state: FilterState, model: DbnModel, obs: Mapping[str, int], cap: int | None = exact.DEFAULT_CAP):
    prior = exact.exact_predict(state.belief, model, cap)
    posterior, z = exact.exact_condition(prior, model, obs)
    inc = math.log(z)
    return _advance(state, posterior, inc), inc


def pf_step(state: FilterState, model: DbnModel, obs: Mapping[str, int], rng: np.random.Generator,
            n: int | None = None, scheme: str = MULTINOMIAL):
    """Propagate every particle through the 2-TBN, weight by the evidence, resample."""
    table: ParticleTable = state.belief
    n = len(table) if n is None else n
    rows, inc = _propagate(model, table.rows, obs, n, scheme, rng, state.t + 1)
    return _advance(state, ParticleTable(model.state_names, rows), inc, particle_count=n), inc


def bk_step(state: FilterState, model: DbnModel, clustering: Clustering, obs: Mapping[str, int],
            cap: int | None = exact.DEFAULT_CAP):
    """One exact update from the product of cluster marginals, then re-project onto the clusters."""
    joint = exact.product(state.belief, model.state_names)
    prior = exact.exact_predict(joint, model, cap)
    posterior, z = exact.exact_condition(prior, model, obs)
    belief = tuple(exact.marginalize(posterior, c) for c in clustering.clusters)
    inc = math.log(z)
    return _advance(state, belief, inc), inc


def fp1_step(state: FilterState, model: DbnModel, clustering: Clustering, obs: Mapping[str, int],
             rng: np.random.Generator, n: int, scheme: str = MULTINOMIAL, join_cap: int | None = DEFAULT_JOIN_CAP):
    """Equijoin the cluster tables, run a PF step on the joined particles, project back."""
    joined = project(equijoin_all(state.belief, cap=join_cap), model.state_names)
    rows, inc = _propagate(model, joined.rows, obs, n, scheme, rng, state.t + 1)
    belief = _project_clusters(model, rows, clustering)
    return _advance(state, belief, inc, particle_count=n, join_rows=len(joined)), inc


def fp2_step(state: FilterState, model: DbnModel, clustering: Clustering, obs: Mapping[str, int],
             rng: np.random.Generator, n: int, draws: int, scheme: str = MULTINOMIAL,
             order: Sequence[int] | None = None):
    """Like FP1 with the equijoin replaced by ``draws`` weighted sample-join draws.

    ``order`` permutes the cluster visit order of the sample-join.
    """
    tables = state.belief if order is None else [state.belief[i] for i in order]
    plan = preprocess_sample_join(tables)
    sampled, discard_rate = sample_join_with_stats(plan, draws, rng)
    sampled = project(sampled, model.state_names)
    rows, inc = _propagate(model, sampled.rows, obs, n, scheme, rng, state.t + 1, prior_weights=sampled.weights)
    belief = _project_clusters(model, rows, clustering)
    return _advance(state, belief, inc, particle_count=draws, discard_rate=discard_rate), inc


def fp3_update(model: DbnModel, clustering: Clustering, tables: Sequence[ParticleTable], obs: Mapping[str, int],
               tree: CliqueTree | None = None) -> tuple[list[ParticleTable], float]:
    """Propagate cluster tables through the junction tree without sampling.

    ``tables`` may be weighted. Returns the normalized weighted marginal of
    each cluster at the current slice and the log of the calibrated mass.
    """
    tree = clique_tree_for(model, clustering) if tree is None else tree
    priors = []
    for t in tables:
        t = normalize(merge_duplicates(t))
        priors.append(ParticleTable(tuple(prev_label(v) for v in t.schema), t.rows, t.weights))
    key = ("fp3_static", id(tree))
    static = model._cache.get(key)
    if static is None or static.tree is not tree:
        static = model._cache[key] = prepare_static(tree, transition_potentials(model))
    calibrated = calibrate(tree, priors, obs, static=static, eager=False)
    marginals = [clique_marginal(calibrated, c, tree.cur_anchor[i]) for i, c in enumerate(clustering.clusters)]
    return marginals, math.log(calibrated.total_mass)


def fp3_step(state: FilterState, model: DbnModel, clustering: Clustering, obs: Mapping[str, int],
             rng: np.random.Generator, sizes: Sequence[int], scheme: str = MULTINOMIAL):
    marginals, inc = fp3_update(model, clustering, state.belief, obs)
    belief = tuple(resample(m, nc, scheme, rng) for m, nc in zip(marginals, sizes))
    rows = sum(len(m) for m in marginals)
    return _advance(state, belief, inc, particle_count=max(sizes), join_rows=rows), inc


def _advance(state: FilterState, belief, inc: float, **diagnostics) -> FilterState:
    return dataclasses.replace(state, belief=belief, t=state.t + 1,
                               log_likelihood=state.log_likelihood + inc, increment=inc,
                               diagnostics=diagnostics)


def step(state: FilterState, config: FilterConfig, model: DbnModel, obs: Mapping[str, int],
         rng: np.random.Generator) -> tuple[FilterState, float]:
    """Advance ``state`` by one slice with the algorithm named in ``config``."""
    alg = config.algorithm
    if state.algorithm != alg:
        raise ValueError(f"state of {state.algorithm!r} stepped with {alg!r} config")
    if alg == EXACT:
        return exact_step(state, model, obs, config.exact_cap)
    if alg == PF:
        return pf_step(state, model, obs, rng, config.particles, config.resample)
    if alg == BK:
        return bk_step(state, model, config.clustering, obs, config.exact_cap)
    sizes = config.cluster_sizes()
    if alg == FP1:
        return fp1_step(state, model, config.clustering, obs, rng, sizes[0], config.resample, config.join_cap)
    if alg == FP2:
        return fp2_step(state, model, config.clustering, obs, rng, sizes[0], config.particles, config.resample,
                        config.join_order)
    return fp3_step(state, model, config.clustering, obs, rng, sizes, config.resample)


def run_filter(config: FilterConfig, model: DbnModel, observations: Sequence[Mapping[str, int]],
               rng: np.random.Generator | None = None) -> Iterator[FilterState]:
    """Yield the filter state after each slice of ``observations``."""
    rng = make_rng(config.seed) if rng is None else rng
    state = None
    for obs in observations:
        state = init(config, model, obs, rng) if state is None else step(state, config, model, obs, rng)[0]
        yield state


# --------------------------------------------------------------------------
# belief readout


def cluster_marginals(state: FilterState, model: DbnModel, epsilon: float = DEFAULT_EPSILON) -> list[DenseDistribution]:
    """Per-cluster dense marginals of a factored belief (smoothed for particle beliefs)."""
    if state.algorithm == BK:
        return list(state.belief)
    if state.algorithm in FACTORED:
        cards = model.cardinalities
        return [to_dense(t, cards, epsilon) for t in state.belief]
    raise ValueError(f"{state.algorithm} beliefs are not factored")


def query_marginal(state: FilterState, model: DbnModel, names: Sequence[str],
                   epsilon: float = DEFAULT_EPSILON) -> DenseDistribution:
    """Marginal over ``names``.

    For factored beliefs a query spanning several clusters is answered by
    the renormalized product of the marginals of each cluster's overlap with
    ``names``; this is the factored approximation, not the true marginal.
    """
    names = tuple(names)
    alg = state.algorithm
    if alg == EXACT:
        return exact.marginalize(state.belief, names)
    if alg == PF:
        return to_dense(project(state.belief, names), model.cardinalities, epsilon)
    if alg == BK:
        pieces = state.belief
        for d in pieces:
            if set(names) <= set(d.schema):
                return exact.marginalize(d, names)
        parts = [exact.marginalize(d, [n for n in d.schema if n in names]) for d in pieces
                 if set(d.schema) & set(names)]
        return exact.product(parts, names)
    cards = model.cardinalities
    for t in state.belief:
        if set(names) <= set(t.schema):
            return to_dense(project(t, names), cards, epsilon)
    parts = [to_dense(project(t, [n for n in t.schema if n in names]), cards, epsilon)
             for t in state.belief if set(t.schema) & set(names)]
    return exact.product(parts, names)
