"""Independent reference implementations used by the tests.

Nothing here reuses the package's inference code: probabilities are read
straight out of CPT arrays with explicit loops over ``itertools.product``.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict

import numpy as np

from dbnmon.model import CUR, OBSERVATION, PREV, STATE, Cpt, DbnModel, Variable


# --------------------------------------------------------------------------
# random models


def random_model(rng: np.random.Generator, n_state: int = 3, n_obs: int = 2, max_card: int = 3,
                 intra_edges: bool = True, zero_prob: float = 0.0) -> DbnModel:
    """Small random 2-TBN with mixed cardinalities and optional intra-slice edges."""
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n_state + n_obs)]
    states = [f"S{i}" for i in range(n_state)]
    obs = [f"O{i}" for i in range(n_obs)]
    names = states + obs
    card = dict(zip(names, cards))
    variables = tuple(Variable(n, card[n], STATE if n in states else OBSERVATION) for n in names)

    def table(child, parents):
        rows = int(np.prod([card[p] for p, _ in parents], dtype=int)) if parents else 1
        probs = rng.dirichlet(np.ones(card[child]), size=rows)
        if zero_prob:
            mask = rng.random(probs.shape) < zero_prob
            mask[np.arange(rows), rng.integers(0, card[child], rows)] = False
            probs = np.where(mask, 0.0, probs)
            probs /= probs.sum(axis=1, keepdims=True)
        return Cpt(child, tuple(parents), probs)

    prior, transition = {}, {}
    for i, s in enumerate(states):
        earlier = [(states[j], CUR) for j in range(i) if intra_edges and rng.random() < 0.4]
        prior[s] = table(s, earlier)
        prev = [(states[j], PREV) for j in range(n_state) if j == i or rng.random() < 0.4]
        transition[s] = table(s, prev + earlier)
    for o in obs:
        k = int(rng.integers(1, min(2, n_state) + 1))
        parents = [(s, CUR) for s in rng.choice(states, size=k, replace=False).tolist()]
        prior[o] = table(o, parents)
        transition[o] = table(o, parents)
    return DbnModel(variables, prior, transition)


# --------------------------------------------------------------------------
# enumeration


def cpt_prob(cpt: Cpt, child_value: int, prev: dict, cur: dict, card: dict) -> float:
    row = 0
    for name, tag in cpt.parents:
        value = prev[name] if tag == PREV else cur[name]
        row = row * card[name] + value
    return float(cpt.probabilities[row, child_value])


def state_assignments(model: DbnModel):
    names = model.state_names
    card = model.cardinalities
    for values in itertools.product(*(range(card[n]) for n in names)):
        yield dict(zip(names, values))


def slice_prob(model: DbnModel, cpts: dict, prev: dict | None, cur: dict) -> float:
    card = model.cardinalities
    p = 1.0
    for name, cpt in cpts.items():
        p *= cpt_prob(cpt, cur[name], prev or {}, cur, card)
    return p


def oracle_filter(model: DbnModel, observations: list[dict]) -> tuple[list[dict], list[float]]:
    """Forward recursion over explicit state dictionaries.

    Returns posteriors as ``{state tuple: prob}`` (tuples in state_names order)
    and per-slice likelihood normalizers.
    """
    names = model.state_names
    states = list(state_assignments(model))
    beliefs, zs = [], []
    belief = None
    for t, obs in enumerate(observations):
        post = {}
        for cur in states:
            full = {**cur, **obs}
            if t == 0:
                p = slice_prob(model, model.prior, None, full)
            else:
                p = 0.0
                for prev in states:
                    q = belief[tuple(prev[n] for n in names)]
                    if q:
                        p += q * slice_prob(model, model.transition, prev, full)
            post[tuple(cur[n] for n in names)] = p
        z = sum(post.values())
        belief = {k: v / z for k, v in post.items()}
        beliefs.append(belief)
        zs.append(z)
    return beliefs, zs


def oracle_unrolled(model: DbnModel, observations: list[dict]) -> tuple[dict, float]:
    """Posterior of the last slice and P(observations) by summing the unrolled joint.

    Exponential in the sequence length; only for tiny models.
    """
    names = model.state_names
    states = list(state_assignments(model))
    last: dict = defaultdict(float)
    total = 0.0
    for path in itertools.product(states, repeat=len(observations)):
        p = 1.0
        for t, (cur, obs) in enumerate(zip(path, observations)):
            full = {**cur, **obs}
            p *= slice_prob(model, model.prior, None, full) if t == 0 else \
                slice_prob(model, model.transition, path[t - 1], full)
            if p == 0.0:
                break
        total += p
        last[tuple(path[-1][n] for n in names)] += p
    return {k: v / total for k, v in last.items()}, total


def unrolled_posteriors(model: DbnModel, observations: list[dict]) -> tuple[list[np.ndarray], list[float]]:
    """Per-slice filtered posteriors from the explicitly materialized unrolled joint.

    The joint over all slices ``0..t`` is built as a full tensor (one axis per
    slice, states enumerated in ``state_assignments`` order) and summed down
    to its last axis; ``P(y_0..y_t)`` is its total mass. Memory grows as
    ``|states| ** (t + 1)``.
    """
    states = list(state_assignments(model))
    joint = None
    posteriors, evidence = [], []
    for t, obs in enumerate(observations):
        if t == 0:
            joint = np.array([slice_prob(model, model.prior, None, {**cur, **obs}) for cur in states])
        else:
            step = np.array([[slice_prob(model, model.transition, prev, {**cur, **obs}) for cur in states]
                             for prev in states])
            joint = joint[..., None] * step.reshape((1,) * (joint.ndim - 1) + step.shape)
        last = joint.reshape(-1, len(states)).sum(axis=0)
        total = float(last.sum())
        posteriors.append(last / total)
        evidence.append(total)
    return posteriors, evidence


def dense_from_dict(dist: dict, model: DbnModel) -> np.ndarray:
    card = [model.cardinalities[n] for n in model.state_names]
    out = np.zeros(card)
    for k, v in dist.items():
        out[k] = v
    return out.ravel()


# --------------------------------------------------------------------------
# relational algebra


def nested_loop_join(r_schema, r_rows, s_schema, s_rows):
    """Bag equijoin by nested loops; returns (schema, list of row tuples)."""
    shared = [n for n in r_schema if n in s_schema]
    extra = [n for n in s_schema if n not in r_schema]
    out = []
    for a in r_rows:
        ra = dict(zip(r_schema, a))
        for b in s_rows:
            sb = dict(zip(s_schema, b))
            if all(ra[n] == sb[n] for n in shared):
                out.append(tuple(a) + tuple(sb[n] for n in extra))
    return tuple(r_schema) + tuple(extra), out


def join_distribution(schemas, row_sets) -> tuple[tuple, dict]:
    """Normalized distribution of the bag equijoin of several unweighted tables."""
    schema, rows = schemas[0], [tuple(r) for r in row_sets[0]]
    for s, rs in zip(schemas[1:], row_sets[1:]):
        schema, rows = nested_loop_join(schema, rows, s, [tuple(r) for r in rs])
    counts = Counter(rows)
    n = sum(counts.values())
    return schema, {k: v / n for k, v in counts.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def kl(p, q) -> float:
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)
