"""Random model generators for the two benchmark topologies.

Both generators produce binary state variables ``X0..X{n-1}`` and one binary
observation ``Y{i}`` per state variable with ``P(Y=X) = obs_accuracy``.
"""

from __future__ import annotations

import numpy as np

from .model import CUR, OBSERVATION, PREV, STATE, Cpt, DbnModel, Variable

DEFAULT_OBS_ACCURACY = 0.9


def _uniform_rows(n_rows: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.random(n_rows)
    return np.column_stack([p, 1.0 - p])


def _skewed_rows(n_rows: int, skew: float, rng: np.random.Generator) -> np.ndarray:
    low = rng.uniform(0.0, skew, size=n_rows)
    high_arm = rng.random(n_rows) < 0.5
    p = np.where(high_arm, 1.0 - low, low)
    return np.column_stack([p, 1.0 - p])


def _observation_cpt(child: str, parent: str, accuracy: float) -> Cpt:
    return Cpt(child, ((parent, CUR),), np.array([[accuracy, 1 - accuracy], [1 - accuracy, accuracy]]))


def _assemble(n: int, transition_parents, transition_rows, prior_rows, obs_accuracy) -> DbnModel:
    states = [f"X{i}" for i in range(n)]
    obs = [f"Y{i}" for i in range(n)]
    variables = [Variable(s, 2, STATE) for s in states] + [Variable(o, 2, OBSERVATION) for o in obs]
    prior, transition = {}, {}
    for i, s in enumerate(states):
        prior[s] = Cpt(s, (), prior_rows[i])
    for i, s in enumerate(states):
        parents = tuple((states[j], PREV) for j in transition_parents[i])
        transition[s] = Cpt(s, parents, transition_rows[i])
    for s, o in zip(states, obs):
        prior[o] = _observation_cpt(o, s, obs_accuracy)
        transition[o] = _observation_cpt(o, s, obs_accuracy)
    return DbnModel(tuple(variables), prior, transition)


def generate_two_cluster_model(
    nodes_per_cluster: int = 5,
    cross_edges: int = 2,
    rng: np.random.Generator | None = None,
    obs_accuracy: float = DEFAULT_OBS_ACCURACY,
) -> DbnModel:
    """Two blocks of binary nodes, densely coupled inside, sparsely across.

    Every node has all nodes of its own block (previous slice) as parents.
    ``cross_edges`` extra previous-slice parents are placed uniformly at
    random among the ``2 * k * k`` inter-block slots. CPT rows and the
    independent slice-0 marginals are uniform on the simplex.
    """
    if nodes_per_cluster < 1 or cross_edges < 0:
        raise ValueError("nodes_per_cluster must be >= 1 and cross_edges >= 0")
    rng = np.random.default_rng() if rng is None else rng
    k = nodes_per_cluster
    n = 2 * k
    slots = 2 * k * k
    if cross_edges > slots:
        raise ValueError(f"cross_edges={cross_edges} exceeds the {slots} available inter-block slots")
    block = [list(range(0, k)), list(range(k, n))]
    parents = [list(block[i // k]) for i in range(n)]
    # slot s: child = s // k, parent = s % k in the other block
    for s in sorted(rng.choice(slots, size=cross_edges, replace=False).tolist()):
        child, offset = divmod(s, k)
        other = block[1 - child // k]
        parents[child].append(other[offset])
    parents = [sorted(p) for p in parents]
    transition_rows = [_uniform_rows(2 ** len(p), rng) for p in parents]
    prior_rows = [_uniform_rows(1, rng) for _ in range(n)]
    return _assemble(n, parents, transition_rows, prior_rows, obs_accuracy)


def generate_random_parent_model(
    n: int = 50,
    parents_per_node: int = 3,
    skew: float = 0.05,
    rng: np.random.Generator | None = None,
    obs_accuracy: float = DEFAULT_OBS_ACCURACY,
) -> DbnModel:
    """``n`` binary nodes, each with ``parents_per_node`` random previous-slice parents.

    Transition rows are ``(p, 1-p)`` with ``p`` uniform on
    ``(0, skew) U (1-skew, 1)``. There are no intra-slice state edges.
    Slice-0 marginals are uniform on the simplex.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= parents_per_node < n:
        raise ValueError(f"parents_per_node={parents_per_node} must be in [0, n={n})")
    if not 0 < skew < 0.5:
        raise ValueError("skew must lie in (0, 0.5)")
    rng = np.random.default_rng() if rng is None else rng
    parents = [sorted(rng.choice(n, size=parents_per_node, replace=False).tolist()) for _ in range(n)]
    transition_rows = [_skewed_rows(2 ** len(p), skew, rng) for p in parents]
    prior_rows = [_uniform_rows(1, rng) for _ in range(n)]
    return _assemble(n, parents, transition_rows, prior_rows, obs_accuracy)


def contiguous_clusters(names, k: int) -> list[list[str]]:
    """Split ``names`` into ``k`` contiguous groups of near-equal size."""
    names = list(names)
    if not 1 <= k <= len(names):
        raise ValueError(f"cannot split {len(names)} variables into {k} clusters")
    return [list(chunk) for chunk in np.array_split(np.array(names, dtype=object), k)]
