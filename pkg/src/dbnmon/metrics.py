"""Distances between beliefs."""

from __future__ import annotations

import numpy as np

from . import exact
from .errors import JointTooLargeError
from .exact import DenseDistribution
from .filters import BK, EXACT, FACTORED, PF, FilterState, cluster_marginals, query_marginal
from .model import DbnModel
from .tables import DEFAULT_EPSILON, to_dense


def kl_divergence(p: DenseDistribution, q: DenseDistribution) -> float:
    """KL(p || q) in nats, with 0 * log 0 = 0."""
    if p.schema != q.schema or p.cardinalities != q.cardinalities:
        raise ValueError(f"schema mismatch: {p.schema} vs {q.schema}")
    pp, qq = p.probabilities, q.probabilities
    support = pp > 0
    if np.any(qq[support] <= 0):
        raise ValueError("q has zero probability where p is positive")
    return float(np.sum(pp[support] * np.log(pp[support] / qq[support])))


def belief_to_joint(state: FilterState, model: DbnModel, epsilon: float = DEFAULT_EPSILON,
                    cap: int | None = exact.DEFAULT_CAP) -> DenseDistribution:
    """Dense joint over all state variables implied by a filter belief.

    Particle beliefs are epsilon-smoothed; factored beliefs become the
    normalized product of their cluster marginals.
    """
    size = model.joint_size()
    if cap is not None and size > cap:
        raise JointTooLargeError(f"joint state space has {size} configurations (cap {cap})")
    if state.algorithm == EXACT:
        return state.belief
    if state.algorithm == PF:
        dist = to_dense(state.belief, model.cardinalities, epsilon)
        return dist if dist.schema == model.state_names else exact.marginalize(dist, model.state_names)
    if state.algorithm == BK or state.algorithm in FACTORED:
        return exact.product(cluster_marginals(state, model, epsilon), model.state_names)
    raise ValueError(f"unknown algorithm {state.algorithm!r}")


def kl_marginal_mean(truth: DenseDistribution, state: FilterState, model: DbnModel,
                     epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean over state variables of KL(true marginal || approximate marginal)."""
    values = [kl_divergence(exact.marginalize(truth, (n,)), query_marginal(state, model, (n,), epsilon))
              for n in model.state_names]
    return float(np.mean(values))
