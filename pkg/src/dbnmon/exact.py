"""Exact recursive filtering over the explicit joint state distribution.

Beliefs are :class:`DenseDistribution` objects whose flat probability
vector is indexed in row-major order over ``schema`` (first variable most
significant), the same convention as CPT rows.
"""

from __future__ import annotations

import string
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ImpossibleEvidenceError, JointTooLargeError
from .model import CUR, PREV, DbnModel, check_model

DEFAULT_CAP = 2 ** 20
NORM_TOL = 1e-9
_MATRIX_LIMIT = 2 ** 11
_LETTERS = string.ascii_letters


@dataclass(frozen=True, eq=False)
class DenseDistribution:
    schema: tuple[str, ...]
    probabilities: np.ndarray
    cardinalities: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        probs = np.asarray(self.probabilities, dtype=float).ravel()
        object.__setattr__(self, "probabilities", probs)
        if not self.cardinalities:
            if len(self.schema) == 1:
                object.__setattr__(self, "cardinalities", (probs.size,))
            elif self.schema:
                raise ValueError("cardinalities are required for multi-variable distributions")
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "cardinalities", cards)
        if int(np.prod(cards, dtype=np.int64)) != probs.size:
            raise ValueError(f"length {probs.size} != product of cardinalities {cards}")

    @property
    def tensor(self) -> np.ndarray:
        return self.probabilities.reshape(self.cardinalities)

    def is_normalized(self, tol: float = NORM_TOL) -> bool:
        return bool(np.all(self.probabilities >= 0) and abs(self.probabilities.sum() - 1.0) <= tol)


def from_tensor(schema: Sequence[str], tensor: np.ndarray) -> DenseDistribution:
    return DenseDistribution(tuple(schema), tensor.ravel(), tuple(tensor.shape))


def marginalize(dist: DenseDistribution, names: Sequence[str]) -> DenseDistribution:
    """Marginal of ``dist`` over ``names``, in the order given."""
    names = tuple(names)
    unknown = set(names) - set(dist.schema)
    if unknown:
        raise ValueError(f"variables {sorted(unknown)} not in schema {dist.schema}")
    keep = [dist.schema.index(n) for n in names]
    drop = tuple(i for i in range(len(dist.schema)) if i not in keep)
    t = dist.tensor.sum(axis=drop) if drop else dist.tensor
    remaining = [i for i in range(len(dist.schema)) if i in keep]
    t = np.transpose(t, [remaining.index(i) for i in keep])
    return from_tensor(names, np.ascontiguousarray(t))


def product(dists: Sequence[DenseDistribution], schema: Sequence[str], normalize: bool = True) -> DenseDistribution:
    """Pointwise product of ``dists`` broadcast to the joint over ``schema``.

    Shared variables are multiplied, not deduplicated; with ``normalize`` the
    result is renormalized to sum to one.
    """
    schema = tuple(schema)
    cards = {}
    for d in dists:
        cards.update(zip(d.schema, d.cardinalities))
    shape = tuple(cards[n] for n in schema)
    out = np.ones(shape)
    for d in dists:
        out = out * _broadcast(d.tensor, [schema.index(n) for n in d.schema], len(schema))
    if normalize:
        total = out.sum()
        if total <= 0:
            raise ImpossibleEvidenceError("product of marginals has zero mass")
        out = out / total
    return from_tensor(schema, out)


def _broadcast(tensor: np.ndarray, positions: Sequence[int], n_axes: int) -> np.ndarray:
    """Reshape ``tensor`` (axes at joint ``positions``) so it broadcasts over ``n_axes`` axes."""
    order = np.argsort(positions)
    t = np.transpose(tensor, order) if len(positions) else tensor
    shape = [1] * n_axes
    for axis, pos in enumerate(np.asarray(positions)[order]):
        shape[pos] = t.shape[axis]
    return t.reshape(shape)


def _check_cap(model: DbnModel, cap: int | None) -> None:
    size = model.joint_size()
    if cap is not None and size > cap:
        raise JointTooLargeError(f"joint state space has {size} configurations (cap {cap})")


def _state_factors(model: DbnModel, section: str):
    """(operand tensors, subscript strings) for the state CPTs of ``section``."""
    states = model.state_names
    s = len(states)
    if 2 * s > len(_LETTERS):
        raise JointTooLargeError(f"{s} state variables exceed the einsum index budget")
    letter = {(n, CUR): _LETTERS[s + i] for i, n in enumerate(states)}
    letter.update({(n, PREV): _LETTERS[i] for i, n in enumerate(states)})
    cpts = model.prior if section == "prior" else model.transition
    cards = model.cardinalities
    operands, subs = [], []
    for n in states:
        cpt = cpts[n]
        shape = [cards[p] for p, _ in cpt.parents] + [cards[n]]
        operands.append(cpt.probabilities.reshape(shape))
        subs.append("".join(letter[p] for p in cpt.parents) + letter[(n, CUR)])
    prev = "".join(_LETTERS[:s])
    cur = "".join(_LETTERS[s:2 * s])
    return operands, subs, prev, cur


def exact_prior(model: DbnModel, cap: int | None = DEFAULT_CAP) -> DenseDistribution:
    """Slice-0 state distribution of the prior network."""
    check_model(model)
    _check_cap(model, cap)
    operands, subs, _, cur = _state_factors(model, "prior")
    expr = ",".join(subs) + "->" + cur
    t = np.einsum(expr, *operands, optimize="greedy") if operands else np.ones(())
    return from_tensor(model.state_names, t)


def _transition_matrix(model: DbnModel) -> np.ndarray:
    m = model._cache.get("transition_matrix")
    if m is None:
        operands, subs, prev, cur = _state_factors(model, "transition")
        # previous-slice variables that nothing depends on still index the matrix rows
        cards = model.cardinalities
        for letter, name in zip(prev, model.state_names):
            if not any(letter in s for s in subs):
                operands.append(np.ones(cards[name]))
                subs.append(letter)
        t = np.einsum(",".join(subs) + "->" + prev + cur, *operands, optimize="greedy")
        size = model.joint_size()
        m = np.ascontiguousarray(t.reshape(size, size))
        model._cache["transition_matrix"] = m
    return m


def _check_schema(belief: DenseDistribution, model: DbnModel) -> None:
    if belief.schema != model.state_names:
        raise ValueError(f"belief schema {belief.schema} != model state variables {model.state_names}")


def exact_predict(belief: DenseDistribution, model: DbnModel, cap: int | None = DEFAULT_CAP) -> DenseDistribution:
    """Push a posterior belief through the transition model (one-step prediction)."""
    check_model(model)
    _check_schema(belief, model)
    _check_cap(model, cap)
    size = model.joint_size()
    if size <= _MATRIX_LIMIT:
        out = belief.probabilities @ _transition_matrix(model)
    else:
        operands, subs, prev, cur = _state_factors(model, "transition")
        key = "transition_path"
        expr = ",".join([prev, *subs]) + "->" + cur
        path = model._cache.get(key)
        if path is None:
            path = np.einsum_path(expr, belief.tensor, *operands, optimize="greedy")[0]
            model._cache[key] = path
        out = np.einsum(expr, belief.tensor, *operands, optimize=path).ravel()
    total = out.sum()
    return DenseDistribution(model.state_names, out / total, belief.cardinalities)


def observation_likelihood(model: DbnModel, obs: Mapping[str, int], initial: bool = False) -> np.ndarray:
    """``P(y | x)`` for every joint state ``x`` as a tensor over the state variables.

    ``initial`` selects the observation CPTs of the prior network (slice 0).
    """
    states = model.state_names
    cards = model.cardinalities
    missing = [n for n in model.obs_names if n not in obs]
    if missing:
        raise ValueError(f"observation incomplete: missing {missing}")
    cpts = model.prior if initial else model.transition
    out = np.ones(tuple(cards[n] for n in states))
    for name in model.obs_names:
        cpt = cpts[name]
        value = int(obs[name])
        if not 0 <= value < cards[name]:
            raise ValueError(f"observed value {value} out of range for {name!r}")
        t = cpt.probabilities.reshape([cards[p] for p, _ in cpt.parents] + [cards[name]])[..., value]
        index, positions = [], []
        for pname, _ in cpt.parents:
            if pname in model.obs_names:
                index.append(int(obs[pname]))
            else:
                index.append(slice(None))
                positions.append(states.index(pname))
        t = t[tuple(index)] if index else t
        out = out * _broadcast(np.asarray(t), positions, len(states))
    return out


def exact_condition(
    prior: DenseDistribution, model: DbnModel, obs: Mapping[str, int], initial: bool = False
) -> tuple[DenseDistribution, float]:
    """Condition a prior belief on ``obs``; returns the posterior and ``P(obs | past)``."""
    _check_schema(prior, model)
    joint = prior.probabilities * observation_likelihood(model, obs, initial).ravel()
    z = float(joint.sum())
    if z <= 0.0:
        raise ImpossibleEvidenceError(f"observation {dict(obs)} has zero probability under the prior belief")
    return DenseDistribution(prior.schema, joint / z, prior.cardinalities), z


def exact_filter(
    model: DbnModel, observations: Sequence[Mapping[str, int]], cap: int | None = DEFAULT_CAP
) -> list[tuple[DenseDistribution, float]]:
    """Posterior belief and one-step likelihood for every slice of ``observations``."""
    check_model(model)
    _check_cap(model, cap)
    out = []
    for t, obs in enumerate(observations):
        prior = exact_prior(model, cap) if t == 0 else exact_predict(out[-1][0], model, cap)
        out.append(exact_condition(prior, model, obs, initial=(t == 0)))
    return out
