import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbnmon.errors import ModelValidationError
from dbnmon.model import (
    CUR,
    OBSERVATION,
    PREV,
    STATE,
    Cpt,
    DbnModel,
    Variable,
    ancestral_sample,
    check_model,
    sample_transition,
    simulate,
    topological_order,
    validate_model,
)
from dbnmon.seeding import make_rng

from oracles import random_model, slice_prob, state_assignments


def chain_model(p_stay=0.8, accuracy=0.9) -> DbnModel:
    """One binary state X with a noisy observation Y."""
    variables = (Variable("X", 2, STATE), Variable("Y", 2, OBSERVATION))
    obs = Cpt("Y", (("X", CUR),), [[accuracy, 1 - accuracy], [1 - accuracy, accuracy]])
    return DbnModel(
        variables,
        prior={"X": Cpt("X", (), [0.5, 0.5]), "Y": obs},
        transition={"X": Cpt("X", (("X", PREV),), [[p_stay, 1 - p_stay], [1 - p_stay, p_stay]]), "Y": obs},
    )


def kinds(model):
    return {v.kind for v in validate_model(model)}


class TestValidation:
    def test_valid_model_has_no_violations(self):
        assert validate_model(chain_model()) == []
        assert check_model(chain_model()) is not None

    def test_random_models_are_valid(self):
        for seed in range(20):
            assert validate_model(random_model(make_rng(seed))) == []

    def test_duplicate_variable(self):
        m = chain_model()
        m = dataclasses.replace(m, variables=m.variables + (Variable("X", 2, STATE),))
        assert "duplicate-id" in kinds(m)

    def test_cardinality_below_two(self):
        m = chain_model()
        m = dataclasses.replace(m, variables=(Variable("X", 1, STATE), m.variables[1]))
        assert "cardinality" in kinds(m)

    def test_missing_cpt(self):
        m = chain_model()
        m = dataclasses.replace(m, transition={"Y": m.transition["Y"]})
        assert "missing-cpt" in kinds(m)

    def test_unknown_parent(self):
        m = chain_model()
        bad = Cpt("X", (("Z", PREV),), [[0.5, 0.5], [0.5, 0.5]])
        m = dataclasses.replace(m, transition={**m.transition, "X": bad})
        assert "unknown-reference" in kinds(m)

    def test_rows_must_sum_to_one(self):
        m = chain_model()
        bad = Cpt("X", (("X", PREV),), [[0.5, 0.4], [0.5, 0.5]])
        m = dataclasses.replace(m, transition={**m.transition, "X": bad})
        assert kinds(m) == {"normalization"}

    def test_row_count_mismatch(self):
        m = chain_model()
        bad = Cpt("X", (("X", PREV),), [[0.5, 0.5]])
        m = dataclasses.replace(m, transition={**m.transition, "X": bad})
        assert "row-count" in kinds(m)

    def test_negative_probability(self):
        m = chain_model()
        bad = Cpt("X", (("X", PREV),), [[1.5, -0.5], [0.5, 0.5]])
        m = dataclasses.replace(m, transition={**m.transition, "X": bad})
        assert "range" in kinds(m)

    def test_observation_with_previous_slice_parent(self):
        m = chain_model()
        bad = Cpt("Y", (("X", PREV),), [[0.9, 0.1], [0.1, 0.9]])
        m = dataclasses.replace(m, transition={**m.transition, "Y": bad})
        assert "observation-parent" in kinds(m)

    def test_state_with_observation_parent(self):
        m = chain_model()
        bad = Cpt("X", (("Y", CUR),), [[0.9, 0.1], [0.1, 0.9]])
        m = dataclasses.replace(m, transition={**m.transition, "X": bad})
        assert "observation-child" in kinds(m)

    def test_intra_slice_cycle(self):
        variables = (Variable("A", 2, STATE), Variable("B", 2, STATE))
        t = [[0.5, 0.5], [0.5, 0.5]]
        m = DbnModel(
            variables,
            prior={"A": Cpt("A", (), [0.5, 0.5]), "B": Cpt("B", (), [0.5, 0.5])},
            transition={"A": Cpt("A", (("B", CUR),), t), "B": Cpt("B", (("A", CUR),), t)},
        )
        assert "cycle" in kinds(m)
        with pytest.raises(ModelValidationError) as info:
            check_model(m)
        assert any(v.kind == "cycle" for v in info.value.violations)

    def test_all_violations_reported_together(self):
        m = chain_model()
        bad = Cpt("X", (("X", PREV),), [[0.5, 0.4], [0.5, 0.5]])
        m = dataclasses.replace(m, variables=m.variables + (Variable("X", 2, STATE),),
                                transition={**m.transition, "X": bad})
        assert {"duplicate-id", "normalization"} <= kinds(m)


class TestTopology:
    def test_parents_come_first(self):
        for seed in range(10):
            m = random_model(make_rng(seed), n_state=4)
            for section, cpts in (("prior", m.prior), ("transition", m.transition)):
                order = topological_order(m, section)
                pos = {n: i for i, n in enumerate(order)}
                assert sorted(order) == sorted(m.names)
                for name, cpt in cpts.items():
                    for p, tag in cpt.parents:
                        if tag == CUR:
                            assert pos[p] < pos[name]

    def test_ties_follow_model_order(self):
        assert topological_order(chain_model(), "transition") == ["X", "Y"]


class TestSampling:
    def test_slice0_frequencies_match_enumeration(self):
        m = random_model(make_rng(3), n_state=2, n_obs=1)
        n = 200_000
        values, weights = ancestral_sample(m, n, make_rng(4))
        assert np.all(weights == 1)
        names = m.names
        card = m.cardinalities
        for cur in state_assignments(m):
            for o in range(card["O0"]):
                full = {**cur, "O0": o}
                p = slice_prob(m, m.prior, None, full)
                hits = np.all(values == np.array([full[k] for k in names]), axis=1).mean()
                assert abs(hits - p) <= 5 * np.sqrt(p * (1 - p) / n) + 1e-12

    def test_transition_frequencies_match_enumeration(self):
        m = random_model(make_rng(5), n_state=2, n_obs=1)
        prev = {"S0": 1, "S1": 0}
        prev_row = np.zeros((1, len(m.names)), dtype=np.int64)
        prev_row[0, m.column("S0")] = 1
        n = 200_000
        values, _ = ancestral_sample(m, n, make_rng(6), previous=np.repeat(prev_row, n, axis=0))
        for cur in state_assignments(m):
            p = sum(slice_prob(m, m.transition, prev, {**cur, "O0": o}) for o in range(m.cardinalities["O0"]))
            hits = np.all(values[:, m.state_columns] == [cur[s] for s in m.state_names], axis=1).mean()
            assert abs(hits - p) <= 5 * np.sqrt(p * (1 - p) / n) + 1e-12

    def test_evidence_clamps_and_weights(self):
        m = chain_model(accuracy=0.75)
        ev = np.array([0, 1])
        values, w = ancestral_sample(m, 1000, make_rng(0), evidence=ev)
        assert np.all(values[:, 1] == 1)
        np.testing.assert_allclose(w, np.where(values[:, 0] == 1, 0.75, 0.25))

    def test_deterministic_model_tracks_state(self):
        m = chain_model(p_stay=1.0, accuracy=1.0)
        traj = simulate(m, 20, make_rng(1))
        assert len(set(traj.hidden[:, 0].tolist())) == 1
        np.testing.assert_array_equal(traj.hidden[:, 0], traj.observed[:, 0])

    def test_sample_transition_uses_prev(self):
        m = chain_model(p_stay=1.0)
        for x in (0, 1):
            assert sample_transition(m, {"X": x}, make_rng(2))["X"] == x


class TestTrajectory:
    def test_length_is_steps_plus_one(self):
        traj = simulate(chain_model(), 7, make_rng(0))
        assert len(traj) == 8
        assert traj.hidden.shape == (8, 1) and traj.observed.shape == (8, 1)

    def test_same_seed_same_trajectory(self):
        m = random_model(make_rng(1))
        assert simulate(m, 10, make_rng(9)) == simulate(m, 10, make_rng(9))
        assert simulate(m, 10, make_rng(9)) != simulate(m, 10, make_rng(10))

    def test_without_hidden(self):
        traj = simulate(chain_model(), 3, make_rng(0)).without_hidden()
        assert traj.hidden is None
        assert traj[1][0] is None

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 5))
    def test_values_in_range(self, seed, steps):
        m = random_model(make_rng(seed))
        traj = simulate(m, steps, make_rng(seed, 1))
        for name, col in zip(m.state_names, traj.hidden.T):
            assert col.min() >= 0 and col.max() < m.cardinalities[name]
        for name, col in zip(m.obs_names, traj.observed.T):
            assert col.min() >= 0 and col.max() < m.cardinalities[name]
