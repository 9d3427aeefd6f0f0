import math

import numpy as np
import pytest

from dbnmon.errors import JointTooLargeError
from dbnmon.exact import DenseDistribution, exact_filter, marginalize
from dbnmon.filters import BK, EXACT, FP1, PF, Clustering, FilterConfig, FilterState, run_filter
from dbnmon.generators import contiguous_clusters, generate_two_cluster_model
from dbnmon.metrics import belief_to_joint, kl_divergence, kl_marginal_mean
from dbnmon.model import simulate
from dbnmon.seeding import make_rng
from dbnmon.tables import ParticleTable, from_rows, project, to_dense

from oracles import kl, random_model


class TestKL:
    def test_identity(self):
        p = DenseDistribution(("A",), [0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == 0.0

    def test_known_value(self):
        p = DenseDistribution(("A",), [1.0, 0.0])
        q = DenseDistribution(("A",), [0.5, 0.5])
        assert kl_divergence(p, q) == pytest.approx(math.log(2), abs=1e-12)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 8))
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            value = kl_divergence(DenseDistribution(("A",), p), DenseDistribution(("A",), q))
            assert value >= 0
            assert value == pytest.approx(kl(p, q), rel=1e-12, abs=1e-15)

    def test_errors(self):
        p = DenseDistribution(("A",), [0.5, 0.5])
        with pytest.raises(ValueError):
            kl_divergence(p, DenseDistribution(("B",), [0.5, 0.5]))
        with pytest.raises(ValueError):
            kl_divergence(p, DenseDistribution(("A",), [1.0, 0.0]))


class TestBeliefToJoint:
    def test_exact_is_identity(self):
        m = random_model(make_rng(0))
        state = next(run_filter(FilterConfig(EXACT), m, simulate(m, 0, make_rng(1)).observations()))
        assert belief_to_joint(state, m) is state.belief

    def test_single_cluster_factored_is_smoothed_empirical(self):
        m = random_model(make_rng(1), n_state=2, max_card=2)
        table = from_rows(("S0", "S1"), [[0, 0], [1, 1], [1, 1], [1, 0]])
        state = FilterState(FP1, (table,), 0, 0.0, 0.0)
        got = belief_to_joint(state, m, epsilon=0.01)
        np.testing.assert_allclose(got.probabilities, to_dense(table, m.cardinalities, 0.01).probabilities)
        pf = FilterState(PF, ParticleTable(("S1", "S0"), table.rows[:, ::-1]), 0, 0.0, 0.0)
        np.testing.assert_allclose(belief_to_joint(pf, m, epsilon=0.01).probabilities, got.probabilities)

    def test_bk_on_decoupled_model_is_exact(self):
        m = generate_two_cluster_model(3, 0, make_rng(4))
        obs = simulate(m, 5, make_rng(5)).observations()
        c = Clustering(tuple(tuple(x) for x in contiguous_clusters(m.state_names, 2)))
        for state, (dist, _) in zip(run_filter(FilterConfig(BK, clustering=c), m, obs), exact_filter(m, obs)):
            np.testing.assert_allclose(belief_to_joint(state, m).probabilities, dist.probabilities, atol=1e-9)
            assert kl_divergence(dist, belief_to_joint(state, m)) == pytest.approx(0.0, abs=1e-9)

    def test_cap(self):
        m = generate_two_cluster_model(3, 0, make_rng(4))
        state = FilterState(EXACT, None, 0, 0.0, 0.0)
        with pytest.raises(JointTooLargeError):
            belief_to_joint(state, m, cap=10)


class TestMarginalKL:
    def test_zero_for_exact_and_positive_for_pf(self):
        m = random_model(make_rng(2), n_state=3)
        obs = simulate(m, 3, make_rng(3)).observations()
        truth = exact_filter(m, obs)[-1][0]
        exact_state = list(run_filter(FilterConfig(EXACT), m, obs))[-1]
        assert kl_marginal_mean(truth, exact_state, m) == pytest.approx(0.0, abs=1e-12)
        pf_state = list(run_filter(FilterConfig(PF, particles=20), m, obs))[-1]
        value = kl_marginal_mean(truth, pf_state, m, epsilon=1e-3)
        per_var = [kl_divergence(marginalize(truth, (n,)), to_dense(project(pf_state.belief, (n,)), m.cardinalities, 1e-3))
                   for n in m.state_names]
        assert value > 0
        assert value == pytest.approx(np.mean(per_var), rel=1e-12)
