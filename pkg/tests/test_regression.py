import math
import warnings

import numpy as np
import pytest

from conftest import random_network
from reluextract.errors import BudgetError, InputError, StageError
from reluextract.extraction import CandidateSet, ExtractionParams, schedule
from reluextract.harness import cancelling_pair, random_separated
from reluextract.network import Network, l2_distance_mc
from reluextract.oracle import InProcessOracle
from reluextract.regression import (RegressionConfig, assemble, constrained_least_squares,
                                    draw_dataset, featurize, featurize_batch, learn_from_queries)


def cands_of(W, b):
    return CandidateSet(np.array(W, dtype=float), np.array(b, dtype=float), [(0, 1)] * len(b))


def small_params(k, d, **kw):
    p = ExtractionParams(epsilon=0.05, delta=0.1, k=k, R=2.0, B=2.0)
    s = schedule(p, d)
    return p.replace(c_r=p.c_r * 0.02 / s.r, c_tau=p.c_tau * 30 / s.tau, **kw)


class TestFeaturize:
    def test_empty(self):
        z = featurize(CandidateSet.empty(2), [1.0, 2.0]).z
        np.testing.assert_array_equal(z, [1.0, 2.0, 1.0])

    def test_one_candidate(self):
        z = featurize(cands_of([[1.0, 0.0]], [0.0]), [3.0, 0.0]).z
        np.testing.assert_array_equal(z, [3.0, 3.0, 0.0, 1.0])

    def test_random_recomputed(self, rng):
        W, b = rng.standard_normal((5, 3)), rng.standard_normal(5)
        c = cands_of(W, b)
        X = rng.standard_normal((20, 3))
        Z = featurize_batch(c, X)
        for x, z in zip(X, Z):
            for j in range(5):
                assert z[j] == max(0.0, sum(W[j, i] * x[i] for i in range(3)) - b[j]) or \
                    abs(z[j] - max(0.0, W[j] @ x - b[j])) <= 1e-14
            np.testing.assert_array_equal(z[5:8], x)
            assert z[-1] == 1.0

    def test_dimension(self):
        with pytest.raises(InputError):
            featurize(CandidateSet.empty(2), [1.0])


class TestDrawDataset:
    def test_untruncated(self, rng):
        o = InProcessOracle(random_network(rng, 3, 2))
        data = draw_dataset(o, CandidateSet.empty(3), 500, math.inf, seed=0)
        assert data.acceptance_rate == 1.0
        assert len(data) == 500 and o.query_count == 500

    def test_default_radius_acceptance(self):
        d, delta = 8, 0.1
        M = math.sqrt(d) + 2 * math.sqrt(math.log(1 / delta))
        o = InProcessOracle(Network.zero(d))
        data = draw_dataset(o, CandidateSet.empty(d), 10_000, M, seed=1)
        assert data.acceptance_rate >= 0.9
        assert np.all(np.linalg.norm(data.X, axis=1) <= M)
        # rejected draws are never queried
        assert o.query_count == 10_000

    def test_small_radius_warns(self):
        o = InProcessOracle(Network.zero(8))
        with pytest.warns(RuntimeWarning, match="M_bound"):
            draw_dataset(o, CandidateSet.empty(8), 50, 2.0, seed=0)

    def test_values_are_oracle_outputs(self, rng):
        net = random_network(rng, 3, 2)
        data = draw_dataset(InProcessOracle(net), CandidateSet.empty(3), 50, seed=0)
        np.testing.assert_array_equal(data.y, net(data.X))
        assert data.samples[0].z[-1] == 1.0

    def test_budget(self, rng):
        o = InProcessOracle(Network.zero(2), budget=10)
        with pytest.raises(BudgetError):
            draw_dataset(o, CandidateSet.empty(2), 11, seed=0)


class TestConstrainedLeastSquares:
    def test_feasible_unconstrained(self, rng):
        Z = rng.standard_normal((50, 6))
        v = rng.standard_normal(6)
        sol = constrained_least_squares(Z, Z @ v, 100.0)
        assert sol.lam == 0.0
        np.testing.assert_allclose(sol.v, v, rtol=1e-10)

    def test_one_dimensional_boundary(self):
        sol = constrained_least_squares([[2.0]], [2.0], 0.5)
        assert sol.v[0] == pytest.approx(0.5, rel=1e-9)
        assert abs(sol.v[0]) <= 0.5

    def test_beats_random_feasible_points(self, rng):
        Z = rng.standard_normal((40, 5))
        y = rng.standard_normal(40) * 5
        W = 0.3
        sol = constrained_least_squares(Z, y, W)
        assert np.linalg.norm(sol.v) <= W * (1 + 1e-12)
        for _ in range(100):
            u = rng.standard_normal(5)
            u *= W * rng.uniform() ** (1 / 5) / np.linalg.norm(u)
            assert sol.objective <= np.sum((Z @ u - y) ** 2) + 1e-12

    def test_rank_deficient(self, rng):
        Z = rng.standard_normal((30, 3))
        Z = np.hstack([Z, Z[:, :1]])  # duplicated column
        y = rng.standard_normal(30)
        sol = constrained_least_squares(Z, y, 1e6)
        ref = np.linalg.lstsq(Z, y, rcond=None)[0]
        np.testing.assert_allclose(sol.v, ref, atol=1e-10)

    def test_bad_inputs(self):
        with pytest.raises(InputError):
            constrained_least_squares(np.zeros((2, 2)), np.zeros(3), 1.0)
        with pytest.raises(InputError):
            constrained_least_squares(np.eye(2), np.ones(2), 0.0)


class TestAssemble:
    def test_zero(self, rng):
        c = cands_of(rng.standard_normal((3, 2)), rng.standard_normal(3))
        net = assemble(c, np.zeros(6))
        assert l2_distance_mc(net, Network.zero(2), 1000, seed=0)[0] == 0.0

    def test_single(self):
        c = cands_of([[1.0, -1.0]], [0.5])
        net = assemble(c, [1.0, 0.0, 0.0, 0.0])
        X = np.array([[2.0, 0.0], [0.0, 3.0]])
        np.testing.assert_allclose(net(X), np.maximum(X @ [1.0, -1.0] - 0.5, 0))

    def test_duality(self, rng):
        c = cands_of(rng.standard_normal((4, 3)), rng.standard_normal(4))
        v = rng.standard_normal(4 + 3 + 1)
        net = assemble(c, v)
        for x in rng.standard_normal((30, 3)):
            assert abs(net(x) - featurize(c, x).z @ v) <= 1e-12 * (1 + abs(net(x)))

    def test_constant_sign_convention(self):
        net = assemble(CandidateSet.empty(1), [0.0, 2.5])
        assert net.affine_b == -2.5
        assert net(np.array([7.0])) == 2.5

    def test_length(self):
        with pytest.raises(InputError):
            assemble(CandidateSet.empty(2), [1.0, 2.0])


class TestLearn:
    def test_zero_target(self):
        net = cancelling_pair(np.random.default_rng(0), 3, 2, 1.0, 1.0)
        model, rep, cands = learn_from_queries(InProcessOracle(net), small_params(2, 3), seed=0)
        assert l2_distance_mc(net, model, 20_000, seed=1)[0] <= 1e-6

    def test_single_neuron(self):
        net = Network([[0.6, -0.8, 0.0]], [0.3])
        o = InProcessOracle(net)
        model, rep, cands = learn_from_queries(o, small_params(1, 3), seed=0)
        loss, _ = l2_distance_mc(net, model, 50_000, seed=2)
        norm2, _ = l2_distance_mc(net, Network.zero(3), 50_000, seed=2)
        assert loss <= 1e-3 * norm2
        assert rep.queries == o.query_count
        assert rep.harvest_queries + rep.regression_queries == rep.queries

    def test_realizable_residual_and_generalization(self):
        rng = np.random.default_rng(4)
        net = random_separated(rng, 4, 3, 2.0, 2.0)
        p = small_params(3, 4)
        model, rep, cands = learn_from_queries(InProcessOracle(net), p, seed=1)
        assert all(cands.contains(w, b) for w, b in zip(net.weights, net.biases))
        assert rep.coef_norm <= rep.W_bound * (1 + 1e-8)
        assert rep.train_loss <= 1e-6 * (1 + rep.train_loss)
        # fresh draws from the same truncated distribution
        n = 10 * (rep.n_candidates + 4 + 1)
        X = rng.standard_normal((4 * n, 4))
        X = X[np.linalg.norm(X, axis=1) <= rep.M_bound][:n]
        hold = float(np.mean((net(X) - model(X)) ** 2))
        assert hold <= 2 * rep.train_loss + 1e-12

    def test_stage_label(self, rng):
        o = InProcessOracle(random_network(rng, 3, 2), budget=10)
        with pytest.raises(StageError) as info:
            learn_from_queries(o, small_params(2, 3), seed=0)
        assert info.value.stage == "get_neurons"
        assert isinstance(info.value.cause, BudgetError)

    def test_regression_stage_keeps_candidates(self, rng):
        p = small_params(2, 3)
        m = schedule(p, 3).m
        o = InProcessOracle(random_network(rng, 3, 2), budget=m * 6)
        with pytest.raises(StageError) as info:
            learn_from_queries(o, p, seed=0)
        assert info.value.stage == "draw_dataset"
        assert "candidates" in info.value.partial

    def test_config_defaults(self):
        p = ExtractionParams(epsilon=0.05, delta=0.1, k=4, R=2.0, B=2.0)
        s = schedule(p, 8)
        n, W, M = RegressionConfig().resolve(p, 8, 20)
        assert n == 10_000
        assert W == pytest.approx(math.sqrt(s.tau / s.r) + 4 * 4.0)
        assert M == pytest.approx(math.sqrt(8) + 2 * math.sqrt(math.log(10)))
        assert RegressionConfig().resolve(p, 8, 2000)[0] == 10 * 2009
        assert RegressionConfig().resolve(p, 8, 20, remaining=123)[0] == 123
        with pytest.raises(BudgetError):
            RegressionConfig().resolve(p, 8, 20, remaining=0)
