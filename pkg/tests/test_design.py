import itertools
from collections import Counter

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import EvaluationError, NumericalError
from app.core.random import derive_rng
from app.models.design import Design
from app.services.design_service import design_service
from app.services.eig_service import DlmcEstimator, eig_service
from app.services.prior_service import prior_service


def closed_form(G, covariance=None, sigma=None):
    G = np.asarray(G, dtype=float)
    covariance = np.identity(G.shape[1]) if covariance is None else covariance
    sigma = np.ones(G.shape[0]) if sigma is None else sigma
    return design_service.closed_form_evaluator(G, covariance, sigma)


def random_linear_instance(seed):
    rng = derive_rng(seed)
    d = int(rng.integers(3, 9))
    n = int(rng.integers(2, 7))
    r = int(rng.integers(1, 4))
    a = rng.standard_normal((n, n))
    return rng.standard_normal((d, n)), a @ a.T / n + 0.1 * np.identity(n), rng.uniform(0.5, 2.0, d), r


class TestDesignMatrix:
    def test_rows_select_candidates(self):
        W = design_service.design_matrix(Design(d=3, indices=[2, 0]))
        np.testing.assert_array_equal(W, [[0, 0, 1], [1, 0, 0]])

    def test_duplicate_index(self):
        with pytest.raises(ValidationError, match="duplicate"):
            Design(d=3, indices=[1, 1])

    def test_out_of_range_index(self):
        with pytest.raises(ValidationError, match="out of range"):
            Design(d=3, indices=[5])

    def test_selected_data_equals_design_matrix_product(self):
        F = np.array([4.0, 5.0, 6.0, 7.0])
        design = Design(d=4, indices=[3, 1])
        np.testing.assert_array_equal(design_service.design_matrix(design) @ F, F[[3, 1]])


class TestGreedy:
    def test_single_candidate(self):
        result = design_service.greedy_select(lambda s: 1.0, d=1, r=1)
        assert result.indices == [0]

    def test_diagonal_instance(self):
        result = design_service.greedy_select(closed_form(np.diag([3.0, 2.0, 1.0])), d=3, r=2)
        assert result.indices == [0, 1]
        best, value = design_service.exhaustive_select(closed_form(np.diag([3.0, 2.0, 1.0])), d=3, r=2)
        assert best.indices == [0, 1]
        assert result.per_step_eig[-1] == pytest.approx(value)
        assert result.per_step_eig[0] == pytest.approx(0.5 * np.log(10.0))

    def test_permuted_instance(self):
        permutation = [2, 0, 1]
        G = np.diag([3.0, 2.0, 1.0])[permutation]
        result = design_service.greedy_select(closed_form(G), d=3, r=2)
        assert result.indices == [1, 2]

    def test_trace_is_nondecreasing(self):
        G, covariance, sigma, _ = random_linear_instance(7)
        d = G.shape[0]
        result = design_service.greedy_select(closed_form(G, covariance, sigma), d=d, r=d)
        assert np.all(np.diff(result.per_step_eig) >= -1e-12)

    def test_ties_go_to_smallest_index(self):
        result = design_service.greedy_select(lambda s: 0.0, d=4, r=2)
        assert result.indices == [0, 1]

    def test_threads_do_not_change_selection(self):
        G, covariance, sigma, r = random_linear_instance(8)
        eig_eval = closed_form(G, covariance, sigma)
        serial = design_service.greedy_select(eig_eval, d=G.shape[0], r=r)
        threaded = design_service.greedy_select(eig_eval, d=G.shape[0], r=r, threads=4)
        assert serial.indices == threaded.indices
        assert serial.per_step_eig == threaded.per_step_eig

    def test_near_optimality(self):
        bound = 1.0 - 1.0 / np.e
        for seed in range(50):
            G, covariance, sigma, r = random_linear_instance(seed)
            eig_eval = closed_form(G, covariance, sigma)
            greedy = design_service.greedy_select(eig_eval, d=G.shape[0], r=r)
            _, optimum = design_service.exhaustive_select(eig_eval, d=G.shape[0], r=r)
            assert greedy.per_step_eig[-1] >= bound * optimum

    def test_diagonal_greedy_is_optimal(self):
        rng = derive_rng(9)
        for _ in range(10):
            G = np.diag(rng.uniform(0.1, 5.0, size=5))
            eig_eval = closed_form(G)
            greedy = design_service.greedy_select(eig_eval, d=5, r=3)
            best, _ = design_service.exhaustive_select(eig_eval, d=5, r=3)
            assert sorted(greedy.indices) == best.indices

    def test_budget_out_of_range(self):
        with pytest.raises(ValueError, match="sensor budget"):
            design_service.greedy_select(lambda s: 0.0, d=3, r=4)

    def test_failure_names_step_and_candidate(self):
        def eig_eval(indices):
            if indices[-1] == 2:
                raise NumericalError("solver broke down")
            return float(len(indices))

        with pytest.raises(EvaluationError, match="candidate=2"):
            design_service.greedy_select(eig_eval, d=3, r=1)

    def test_non_finite_score_names_candidate(self):
        def eig_eval(indices):
            return float("nan") if indices[-1] == 1 else float(len(indices))

        with pytest.raises(EvaluationError, match="non-finite.*candidate=1"):
            design_service.greedy_select(eig_eval, d=3, r=1)
        with pytest.raises(EvaluationError, match="non-finite"):
            design_service.greedy_select(eig_eval, d=3, r=1, threads=2)

    def test_dlmc_evaluator_with_frozen_bank(self, diag321):
        prior = prior_service.build_dense_prior(0.0, np.identity(3))
        bank = eig_service.simulate_outer_samples(prior, diag321, np.ones(3), 200, seed=0)
        estimator = DlmcEstimator(diag321, prior, np.ones(3), bank, n_in=2000, seed=0)
        result = design_service.greedy_select(design_service.dlmc_evaluator(estimator), d=3, r=2, kind="true", seed=0)
        assert result.indices == [0, 1]
        assert result.eig_eval_kind == "true"


class TestExhaustive:
    def test_full_set(self):
        best, _ = design_service.exhaustive_select(lambda s: float(np.sum(s)), d=3, r=3)
        assert best.indices == [0, 1, 2]

    def test_diagonal_single_sensor(self):
        best, value = design_service.exhaustive_select(closed_form(np.diag([3.0, 2.0, 1.0])), d=3, r=1)
        assert best.indices == [0]
        assert value == pytest.approx(0.5 * np.log(10.0))

    def test_constant_evaluator_picks_smallest_subset(self):
        best, _ = design_service.exhaustive_select(lambda s: 1.0, d=5, r=2)
        assert best.indices == [0, 1]

    def test_non_finite_score_names_subset(self):
        def eig_eval(indices):
            return float("inf") if indices == [0, 2] else 1.0

        with pytest.raises(EvaluationError, match="subset=1"):
            design_service.exhaustive_select(eig_eval, d=3, r=2)

    def test_budget_exceeded(self):
        with pytest.raises(ValueError, match="exceeds the budget"):
            design_service.exhaustive_select(lambda s: 0.0, d=40, r=10)


class TestRandomDesign:
    def test_full_draw(self):
        design = design_service.random_design(derive_rng(0), d=4, r=4)
        assert sorted(design.indices) == [0, 1, 2, 3]

    def test_seeded_twice(self):
        a = design_service.random_design(derive_rng(3), d=10, r=4)
        b = design_service.random_design(derive_rng(3), d=10, r=4)
        assert a.indices == b.indices

    def test_pair_frequencies_are_uniform(self):
        rng = derive_rng(11)
        counts = Counter(design_service.random_design(rng, d=5, r=2).key() for _ in range(100_000))
        assert set(counts) == set(itertools.combinations(range(5), 2))
        for count in counts.values():
            assert abs(count - 10_000) <= 0.05 * 10_000

    def test_too_many_sensors(self):
        with pytest.raises(ValueError, match="cannot draw"):
            design_service.random_design(derive_rng(0), d=2, r=3)

    def test_random_baseline(self):
        values = design_service.random_baseline(closed_form(np.diag([3.0, 2.0, 1.0])), derive_rng(1), 3, 2, count=5)
        optimum = 0.5 * np.log(10.0) + 0.5 * np.log(5.0)
        assert len(values) == 5
        assert max(values) <= optimum + 1e-12
