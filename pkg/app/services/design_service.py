import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.core.exceptions import EvaluationError, NumericalError
from app.models.design import Design, GreedyResult
from app.services.eig_service import DlmcEstimator, eig_service


logger = logging.getLogger(__name__)

EXHAUSTIVE_BUDGET = 100_000

EigEval = Callable[[List[int]], float]


def _evaluate(eig_eval: EigEval, indices: List[int], **where: int) -> float:
    try:
        value = float(eig_eval(indices))
    except (NumericalError, ValueError) as e:
        raise EvaluationError(f"design evaluation failed: {e}", **where)
    if not math.isfinite(value):
        raise EvaluationError(f"design evaluation returned non-finite EIG {value}", **where)
    return value


class DesignService:
    """Service for design matrices and sensor selection."""

    @staticmethod
    def design_matrix(design: Design) -> np.ndarray:
        """Binary r×d selector with W[i, indices[i]] = 1."""
        matrix = np.zeros((design.r, design.d))
        matrix[np.arange(design.r), design.indices] = 1.0
        return matrix

    @staticmethod
    def greedy_select(
        eig_eval: EigEval,
        d: int,
        r: int,
        threads: int = 1,
        kind: str = "custom",
        seed: Optional[int] = None,
    ) -> GreedyResult:
        """Add, r times, the remaining candidate whose augmented design scores highest."""
        if not 1 <= r <= d:
            raise ValueError(f"sensor budget r must lie in [1, {d}], got {r}")
        selected: List[int] = []
        trace: List[float] = []
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            for step in range(r):
                remaining = [v for v in range(d) if v not in selected]

                def score(v: int) -> float:
                    return _evaluate(eig_eval, selected + [v], step=step, candidate=v)

                values = list(pool.map(score, remaining)) if pool else [score(v) for v in remaining]
                # argmax over the index-ordered list; ties go to the smallest index
                best = int(np.argmax(values))
                selected.append(remaining[best])
                trace.append(values[best])
                logger.info("greedy step %d: sensor %d (EIG %.6f)", step + 1, remaining[best], values[best])
        finally:
            if pool:
                pool.shutdown()
        return GreedyResult(d=d, r=r, indices=selected, per_step_eig=trace, eig_eval_kind=kind, seed=seed)

    @staticmethod
    def exhaustive_select(eig_eval: EigEval, d: int, r: int, threads: int = 1) -> Tuple[Design, float]:
        """Best r-subset; ties go to the lexicographically smallest set."""
        if not 1 <= r <= d:
            raise ValueError(f"sensor budget r must lie in [1, {d}], got {r}")
        total = math.comb(d, r)
        if total > EXHAUSTIVE_BUDGET:
            raise ValueError(f"C({d}, {r}) = {total} subsets exceeds the budget of {EXHAUSTIVE_BUDGET}")
        subsets = [list(c) for c in itertools.combinations(range(d), r)]

        def score(position: int) -> float:
            return _evaluate(eig_eval, subsets[position], subset=position)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                values = list(pool.map(score, range(total)))
        else:
            values = [score(i) for i in range(total)]
        best = int(np.argmax(values))
        return Design(d=d, indices=subsets[best]), values[best]

    @staticmethod
    def random_design(rng: np.random.Generator, d: int, r: int) -> Design:
        """Uniform draw of r distinct candidates."""
        if not 0 <= r <= d:
            raise ValueError(f"cannot draw {r} distinct sensors from {d} candidates")
        return Design(d=d, indices=rng.choice(d, size=r, replace=False).tolist())

    @staticmethod
    def random_baseline(
        eig_eval: EigEval,
        rng: np.random.Generator,
        d: int,
        r: int,
        count: int,
    ) -> List[float]:
        """Scores of `count` random designs of size r."""
        return [
            _evaluate(eig_eval, DesignService.random_design(rng, d, r).indices, design=i)
            for i in range(count)
        ]

    @staticmethod
    def closed_form_evaluator(G: np.ndarray, prior_covariance: np.ndarray, sigma: np.ndarray) -> EigEval:
        return lambda indices: eig_service.eig_closed_form_linear_gaussian(G, prior_covariance, sigma, indices)

    @staticmethod
    def dlmc_evaluator(estimator: DlmcEstimator) -> EigEval:
        """DLMC scores over the estimator's frozen outer bank."""
        return lambda indices: estimator.estimate(indices).value


design_service = DesignService()
