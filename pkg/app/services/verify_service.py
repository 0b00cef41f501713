import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.models.eig import EvaluatorKind, InnerMode
from app.models.verify import BudgetComparison, ErrorSweepReport, SurrogateRecord
from app.services.eig_service import DlmcEstimator, Evaluator, OuterBank, log_normalization
from app.services.prior_service import GaussianPrior


logger = logging.getLogger(__name__)

REFERENCE_KEY = 0
SURROGATE_KEY = 1
BUDGET_KEY = 2

CSV_HEADER = [
    "surrogate_id",
    "breadth",
    "epsilon_hat",
    "l2_accuracy",
    "mean_log_norm_error",
    "max_log_norm_error",
    "mean_eig_error",
    "max_eig_error",
]


def generalization_error_from_outputs(predicted: np.ndarray, reference: np.ndarray) -> float:
    """sqrt(mean_i ‖F(m_i) − F̃(m_i)‖²)."""
    predicted = np.atleast_2d(predicted)
    reference = np.atleast_2d(reference)
    if reference.shape[0] == 0:
        raise ValueError("test set is empty")
    if predicted.shape != reference.shape:
        raise ValueError(f"prediction shape {predicted.shape} differs from reference {reference.shape}")
    return float(np.sqrt(np.mean(np.sum((reference - predicted) ** 2, axis=1))))


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


class VerifyService:
    """Service for surrogate error measurement and the EIG error sweep."""

    @staticmethod
    def generalization_error(surrogate: Evaluator, model: Evaluator, inputs: np.ndarray, threads: int = 1) -> float:
        inputs = np.atleast_2d(inputs)
        return generalization_error_from_outputs(surrogate.evaluate_batch(inputs), model.evaluate_batch(inputs, threads))

    @staticmethod
    def compare_surrogate(
        reference: DlmcEstimator,
        candidate: DlmcEstimator,
        designs: Sequence[Sequence[int]],
    ) -> Tuple[List[List[float]], List[float]]:
        """Per-design |log π̂ − log π̃| per outer sample, and |Ψ^dl − Ψ^nn| per design."""
        log_norm_errors: List[List[float]] = []
        eig_errors: List[float] = []
        for design in designs:
            indices = sorted(design)
            row = [
                abs(reference.log_normalization(i, indices) - candidate.log_normalization(i, indices))
                for i in range(reference.bank.n_out)
            ]
            log_norm_errors.append(row)
            eig_errors.append(abs(reference.estimate(indices).value - candidate.estimate(indices).value))
        return log_norm_errors, eig_errors

    @staticmethod
    def normalization_convergence(
        reference: DlmcEstimator,
        candidate: DlmcEstimator,
        design: Sequence[int],
        n_in_grid: Sequence[int],
    ) -> List[float]:
        """Mean |log π̂ − log π̃| over outer samples on nested inner-sample prefixes."""
        indices = np.array(sorted(design), dtype=np.int64)
        errors = []
        for size in n_in_grid:
            if not 1 <= size <= min(reference.n_in, candidate.n_in):
                raise ValueError(f"n_in grid entry {size} outside [1, {min(reference.n_in, candidate.n_in)}]")
            gaps = [
                abs(
                    log_normalization(reference.inner_potentials(i, indices)[:size])
                    - log_normalization(candidate.inner_potentials(i, indices)[:size])
                )
                for i in range(reference.bank.n_out)
            ]
            errors.append(float(np.mean(gaps)))
        return errors

    @staticmethod
    def bound_sweep(
        surrogates: Sequence[Tuple[str, Evaluator]],
        model: Evaluator,
        prior: GaussianPrior,
        sigma: np.ndarray,
        designs: Sequence[Sequence[int]],
        bank: OuterBank,
        n_in: int,
        seed: int,
        test_inputs: np.ndarray,
        test_outputs: Optional[np.ndarray] = None,
        inner_mode: InnerMode = InnerMode.FRESH,
        n_in_grid: Sequence[int] = (),
        breadths: Optional[Sequence[Optional[int]]] = None,
        accuracies: Optional[Sequence[Optional[float]]] = None,
        threads: int = 1,
    ) -> ErrorSweepReport:
        """EIG and normalization-constant errors of each surrogate on one shared sample bank."""
        if len(surrogates) < 2:
            raise ValueError(f"bound sweep needs at least 2 surrogates, got {len(surrogates)}")
        if not designs:
            raise ValueError("bound sweep needs at least one design")
        if test_outputs is None:
            test_outputs = model.evaluate_batch(test_inputs, threads)

        reference = DlmcEstimator(model, prior, sigma, bank, n_in, seed, inner_mode, EvaluatorKind.TRUE, threads)

        def measure(position: int) -> SurrogateRecord:
            name, surrogate = surrogates[position]
            epsilon = generalization_error_from_outputs(surrogate.evaluate_batch(test_inputs), test_outputs)
            candidate = DlmcEstimator(surrogate, prior, sigma, bank, n_in, seed, inner_mode, EvaluatorKind.SURROGATE)
            log_norm_errors, eig_errors = VerifyService.compare_surrogate(reference, candidate, designs)
            convergence = (
                VerifyService.normalization_convergence(reference, candidate, designs[0], n_in_grid)
                if n_in_grid else []
            )
            record = SurrogateRecord(
                surrogate_id=name,
                breadth=breadths[position] if breadths else None,
                epsilon_hat=epsilon,
                l2_accuracy=accuracies[position] if accuracies else None,
                log_norm_errors=log_norm_errors,
                eig_errors=eig_errors,
                n_in_errors=convergence,
            )
            logger.info("surrogate %s: epsilon %.3e, mean EIG error %.3e", name, epsilon, float(np.mean(eig_errors)))
            return record

        # the reference inner observables fill their cache once before the pool starts
        for design in designs:
            reference.estimate(design)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(measure, range(len(surrogates))))
        else:
            records = [measure(i) for i in range(len(surrogates))]

        epsilons = np.array([rec.epsilon_hat for rec in records])
        eig_means = np.array([float(np.mean(rec.eig_errors)) for rec in records])
        log_means = np.array([rec.mean_log_norm_error for rec in records])
        usable = (epsilons > 0) & (eig_means > 0) & (log_means > 0)
        if np.unique(epsilons).size < 2:
            raise ValueError("degenerate fit: all surrogates have the same generalization error")
        if np.unique(epsilons[usable]).size < 2:
            raise ValueError("degenerate fit: fewer than 2 surrogates with distinct nonzero errors")
        span = float(np.log10(epsilons[usable].max() / epsilons[usable].min()))
        if span < 1.0:
            logger.warning("generalization errors span %.2f decades; the slope fit is unreliable below one", span)

        positive = epsilons > 0
        c_i_hat = max(rec.max_log_norm_error / rec.epsilon_hat for rec in records if rec.epsilon_hat > 0)
        c_hat = max(max(rec.eig_errors) / rec.epsilon_hat for rec in records if rec.epsilon_hat > 0)
        report = ErrorSweepReport(
            records=records,
            slope=fit_slope(epsilons[usable], eig_means[usable]),
            log_norm_slope=fit_slope(epsilons[usable], log_means[usable]),
            c_i_hat=float(c_i_hat),
            c_hat=float(c_hat),
            n_out=bank.n_out,
            n_in=n_in,
            n_in_grid=list(n_in_grid),
            design_indices=[sorted(design) for design in designs],
            epsilon_span_decades=span,
        )
        logger.info(
            "sweep over %d surrogates (%d with positive error): slope %.3f, C_hat %.3e",
            len(records), int(positive.sum()), report.slope, report.c_hat,
        )
        return report

    @staticmethod
    def budget_comparison(
        surrogate: Evaluator,
        model: Evaluator,
        prior: GaussianPrior,
        sigma: np.ndarray,
        designs: Sequence[Sequence[int]],
        bank: OuterBank,
        seed: int,
        n_in_ref: int,
        n_in_surrogate: int,
        n_in_budget: int,
        threads: int = 1,
    ) -> BudgetComparison:
        """Surrogate normalization constants versus cost-matched true-map Monte Carlo."""
        if not designs:
            raise ValueError("budget comparison needs at least one design")
        common = dict(prior=prior, sigma=sigma, bank=bank, seed=seed, inner_mode=InnerMode.FRESH, threads=threads)
        reference = DlmcEstimator(model, n_in=n_in_ref, inner_key=REFERENCE_KEY, **common)
        approx = DlmcEstimator(
            surrogate, n_in=n_in_surrogate, inner_key=SURROGATE_KEY,
            evaluator_kind=EvaluatorKind.SURROGATE, **common,
        )
        budget = DlmcEstimator(model, n_in=n_in_budget, inner_key=BUDGET_KEY, **common)

        surrogate_errors, budget_errors = [], []
        for design in designs:
            indices = sorted(design)
            ref = np.array([reference.log_normalization(i, indices) for i in range(bank.n_out)])
            sur = np.array([approx.log_normalization(i, indices) for i in range(bank.n_out)])
            cheap = np.array([budget.log_normalization(i, indices) for i in range(bank.n_out)])
            surrogate_errors.append(float(np.mean(np.abs(sur - ref))))
            budget_errors.append(float(np.mean(np.abs(cheap - ref))))

        return BudgetComparison(
            n_in_ref=n_in_ref,
            n_in_surrogate=n_in_surrogate,
            n_in_budget=n_in_budget,
            surrogate_errors=surrogate_errors,
            budget_errors=budget_errors,
            mean_surrogate_error=float(np.mean(surrogate_errors)),
            mean_budget_error=float(np.mean(budget_errors)),
            design_indices=[sorted(design) for design in designs],
        )

    @staticmethod
    def csv_rows(report: ErrorSweepReport) -> List[list]:
        return [
            [
                rec.surrogate_id,
                "" if rec.breadth is None else rec.breadth,
                rec.epsilon_hat,
                "" if rec.l2_accuracy is None else rec.l2_accuracy,
                rec.mean_log_norm_error,
                rec.max_log_norm_error,
                float(np.mean(rec.eig_errors)),
                float(max(rec.eig_errors)),
            ]
            for rec in report.records
        ]


verify_service = VerifyService()
