import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from app.core.config import settings
from app.core.exceptions import EvaluationError, NumericalError
from app.core.random import INNER_STREAM, NOISE_STREAM, OUTER_STREAM, derive_rng
from app.models.eig import EigEstimate, EvaluatorKind, InnerMode
from app.services.prior_service import GaussianPrior


logger = logging.getLogger(__name__)


class Evaluator(Protocol):
    """Anything mapping parameter rows to full-candidate observables."""
    n: int
    d: int

    def evaluate_batch(self, ms: np.ndarray, threads: int = 1) -> np.ndarray: ...


def solve_total(evaluator) -> int:
    counter = getattr(evaluator, "solves", None)
    return counter.total if counter is not None else 0


def potential(obs: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> float:
    """½ Σ ((y − obs)/σ)²."""
    obs, y, sigma = (np.asarray(v, dtype=float) for v in (obs, y, sigma))
    if not (obs.shape == y.shape == sigma.shape):
        raise ValueError(f"length mismatch: obs {obs.shape}, y {y.shape}, sigma {sigma.shape}")
    return float(0.5 * np.sum(((y - obs) / sigma) ** 2))


def potentials(obs: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row-wise potentials of a (count, r) observable block against one data vector."""
    return 0.5 * np.sum(((y[None, :] - obs) / sigma[None, :]) ** 2, axis=1)


def log_normalization(values: np.ndarray) -> float:
    """log[(1/n) Σ exp(−Φ_j)] evaluated with a log-sum-exp shift."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("log_normalization needs at least one potential")
    return float(logsumexp(-values) - np.log(values.size))


@dataclass
class OuterBank:
    """Outer parameter draws with full-candidate observables and noise."""
    observables: np.ndarray  # n_out × d
    noise: np.ndarray  # n_out × d, already scaled by sigma
    seed: int
    inputs: Optional[np.ndarray] = None
    pde_solves: int = 0

    @property
    def n_out(self) -> int:
        return self.observables.shape[0]

    @property
    def d(self) -> int:
        return self.observables.shape[1]

    def restrict(self, indices: Sequence[int]):
        """(W F_d, W ε_d) for a design."""
        idx = np.asarray(indices, dtype=np.int64)
        return self.observables[:, idx], self.noise[:, idx]

    def data(self, indices: Sequence[int]) -> np.ndarray:
        obs, eps = self.restrict(indices)
        return obs + eps


def draw_noise(sigma: np.ndarray, count: int, seed: int) -> np.ndarray:
    return np.array([derive_rng(seed, NOISE_STREAM, i).standard_normal(sigma.size) for i in range(count)]) * sigma[None, :]


class DlmcEstimator:
    """Nested Monte Carlo EIG for one evaluator over a frozen outer bank.

    Inner draws for outer sample i come from stream (seed, INNER, key, i) in fresh
    mode, or from one shared stream in shared-bank mode, so two designs or two
    evaluators with the same key see the same inner parameters.
    """

    def __init__(
        self,
        evaluator: Evaluator,
        prior: GaussianPrior,
        sigma: np.ndarray,
        bank: OuterBank,
        n_in: int,
        seed: int,
        inner_mode: InnerMode = InnerMode.FRESH,
        evaluator_kind: EvaluatorKind = EvaluatorKind.TRUE,
        threads: int = 1,
        chunk: Optional[int] = None,
        cache_bytes: Optional[int] = None,
        inner_key: int = 0,
    ):
        if n_in < 1:
            raise ValueError(f"n_in must be at least 1, got {n_in}")
        if bank.d != evaluator.d:
            raise ValueError(f"outer bank has {bank.d} candidates, evaluator has {evaluator.d}")
        self.evaluator = evaluator
        self.prior = prior
        self.sigma = np.asarray(sigma, dtype=float)
        if self.sigma.shape != (evaluator.d,):
            raise ValueError(f"sigma has shape {self.sigma.shape}, expected ({evaluator.d},)")
        self.bank = bank
        self.n_in = n_in
        self.seed = seed
        self.inner_mode = inner_mode
        self.inner_key = inner_key
        self.evaluator_kind = evaluator_kind
        self.threads = threads
        self.chunk = chunk or settings.inner_chunk
        limit = settings.inner_cache_bytes if cache_bytes is None else cache_bytes
        self.cache_enabled = bank.n_out * n_in * evaluator.d * 8 <= limit
        self._cache: Dict[int, np.ndarray] = {}
        self._shared: Optional[np.ndarray] = None
        self._shared_lock = threading.Lock()

    def _draw_and_evaluate(self, rng: np.random.Generator, outer: int) -> np.ndarray:
        blocks = []
        for start in range(0, self.n_in, self.chunk):
            count = min(self.chunk, self.n_in - start)
            ms = self.prior.sample(rng, count)
            try:
                blocks.append(self.evaluator.evaluate_batch(ms))
            except (NumericalError, ValueError) as e:
                raise EvaluationError(f"inner evaluation failed: {e}", outer=outer, inner=start)
        return np.vstack(blocks)

    def inner_observables(self, outer: int) -> np.ndarray:
        """Full-candidate inner observables (n_in × d) paired with outer sample `outer`."""
        if self.inner_mode == InnerMode.SHARED:
            with self._shared_lock:
                if self._shared is None:
                    self._shared = self._draw_and_evaluate(
                        derive_rng(self.seed, INNER_STREAM, self.inner_key), outer
                    )
            return self._shared
        if outer in self._cache:
            return self._cache[outer]
        obs = self._draw_and_evaluate(derive_rng(self.seed, INNER_STREAM, self.inner_key, outer), outer)
        if self.cache_enabled:
            self._cache[outer] = obs
        return obs

    def inner_potentials(self, outer: int, indices: np.ndarray) -> np.ndarray:
        y = self.bank.observables[outer, indices] + self.bank.noise[outer, indices]
        return potentials(self.inner_observables(outer)[:, indices], y, self.sigma[indices])

    def log_normalization(self, outer: int, indices: Sequence[int]) -> float:
        """log π̂ (or log π̃) of the outer datum under a sorted design."""
        return log_normalization(self.inner_potentials(outer, np.asarray(indices, dtype=np.int64)))

    def outer_term(self, outer: int, indices: np.ndarray) -> float:
        eps = self.bank.noise[outer, indices]
        numerator = -0.5 * float(np.sum((eps / self.sigma[indices]) ** 2))
        return numerator - log_normalization(self.inner_potentials(outer, indices))

    def estimate(self, design: Sequence[int]) -> EigEstimate:
        """Ψ for a design; index order is irrelevant."""
        indices = np.array(sorted(int(i) for i in design), dtype=np.int64)
        if np.unique(indices).size != indices.size:
            raise ValueError(f"duplicate sensor index in {list(design)}")
        if indices.size and (indices[0] < 0 or indices[-1] >= self.bank.d):
            raise ValueError(f"sensor index out of range for {self.bank.d} candidates")
        n_out = self.bank.n_out
        if indices.size == 0:
            return EigEstimate(
                value=0.0, stderr=0.0, n_out=n_out, n_in=self.n_in, design_indices=[],
                seed=self.seed, evaluator_kind=self.evaluator_kind, per_outer_terms=[0.0] * n_out,
            )

        before = solve_total(self.evaluator)
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                terms = np.array(list(pool.map(lambda i: self.outer_term(i, indices), range(n_out))))
        else:
            terms = np.array([self.outer_term(i, indices) for i in range(n_out)])
        if not np.all(np.isfinite(terms)):
            raise NumericalError("non-finite EIG term")

        stderr = float(np.std(terms, ddof=1) / np.sqrt(n_out)) if n_out > 1 else 0.0
        estimate = EigEstimate(
            value=float(np.mean(terms)),
            stderr=stderr,
            n_out=n_out,
            n_in=self.n_in,
            design_indices=indices.tolist(),
            seed=self.seed,
            evaluator_kind=self.evaluator_kind,
            per_outer_terms=terms.tolist(),
            pde_solves=solve_total(self.evaluator) - before,
        )
        logger.debug("EIG %s = %.6f ± %.2e", indices.tolist(), estimate.value, stderr)
        return estimate


class EigService:
    """Service for likelihood potentials, normalization constants and EIG estimators."""

    potential = staticmethod(potential)
    log_normalization = staticmethod(log_normalization)

    @staticmethod
    def simulate_outer_samples(
        prior: GaussianPrior,
        model: Evaluator,
        sigma: np.ndarray,
        n_out: int,
        seed: int,
        threads: int = 1,
    ) -> OuterBank:
        """Draw (m_i, F_d(m_i), ε_d,i) once over all candidates."""
        if n_out < 1:
            raise ValueError(f"n_out must be at least 1, got {n_out}")
        sigma = np.asarray(sigma, dtype=float)
        inputs = np.array([prior.sample(derive_rng(seed, OUTER_STREAM, i)) for i in range(n_out)])
        before = solve_total(model)
        try:
            observables = model.evaluate_batch(inputs, threads)
        except NumericalError as e:
            raise EvaluationError(f"outer evaluation failed: {e}")
        return OuterBank(observables, draw_noise(sigma, n_out, seed), seed, inputs, solve_total(model) - before)

    @staticmethod
    def outer_bank_from_dataset(
        inputs: np.ndarray,
        outputs: np.ndarray,
        sigma: np.ndarray,
        seed: int,
        n_out: Optional[int] = None,
    ) -> OuterBank:
        """Outer bank from stored samples and observables; no PDE solves."""
        count = inputs.shape[0] if n_out is None else n_out
        if not 1 <= count <= inputs.shape[0]:
            raise ValueError(f"n_out must lie in [1, {inputs.shape[0]}], got {count}")
        sigma = np.asarray(sigma, dtype=float)
        return OuterBank(outputs[:count].copy(), draw_noise(sigma, count, seed), seed, inputs[:count].copy(), 0)

    @staticmethod
    def eig_dlmc(
        evaluator: Evaluator,
        design: Sequence[int],
        prior: GaussianPrior,
        sigma: np.ndarray,
        n_out: int,
        n_in: int,
        seed: int,
        inner_mode: InnerMode = InnerMode.FRESH,
        evaluator_kind: EvaluatorKind = EvaluatorKind.TRUE,
        bank: Optional[OuterBank] = None,
        threads: int = 1,
    ) -> EigEstimate:
        """Ψ^dl (true evaluator) or Ψ^nn (surrogate) for one design."""
        if bank is None:
            bank = EigService.simulate_outer_samples(prior, evaluator, sigma, n_out, seed, threads)
        estimator = DlmcEstimator(evaluator, prior, sigma, bank, n_in, seed, inner_mode, evaluator_kind, threads)
        result = estimator.estimate(design)
        result.pde_solves += bank.pde_solves
        return result

    @staticmethod
    def eig_closed_form_linear_gaussian(
        G: np.ndarray,
        prior_covariance: np.ndarray,
        sigma: np.ndarray,
        design: Sequence[int],
    ) -> float:
        """½ logdet(I + Γ_n^{-1/2} W G Γ_pr Gᵀ Wᵀ Γ_n^{-1/2})."""
        indices = np.array(sorted(int(i) for i in design), dtype=np.int64)
        if indices.size == 0:
            return 0.0
        G = np.atleast_2d(np.asarray(G, dtype=float))
        scale = 1.0 / np.asarray(sigma, dtype=float)[indices]
        rows = G[indices] * scale[:, None]
        gram = np.identity(indices.size) + rows @ prior_covariance @ rows.T
        sign, logdet = np.linalg.slogdet(gram)
        if sign <= 0:
            raise ValueError("linear-Gaussian information matrix is not positive definite")
        return 0.5 * float(logdet)


eig_service = EigService()
