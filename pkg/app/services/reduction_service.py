import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core.exceptions import ArtifactError, EvaluationError, NumericalError
from app.core.random import OUTER_STREAM, derive_rng
from app.db.container import read_container, require_shape, write_container
from app.services.forward_service import ObservableMap
from app.services.prior_service import GaussianPrior


logger = logging.getLogger(__name__)

AS_TAG = 0
POD_TAG = 1


@dataclass
class ReducedBases:
    """AS input basis V (Γ_pr⁻¹-orthonormal) and POD output basis Φ (orthonormal)."""
    V: np.ndarray
    lambda_as: np.ndarray
    Phi: np.ndarray
    lambda_pod: np.ndarray
    n_samples_as: int
    n_samples_pod: int
    seed: Optional[int] = None
    pde_solves: int = 0

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.Phi.shape[0]

    @property
    def r_M(self) -> int:
        return self.V.shape[1]

    @property
    def r_F(self) -> int:
        return self.Phi.shape[1]


def energy_rank(eigenvalues: np.ndarray, energy: float) -> int:
    """Smallest r whose leading eigenvalues hold at least `energy` of the total."""
    values = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = values.sum()
    if total <= 0.0:
        return 1
    cumulative = np.cumsum(values)
    return int(np.searchsorted(cumulative, energy * total * (1.0 - 1e-12)) + 1)


def _sorted_eigh(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    symmetric = 0.5 * (matrix + matrix.T)
    try:
        values, vectors = np.linalg.eigh(symmetric)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"symmetric eigensolve failed: {e}")
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def _sample_parameters(prior: GaussianPrior, count: int, seed: int, tag: int) -> np.ndarray:
    # one generator per sample index: results do not depend on the thread count
    return np.array([prior.sample(derive_rng(seed, OUTER_STREAM, tag, i)) for i in range(count)])


class ReductionService:
    """Service for derivative-informed input and POD output reduction."""

    @staticmethod
    def estimate_as_operator(
        model: ObservableMap,
        prior: GaussianPrior,
        n_samples: int,
        seed: int,
        threads: int = 1,
    ) -> np.ndarray:
        """H = mean of J(m_i)ᵀJ(m_i) over prior draws."""
        if n_samples < 1:
            raise ValueError(f"n_samples must be at least 1, got {n_samples}")
        samples = _sample_parameters(prior, n_samples, seed, AS_TAG)

        def gram(index: int) -> np.ndarray:
            try:
                jacobian = model.jacobian_matrix(samples[index])
            except NumericalError as e:
                raise EvaluationError(f"Jacobian failed: {e}", sample=index)
            return jacobian.T @ jacobian

        operator = np.zeros((model.n, model.n))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for term in pool.map(gram, range(n_samples)):
                    operator += term
        else:
            for index in range(n_samples):
                operator += gram(index)
        operator /= n_samples
        logger.info("AS operator estimated from %d Jacobians", n_samples)
        return 0.5 * (operator + operator.T)

    @staticmethod
    def as_basis(h: np.ndarray, prior: GaussianPrior, r_M: int) -> Tuple[np.ndarray, np.ndarray]:
        """Top r_M pairs of H v = λ Γ_pr⁻¹ v, solved in whitened coordinates."""
        h = np.asarray(h, dtype=float)
        n = prior.n
        if h.shape != (n, n):
            raise ValueError(f"AS operator has shape {h.shape}, expected ({n}, {n})")
        if not 1 <= r_M <= n:
            raise ValueError(f"r_M must lie in [1, {n}], got {r_M}")
        factor = prior.cov_factor
        values, vectors = _sorted_eigh(factor.T @ h @ factor)
        return factor @ vectors[:, :r_M], values[:r_M]

    @staticmethod
    def pod_operator(outputs: np.ndarray) -> np.ndarray:
        """Ĥ = mean of F_i F_iᵀ over the rows of outputs."""
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        return outputs.T @ outputs / outputs.shape[0]

    @staticmethod
    def pod_basis_from_outputs(outputs: np.ndarray, r_F: int) -> Tuple[np.ndarray, np.ndarray]:
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        count, d = outputs.shape
        if not 1 <= r_F <= d:
            raise ValueError(f"r_F must lie in [1, {d}], got {r_F}")
        if count < r_F:
            raise ValueError(f"POD needs at least r_F={r_F} samples, got {count}")
        values, vectors = _sorted_eigh(ReductionService.pod_operator(outputs))
        return vectors[:, :r_F], values[:r_F]

    @staticmethod
    def pod_basis(
        model: ObservableMap,
        prior: GaussianPrior,
        n_samples: int,
        r_F: int,
        seed: int,
        threads: int = 1,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Top r_F eigenpairs of the sampled output outer-product operator."""
        if not 1 <= r_F <= model.d:
            raise ValueError(f"r_F must lie in [1, {model.d}], got {r_F}")
        if n_samples < r_F:
            raise ValueError(f"n_samples ({n_samples}) must be at least r_F ({r_F})")
        samples = _sample_parameters(prior, n_samples, seed, POD_TAG)
        outputs = model.evaluate_batch(samples, threads)
        logger.info("POD operator estimated from %d evaluations", n_samples)
        return ReductionService.pod_basis_from_outputs(outputs, r_F)

    @staticmethod
    def output_projection_error(phi: np.ndarray, outputs: np.ndarray) -> float:
        """‖F − ΦΦᵀF‖ / ‖F‖ stacked over samples."""
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        norm = np.linalg.norm(outputs)
        if norm == 0.0:
            raise ValueError("outputs are identically zero")
        residual = outputs - (outputs @ phi) @ phi.T
        return float(np.linalg.norm(residual) / norm)

    @staticmethod
    def build_bases(
        model: ObservableMap,
        prior: GaussianPrior,
        seed: int,
        n_samples_as: int,
        n_samples_pod: int,
        r_M: Optional[int] = None,
        r_F: Optional[int] = None,
        energy: float = 0.99,
        threads: int = 1,
    ) -> ReducedBases:
        """AS and POD bases; unspecified ranks follow the energy threshold."""
        before = model.solves.total
        h = ReductionService.estimate_as_operator(model, prior, n_samples_as, seed, threads)
        if r_M is None:
            _, full = ReductionService.as_basis(h, prior, prior.n)
            r_M = energy_rank(full, energy)
        V, lambda_as = ReductionService.as_basis(h, prior, min(r_M, prior.n))

        samples = _sample_parameters(prior, n_samples_pod, seed, POD_TAG)
        outputs = model.evaluate_batch(samples, threads)
        if r_F is None:
            values, _ = _sorted_eigh(ReductionService.pod_operator(outputs))
            r_F = min(energy_rank(values, energy), n_samples_pod)
        Phi, lambda_pod = ReductionService.pod_basis_from_outputs(outputs, min(r_F, model.d))
        logger.info("bases built: r_M=%d, r_F=%d", V.shape[1], Phi.shape[1])
        solves = model.solves.total - before
        return ReducedBases(V, lambda_as, Phi, lambda_pod, n_samples_as, n_samples_pod, seed, solves)

    @staticmethod
    def save_bases(bases: ReducedBases, base: Union[str, Path]) -> list:
        header = {
            "n": bases.n,
            "d": bases.d,
            "r_M": bases.r_M,
            "r_F": bases.r_F,
            "n_samples_as": bases.n_samples_as,
            "n_samples_pod": bases.n_samples_pod,
            "seed": bases.seed,
            "pde_solves": bases.pde_solves,
        }
        blocks = [("V", bases.V), ("lambda_as", bases.lambda_as), ("Phi", bases.Phi), ("lambda_pod", bases.lambda_pod)]
        return write_container(base, header, blocks)

    @staticmethod
    def load_bases(base: Union[str, Path]) -> ReducedBases:
        header, arrays = read_container(base)
        try:
            n, d, r_M, r_F = (int(header[key]) for key in ("n", "d", "r_M", "r_F"))
            return ReducedBases(
                V=require_shape(arrays, "V", (n, r_M)),
                lambda_as=require_shape(arrays, "lambda_as", (r_M,)),
                Phi=require_shape(arrays, "Phi", (d, r_F)),
                lambda_pod=require_shape(arrays, "lambda_pod", (r_F,)),
                n_samples_as=int(header["n_samples_as"]),
                n_samples_pod=int(header["n_samples_pod"]),
                seed=header.get("seed"),
                pde_solves=int(header.get("pde_solves", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"corrupt bases header: {e}")


reduction_service = ReductionService()
