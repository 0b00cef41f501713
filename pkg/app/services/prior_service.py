import logging
from abc import ABC, abstractmethod
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from app.core.exceptions import ArtifactError
from app.db.container import read_container, require_shape, write_container
from app.models.grid import Grid, PriorKind, PriorSpec


logger = logging.getLogger(__name__)

DENSE_FACTOR_LIMIT = 4096


def neumann_second_difference(count: int, h: float) -> sp.csr_matrix:
    """1-D negative Laplacian with the symmetric mirror-node Neumann closure."""
    main = np.full(count, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(count - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def neumann_laplacian(grid: Grid) -> sp.csr_matrix:
    """Negative 5-point Laplacian -Δ_h on the grid; annihilates constants."""
    dx = neumann_second_difference(grid.nx, grid.hx)
    dy = neumann_second_difference(grid.ny, grid.hy)
    return (sp.kron(sp.identity(grid.ny), dx) + sp.kron(dy, sp.identity(grid.nx))).tocsr()


class PrecisionOperator:
    """A = δI − γΔ_h with homogeneous Neumann boundary."""

    def __init__(self, grid: Grid, gamma: float, delta: float):
        if gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {gamma}")
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.matrix = (self.delta * sp.identity(grid.n, format="csr") + self.gamma * neumann_laplacian(grid)).tocsc()


class GaussianPrior(ABC):
    """Gaussian measure N(mean, L Lᵀ) with a square-root factor L."""

    mean: np.ndarray

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @abstractmethod
    def apply_factor(self, xi: np.ndarray) -> np.ndarray:
        """L @ xi for a vector or an (n, k) block."""

    @abstractmethod
    def apply_factor_inverse(self, v: np.ndarray) -> np.ndarray:
        """L⁻¹ @ v for a vector or an (n, k) block."""

    @property
    @abstractmethod
    def cov_factor(self) -> np.ndarray:
        """Dense factor L."""

    def covariance(self) -> np.ndarray:
        factor = self.cov_factor
        return factor @ factor.T

    def sample(self, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
        """One draw (count=None) or a (count, n) block of draws."""
        if count is None:
            return self.mean + self.apply_factor(rng.standard_normal(self.n))
        xi = rng.standard_normal((count, self.n))
        return self.mean[None, :] + self.apply_factor(xi.T).T

    def whiten(self, m: np.ndarray) -> np.ndarray:
        m = self._check(m)
        if m.ndim == 1:
            return self.apply_factor_inverse(m - self.mean)
        return self.apply_factor_inverse((m - self.mean[None, :]).T).T

    def unwhiten(self, w: np.ndarray) -> np.ndarray:
        w = self._check(w)
        if w.ndim == 1:
            return self.mean + self.apply_factor(w)
        return self.mean[None, :] + self.apply_factor(w.T).T

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.n:
            raise ValueError(f"vector length {v.shape[-1]} does not match prior dimension {self.n}")
        return v


class GaussianFieldPrior(GaussianPrior):
    """Grid prior with Γ_pr = A⁻¹MA⁻¹ and factor L = A⁻¹M^{1/2}."""

    def __init__(self, grid: Grid, precision_op: PrecisionOperator, mean: np.ndarray):
        self.grid = grid
        self.precision_op = precision_op
        self.mean = mean
        self.mass_diag = np.full(grid.n, grid.hx * grid.hy)
        self._mass_sqrt = np.sqrt(self.mass_diag)
        self._lu = spla.splu(precision_op.matrix)

    @property
    def gamma(self) -> float:
        return self.precision_op.gamma

    @property
    def delta(self) -> float:
        return self.precision_op.delta

    def apply_factor(self, xi: np.ndarray) -> np.ndarray:
        scaled = xi * (self._mass_sqrt if xi.ndim == 1 else self._mass_sqrt[:, None])
        return self._lu.solve(np.asfortranarray(scaled))

    def apply_factor_inverse(self, v: np.ndarray) -> np.ndarray:
        av = self.precision_op.matrix @ v
        return av / (self._mass_sqrt if v.ndim == 1 else self._mass_sqrt[:, None])

    @cached_property
    def cov_factor(self) -> np.ndarray:
        if self.n > DENSE_FACTOR_LIMIT:
            raise ValueError(f"dense covariance factor limited to n <= {DENSE_FACTOR_LIMIT}, got {self.n}")
        return self.apply_factor(np.identity(self.n))

    def precision(self) -> np.ndarray:
        """Dense Γ_pr⁻¹ = A M⁻¹ A."""
        a = self.precision_op.matrix.toarray()
        return a @ (a / self.mass_diag[:, None])


class DenseGaussianPrior(GaussianPrior):
    """Prior with an explicit SPD covariance and its Cholesky factor."""

    def __init__(self, mean: np.ndarray, covariance: np.ndarray):
        covariance = np.asarray(covariance, dtype=float)
        if covariance.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance shape {covariance.shape} does not match mean length {mean.shape[0]}")
        if not np.allclose(covariance, covariance.T):
            raise ValueError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(covariance)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite")
        self.mean = mean
        self.covariance_matrix = covariance

    def apply_factor(self, xi: np.ndarray) -> np.ndarray:
        return self._chol @ xi

    def apply_factor_inverse(self, v: np.ndarray) -> np.ndarray:
        return sla.solve_triangular(self._chol, v, lower=True)

    @property
    def cov_factor(self) -> np.ndarray:
        return self._chol

    def precision(self) -> np.ndarray:
        return sla.cho_solve((self._chol, True), np.identity(self.n))


def _mean_vector(mean: Union[float, Sequence[float], np.ndarray], n: int) -> np.ndarray:
    values = np.asarray(mean, dtype=float)
    if values.ndim == 0:
        return np.full(n, float(values))
    if values.shape != (n,):
        raise ValueError(f"mean has length {values.size}, expected {n}")
    return values.copy()


class PriorService:
    """Service for prior construction, sampling and persistence."""

    @staticmethod
    def build_prior(
        grid: Grid,
        gamma: float,
        delta: float,
        mean: Union[float, Sequence[float], np.ndarray] = 0.0,
    ) -> GaussianFieldPrior:
        """Assemble A, the lumped mass and the covariance factor."""
        operator = PrecisionOperator(grid, gamma, delta)
        prior = GaussianFieldPrior(grid, operator, _mean_vector(mean, grid.n))
        logger.info("built %dx%d field prior (gamma=%g, delta=%g)", grid.nx, grid.ny, gamma, delta)
        return prior

    @staticmethod
    def build_dense_prior(
        mean: Union[float, Sequence[float], np.ndarray],
        covariance: Union[Sequence[Sequence[float]], np.ndarray],
    ) -> DenseGaussianPrior:
        """Prior from an explicit covariance matrix."""
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        return DenseGaussianPrior(_mean_vector(mean, covariance.shape[0]), covariance)

    @staticmethod
    def from_spec(spec: PriorSpec, grid: Optional[Grid] = None) -> GaussianPrior:
        """Build the prior a configuration section describes."""
        if spec.kind == PriorKind.DENSE:
            return PriorService.build_dense_prior(spec.mean, spec.covariance)
        if grid is None:
            raise ValueError("field prior requires a grid")
        return PriorService.build_prior(grid, spec.gamma, spec.delta, spec.mean)

    @staticmethod
    def prior_sample(
        prior: GaussianPrior,
        rng: np.random.Generator,
        count: Optional[int] = None,
    ) -> np.ndarray:
        """m = m_pr + L ξ."""
        return prior.sample(rng, count)

    @staticmethod
    def whiten(prior: GaussianPrior, m: np.ndarray) -> np.ndarray:
        return prior.whiten(m)

    @staticmethod
    def unwhiten(prior: GaussianPrior, w: np.ndarray) -> np.ndarray:
        return prior.unwhiten(w)

    @staticmethod
    def save_prior(prior: GaussianPrior, base: Union[str, Path]) -> list:
        """Persist a prior as header + mean (and covariance for dense priors)."""
        if isinstance(prior, GaussianFieldPrior):
            grid = prior.grid
            header = {
                "kind": PriorKind.FIELD.value,
                "nx": grid.nx,
                "ny": grid.ny,
                "lx": grid.lx,
                "ly": grid.ly,
                "gamma": prior.gamma,
                "delta": prior.delta,
            }
            return write_container(base, header, [("mean", prior.mean)])
        header = {"kind": PriorKind.DENSE.value, "n": prior.n}
        return write_container(base, header, [("mean", prior.mean), ("covariance", prior.covariance_matrix)])

    @staticmethod
    def load_prior(base: Union[str, Path]) -> GaussianPrior:
        header, arrays = read_container(base)
        try:
            if header.get("kind") == PriorKind.DENSE.value:
                n = int(header["n"])
                mean = require_shape(arrays, "mean", (n,))
                return PriorService.build_dense_prior(mean, require_shape(arrays, "covariance", (n, n)))
            grid = Grid(nx=header["nx"], ny=header["ny"], lx=header["lx"], ly=header["ly"])
            mean = require_shape(arrays, "mean", (grid.n,))
            return PriorService.build_prior(grid, header["gamma"], header["delta"], mean)
        except (KeyError, TypeError) as e:
            raise ArtifactError(f"corrupt prior header: missing or invalid field {e}")


prior_service = PriorService()
