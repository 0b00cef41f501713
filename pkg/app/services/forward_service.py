import logging
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from app.core.exceptions import ConvergenceError, SolverError
from app.models.forward import ModelKind, ModelSpec, SourceKind
from app.models.grid import Grid


logger = logging.getLogger(__name__)


class SolveCounter:
    """Thread-safe tally of forward and adjoint PDE solves."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.adjoint = 0

    def add(self, forward: int = 0, adjoint: int = 0) -> None:
        with self._lock:
            self.forward += forward
            self.adjoint += adjoint

    @property
    def total(self) -> int:
        return self.forward + self.adjoint

    def as_dict(self) -> dict:
        return {"forward": self.forward, "adjoint": self.adjoint, "total": self.total}


class SensorLayout:
    """Candidate sensors snapped to grid nodes."""

    def __init__(self, grid: Grid, points: Sequence[Tuple[float, float]]):
        if not points:
            raise ValueError("sensor layout is empty")
        self.coords = np.asarray(points, dtype=float).reshape(-1, 2)
        self.node_index = np.array([grid.nearest_node(x, y) for x, y in self.coords], dtype=np.int64)
        if len(set(self.node_index.tolist())) != len(self.node_index):
            raise ValueError("two sensors snap to the same grid node; refine the grid or move sensors")

    @property
    def d(self) -> int:
        return self.node_index.shape[0]


class ObservableMap(ABC):
    """Parameter-to-observable map F_d: R^n -> R^d."""

    kind: ModelKind
    n: int
    d: int

    def __init__(self):
        self.solves = SolveCounter()

    @abstractmethod
    def evaluate(self, m: np.ndarray) -> np.ndarray:
        """F_d(m)."""

    @abstractmethod
    def jacobian_action(self, m: np.ndarray, p: np.ndarray) -> np.ndarray:
        """J(m) p."""

    @abstractmethod
    def jacobian_transpose_action(self, m: np.ndarray, q: np.ndarray) -> np.ndarray:
        """J(m)ᵀ q."""

    @abstractmethod
    def jacobian_matrix(self, m: np.ndarray) -> np.ndarray:
        """Dense d×n Jacobian."""

    def evaluate_batch(self, ms: np.ndarray, threads: int = 1) -> np.ndarray:
        """Rows of ms mapped to rows of observables, in order."""
        ms = np.atleast_2d(ms)
        if threads > 1 and ms.shape[0] > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(self.evaluate, ms))
        else:
            rows = [self.evaluate(m) for m in ms]
        return np.array(rows).reshape(ms.shape[0], self.d)

    def _check_parameter(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if m.shape != (self.n,):
            raise ValueError(f"parameter has shape {m.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(m)):
            raise ValueError("parameter contains non-finite values")
        return m


class LinearMap(ObservableMap):
    """F(m) = G m + offset; the Jacobian is G everywhere."""

    kind = ModelKind.LINEAR

    def __init__(self, matrix: np.ndarray, offset: Optional[np.ndarray] = None):
        super().__init__()
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.d, self.n = self.matrix.shape
        self.offset = np.zeros(self.d) if offset is None else np.asarray(offset, dtype=float)
        if self.offset.shape != (self.d,):
            raise ValueError(f"offset has shape {self.offset.shape}, expected ({self.d},)")

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        return self.matrix @ self._check_parameter(m) + self.offset

    def evaluate_batch(self, ms: np.ndarray, threads: int = 1) -> np.ndarray:
        ms = np.atleast_2d(np.asarray(ms, dtype=float))
        if ms.shape[1] != self.n:
            raise ValueError(f"parameters have {ms.shape[1]} columns, expected {self.n}")
        return ms @ self.matrix.T + self.offset[None, :]

    def jacobian_action(self, m: np.ndarray, p: np.ndarray) -> np.ndarray:
        return self.matrix @ p

    def jacobian_transpose_action(self, m: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.matrix.T @ q

    def jacobian_matrix(self, m: np.ndarray) -> np.ndarray:
        return self.matrix.copy()


class ShiftedMap(ObservableMap):
    """Base map plus a constant output shift; a surrogate with known error."""

    def __init__(self, base: ObservableMap, shift: np.ndarray):
        super().__init__()
        self.base = base
        self.kind = base.kind
        self.n, self.d = base.n, base.d
        self.shift = np.asarray(shift, dtype=float)
        if self.shift.shape != (self.d,):
            raise ValueError(f"shift has shape {self.shift.shape}, expected ({self.d},)")
        self.solves = base.solves

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        return self.base.evaluate(m) + self.shift

    def evaluate_batch(self, ms: np.ndarray, threads: int = 1) -> np.ndarray:
        return self.base.evaluate_batch(ms, threads) + self.shift[None, :]

    def jacobian_action(self, m: np.ndarray, p: np.ndarray) -> np.ndarray:
        return self.base.jacobian_action(m, p)

    def jacobian_transpose_action(self, m: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.base.jacobian_transpose_action(m, q)

    def jacobian_matrix(self, m: np.ndarray) -> np.ndarray:
        return self.base.jacobian_matrix(m)


def bump_source(grid: Grid) -> np.ndarray:
    """f(x) = max(0.5, exp(-25(x1-0.7)^2 - 25(x2-0.7)^2)) at the nodes."""
    xy = grid.coordinates()
    return np.maximum(0.5, np.exp(-25.0 * (xy[:, 0] - 0.7) ** 2 - 25.0 * (xy[:, 1] - 0.7) ** 2))


def manufactured_solution(grid: Grid) -> np.ndarray:
    """u* = sin(πx/lx) sin(πy/ly) at the nodes."""
    xy = grid.coordinates()
    return np.sin(np.pi * xy[:, 0] / grid.lx) * np.sin(np.pi * xy[:, 1] / grid.ly)


def manufactured_source(grid: Grid) -> np.ndarray:
    """-Δu* for the manufactured solution (unit coefficient)."""
    scale = np.pi**2 * (1.0 / grid.lx**2 + 1.0 / grid.ly**2)
    return scale * manufactured_solution(grid)


def source_term(grid: Grid, source: SourceKind) -> np.ndarray:
    if source == SourceKind.BUMP:
        return bump_source(grid)
    if source == SourceKind.MANUFACTURED:
        return manufactured_source(grid)
    return np.zeros(grid.n)


def stream_velocity(grid: Grid, v0: float) -> Tuple[np.ndarray, np.ndarray]:
    """v = (∂ψ/∂y, -∂ψ/∂x) for ψ = v0 sin(πx/lx) sin(πy/ly)."""
    xy = grid.coordinates()
    ax, ay = np.pi / grid.lx, np.pi / grid.ly
    vx = v0 * ay * np.sin(ax * xy[:, 0]) * np.cos(ay * xy[:, 1])
    vy = -v0 * ax * np.cos(ax * xy[:, 0]) * np.sin(ay * xy[:, 1])
    return vx, vy


class GridOperators:
    """Edge incidence, edge averaging and interior restriction on a grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        nodes = np.arange(grid.n).reshape(grid.ny, grid.nx)
        heads = np.concatenate([nodes[:, :-1].ravel(), nodes[:-1, :].ravel()])
        tails = np.concatenate([nodes[:, 1:].ravel(), nodes[1:, :].ravel()])
        n_x_edges = grid.ny * (grid.nx - 1)
        self.edge_weight = np.concatenate([
            np.full(n_x_edges, 1.0 / grid.hx**2),
            np.full(heads.size - n_x_edges, 1.0 / grid.hy**2),
        ])
        rows = np.arange(heads.size)
        shape = (heads.size, grid.n)
        self.incidence = sp.csr_matrix(
            (np.concatenate([np.ones(heads.size), -np.ones(heads.size)]),
             (np.concatenate([rows, rows]), np.concatenate([heads, tails]))),
            shape=shape,
        )
        self.averaging = abs(self.incidence) * 0.5
        self.interior = np.flatnonzero(~grid.boundary_mask())

    def stiffness(self, edge_coefficient: np.ndarray) -> sp.csr_matrix:
        """Full-grid Dᵀ diag(w κ) D."""
        weights = sp.diags(self.edge_weight * edge_coefficient)
        return (self.incidence.T @ weights @ self.incidence).tocsr()

    def restrict(self, matrix: sp.spmatrix) -> sp.csc_matrix:
        return matrix[self.interior][:, self.interior].tocsc()

    def extend(self, interior_values: np.ndarray) -> np.ndarray:
        """Interior values (vector or columns) padded with zero boundary values."""
        full = np.zeros((self.grid.n,) + interior_values.shape[1:])
        full[self.interior] = interior_values
        return full


def upwind_advection(grid: Grid, vx: np.ndarray, vy: np.ndarray) -> sp.csr_matrix:
    """First-order upwind v·∇ on interior rows of the full grid."""
    nx = grid.nx
    interior = np.flatnonzero(~grid.boundary_mask())
    px, py = vx[interior], vy[interior]
    rows = np.concatenate([interior] * 5)
    cols = np.concatenate([interior, interior - 1, interior + 1, interior - nx, interior + nx])
    vals = np.concatenate([
        np.abs(px) / grid.hx + np.abs(py) / grid.hy,
        -np.maximum(px, 0.0) / grid.hx,
        np.minimum(px, 0.0) / grid.hx,
        -np.maximum(py, 0.0) / grid.hy,
        np.minimum(py, 0.0) / grid.hy,
    ])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n, grid.n))


class PdeMap(ObservableMap):
    """Common plumbing for grid PDE maps observed at sensor nodes."""

    def __init__(self, grid: Grid, layout: SensorLayout, source: np.ndarray):
        super().__init__()
        self.grid = grid
        self.layout = layout
        self.ops = GridOperators(grid)
        self.source = np.asarray(source, dtype=float)
        self.n = grid.n
        self.d = layout.d

    def observe(self, u: np.ndarray) -> np.ndarray:
        return u[self.layout.node_index]

    def observation_adjoint(self, q: np.ndarray) -> np.ndarray:
        """R Bᵀ q on interior nodes; q may be a vector or a (d, k) block."""
        full = np.zeros((self.n,) + q.shape[1:])
        np.add.at(full, self.layout.node_index, q)
        return full[self.ops.interior]

    def observation_adjoint_identity(self) -> np.ndarray:
        return self.observation_adjoint(np.identity(self.d))

    @staticmethod
    def _factorize(matrix: sp.csc_matrix, what: str) -> spla.SuperLU:
        try:
            return spla.splu(matrix)
        except RuntimeError as e:
            raise SolverError(f"{what} factorization failed: {e}")

    @staticmethod
    def _check_solution(matrix: sp.spmatrix, u: np.ndarray, rhs: np.ndarray, what: str) -> None:
        if not np.all(np.isfinite(u)):
            raise SolverError(f"{what} produced non-finite values")
        residual = float(np.linalg.norm(matrix @ u - rhs))
        if residual > 1e-8 * max(1.0, float(np.linalg.norm(rhs))):
            raise SolverError(f"{what} inaccurate", residual=residual)


class EllipticMap(PdeMap):
    """-∇·(e^m ∇u) = f, u = 0 on the boundary, observed at sensors."""

    kind = ModelKind.ELLIPTIC

    def _state(self, m: np.ndarray):
        coefficient = np.exp(m)
        stiffness = self.ops.restrict(self.ops.stiffness(self.ops.averaging @ coefficient))
        lu = self._factorize(stiffness, "elliptic")
        rhs = self.source[self.ops.interior]
        u_int = lu.solve(rhs)
        self._check_solution(stiffness, u_int, rhs, "elliptic solve")
        self.solves.add(forward=1)
        return self.ops.extend(u_int), lu, coefficient

    def solve_state(self, m: np.ndarray) -> np.ndarray:
        """Full-grid state u(m)."""
        return self._state(self._check_parameter(m))[0]

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        return self.observe(self.solve_state(m))

    def _edge_gradient(self, u: np.ndarray) -> np.ndarray:
        return self.ops.edge_weight * (self.ops.incidence @ u)

    def jacobian_action(self, m: np.ndarray, p: np.ndarray) -> np.ndarray:
        u, lu, coefficient = self._state(self._check_parameter(m))
        dkappa = self.ops.averaging @ (coefficient * p)
        forcing = self.ops.incidence.T @ (self._edge_gradient(u) * dkappa)
        du = -lu.solve(forcing[self.ops.interior])
        self.solves.add(forward=1)
        return self.observe(self.ops.extend(du))

    def _pullback(self, u: np.ndarray, coefficient: np.ndarray, adjoints: np.ndarray) -> np.ndarray:
        # rows of the result are -e^m ⊙ Pᵀ(w ⊙ Du ⊙ Dλ) per adjoint column
        weighted = self._edge_gradient(u)[:, None] * (self.ops.incidence @ adjoints)
        return -(self.ops.averaging.T @ weighted).T * coefficient[None, :]

    def jacobian_transpose_action(self, m: np.ndarray, q: np.ndarray) -> np.ndarray:
        u, lu, coefficient = self._state(self._check_parameter(m))
        adjoint = self.ops.extend(lu.solve(self.observation_adjoint(np.asarray(q, dtype=float))))
        self.solves.add(adjoint=1)
        return self._pullback(u, coefficient, adjoint[:, None])[0]

    def jacobian_matrix(self, m: np.ndarray) -> np.ndarray:
        u, lu, coefficient = self._state(self._check_parameter(m))
        adjoints = self.ops.extend(lu.solve(self.observation_adjoint_identity()))
        self.solves.add(adjoint=self.d)
        return self._pullback(u, coefficient, adjoints)


class AdrMap(PdeMap):
    """-∇·(k∇u) + v·∇u + e^m u³ = f, u = 0 on the boundary, solved by damped Newton."""

    kind = ModelKind.ADR

    def __init__(
        self,
        grid: Grid,
        layout: SensorLayout,
        source: np.ndarray,
        k: float = 0.01,
        v0: float = 30.0,
        reaction: bool = True,
        tol: float = 1e-10,
        max_iter: int = 50,
        max_halvings: int = 10,
    ):
        if not k > 0:
            raise ValueError(f"diffusion k must be positive, got {k}")
        super().__init__(grid, layout, source)
        self.k = float(k)
        self.v0 = float(v0)
        self.reaction = reaction
        self.tol = tol
        self.max_iter = max_iter
        self.max_halvings = max_halvings
        vx, vy = stream_velocity(grid, v0)
        full = self.k * self.ops.stiffness(np.ones(self.ops.edge_weight.size)) + upwind_advection(grid, vx, vy)
        self.linear_operator = self.ops.restrict(full)

    def _reaction_weight(self, m: np.ndarray) -> np.ndarray:
        if not self.reaction:
            return np.zeros(self.ops.interior.size)
        return np.exp(m[self.ops.interior])

    def residual(self, u_int: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Interior residual of the discrete equations."""
        rhs = self.source[self.ops.interior]
        return self.linear_operator @ u_int + self._reaction_weight(m) * u_int**3 - rhs

    def _tangent(self, u_int: np.ndarray, weight: np.ndarray) -> sp.csc_matrix:
        return (self.linear_operator + sp.diags(3.0 * weight * u_int**2)).tocsc()

    def _state(self, m: np.ndarray):
        weight = self._reaction_weight(m)
        rhs = self.source[self.ops.interior]
        scale = max(1.0, float(np.linalg.norm(rhs)))
        u = np.zeros(self.ops.interior.size)
        res = self.residual(u, m)
        norm = float(np.linalg.norm(res))
        for iteration in range(self.max_iter + 1):
            if norm <= self.tol * scale:
                break
            if iteration == self.max_iter:
                raise ConvergenceError("Newton did not converge", iteration, norm)
            lu = self._factorize(self._tangent(u, weight), "Newton tangent")
            step = -lu.solve(res)
            alpha = 1.0
            for _ in range(self.max_halvings + 1):
                trial = u + alpha * step
                trial_res = self.residual(trial, m)
                trial_norm = float(np.linalg.norm(trial_res))
                if np.isfinite(trial_norm) and trial_norm < norm:
                    break
                alpha *= 0.5
            if not np.isfinite(trial_norm):
                raise ConvergenceError("Newton step produced non-finite residual", iteration)
            if trial_norm >= norm:
                raise ConvergenceError("Newton did not converge: line search stalled", iteration, norm)
            u, res, norm = trial, trial_res, trial_norm
            logger.debug("newton iteration %d: residual %.3e (step %.3g)", iteration, norm, alpha)
        self.solves.add(forward=1)
        return u, self._factorize(self._tangent(u, weight), "ADR tangent"), weight

    def solve_state(self, m: np.ndarray) -> np.ndarray:
        """Full-grid state u(m)."""
        return self.ops.extend(self._state(self._check_parameter(m))[0])

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        return self.observe(self.solve_state(m))

    def jacobian_action(self, m: np.ndarray, p: np.ndarray) -> np.ndarray:
        u, lu, weight = self._state(self._check_parameter(m))
        du = -lu.solve(weight * u**3 * np.asarray(p, dtype=float)[self.ops.interior])
        self.solves.add(forward=1)
        return self.observe(self.ops.extend(du))

    def jacobian_transpose_action(self, m: np.ndarray, q: np.ndarray) -> np.ndarray:
        u, lu, weight = self._state(self._check_parameter(m))
        adjoint = lu.solve(self.observation_adjoint(np.asarray(q, dtype=float)), trans="T")
        self.solves.add(adjoint=1)
        return self.ops.extend(-weight * u**3 * adjoint)

    def jacobian_matrix(self, m: np.ndarray) -> np.ndarray:
        u, lu, weight = self._state(self._check_parameter(m))
        adjoints = lu.solve(self.observation_adjoint_identity(), trans="T")
        self.solves.add(adjoint=self.d)
        return self.ops.extend(-(weight * u**3)[:, None] * adjoints).T


class ForwardService:
    """Service for building and evaluating parameter-to-observable maps."""

    @staticmethod
    def build_map(spec: ModelSpec, grid: Optional[Grid] = None) -> ObservableMap:
        """Construct the map a model section describes."""
        if spec.kind == ModelKind.LINEAR:
            return LinearMap(np.asarray(spec.matrix), None if spec.offset is None else np.asarray(spec.offset))
        if grid is None:
            raise ValueError(f"{spec.kind.value} model requires a grid")
        layout = SensorLayout(grid, spec.sensor_points())
        source = source_term(grid, spec.source)
        if spec.kind == ModelKind.ELLIPTIC:
            model = EllipticMap(grid, layout, source)
        else:
            model = AdrMap(
                grid, layout, source,
                k=spec.k, v0=spec.v0, reaction=spec.reaction,
                tol=spec.newton_tol, max_iter=spec.newton_max_iter, max_halvings=spec.max_halvings,
            )
        logger.info("built %s map: n=%d, d=%d", spec.kind.value, model.n, model.d)
        return model

    @staticmethod
    def linear_map_evaluate(matrix: np.ndarray, offset: np.ndarray, m: np.ndarray) -> np.ndarray:
        """G m + offset."""
        return LinearMap(matrix, offset).evaluate(m)

    @staticmethod
    def elliptic_evaluate(model: EllipticMap, m: np.ndarray) -> np.ndarray:
        return model.evaluate(m)

    @staticmethod
    def adr_evaluate(model: AdrMap, m: np.ndarray) -> np.ndarray:
        return model.evaluate(m)

    @staticmethod
    def jacobian_matrix(model: ObservableMap, m: np.ndarray) -> np.ndarray:
        return model.jacobian_matrix(m)

    @staticmethod
    def evaluate_batch(model: ObservableMap, ms: np.ndarray, threads: int = 1) -> np.ndarray:
        return model.evaluate_batch(ms, threads)


forward_service = ForwardService()
