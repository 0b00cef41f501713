from pathlib import Path

import numpy as np
import pytest

from app.cli.deps import get_model, get_prior, get_sigma, get_threads, load_config
from app.models.grid import Grid
from app.services.dipnet_service import dipnet_service
from app.services.forward_service import EllipticMap, LinearMap, SensorLayout, bump_source
from app.services.prior_service import prior_service
from app.services.reduction_service import reduction_service

ADR_DESK = Path(__file__).resolve().parents[1] / "configs" / "adr_desk.json"


@pytest.fixture
def small_grid():
    return Grid(nx=8, ny=8)


@pytest.fixture
def field_prior(small_grid):
    return prior_service.build_prior(small_grid, gamma=0.1, delta=1.0)


@pytest.fixture
def unit_prior():
    return prior_service.build_dense_prior(0.0, [[1.0]])


@pytest.fixture
def linear_1d():
    """G = 3, unit prior and noise: EIG = ½ log 10."""
    return LinearMap(np.array([[3.0]]))


@pytest.fixture
def diag321():
    return LinearMap(np.diag([3.0, 2.0, 1.0]))


@pytest.fixture
def elliptic_map():
    grid = Grid(nx=10, ny=10)
    points = [(x, y) for y in (0.25, 0.5, 0.75) for x in (0.25, 0.5, 0.75)]
    return EllipticMap(grid, SensorLayout(grid, points), bump_source(grid))


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path / "runs"


class DeskProblem:
    """ADR desk model with its dataset, bases and trained nets, built once per session."""

    def __init__(self):
        self.config = load_config(str(ADR_DESK))
        self.prior = get_prior(self.config)
        self.model = get_model(self.config)
        self.sigma = get_sigma(self.config, self.model.d)
        self.threads = get_threads(self.config)
        self.dataset = dipnet_service.generate_dataset(
            self.model,
            self.prior,
            self.config.data.n_samples,
            self.config.seed,
            test_fraction=self.config.data.test_fraction,
            validation_fraction=self.config.training.split,
            threads=self.threads,
        )
        spec = self.config.reduction
        self.bases = reduction_service.build_bases(
            self.model,
            self.prior,
            self.config.seed,
            n_samples_as=spec.n_samples_as,
            n_samples_pod=spec.n_samples_pod,
            r_M=spec.input_rank,
            r_F=spec.output_rank,
            threads=self.threads,
        )
        self._nets = {}

    @property
    def training_solves(self) -> int:
        return self.dataset.pde_solves + self.bases.pde_solves

    def net(self, breadth: int, seed: int):
        key = (breadth, seed)
        if key not in self._nets:
            network = self.config.network.model_copy(
                update={"breadth": breadth, "layer_rank": min(self.config.network.layer_rank, breadth - 1)}
            )
            net = dipnet_service.build_net(network, self.bases, seed)
            dipnet_service.train(net, self.dataset, self.config.training, seed)
            self._nets[key] = net
        return self._nets[key]

    def held_out(self):
        return self.dataset.inputs[self.dataset.test], self.dataset.outputs[self.dataset.test]


@pytest.fixture(scope="session")
def adr_desk():
    return DeskProblem()
