from typing import Optional

from pydantic import BaseModel, Field, model_validator

from app.models.design import GreedySpec
from app.models.eig import EigSpec, NoiseModel
from app.models.forward import ModelKind, ModelSpec
from app.models.grid import Grid, PriorKind, PriorSpec
from app.models.network import DipNetConfig, TrainConfig
from app.models.reduction import ReductionSpec
from app.models.verify import VerifySpec


class DataSpec(BaseModel):
    """Dataset sizes for gen-data."""
    n_samples: int = Field(500, ge=2)
    test_fraction: float = Field(0.2, ge=0, lt=1)


class RunConfig(BaseModel):
    """Validated run configuration document."""
    grid: Optional[Grid] = None
    prior: PriorSpec = PriorSpec()
    model: ModelSpec
    noise: NoiseModel
    reduction: ReductionSpec = ReductionSpec()
    network: DipNetConfig = DipNetConfig()
    training: TrainConfig = TrainConfig()
    data: DataSpec = DataSpec()
    eig: EigSpec = EigSpec()
    greedy: Optional[GreedySpec] = None
    verify: VerifySpec = VerifySpec()
    seed: int = Field(0, ge=0, lt=2**64)
    threads: Optional[int] = Field(None, ge=1)
    output_dir: Optional[str] = None

    class Config:
        extra = "forbid"

    @model_validator(mode="before")
    @classmethod
    def default_noise_section(cls, data):
        # an absent section is reported through its required sigma
        if isinstance(data, dict) and "noise" not in data:
            data = {**data, "noise": {}}
        return data

    @model_validator(mode="after")
    def check_sections(self) -> "RunConfig":
        if self.prior.kind == PriorKind.FIELD and self.grid is None:
            raise ValueError("field prior requires a 'grid' section")
        if self.model.kind != ModelKind.LINEAR and self.grid is None:
            raise ValueError(f"{self.model.kind.value} model requires a 'grid' section")
        if self.prior.kind == PriorKind.DENSE and self.prior.covariance is None:
            raise ValueError("dense prior requires 'covariance'")
        return self
