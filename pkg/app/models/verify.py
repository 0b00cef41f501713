from typing import List, Optional

from pydantic import BaseModel, Field


class VerifySpec(BaseModel):
    """Verify section: surrogate family and sweep sizes."""
    epsilons: List[float] = []  # constructed-error family F + eps * u
    surrogates: List[str] = []  # trained net artifact paths
    n_designs: int = Field(5, ge=1)
    design_size: int = Field(5, ge=1)
    n_in_grid: List[int] = []
    n_in_ref: int = Field(20000, ge=1)
    n_in_budget: Optional[int] = Field(None, ge=1)


class SurrogateRecord(BaseModel):
    """Errors of one surrogate against the true map on shared sample banks."""
    surrogate_id: str
    breadth: Optional[int] = None
    epsilon_hat: float
    l2_accuracy: Optional[float] = None
    log_norm_errors: List[List[float]]  # per design, per outer sample
    eig_errors: List[float]  # per design
    n_in_errors: List[float] = []  # mean log-normalization error per verify.n_in_grid entry

    @property
    def mean_log_norm_error(self) -> float:
        values = [e for row in self.log_norm_errors for e in row]
        return sum(values) / len(values) if values else 0.0

    @property
    def max_log_norm_error(self) -> float:
        return max((e for row in self.log_norm_errors for e in row), default=0.0)


class ErrorSweepReport(BaseModel):
    """EIG error versus surrogate generalization error."""
    records: List[SurrogateRecord]
    slope: float
    log_norm_slope: float
    c_i_hat: float
    c_hat: float
    n_out: int
    n_in: int
    n_in_grid: List[int] = []
    design_indices: List[List[int]]
    epsilon_span_decades: float  # log10 of the largest over the smallest fitted error


class BudgetComparison(BaseModel):
    """Surrogate Monte Carlo versus cost-matched simple Monte Carlo."""
    n_in_ref: int
    n_in_surrogate: int
    n_in_budget: int
    surrogate_errors: List[float]
    budget_errors: List[float]
    mean_surrogate_error: float
    mean_budget_error: float
    design_indices: List[List[int]]
