from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import List, Optional
import numpy as np

from ..utils.helpers import weighted_mean


class RoundReport(BaseModel):
    """One global round of the federated engine"""
    stage: int = Field(..., ge=1)
    round_index: int = Field(..., ge=0, description="global round counter across stages")
    participants: List[int] = Field(default_factory=list)
    mean_loss: float = Field(..., description="mean final-epoch training loss of the participants")
    transmitted: int = Field(..., ge=0, description="parameters sent up and down this round")
    wall_time: float = Field(0.0, ge=0.0, description="seconds spent in the round; kept out of rounds.csv")


class StageReport(BaseModel):
    """Summary of one PPFE stage"""
    stage: int = Field(..., ge=1)
    personal_layers: int = Field(..., ge=0)
    rounds: int = Field(..., ge=0)
    shared_parameters: int = Field(..., ge=0, description="D'_t")
    personal_parameters: int = Field(..., ge=0, description="D_t per client")
    dense_personal_parameters: int = Field(..., ge=0, description="head size before reduction")
    reduction_fraction: float = Field(..., description="1 - reduced / dense head parameters")
    transmitted: int = Field(..., ge=0)
    transmitted_fraction: float = Field(..., description="fraction of a full-model upload per round")
    mean_beta: float = Field(0.0)
    mean_epsilon: float = Field(0.0)
    client_train_error: List[float] = Field(default_factory=list)


class MetricsRow(BaseModel):
    """One (method, sweep value, seed) evaluation"""
    method: str
    seed: int
    sweep_param: Optional[str] = None
    sweep_value: Optional[str] = None
    metric: str = Field(..., description="test_mse or test_accuracy")
    client_ids: List[int] = Field(default_factory=list)
    client_sizes: List[int] = Field(default_factory=list)
    client_values: List[float] = Field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.client_values)

    @property
    def mean(self) -> float:
        if not self.client_values:
            return float("nan")
        return sum(self.client_values) / len(self.client_values)

    @property
    def weighted_mean(self) -> float:
        if sum(self.client_sizes) <= 0:
            return self.mean
        return weighted_mean(self.client_values, self.client_sizes)


class CapacityRow(BaseModel):
    """Parameter counts of one stage and the terms of the generalization bound"""
    stage: int = Field(..., ge=1)
    personal_layers: int = Field(..., ge=0)
    width: int = Field(..., ge=1, description="scheduled hidden width or head rank")
    shared_parameters: int = Field(..., ge=0)
    personal_parameters: int = Field(..., ge=0)
    cumulative_shared: int = Field(..., ge=0)
    cumulative_personal: int = Field(..., ge=0)
    shared_term: float
    personal_term: float
    boosting_term: float
    bound: float


class RidgeFit(BaseModel):
    """Ridge solution with the regularization that won on the holdout split"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    w: np.ndarray
    lam: float = Field(..., ge=0.0)
    val_mse: float

    @field_validator("w")
    @classmethod
    def _finite(cls, value):
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(value)):
            raise ValueError("ridge weights must be finite")
        return value
