from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Annotated, List, Literal, Optional, Union
from enum import Enum


class StrictModel(BaseModel):
    """Base for config schemas: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


class CovarianceMode(str, Enum):
    """Feature covariance of the synthetic regression clients"""
    IDENTITY = "identity"
    RANDOM_SPD = "random_spd"


class ReweightSign(str, Enum):
    """exp(+beta*loss) as in the boosting loop, or exp(-beta*loss)"""
    ALGORITHM = "algorithm"
    PROSE = "prose"


class TrainMode(str, Enum):
    JOINT = "joint"
    ALTERNATING = "alternating"


def default_lambda_grid() -> List[float]:
    """13 log-spaced points from 1e-4 to 1e2"""
    return [10.0 ** (-4 + 0.5 * i) for i in range(13)]


# Synthetic data

class SyntheticRegressionSpec(StrictModel):
    """Linear-regression clients with a global and a personal weight component"""
    num_clients: int = Field(default=100, ge=1, description="K")
    samples_per_client: int = Field(default=200, ge=2, description="n_k")
    test_samples_per_client: Optional[int] = Field(None, ge=1, description="fresh test draws, defaults to n_k")
    dim: int = Field(default=20, ge=1, description="d")
    personalization_ratio: Union[Annotated[float, Field(ge=0.0, le=1.0)], Literal["uniform-random"]] = Field(
        default=0.5, description="r_p, or per-client U(0,1) draws"
    )
    global_variance: float = Field(default=1.0, ge=0.0, description="sigma_g^2")
    local_variance_coefs: Optional[List[Annotated[float, Field(ge=0.0)]]] = Field(
        None, description="alpha_k per client, defaults to 1.0"
    )
    noise_variance: float = Field(default=0.25, ge=0.0, description="sigma_eps^2")
    covariance: CovarianceMode = Field(default=CovarianceMode.IDENTITY)

    @model_validator(mode="after")
    def _check_coefs(self):
        if self.local_variance_coefs is not None and len(self.local_variance_coefs) != self.num_clients:
            raise ValueError("local_variance_coefs must have one entry per client")
        return self

    @property
    def n_test(self) -> int:
        return self.test_samples_per_client or self.samples_per_client


# Partitioning

class ClassRestrictionPartition(StrictModel):
    kind: Literal["class_restriction"] = "class_restriction"
    classes_per_client: int = Field(..., ge=1, description="S")


class DirichletPartition(StrictModel):
    kind: Literal["dirichlet"] = "dirichlet"
    alpha: float = Field(..., gt=0.0, description="concentration")


class IIDPartition(StrictModel):
    kind: Literal["iid"] = "iid"


PartitionSpec = Annotated[
    Union[ClassRestrictionPartition, DirichletPartition, IIDPartition],
    Field(discriminator="kind"),
]


# Stage plans

class NoReduction(StrictModel):
    kind: Literal["none"] = "none"


class LowRankReduction(StrictModel):
    kind: Literal["low_rank"] = "low_rank"
    ranks: List[Annotated[int, Field(ge=1)]] = Field(..., min_length=1, description="rank per head layer, output layer first; the last entry repeats")
    warm_start: Literal["previous", "fedavg"] = "previous"


class MaskReduction(StrictModel):
    kind: Literal["mask"] = "mask"
    initial_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    increment_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    seed: int = 0


Reduction = Annotated[Union[NoReduction, LowRankReduction, MaskReduction], Field(discriminator="kind")]


class StageSpec(StrictModel):
    personal_layers: int = Field(..., ge=0, description="trailing parametric layers kept on the client")
    rounds: int = Field(..., ge=1)
    reduction: Reduction = Field(default_factory=NoReduction)
    lr_shared: Optional[float] = Field(None, ge=0.0)
    lr_personal: Optional[float] = Field(None, ge=0.0)


class StagePlan(StrictModel):
    stages: List[StageSpec] = Field(..., min_length=1)
    reweighting: bool = True
    progressive: bool = True
    reweight_sign: ReweightSign = ReweightSign.ALGORITHM
    loss_clip: Optional[float] = Field(default=20.0, gt=0.0)
    eps_clamp: float = Field(default=1e-6, gt=0.0, lt=0.5)

    @model_validator(mode="after")
    def _check_depths(self):
        if self.stages[0].personal_layers != 0:
            raise ValueError("stage 1 must not personalize any layer")
        depths = [stage.personal_layers for stage in self.stages]
        if any(b < a for a, b in zip(depths, depths[1:])):
            raise ValueError("personal depth must be non-decreasing across stages")
        return self

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def total_rounds(self) -> int:
        return sum(stage.rounds for stage in self.stages)

    @classmethod
    def progressive_plan(
        cls,
        rounds: List[int],
        reduction: Optional[Union[NoReduction, LowRankReduction, MaskReduction]] = None,
        **kwargs,
    ) -> "StagePlan":
        """Stage t personalizes t-1 trailing layers"""
        reduction = reduction or NoReduction()
        stages = [
            StageSpec(personal_layers=t, rounds=r, reduction=reduction if t > 0 else NoReduction())
            for t, r in enumerate(rounds)
        ]
        return cls(stages=stages, **kwargs)


def split_budget(total: int, parts: int) -> List[int]:
    """Split a round budget into near-equal positive parts summing to total"""
    if parts <= 0 or total < parts:
        raise ValueError(f"cannot split {total} rounds into {parts} stages")
    base = total // parts
    return [base + (1 if i < total % parts else 0) for i in range(parts)]


# Federation

class FedConfig(StrictModel):
    """Round engine settings; defaults mirror the desk-scale reference runs"""
    participation: float = Field(default=0.1, gt=0.0, le=1.0, description="rho")
    local_epochs: int = Field(default=5, ge=0)
    batch_size: int = Field(default=10, ge=1)
    lr: float = Field(default=0.01, ge=0.0, description="head / stage-1 learning rate")
    lr_body: float = Field(default=0.001, ge=0.0, description="shared body rate in later stages")
    momentum: float = Field(default=0.5, ge=0.0, lt=1.0)
    rounds: int = Field(default=40, ge=1, description="global round budget")
    full_final_round: bool = True


# Methods

class PPFEMethod(StrictModel):
    kind: Literal["ppfe"] = "ppfe"
    name: Optional[str] = None
    plan: StagePlan


class LocalOnlyMethod(StrictModel):
    kind: Literal["local_only"] = "local_only"
    name: Optional[str] = None


class FedAvgMethod(StrictModel):
    kind: Literal["fedavg"] = "fedavg"
    name: Optional[str] = None


class FedAvgFTMethod(StrictModel):
    kind: Literal["fedavg_ft"] = "fedavg_ft"
    name: Optional[str] = None
    ft_epochs: int = Field(default=5, ge=0)


class FixedHeadMethod(StrictModel):
    kind: Literal["fixed_head"] = "fixed_head"
    name: Optional[str] = None
    personal_depth: int = Field(..., ge=0)
    mode: TrainMode = TrainMode.JOINT
    head_epochs: Optional[int] = Field(None, ge=0, description="alternating mode, defaults to local_epochs")
    body_epochs: int = Field(default=1, ge=0)
    warmup_rounds: int = Field(default=0, ge=0, description="FedAvg rounds before the head is split off")


class AblationMethod(StrictModel):
    kind: Literal["ablation"] = "ablation"
    name: Optional[str] = None
    variant: Literal["WP", "WPW"]
    plan: StagePlan


MethodSpec = Annotated[
    Union[PPFEMethod, LocalOnlyMethod, FedAvgMethod, FedAvgFTMethod, FixedHeadMethod, AblationMethod],
    Field(discriminator="kind"),
]


def method_label(method) -> str:
    if method.name:
        return method.name
    if isinstance(method, FixedHeadMethod):
        return f"M{method.personal_depth}" + ("-rep" if method.mode is TrainMode.ALTERNATING else "")
    if isinstance(method, AblationMethod):
        return method.variant
    if isinstance(method, FedAvgFTMethod):
        return "fedavg_ft"
    return method.kind


# Linear (ridge) methods

class LinearLocal(StrictModel):
    kind: Literal["local"] = "local"
    name: Optional[str] = None


class LinearFedAvg(StrictModel):
    kind: Literal["fedavg"] = "fedavg"
    name: Optional[str] = None


class LinearPPFE(StrictModel):
    kind: Literal["ppfe"] = "ppfe"
    name: Optional[str] = None
    stages: int = Field(default=4, ge=1)
    lambda_decay: float = Field(default=4.0, ge=1.0, description="lambda_t = lambda_1 * decay^-(t-1)")
    combine: Literal["residual", "beta"] = "residual"
    reweighting: bool = True


LinearMethod = Annotated[Union[LinearLocal, LinearFedAvg, LinearPPFE], Field(discriminator="kind")]


class Sweep(StrictModel):
    parameter: Literal["num_clients", "personalization_ratio"]
    values: List[Union[float, Literal["uniform-random"]]] = Field(..., min_length=1)


# Tasks

class SyntheticRegressionTask(StrictModel):
    kind: Literal["synthetic_regression"] = "synthetic_regression"
    spec: SyntheticRegressionSpec = Field(default_factory=SyntheticRegressionSpec)
    sweep: Optional[Sweep] = None
    methods: List[LinearMethod] = Field(
        default_factory=lambda: [LinearLocal(), LinearFedAvg(), LinearPPFE()], min_length=1
    )
    lambda_grid: List[Annotated[float, Field(ge=0.0)]] = Field(default_factory=default_lambda_grid, min_length=1)
    holdout_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


class SyntheticClassificationTask(StrictModel):
    kind: Literal["synthetic_classification"] = "synthetic_classification"
    num_clients: int = Field(default=100, ge=1)
    samples_per_client: int = Field(default=150, ge=1, description="training samples per client")
    test_samples_per_client: int = Field(default=50, ge=1)
    dim: int = Field(default=20, ge=1)
    num_classes: int = Field(default=10, ge=2)
    class_sep: float = Field(default=3.0, ge=0.0)
    pool_oversample: float = Field(default=2.0, ge=1.0)


class FileTask(StrictModel):
    kind: Literal["file"] = "file"
    path: str
    num_clients: int = Field(..., ge=1)
    samples_per_client: int = Field(..., ge=1)
    test_samples_per_client: int = Field(..., ge=1)
    num_classes: Optional[int] = Field(None, ge=2, description="defaults to the largest label + 1")


TaskSpec = Annotated[
    Union[SyntheticRegressionTask, SyntheticClassificationTask, FileTask],
    Field(discriminator="kind"),
]


class ArchitectureSpec(StrictModel):
    hidden: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [64, 32, 16])
    activation: Literal["relu", "tanh", "identity"] = "relu"


class ExperimentConfig(StrictModel):
    """Full run description"""
    name: str = "experiment"
    description: Optional[str] = Field(None, description="free-form notes")
    task: TaskSpec
    partition: Optional[PartitionSpec] = None
    architecture: ArchitectureSpec = Field(default_factory=ArchitectureSpec)
    methods: List[MethodSpec] = Field(default_factory=list)
    fed: FedConfig = Field(default_factory=FedConfig)
    seeds: Optional[List[int]] = None
    output_dir: Optional[str] = None

    @field_validator("seeds")
    @classmethod
    def _non_empty_seeds(cls, value):
        if value is not None and len(value) == 0:
            raise ValueError("seeds must not be empty")
        return value

    @property
    def is_regression(self) -> bool:
        return isinstance(self.task, SyntheticRegressionTask)
