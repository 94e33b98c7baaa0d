from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Literal, Optional

AttackFamily = Literal["fgsm", "bim", "pgd", "apgd"]
Activation = Literal["relu", "tanh", "identity"]
TsrReading = Literal["indicator", "probability"]


class ArchSpec(BaseModel):
    input_dim: int = Field(gt=0)
    hidden: List[int] = [32, 32]
    num_classes: int = Field(gt=0)
    activation: Activation = "tanh"


class SgdConfig(BaseModel):
    learning_rate: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)


class EdlcmConfig(BaseModel):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(0.01, ge=0)
    h: float = Field(0.05, gt=0)
    batch_size: int = Field(64, gt=0)
    epochs: int = Field(30, gt=0)


class AttackConfig(BaseModel):
    family: AttackFamily = "pgd"
    epsilon: float = Field(0.1, ge=0)
    steps: int = Field(10, gt=0)
    step_size: Optional[float] = Field(None, gt=0)
    random_start: Optional[bool] = None
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0

    @model_validator(mode="after")
    def check_clip_range(self) -> "AttackConfig":
        if not self.clip_min < self.clip_max:
            raise ValueError(f"clip_min ({self.clip_min}) must be below clip_max ({self.clip_max})")
        return self

    @property
    def effective_step_size(self) -> float:
        """Explicit step size, or 2.5 * epsilon / steps."""
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps

    @property
    def effective_random_start(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        return self.family in ("pgd", "apgd")

    def resolved(self) -> "AttackConfig":
        """Copy with every default materialized."""
        update: Dict[str, Any] = {"random_start": self.effective_random_start}
        if self.epsilon > 0:
            update["step_size"] = self.effective_step_size
        return self.model_copy(update=update)


class DatasetSpec(BaseModel):
    kind: Literal["two_moons", "blobs", "idx"] = "two_moons"
    n: int = Field(2000, gt=0)
    noise_sigma: float = Field(0.15, ge=0)
    centers: Optional[List[List[float]]] = None
    sigma: float = Field(0.05, ge=0)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    max_points: int = Field(2000, gt=0)
    test_ratio: float = Field(0.2, gt=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_sources(self) -> "DatasetSpec":
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx datasets need images_path and labels_path")
        if self.kind == "blobs" and not self.centers:
            raise ValueError("blobs datasets need centers")
        return self


class AttackGrid(BaseModel):
    families: List[AttackFamily] = ["fgsm", "bim", "pgd", "apgd"]
    epsilons: List[float] = [0.005, 0.01, 0.02, 0.04]
    steps: int = Field(10, gt=0)
    step_size: Optional[float] = Field(None, gt=0)
    random_start: Optional[bool] = None
    max_samples: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def check_grid(self) -> "AttackGrid":
        if not self.families or not self.epsilons:
            raise ValueError("attack grid needs at least one family and one epsilon")
        if any(eps < 0 for eps in self.epsilons):
            raise ValueError("epsilons must be non-negative")
        return self

    def configs(self, seed: int) -> List[AttackConfig]:
        return [
            AttackConfig(
                family=family,
                epsilon=eps,
                steps=max(self.steps, 2) if family == "apgd" else self.steps,
                step_size=self.step_size,
                random_start=self.random_start,
                seed=seed,
            ).resolved()
            for family in self.families
            for eps in self.epsilons
        ]


class DiagnoseOptions(BaseModel):
    eval_points: int = Field(128, gt=0)
    power_iters: int = Field(20, gt=0)
    power_tol: float = Field(1e-4, gt=0)
    hessian: bool = True
    hessian_points: int = Field(16, gt=0)
    max_hessian_dim: int = Field(32, gt=0)
    h_sweep: List[float] = [0.2, 0.1, 0.05, 0.025, 0.0125]
    bound_c: Optional[float] = Field(None, ge=0)


class ExperimentConfig(BaseModel):
    dataset: DatasetSpec
    model: ArchSpec
    ensemble_size: int = Field(3, gt=0)
    edlcm: EdlcmConfig = Field(default_factory=EdlcmConfig)
    sgd: SgdConfig = Field(default_factory=SgdConfig)
    attacks: AttackGrid = Field(default_factory=AttackGrid)
    tsr_attack: AttackConfig = Field(
        default_factory=lambda: AttackConfig(family="pgd", epsilon=0.1, steps=10)
    )
    tsr_reading: TsrReading = "indicator"
    diagnose: DiagnoseOptions = Field(default_factory=DiagnoseOptions)
    seed: int = 0
    output_dir: Optional[str] = None
    threads: int = Field(0, ge=0)


class LossRecord(BaseModel):
    epoch: int
    step: int
    ece: float
    l_r: float
    l_g: float
    total: float


class RobustnessRow(BaseModel):
    attack: str
    epsilon: Optional[float] = None
    accuracy: float


class RobustnessReport(BaseModel):
    method: str
    seed: int
    checkpoint_sha256: str
    samples: int
    rows: List[RobustnessRow]
    config: Dict[str, Any]


class TsrReport(BaseModel):
    M: int
    pairwise_fool_rate: List[List[Optional[float]]]
    tsr: float
    reading: TsrReading = "indicator"


class TsrRunReport(BaseModel):
    method: str
    seed: int
    checkpoint_sha256: str
    samples: int
    attack: AttackConfig
    report: TsrReport
    majority_deception_rate: Optional[float] = None
    config: Dict[str, Any]


class CurvatureStats(BaseModel):
    lambda_max_mean: Optional[float] = None
    lambda_max_median: Optional[float] = None
    cosine_dispersion_mean: Optional[float] = None
    gradient_cosine_mean: Optional[float] = None
    samples_evaluated: int = 0


class BoundReport(BaseModel):
    c: float
    grad_norm: float
    nu: float
    grad_dot_u_abs: float
    lower: float
    upper: Optional[float] = None
    upper_infinite: bool = False
    violated: bool = False
    delta_estimate: Optional[float] = None
    member: Optional[int] = None
    sample: Optional[int] = None


class FdSweepRow(BaseModel):
    h: float
    relative_error: float
    ratio: Optional[float] = None


class DiagnosticsReport(BaseModel):
    method: str
    seed: int
    checkpoint_sha256: str
    curvature: CurvatureStats
    bounds: List[BoundReport]
    h_sweep: List[FdSweepRow]
    hessian_asymmetry_max: Optional[float] = None
    config: Dict[str, Any]


class HealthResponse(BaseModel):
    status: str
    reports_dir: str
    report_count: int


class ReportInfo(BaseModel):
    name: str
    kind: str
    size_bytes: int


class ReportListResponse(BaseModel):
    reports: List[ReportInfo]
