"""
PrefSynth - Pydantic Schemas

Configuration records, on-disk record formats and report structures.
"""
import math
import sys
from enum import Enum
from typing import Any, Literal, Optional

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from prefsynth.core.errors import ConfigError


# =============================================================================
# Enums
# =============================================================================

class RetrievalStrategy(str, Enum):
    RET = "ret"
    EXP_RET = "exp_ret"
    RANDOM = "random"


class Provenance(str, Enum):
    REFERENCE = "reference"
    GLOBAL = "global"
    GENERATED = "generated"


# Declared tie priority: earlier wins ties.
PROVENANCE_PRIORITY: tuple[Provenance, ...] = (
    Provenance.REFERENCE,
    Provenance.GLOBAL,
    Provenance.GENERATED,
)


class RewardMode(str, Enum):
    PENALTY_DESCENT = "penalty_descent"
    PAPER_LITERAL = "paper_literal"


class KeywordMode(str, Enum):
    DETERMINISTIC = "deterministic"
    EXTERNAL = "external"


class KeywordsOver(str, Enum):
    RETRIEVED = "retrieved"
    FULL = "full"


class ReferenceMode(str, Enum):
    IN_CLUSTER = "in_cluster"
    OUT_OF_CLUSTER = "out_of_cluster"


class AblationAxis(str, Enum):
    RETRIEVAL_K = "retrieval_k"
    NOISE_R = "noise_r"
    RANK_REWARD = "rank_reward"


# =============================================================================
# Configuration base
# =============================================================================

def _field_errors(exc: ValidationError) -> dict[str, str]:
    """Dotted path -> message, with nested config errors spliced under their parent field."""
    fields: dict[str, str] = {}
    for err in exc.errors():
        loc = [str(p) for p in err.get("loc", ())]
        inner = (err.get("ctx") or {}).get("error")
        if isinstance(inner, ConfigError) and inner.fields:
            for sub, msg in inner.fields.items():
                path = loc if sub == "<root>" else [*loc, sub]
                fields[".".join(path) or "<root>"] = msg
        else:
            fields[".".join(loc) or "<root>"] = str(err.get("msg"))
    return fields


class ConfigModel(BaseModel):
    """Base for configuration records.

    Unknown keys are rejected and any validation failure surfaces as a
    ConfigError instead of a raw pydantic ValidationError.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=False)

    def __init__(self, **data: Any) -> None:
        try:
            super().__init__(**data)
        except ValidationError as exc:
            fields = _field_errors(exc)
            listing = "; ".join(f"{path}: {msg}" for path, msg in fields.items())
            raise ConfigError(f"invalid {type(self).__name__}: {listing}", fields) from exc

    def updated(self, **changes: Any) -> Self:
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(changes)
        return type(self)(**data)


# =============================================================================
# Component configs
# =============================================================================

class CorpusConfig(ConfigModel):
    """Synthetic corpus generation parameters."""

    n_users: int = Field(default=100, ge=1)
    history_length: int = Field(default=20, ge=1)
    n_categories: int = 8
    items_per_category: int = Field(default=32, ge=1)
    visual_dim: int = Field(default=32, ge=4)
    relevant_fraction: float = 0.25
    preference_noise: float = Field(default=0.2, ge=0.0)
    secondary_weight: float = Field(default=0.5, ge=0.0)
    secondary_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    preference_offset: float = Field(default=0.3, ge=0.0)
    feature_noise: float = Field(default=0.3, ge=0.0)
    ring_affinity: float = Field(default=0.9, ge=0.0, le=1.0)
    reference_mode: ReferenceMode = ReferenceMode.IN_CLUSTER
    held_out_per_user: int = Field(default=5, ge=1)
    with_pixels: bool = True
    pixel_size: int = Field(default=16, ge=1)
    render_scale: float = Field(default=0.25, gt=0.0)
    render_seed: int = 1234

    @field_validator("n_categories")
    @classmethod
    def _at_least_two_categories(cls, v: int) -> int:
        if v < 2:
            raise ValueError("n_categories must be >= 2")
        return v

    @field_validator("relevant_fraction")
    @classmethod
    def _fraction_in_unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("relevant_fraction must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _check_dimensions(self) -> "CorpusConfig":
        if self.n_categories + 2 > self.visual_dim:
            raise ValueError(
                f"visual_dim ({self.visual_dim}) must be >= n_categories + 2 "
                f"({self.n_categories + 2})"
            )
        return self

    @property
    def relevant_count(self) -> int:
        return int(round(self.relevant_fraction * self.history_length))


class EncoderConfig(ConfigModel):
    """Surrogate semantic encoder."""

    dim: int = Field(default=32, ge=2)
    table_seed: int = 20240917
    stopwords: Optional[list[str]] = None


class KeywordExtractorConfig(ConfigModel):
    """Keyword extraction and filtering."""

    mode: KeywordMode = KeywordMode.DETERMINISTIC
    stopwords: Optional[list[str]] = None
    min_count: int = Field(default=2, ge=1)
    n: int = Field(default=10, ge=1)
    keywords_over: KeywordsOver = KeywordsOver.RETRIEVED
    endpoint_url: Optional[str] = None
    timeout_seconds: float = Field(default=30.0, gt=0.0)
    retry_attempts: int = Field(default=3, ge=1)
    backoff_seconds: float = Field(default=0.5, ge=0.0)
    max_inflight: int = Field(default=4, ge=1)
    batch_size: int = Field(default=8, ge=1)
    fallback_to_deterministic: bool = False

    @model_validator(mode="after")
    def _external_requires_url(self) -> "KeywordExtractorConfig":
        if self.mode == KeywordMode.EXTERNAL and not self.endpoint_url:
            raise ValueError("external keyword mode requires endpoint_url")
        return self


class ModelDims(ConfigModel):
    """Shapes of the calibrator and modal mapper. Text width is the encoder dim
    and the preference width is the corpus visual dim."""

    n_img_tokens: int = Field(default=4, ge=1)
    n_queries: int = Field(default=4, ge=1)
    mapper_depth: int = Field(default=4, ge=1, le=8)
    mapper_dim: int = Field(default=32, ge=1)
    attn_dim: int = Field(default=32, ge=1)
    lift_rows: int = Field(default=4, ge=1)
    init_scale: float = Field(default=1.0, gt=0.0)
    init_seed: int = 0


class RetrievalConfig(ConfigModel):
    k: int = Field(default=5, ge=0)
    strategy: RetrievalStrategy = RetrievalStrategy.RET
    score_temperature: float = Field(default=1.0, gt=0.0)


class GeneratorConfig(ConfigModel):
    """Frozen generator constants."""

    seed: int = 11
    gain: float = Field(default=1.0, gt=0.0)
    jitter: float = Field(default=0.05, ge=0.0)
    bias_scale: float = Field(default=0.01, ge=0.0)


class RankTrainConfig(ConfigModel):
    repr_dim: int = Field(default=32, ge=1)
    fusion_weight: float = Field(default=0.7, ge=0.0, le=1.0)
    epochs: int = Field(default=40, ge=0)
    lr: float = Field(default=0.5, ge=0.0)
    negatives_per_positive: int = Field(default=1, ge=1)
    init_jitter: float = Field(default=0.01, ge=0.0)
    text_init_scale: float = Field(default=0.1, ge=0.0)
    auc_negatives: int = Field(default=20, ge=1)
    seed: int = 0


class ReflectionConfig(ConfigModel):
    """Joint reflection objective and loop settings."""

    alpha: float = Field(default=0.2, ge=0.0)
    beta: float = Field(default=0.5, ge=0.0)
    gamma: float = Field(default=0.3, ge=0.0)
    delta: float = Field(default=0.1, ge=0.0)
    sigma: float = Field(default=0.1, gt=0.0)
    r: int = Field(default=3, ge=1)
    steps: int = Field(default=200, ge=0)
    lr: float = Field(default=1e-5, ge=0.0)
    lr_scale: float = Field(default=1000.0, gt=0.0)
    reward_mode: RewardMode = RewardMode.PENALTY_DESCENT
    baseline_subtraction: bool = False
    steps_per_user: int = Field(default=5, ge=0)
    epochs: int = Field(default=2, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _weights_not_all_zero(self) -> "ReflectionConfig":
        if self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("alpha + beta + gamma must be > 0")
        return self

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale


class MetricProtocolConfig(ConfigModel):
    pool_size: int = Field(default=9, ge=1)
    eval_negatives: int = Field(default=95, ge=1)
    cutoffs: list[int] = Field(default_factory=lambda: [10, 20])
    ssim_window: int = Field(default=8, ge=1)
    ssim_k1: float = Field(default=0.01, gt=0.0)
    ssim_k2: float = Field(default=0.03, gt=0.0)
    seed: int = 0

    @field_validator("cutoffs")
    @classmethod
    def _positive_cutoffs(cls, v: list[int]) -> list[int]:
        if not v or any(k < 1 for k in v):
            raise ValueError("cutoffs must be a non-empty list of integers >= 1")
        return v


class ExperimentConfig(ConfigModel):
    """Settings for validate-retrieval, ablate and auxiliary."""

    seeds: list[int] = Field(default_factory=lambda: list(range(10)))
    strategies: list[RetrievalStrategy] = Field(
        default_factory=lambda: [
            RetrievalStrategy.RET,
            RetrievalStrategy.EXP_RET,
            RetrievalStrategy.RANDOM,
        ]
    )
    ablation_axis: AblationAxis = AblationAxis.RETRIEVAL_K
    ablation_values: list[float] = Field(default_factory=lambda: [0, 5, 10, 20])
    max_users: Optional[int] = Field(default=None, ge=1)

    @field_validator("seeds", "strategies", "ablation_values")
    @classmethod
    def _non_empty(cls, v: list[Any]) -> list[Any]:
        if not v:
            raise ValueError("must be non-empty")
        return v


class RunConfig(ConfigModel):
    """Everything one command needs; stored verbatim in every manifest."""

    name: str = "default"
    seed: int = 7
    output_dir: Optional[str] = None
    corpus_path: Optional[str] = None
    jobs: Optional[int] = Field(default=None, ge=1)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    keywords: KeywordExtractorConfig = Field(default_factory=KeywordExtractorConfig)
    dims: ModelDims = Field(default_factory=ModelDims)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    ranker: RankTrainConfig = Field(default_factory=RankTrainConfig)
    reflection: ReflectionConfig = Field(default_factory=ReflectionConfig)
    metrics: MetricProtocolConfig = Field(default_factory=MetricProtocolConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a mapping")
        return cls(**data)


# =============================================================================
# Corpus records
# =============================================================================

CORPUS_SCHEMA_VERSION = 1


def _check_finite(values: list[float], what: str) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"{what} contains non-finite entries")


class CorpusHeaderRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record_type: Literal["header"] = "header"
    schema_version: int
    seed: Optional[int] = None
    generation_config: Optional[dict[str, Any]] = None
    category_prototypes: dict[str, list[float]] = Field(default_factory=dict)

    @field_validator("schema_version")
    @classmethod
    def _supported_version(cls, v: int) -> int:
        if v != CORPUS_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}")
        return v


class ItemRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record_type: Literal["item"] = "item"
    item_id: str = Field(..., min_length=1)
    caption: list[str]
    text: list[str] = Field(default_factory=list)
    visual_feature: list[float]
    pixel_grid: Optional[list[list[float]]] = None
    category: str

    @field_validator("visual_feature")
    @classmethod
    def _nonzero_finite(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("visual_feature must be non-empty")
        _check_finite(v, "visual_feature")
        if all(x == 0.0 for x in v):
            raise ValueError("visual_feature must have non-zero norm")
        return v

    @field_validator("pixel_grid")
    @classmethod
    def _pixels_in_range(cls, v: Optional[list[list[float]]]) -> Optional[list[list[float]]]:
        if v is None:
            return v
        size = len(v)
        if size == 0 or any(len(row) != size for row in v):
            raise ValueError("pixel_grid must be a non-empty square raster")
        for row in v:
            for px in row:
                if not (math.isfinite(px) and 0.0 <= px <= 1.0):
                    raise ValueError(f"pixel value {px} outside [0, 1]")
        return v


class UserRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record_type: Literal["user"] = "user"
    user_id: str = Field(..., min_length=1)
    history_ids: list[str] = Field(..., min_length=1)
    reference_id: str
    held_out_ids: list[str] = Field(default_factory=list)
    planted_preference: Optional[list[float]] = None

    @model_validator(mode="after")
    def _reference_not_in_history(self) -> "UserRecord":
        if self.reference_id in self.history_ids:
            raise ValueError("reference_id must not appear in history_ids")
        return self


# =============================================================================
# Checkpoints and manifests
# =============================================================================

CHECKPOINT_FORMAT_VERSION = 1


class ArrayRecord(BaseModel):
    shape: list[int]
    values: list[float]

    @model_validator(mode="after")
    def _shape_matches(self) -> "ArrayRecord":
        expected = math.prod(self.shape) if self.shape else 1
        if expected != len(self.values):
            raise ValueError(
                f"shape {self.shape} needs {expected} values, got {len(self.values)}"
            )
        return self


class CheckpointDocument(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    kind: Literal["calibrator", "rank_model"]
    arrays: dict[str, ArrayRecord]
    scalars: dict[str, Any] = Field(default_factory=dict)


class Manifest(BaseModel):
    """Config, seed and content checksums of one command invocation."""

    command: str
    run_name: str
    seed: int
    config: dict[str, Any]
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    status: Literal["running", "completed", "noop"] = "running"


# =============================================================================
# Logs and reports
# =============================================================================

class ReflectionStepLog(BaseModel):
    step: int
    user_id: str
    mean_penalty: float
    penalties: list[float]
    l_rank: float
    l_cal: float
    l_sem: float
    l_total: float
    scores: dict[str, float]
    ranks: dict[str, int]
    delta_r: float


class UserMetrics(BaseModel):
    user_id: str
    rk_ori: int
    rk_gen: int
    delta_r: float
    cps: float
    cpis: float
    cs: float
    cis: float
    ssim_personal: Optional[float] = None
    ssim_semantic: Optional[float] = None
    planted_alignment: Optional[float] = None


class MetricsReport(BaseModel):
    delta_r: float
    cps: float
    cpis: float
    cs: float
    cis: float
    ssim_personal: Optional[float] = None
    ssim_semantic: Optional[float] = None
    planted_alignment: Optional[float] = None
    per_user: list[UserMetrics] = Field(default_factory=list)


class RecommendationReport(BaseModel):
    """Recall/NDCG of a ranking model on held-out positives."""

    recall: dict[int, float]
    ndcg: dict[int, float]
    per_user: list[dict[str, Any]] = Field(default_factory=list)


class ObservationRecord(BaseModel):
    seed: int
    arm: str
    user_id: str
    metric: str
    value: float


class ArmSummary(BaseModel):
    arm: str
    value: Optional[float] = None
    metrics: dict[str, float]
    per_seed: dict[int, dict[str, float]]


class PairedComparison(BaseModel):
    arm_a: str
    arm_b: str
    metric: str
    wins: int
    seeds: int
    win_rate: float
    mean_delta: float


class ExperimentReport(BaseModel):
    experiment: str
    arms: list[ArmSummary]
    comparisons: list[PairedComparison] = Field(default_factory=list)
    observations: list[ObservationRecord] = Field(default_factory=list)
