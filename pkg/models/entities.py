"""Data models shared across modules."""

from __future__ import annotations

import datetime as dt
import logging
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

logger = logging.getLogger(__name__)

# Kq and every running sum are stored as signed 64-bit integers.
MAX_NATIVE_INT = 2**62


def rational_to_json(value: Fraction) -> Dict[str, str]:
    """Rationals travel as strings so no precision is lost in JSON."""

    return {"num": str(value.numerator), "den": str(value.denominator)}


def as_fraction(value: Fraction | int | float | str) -> Fraction:
    """Exact rational for a mixing probability; floats are read by their repr (0.4 -> 2/5)."""

    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


class DistributionKind(str, Enum):
    UNIFORM = "uniform"
    SPARSE = "sparse"


class ModulusKind(str, Enum):
    PRIMARY_Q = "primary_q"
    AUXILIARY_KQ = "auxiliary_Kq"


class EmbeddingKind(str, Enum):
    TOKEN_EXTENDED = "token_extended"
    DUAL_ANGULAR = "dual_angular"


class NormPlacement(str, Enum):
    PRE = "pre"
    POST = "post"


class InitScheme(str, Enum):
    SIGMA_002 = "sigma_002"
    DEFAULT_KAIMING = "default_kaiming"


class Pooling(str, Enum):
    MEAN = "mean"
    LAST_TOKEN = "last_token"


class ProblemSpec(BaseModel):
    """Task instance (N, q, K, r) shared by every module."""

    model_config = ConfigDict(frozen=True)

    N: int = Field(..., ge=1, description="Sequence length (number of summands).")
    q: int = Field(..., ge=2, description="Primary modulus.")
    K: int = Field(
        default=2,
        ge=1,
        description="Auxiliary factor; K=1 makes the auxiliary modulus equal q.",
    )
    r: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Auxiliary mixing probability."
    )

    @model_validator(mode="after")
    def _check_native_width(self) -> "ProblemSpec":
        if self.K * self.q >= MAX_NATIVE_INT or self.N * self.q >= MAX_NATIVE_INT:
            raise ValueError(
                f"K*q={self.K * self.q} or N*q={self.N * self.q} exceeds the 64-bit range"
            )
        return self

    @property
    def aux_modulus(self) -> int:
        return self.K * self.q

    @property
    def max_sum(self) -> int:
        return self.N * (self.q - 1)


class InputVector(BaseModel):
    """One input sequence x = [x1, ..., xN] with entries in {0, ..., q-1}."""

    entries: List[int]
    q: int = Field(..., ge=2)

    @model_validator(mode="after")
    def _check_range(self) -> "InputVector":
        if not self.entries:
            raise ValueError("input vector must have at least one entry")
        for index, value in enumerate(self.entries):
            if not 0 <= value < self.q:
                raise ValueError(
                    f"entry {index} = {value} is outside [0, {self.q - 1}]"
                )
        return self

    @property
    def N(self) -> int:  # noqa: N802 - mirrors the problem notation
        return len(self.entries)


class LabeledExample(BaseModel):
    """Input with its primary label f_q(x) and quotient c = floor(sum / q)."""

    x: InputVector
    y_q: int = Field(..., ge=0)
    quotient: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_reconstruction(self) -> "LabeledExample":
        q = self.x.q
        if self.y_q >= q:
            raise ValueError(f"y_q={self.y_q} must be < q={q}")
        total = sum(self.x.entries)
        if self.quotient * q + self.y_q != total:
            raise ValueError(
                f"c*q + y_q = {self.quotient * q + self.y_q} does not reconstruct sum {total}"
            )
        return self

    @property
    def total(self) -> int:
        return self.quotient * self.x.q + self.y_q


class TrainingTarget(BaseModel):
    """The label actually supervised for one example in one epoch."""

    value: int = Field(..., ge=0)
    modulus_kind: ModulusKind


class WrapSummary(BaseModel):
    """Closed-form wrap statistics for one (N, q, K, r)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: ProblemSpec
    e_x0: Fraction
    e_x1: Fraction
    e_x2: float = Field(..., description="Exact finite sum evaluated in high precision.")
    e_dkq_exact: Fraction
    e_dkq_bounds: Tuple[Fraction, Fraction]
    p_zero_wraps: Fraction

    @model_validator(mode="after")
    def _check_invariants(self) -> "WrapSummary":
        r = as_fraction(self.spec.r)
        factor = 1 - r + r / self.spec.K
        if self.e_x1 != factor * self.e_x0:
            raise ValueError("e_x1 must equal ((1-r) + r/K) * e_x0")
        lo, hi = self.e_dkq_bounds
        if not lo <= self.e_dkq_exact <= hi:
            raise ValueError("E[D_Kq] escaped its bounds")
        if not 0 <= self.p_zero_wraps <= 1:
            raise ValueError("P(D_Kq = 0) must be a probability")
        return self

    @field_serializer("e_x0", "e_x1", "e_dkq_exact", "p_zero_wraps")
    def _serialize_rational(self, value: Fraction) -> Dict[str, str]:
        return rational_to_json(value)

    @field_serializer("e_dkq_bounds")
    def _serialize_bounds(self, value: Tuple[Fraction, Fraction]) -> List[Dict[str, str]]:
        return [rational_to_json(item) for item in value]


class GapBoundInput(BaseModel):
    """Inputs of the sparse-training generalization-gap lower bound."""

    q: int = Field(..., ge=2)
    N: int = Field(..., ge=0)
    eps: float = Field(..., ge=0.0, description="Loss lower bound on zero-free inputs.")
    delta: float = Field(..., ge=0.0, description="Training-risk upper bound.")


class ModelConfig(BaseModel):
    """Encoder-only transformer architecture, including the four architecture variation axes."""

    spec: ProblemSpec
    embedding_kind: EmbeddingKind = EmbeddingKind.TOKEN_EXTENDED
    layers: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    d_model: int = Field(default=256, ge=1)
    d_ffn: int = Field(default=2048, ge=1)
    norm_placement: NormPlacement = NormPlacement.PRE
    bias: bool = True
    init_scheme: InitScheme = InitScheme.DEFAULT_KAIMING
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    pooling: Pooling = Pooling.MEAN
    activation: str = Field(
        default="gelu_tanh", description="Pinned; the only supported nonlinearity."
    )
    layer_norm_eps: float = Field(default=1e-5, gt=0.0)
    supervise_both_pairs: bool = Field(
        default=False,
        description="Angular mode only: supervise both circle pairs on every example.",
    )

    @model_validator(mode="after")
    def _check_architecture(self) -> "ModelConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by heads={self.heads}"
            )
        if self.activation != "gelu_tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.dropout not in (0.0, 0.1):
            logger.warning(
                "dropout=%s is outside the {0.0, 0.1} sweep values", self.dropout
            )
        return self


class TrainConfig(BaseModel):
    """Optimization protocol; defaults are the reference protocol."""

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=250, ge=1)
    peak_lr: float = Field(default=3e-5, gt=0.0)
    warmup_ratio: float = Field(default=0.05, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.1, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=0, ge=0)
    precision: str = Field(default="float32")
    decay_norm_and_bias: bool = Field(
        default=False, description="Apply weight decay to layer-norm gains and biases."
    )
    checkpoint_every: int = Field(
        default=0, ge=0, description="Epoch interval for checkpoints; 0 = final only."
    )
    show_progress: bool = True

    @field_validator("precision")
    @classmethod
    def _check_precision(cls, value: str) -> str:
        if value not in {"float32", "float64"}:
            raise ValueError("precision must be 'float32' or 'float64'")
        return value


REFERENCE_TRAIN_DEFAULTS = TrainConfig()


class EpochRecord(BaseModel):
    epoch: int
    mean_loss: float
    lr_last: float
    aux_frequency: float
    train_match_accuracy: Optional[float] = None


class TrainHistory(BaseModel):
    """Per-epoch trace of one training run."""

    seed: int
    config_hash: str
    target_redraw: str = "per_epoch"
    epochs: List[EpochRecord] = Field(default_factory=list)
    lr_trace: List[float] = Field(default_factory=list)

    @property
    def aux_frequency_overall(self) -> float:
        if not self.epochs:
            return 0.0
        return sum(record.aux_frequency for record in self.epochs) / len(self.epochs)


class StratumStats(BaseModel):
    count: int = Field(..., ge=0)
    correct: int = Field(..., ge=0)

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


class MetricsReport(BaseModel):
    """Match accuracy, tau-accuracy per tau and zero-count stratification."""

    match_accuracy: float = Field(..., ge=0.0, le=1.0)
    tau_accuracy: Dict[str, float] = Field(default_factory=dict)
    stratified: Dict[int, StratumStats] = Field(default_factory=dict)
    total: int = Field(..., ge=0)
    correct: int = Field(..., ge=0)
    tau_source: str = Field(
        default="integer_decode", description="'angular_s_hat' or 'integer_decode'."
    )
    meta: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_decomposition(self) -> "MetricsReport":
        for tau, value in self.tau_accuracy.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"tau-accuracy at {tau} is not a fraction")
        if self.stratified:
            if sum(item.count for item in self.stratified.values()) != self.total:
                raise ValueError("stratified counts must sum to the dataset size")
            if sum(item.correct for item in self.stratified.values()) != self.correct:
                raise ValueError("stratified correct counts must sum to the total")
        return self

    def overall_from_strata(self) -> Fraction:
        """Count-weighted mean of stratum accuracies, exactly."""

        if not self.total:
            return Fraction(0)
        weighted = sum(
            Fraction(item.count, self.total) * Fraction(item.correct, item.count)
            for item in self.stratified.values()
            if item.count
        )
        return Fraction(weighted)


class GapReport(BaseModel):
    """Empirical counterpart of the zero-free decomposition behind the gap bound."""

    train_risk: float
    test_risk: float
    zero_free_error: Optional[float] = Field(
        default=None, description="None when the zero-free stratum is empty."
    )
    zero_free_weight: float
    prefactor: float
    predicted_lower_bound: Optional[float] = None
    bound_check: Optional[bool] = None


class DatasetMeta(BaseModel):
    """Header of a dataset file."""

    schema_version: int = 1
    N: int = Field(..., ge=1)
    q: int = Field(..., ge=2)
    distribution: DistributionKind
    seed: int = Field(..., ge=0)
    count: int = Field(..., ge=0)
    strict_nonzero: bool = False


class RunManifest(BaseModel):
    """Audit record written next to every CLI output."""

    subcommand: str
    run_id: str = Field(
        default="", description="Identifier stamped into every output so each file points back here."
    )
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    tool_version: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    output_hashes: Dict[str, str] = Field(
        default_factory=dict, description="sha256 of every output file, keyed like outputs."
    )
    started_at: dt.datetime
    wall_clock_seconds: float = 0.0
