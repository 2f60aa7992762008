"""Encoder-only transformer for modular addition.

Two input/output schemes share one encoder stack:

* ``token_extended`` looks entries up in a Kq-row table and predicts Kq logits;
  primary targets use classes 0..q-1 of the same softmax.
* ``dual_angular`` lifts (cos, sin, cos', sin') features to d_model and
  regresses the same four numbers.

There are no positional embeddings, so with mean pooling the network is
invariant to the order of the input entries.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.entities import (
    EmbeddingKind,
    InitScheme,
    InputVector,
    ModelConfig,
    ModulusKind,
    NormPlacement,
    Pooling,
    TrainingTarget,
)
from modules import autodiff as ad
from modules.autodiff import Tensor
from utils.error_handling import (
    ConfigMismatchError,
    DatasetValidationError,
    NonFiniteError,
    ShapeMismatchError,
    SpecValidationError,
)
from utils.hashing import config_hash
from utils.rng import Stream, make_rng
from utils.storage import CHECKPOINT_SCHEMA_VERSION, read_arrays, write_arrays

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "modaddlab-checkpoint"
ANGULAR_WIDTH = 4
SIGMA_002 = 0.02


# ---------------------------------------------------------------------------
# Angular encoding
# ---------------------------------------------------------------------------


def encode_angular(y: np.ndarray | int | float, modulus: int) -> Tuple[np.ndarray, np.ndarray]:
    """(cos 2*pi*y/m, sin 2*pi*y/m) for scalar or array ``y``."""

    angle = 2.0 * np.pi * np.asarray(y, dtype=np.float64) / modulus
    return np.cos(angle), np.sin(angle)


def angular_features(x: np.ndarray, q: int, K: int) -> np.ndarray:
    """Per-entry 4-vectors (cos phi, sin phi, cos phi', sin phi'), shape (..., 4)."""

    cos_q, sin_q = encode_angular(x, q)
    cos_kq, sin_kq = encode_angular(x, K * q)
    return np.stack([cos_q, sin_q, cos_kq, sin_kq], axis=-1)


def decode_token(logits: np.ndarray, q: int) -> np.ndarray:
    """Argmax over the first q logits; ties go to the lowest index."""

    logits = np.asarray(logits)
    if logits.shape[-1] < q:
        raise ShapeMismatchError(f"need at least q={q} logits, got {logits.shape[-1]}")
    return np.argmax(logits[..., :q], axis=-1)


def decode_angular(output: np.ndarray, q: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read the primary pair back into a residue.

    Returns ``(s_hat, s_round)``: s_hat in [0, q) from the angle, s_round the
    nearest integer (halves round up) reduced mod q. Works on a single 4-vector or a (B, 4) batch.
    """

    values = np.asarray(output, dtype=np.float64)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    if values.shape[-1] < 2:
        raise ShapeMismatchError(f"angular output needs a (cos, sin) pair, got {values.shape}")
    cos_part, sin_part = values[:, 0], values[:, 1]
    degenerate = (cos_part == 0.0) & (sin_part == 0.0)
    if degenerate.any():
        raise SpecValidationError(
            f"row {int(np.flatnonzero(degenerate)[0])} has a degenerate (0, 0) angle pair"
        )
    phi = np.mod(np.arctan2(sin_part, cos_part), 2.0 * np.pi)
    s_hat = phi * q / (2.0 * np.pi)
    # arctan2 of a tiny negative angle lands on 2*pi after the mod
    s_hat = np.where(s_hat >= q, s_hat - q, s_hat)
    # ties round up (2.5 -> 3), so decoding does not depend on parity
    s_round = np.mod(np.floor(s_hat + 0.5).astype(np.int64), q)
    if single:
        return s_hat[0], s_round[0]
    return s_hat, s_round


# ---------------------------------------------------------------------------
# Configuration helpers
# ---------------------------------------------------------------------------


def output_width(config: ModelConfig) -> int:
    if config.embedding_kind is EmbeddingKind.TOKEN_EXTENDED:
        return config.spec.aux_modulus
    return ANGULAR_WIDTH


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``config``."""

    d, f, b = config.d_model, config.d_ffn, int(config.bias)
    out = output_width(config)
    if config.embedding_kind is EmbeddingKind.TOKEN_EXTENDED:
        embed = config.spec.aux_modulus * d
    else:
        embed = ANGULAR_WIDTH * d + b * d
    norm = d + b * d
    attention_block = 4 * (d * d + b * d)
    ffn_block = d * f + b * f + f * d + b * d
    per_layer = 2 * norm + attention_block + ffn_block
    final_norm = norm if config.norm_placement is NormPlacement.PRE else 0
    head = d * out + b * out
    return embed + config.layers * per_layer + final_norm + head


_VARIANT_TOKENS = {
    "pre_norm": ("norm_placement", NormPlacement.PRE),
    "post_norm": ("norm_placement", NormPlacement.POST),
    "bias": ("bias", True),
    "no_bias": ("bias", False),
    "sigma002": ("init_scheme", InitScheme.SIGMA_002),
    "default_init": ("init_scheme", InitScheme.DEFAULT_KAIMING),
    "dropout00": ("dropout", 0.0),
    "dropout01": ("dropout", 0.1),
}


def architecture_variants(base: ModelConfig) -> List[ModelConfig]:
    """All 16 combinations of norm placement, bias, init scheme and dropout."""

    grid = itertools.product(
        (NormPlacement.POST, NormPlacement.PRE),
        (False, True),
        (InitScheme.SIGMA_002, InitScheme.DEFAULT_KAIMING),
        (0.0, 0.1),
    )
    return [
        base.model_copy(
            update={"norm_placement": norm, "bias": bias, "init_scheme": init, "dropout": rate}
        )
        for norm, bias, init, rate in grid
    ]


def apply_variant(base: ModelConfig, tokens: str | Iterable[str]) -> ModelConfig:
    """Apply comma-separated tokens such as ``post_norm,no_bias,sigma002,dropout01``."""

    if isinstance(tokens, str):
        tokens = [t.strip() for t in tokens.split(",") if t.strip()]
    update: Dict[str, object] = {}
    for token in tokens:
        if token not in _VARIANT_TOKENS:
            raise SpecValidationError(
                f"unknown architecture variant {token!r}",
                suggestion="Choose from " + ", ".join(sorted(_VARIANT_TOKENS)),
            )
        field, value = _VARIANT_TOKENS[token]
        if field in update and update[field] != value:
            raise SpecValidationError(f"variant tokens disagree on {field}")
        update[field] = value
    # Round-trip through validation so the dropout warning still fires.
    return ModelConfig.model_validate({**base.model_dump(), **update})


def model_config_hash(config: ModelConfig) -> str:
    return config_hash(config.model_dump(mode="json"))


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetBatch:
    """Labels for one batch plus the per-example modulus choice."""

    y_q: np.ndarray
    y_kq: np.ndarray
    is_aux: np.ndarray

    def __post_init__(self) -> None:
        if not self.y_q.shape == self.y_kq.shape == self.is_aux.shape:
            raise ShapeMismatchError("target arrays must share one shape")

    @classmethod
    def from_targets(cls, targets: Sequence[TrainingTarget], q: int) -> "TargetBatch":
        """Build from single TrainingTargets; the unused label is derived by reduction."""

        is_aux = np.array([t.modulus_kind is ModulusKind.AUXILIARY_KQ for t in targets])
        values = np.array([t.value for t in targets], dtype=np.int64)
        return cls(y_q=values % q, y_kq=values, is_aux=is_aux)

    def classes(self) -> np.ndarray:
        return np.where(self.is_aux, self.y_kq, self.y_q)


@dataclass(frozen=True)
class ModelOutput:
    """Batched head outputs: (B, Kq) logits or (B, 4) angle pairs."""

    kind: EmbeddingKind
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.isfinite(self.values).all():
            raise NonFiniteError("model produced non-finite outputs")

    def decode(self, q: int) -> Tuple[np.ndarray, np.ndarray]:
        """(integer predictions, continuous predictions used for tau-accuracy)."""

        if self.kind is EmbeddingKind.TOKEN_EXTENDED:
            preds = decode_token(self.values, q)
            return preds, preds.astype(np.float64)
        s_hat, s_round = decode_angular(self.values, q)
        return s_round, s_hat


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TransformerModel:
    """Parameters in a name -> Tensor mapping plus the forward pass over them."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]) -> None:
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------

    @classmethod
    def build(
        cls, config: ModelConfig, seed: int = 0, precision: str = "float32"
    ) -> "TransformerModel":
        dtype = np.dtype(precision)
        rng = make_rng(seed, Stream.INIT)
        params: Dict[str, Tensor] = {}
        for name, shape, role in _parameter_layout(config):
            values = _initial_values(config, shape, role, rng)
            params[name] = Tensor(values.astype(dtype), requires_grad=True, name=name)
        model = cls(config, params)
        logger.info(
            "Built %s model: %d layers, d_model=%d, %d parameters (%s init, %s-norm)",
            config.embedding_kind.value,
            config.layers,
            config.d_model,
            model.num_parameters,
            config.init_scheme.value,
            config.norm_placement.value,
        )
        return model

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def config_hash(self) -> str:
        return model_config_hash(self.config)

    def no_decay_names(self) -> set[str]:
        """Layer-norm gains and every bias array."""

        return {
            name
            for name in self.params
            if name.endswith(".bias") or name.rsplit(".", 2)[-2].startswith(("ln", "final_ln"))
        }

    def to_precision(self, precision: str) -> "TransformerModel":
        dtype = np.dtype(precision)
        return TransformerModel(
            self.config, {name: p.astype(dtype) for name, p in self.params.items()}
        )

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    # -- embeddings ---------------------------------------------------------

    def _validate_inputs(self, x: np.ndarray | InputVector | Sequence[InputVector]) -> np.ndarray:
        if isinstance(x, InputVector):
            x = [x]
        if isinstance(x, (list, tuple)) and x and isinstance(x[0], InputVector):
            x = np.array([v.entries for v in x], dtype=np.int64)
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        spec = self.config.spec
        if x.ndim != 2 or x.shape[1] != spec.N:
            raise ShapeMismatchError(f"expected inputs of shape (B, {spec.N}), got {x.shape}")
        if not np.issubdtype(x.dtype, np.integer):
            raise SpecValidationError("inputs must be integers")
        if x.size and (x.min() < 0 or x.max() >= spec.q):
            raise SpecValidationError(
                f"input entries must lie in [0, {spec.q - 1}]",
                suggestion="Only labels use the extended range; inputs stay below q",
            )
        return x

    def embed_token_extended(
        self, x: np.ndarray | InputVector, params: Dict[str, Tensor] | None = None
    ) -> Tensor:
        params = self.params if params is None else params
        return ad.embedding_lookup(params["embed.table"], self._validate_inputs(x))

    def embed_dual_angular(
        self, x: np.ndarray | InputVector, params: Dict[str, Tensor] | None = None
    ) -> Tensor:
        params = self.params if params is None else params
        spec = self.config.spec
        features = angular_features(self._validate_inputs(x), spec.q, spec.K)
        lifted = Tensor(features.astype(self.dtype))
        return ad.linear(lifted, params["embed.lift.weight"], params.get("embed.lift.bias"))

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x: np.ndarray | InputVector | Sequence[InputVector],
        *,
        rng: np.random.Generator | None = None,
        params: Dict[str, Tensor] | None = None,
    ) -> Tensor:
        """
        Head output for a (B, N) batch.

        ``rng`` enables dropout (training); without it the pass is deterministic.
        """

        cfg = self.config
        params = self.params if params is None else params
        rate = cfg.dropout
        if cfg.embedding_kind is EmbeddingKind.TOKEN_EXTENDED:
            h = self.embed_token_extended(x, params)
        else:
            h = self.embed_dual_angular(x, params)
        h = ad.dropout(h, rate, rng)

        def norm(t: Tensor, prefix: str) -> Tensor:
            return ad.layer_norm(
                t, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"), cfg.layer_norm_eps
            )

        for i in range(cfg.layers):
            p = f"layers.{i}"
            if cfg.norm_placement is NormPlacement.PRE:
                h = ad.add(h, ad.dropout(self._attention(norm(h, f"{p}.ln1"), p, params), rate, rng))
                h = ad.add(h, ad.dropout(self._ffn(norm(h, f"{p}.ln2"), p, params), rate, rng))
            else:
                h = norm(ad.add(h, ad.dropout(self._attention(h, p, params), rate, rng)), f"{p}.ln1")
                h = norm(ad.add(h, ad.dropout(self._ffn(h, p, params), rate, rng)), f"{p}.ln2")
        if cfg.norm_placement is NormPlacement.PRE:
            h = norm(h, "final_ln")

        pooled = ad.mean_pool(h) if cfg.pooling is Pooling.MEAN else ad.last_token(h)
        return ad.linear(pooled, params["head.weight"], params.get("head.bias"))

    def _attention(self, h: Tensor, prefix: str, params: Dict[str, Tensor]) -> Tensor:
        def proj(name: str, t: Tensor) -> Tensor:
            return ad.linear(
                t, params[f"{prefix}.attn.{name}.weight"], params.get(f"{prefix}.attn.{name}.bias")
            )

        mixed = ad.attention(proj("wq", h), proj("wk", h), proj("wv", h), self.config.heads)
        return proj("wo", mixed)

    def _ffn(self, h: Tensor, prefix: str, params: Dict[str, Tensor]) -> Tensor:
        hidden = ad.linear(h, params[f"{prefix}.ffn.w1.weight"], params.get(f"{prefix}.ffn.w1.bias"))
        return ad.linear(
            ad.gelu(hidden), params[f"{prefix}.ffn.w2.weight"], params.get(f"{prefix}.ffn.w2.bias")
        )

    def predict(
        self, x: np.ndarray | Sequence[InputVector], batch_size: int = 1024
    ) -> ModelOutput:
        """Gradient-free batched inference on a read-only snapshot of the parameters."""

        frozen = {name: p.detach() for name, p in self.params.items()}
        x = self._validate_inputs(x)
        chunks = [
            self.forward(x[start : start + batch_size], params=frozen).values
            for start in range(0, len(x), batch_size)
        ]
        width = output_width(self.config)
        values = np.concatenate(chunks) if chunks else np.zeros((0, width), dtype=self.dtype)
        return ModelOutput(kind=self.config.embedding_kind, values=values)

    # -- loss ---------------------------------------------------------------

    def loss(self, output: Tensor, targets: TargetBatch) -> Tensor:
        """Cross-entropy over Kq classes, or masked MSE on the selected angle pair."""

        spec = self.config.spec
        kq = spec.aux_modulus
        if targets.y_q.shape != (output.shape[0],):
            raise ShapeMismatchError(
                f"{targets.y_q.shape[0]} targets for {output.shape[0]} outputs"
            )
        if (targets.y_q < 0).any() or (targets.y_q >= spec.q).any():
            raise SpecValidationError(f"primary target outside [0, {spec.q - 1}]")
        if (targets.y_kq < 0).any() or (targets.y_kq >= kq).any():
            raise SpecValidationError(f"auxiliary target outside [0, {kq - 1}]")
        if __debug__ and not np.array_equal(targets.y_kq % spec.q, targets.y_q):
            raise DatasetValidationError("auxiliary labels are not congruent to primary labels")

        if self.config.embedding_kind is EmbeddingKind.TOKEN_EXTENDED:
            return ad.cross_entropy(output, targets.classes())

        target = np.empty(output.shape, dtype=np.float64)
        target[:, 0], target[:, 1] = encode_angular(targets.y_q, spec.q)
        target[:, 2], target[:, 3] = encode_angular(targets.y_kq, kq)
        if self.config.supervise_both_pairs:
            mask = np.ones(output.shape)
        else:
            aux = targets.is_aux[:, None]
            mask = np.concatenate(
                [np.broadcast_to(~aux, (len(aux), 2)), np.broadcast_to(aux, (len(aux), 2))], axis=1
            )
        return ad.mse(output, target, mask)

    def loss_for_target(self, output: Tensor, target: TrainingTarget) -> Tensor:
        """Loss of a single-example output against one TrainingTarget."""

        return self.loss(output, TargetBatch.from_targets([target], self.config.spec.q))

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(
        self,
        path: str | Path,
        *,
        extra: Optional[Dict[str, object]] = None,
        extra_arrays: Optional[Dict[str, np.ndarray]] = None,
    ) -> Path:
        """Manifest (config, hash, parameter names) then the raw arrays in manifest order."""

        header = {
            "kind": CHECKPOINT_KIND,
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "config": self.config.model_dump(mode="json"),
            "config_hash": self.config_hash,
            "parameters": list(self.params),
            "extra": extra or {},
        }
        arrays: Dict[str, np.ndarray] = {name: p.values for name, p in self.params.items()}
        for name, array in (extra_arrays or {}).items():
            arrays[f"extra/{name}"] = array
        target = write_arrays(Path(path), header, arrays)
        logger.debug("Saved checkpoint %s (%d arrays)", target, len(arrays))
        return target

    @classmethod
    def load_checkpoint(
        cls, path: str | Path
    ) -> Tuple["TransformerModel", Dict[str, object], Dict[str, np.ndarray]]:
        """Returns (model, header, extra arrays)."""

        header, arrays = read_arrays(Path(path))
        if header.get("kind") != CHECKPOINT_KIND:
            raise ConfigMismatchError(f"{path} is not a model checkpoint")
        if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ConfigMismatchError(
                f"{path} has checkpoint schema {header.get('schema_version')}, "
                f"expected {CHECKPOINT_SCHEMA_VERSION}"
            )
        config = ModelConfig.model_validate(header["config"])
        if model_config_hash(config) != header.get("config_hash"):
            raise ConfigMismatchError(f"{path}: stored config hash does not match its config")
        expected = {name: shape for name, shape, _ in _parameter_layout(config)}
        params: Dict[str, Tensor] = {}
        for name in header["parameters"]:
            values = arrays[name]
            if name not in expected or tuple(expected[name]) != values.shape:
                raise ConfigMismatchError(f"{path}: parameter {name} does not fit the config")
            params[name] = Tensor(values, requires_grad=True, name=name)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigMismatchError(f"{path}: missing parameters {sorted(missing)}")
        extras = {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}
        return cls(config, params), header, extras


def _parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, role) in initialization and checkpoint order."""

    d, f = config.d_model, config.d_ffn
    layout: List[Tuple[str, Tuple[int, ...], str]] = []

    def linear(prefix: str, fan_in: int, fan_out: int) -> None:
        layout.append((f"{prefix}.weight", (fan_in, fan_out), "linear"))
        if config.bias:
            layout.append((f"{prefix}.bias", (fan_out,), "bias"))

    def norm(prefix: str) -> None:
        layout.append((f"{prefix}.weight", (d,), "gain"))
        if config.bias:
            layout.append((f"{prefix}.bias", (d,), "bias"))

    if config.embedding_kind is EmbeddingKind.TOKEN_EXTENDED:
        layout.append(("embed.table", (config.spec.aux_modulus, d), "embedding"))
    else:
        linear("embed.lift", ANGULAR_WIDTH, d)
    for i in range(config.layers):
        p = f"layers.{i}"
        norm(f"{p}.ln1")
        for name in ("wq", "wk", "wv", "wo"):
            linear(f"{p}.attn.{name}", d, d)
        norm(f"{p}.ln2")
        linear(f"{p}.ffn.w1", d, f)
        linear(f"{p}.ffn.w2", f, d)
    if config.norm_placement is NormPlacement.PRE:
        norm("final_ln")
    linear("head", d, output_width(config))
    return layout


def _initial_values(
    config: ModelConfig, shape: Tuple[int, ...], role: str, rng: np.random.Generator
) -> np.ndarray:
    if role == "bias":
        return np.zeros(shape)
    if role == "gain":
        return np.ones(shape)
    if config.init_scheme is InitScheme.SIGMA_002:
        return rng.normal(0.0, SIGMA_002, size=shape)
    if role == "embedding":
        return rng.normal(0.0, 1.0, size=shape)
    # kaiming_uniform with a=sqrt(5), the usual default for dense layers
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def build_model(config: ModelConfig, seed: int = 0, precision: str = "float32") -> TransformerModel:
    return TransformerModel.build(config, seed=seed, precision=precision)


def forward(model: TransformerModel, x: np.ndarray | Sequence[InputVector]) -> ModelOutput:
    """Batched forward pass without gradient tracking."""

    return model.predict(x)


__all__ = [
    "ModelOutput",
    "TargetBatch",
    "TransformerModel",
    "angular_features",
    "architecture_variants",
    "apply_variant",
    "build_model",
    "decode_angular",
    "decode_token",
    "encode_angular",
    "forward",
    "model_config_hash",
    "output_width",
    "parameter_count",
]
