"""AdamW training loop with linear warmup/decay and per-epoch target re-draws."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Set, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from models.entities import (
    EpochRecord,
    ModelConfig,
    ProblemSpec,
    TrainConfig,
    TrainHistory,
    as_fraction,
)
from modules.autodiff import Tensor, assert_finite
from modules.sampling import Dataset, aux_label_batch, select_targets
from modules.transformer import TargetBatch, TransformerModel
from utils.error_handling import ConfigMismatchError, NonFiniteError, SpecValidationError
from utils.hashing import config_hash
from utils.rng import Stream, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = "epoch_{epoch:03d}.ckpt"
FINAL_CHECKPOINT = "final.ckpt"


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    # Exact rational product so ratios like 0.07 do not round up an extra step.
    return math.ceil(as_fraction(cfg.warmup_ratio) * total_steps)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then linear decay to 0 at ``total_steps``."""

    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_steps(total_steps, cfg)
    if warmup and step <= warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return 0.0
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptimizerState:
    """AdamW moment accumulators keyed by parameter name."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.values) for name, p in params.items()},
            v={name: np.zeros_like(p.values) for name, p in params.items()},
        )

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m/{name}": value for name, value in self.m.items()}
        arrays.update({f"adam.v/{name}": value for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], step: int) -> "OptimizerState":
        m = {k[len("adam.m/") :]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/") :]: a.copy() for k, a in arrays.items() if k.startswith("adam.v/")}
        return cls(m=m, v=v, step=step)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    no_decay: Optional[Set[str]] = None,
) -> OptimizerState:
    """
    One AdamW update in place, with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta); names in
    ``no_decay`` skip the decay term. Any non-finite gradient aborts the step
    before a single parameter changes.
    """

    no_decay = no_decay or set()
    bad = [name for name, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(
            f"non-finite gradient in {', '.join(sorted(bad)[:5])}"
            + (f" and {len(bad) - 5} more" if len(bad) > 5 else ""),
            suggestion="Lower peak_lr or train with --precision float64",
        )
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigMismatchError(f"gradient for {name} has shape {g.shape}")

    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, g in grads.items():
        param = params[name]
        m = state.m.setdefault(name, np.zeros_like(param.values))
        v = state.v.setdefault(name, np.zeros_like(param.values))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        if name not in no_decay:
            update = update + cfg.weight_decay * param.values
        param.values -= (lr * update).astype(param.dtype, copy=False)
    return state


def run_hash(model_config: ModelConfig, spec: ProblemSpec, cfg: TrainConfig) -> str:
    """Hash of everything that determines the trajectory (display-only flags excluded)."""

    train = cfg.model_dump(mode="json", exclude={"show_progress", "checkpoint_every"})
    return config_hash(
        {"model": model_config.model_dump(mode="json"), "spec": spec.model_dump(), "train": train}
    )


def _check_compatible(model: TransformerModel, dataset: Dataset, spec: ProblemSpec) -> None:
    model_spec = model.config.spec
    if (dataset.meta.N, dataset.meta.q) != (spec.N, spec.q):
        raise ConfigMismatchError(
            f"dataset was generated for N={dataset.meta.N}, q={dataset.meta.q} "
            f"but training targets N={spec.N}, q={spec.q}"
        )
    if (model_spec.N, model_spec.q, model_spec.K) != (spec.N, spec.q, spec.K):
        raise ConfigMismatchError(
            f"model was built for (N, q, K)=({model_spec.N}, {model_spec.q}, {model_spec.K})"
        )
    if len(dataset) == 0:
        raise SpecValidationError("cannot train on an empty dataset")


def evaluate_train_accuracy(model: TransformerModel, dataset: Dataset) -> float:
    """Match accuracy of the current parameters on ``dataset``."""

    preds, _ = model.predict(dataset.x).decode(dataset.meta.q)
    return float(np.mean(preds == dataset.y_q)) if len(dataset) else 0.0


def history_frame(history: TrainHistory) -> pd.DataFrame:
    columns = ["epoch", "mean_loss", "lr_last", "aux_frequency", "train_match_accuracy"]
    return pd.DataFrame([record.model_dump() for record in history.epochs], columns=columns)


def latest_checkpoint(directory: str | Path) -> Optional[Path]:
    directory = Path(directory)
    final = directory / FINAL_CHECKPOINT
    if final.exists():
        return final
    candidates = sorted(directory.glob("epoch_*.ckpt"))
    return candidates[-1] if candidates else None


def _save(
    model: TransformerModel,
    path: Path,
    state: OptimizerState,
    history: TrainHistory,
    epoch: int,
    run_info: Optional[Dict[str, object]] = None,
) -> Path:
    return model.save_checkpoint(
        path,
        extra={
            "epoch": epoch,
            "optimizer_step": state.step,
            "history": history.model_dump(mode="json"),
            "run_info": run_info or {},
        },
        extra_arrays=state.to_arrays(),
    )


def train(
    model: TransformerModel,
    dataset: Dataset,
    spec: ProblemSpec,
    cfg: TrainConfig,
    *,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    track_train_accuracy: bool = False,
    run_info: Optional[Dict[str, object]] = None,
) -> Tuple[TransformerModel, TrainHistory]:
    """
    Train ``model`` on ``dataset`` for ``cfg.epochs`` epochs.

    Every epoch reshuffles the examples and re-draws the modulus of every
    example with probability ``spec.r``; shuffle, target and dropout streams
    are keyed by (seed, epoch), so a resumed run continues bit-identically.
    """

    _check_compatible(model, dataset, spec)
    if model.dtype != np.dtype(cfg.precision):
        model = model.to_precision(cfg.precision)

    count = len(dataset)
    steps_per_epoch = math.ceil(count / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    y_kq = aux_label_batch(dataset.y_q, dataset.quotient, spec.q, spec.K)
    no_decay = set() if cfg.decay_norm_and_bias else model.no_decay_names()
    history = TrainHistory(seed=cfg.seed, config_hash=run_hash(model.config, spec, cfg))
    state = OptimizerState.zeros_like(model.params)
    start_epoch = 0

    if resume_from is not None:
        model, header, arrays = TransformerModel.load_checkpoint(resume_from)
        model = model.to_precision(cfg.precision) if model.dtype != np.dtype(cfg.precision) else model
        extra = header.get("extra", {})
        saved = TrainHistory.model_validate(extra.get("history", {}))
        if saved.config_hash != history.config_hash:
            raise ConfigMismatchError(
                f"checkpoint {resume_from} belongs to a different run configuration",
                suggestion="Resume with the flags the run was started with",
            )
        history = saved
        start_epoch = int(extra.get("epoch", 0))
        state = OptimizerState.from_arrays(arrays, int(extra.get("optimizer_step", 0)))
        logger.info("Resuming from %s at epoch %d", resume_from, start_epoch)

    logger.info(
        "Training %d examples for %d epochs (%d steps, batch %d, peak lr %g, warmup %d steps, r=%s, K=%d)",
        count,
        cfg.epochs,
        total_steps,
        cfg.batch_size,
        cfg.peak_lr,
        warmup_steps(total_steps, cfg),
        spec.r,
        spec.K,
    )

    checkpoint_path = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for epoch in range(start_epoch, cfg.epochs):
        order = make_rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(count)
        use_aux = select_targets(count, spec.r, make_rng(cfg.seed, Stream.TARGET, epoch))
        dropout_rng = make_rng(cfg.seed, Stream.DROPOUT, epoch) if model.config.dropout > 0 else None

        loss_sum = 0.0
        lr = 0.0
        batches = range(steps_per_epoch)
        for b in tqdm(
            batches,
            desc=f"epoch {epoch + 1}/{cfg.epochs}",
            disable=not cfg.show_progress,
            leave=False,
        ):
            position = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            idx = order[position]
            targets = TargetBatch(y_q=dataset.y_q[idx], y_kq=y_kq[idx], is_aux=use_aux[position])
            model.zero_grad()
            output = model.forward(dataset.x[idx], rng=dropout_rng)
            loss = model.loss(output, targets)
            assert_finite(loss, f"loss at epoch {epoch + 1}, batch {b}")
            loss.backward()
            grads = {
                name: p.grad if p.grad is not None else np.zeros_like(p.values)
                for name, p in model.params.items()
            }
            lr = lr_at(state.step, total_steps, cfg)
            adamw_step(model.params, grads, state, lr, cfg, no_decay)
            history.lr_trace.append(lr)
            loss_sum += float(loss.values) * len(idx)

        record = EpochRecord(
            epoch=epoch + 1,
            mean_loss=loss_sum / count,
            lr_last=lr,
            aux_frequency=float(use_aux.mean()),
            train_match_accuracy=(
                evaluate_train_accuracy(model, dataset) if track_train_accuracy else None
            ),
        )
        history.epochs.append(record)
        logger.info(
            "epoch %d/%d: loss %.6f, lr %.3g, aux %.4f%s",
            record.epoch,
            cfg.epochs,
            record.mean_loss,
            record.lr_last,
            record.aux_frequency,
            ""
            if record.train_match_accuracy is None
            else f", train acc {record.train_match_accuracy:.4f}",
        )
        if (
            checkpoint_path is not None
            and cfg.checkpoint_every
            and record.epoch % cfg.checkpoint_every == 0
            and record.epoch < cfg.epochs
        ):
            _save(
                model,
                checkpoint_path / CHECKPOINT_PATTERN.format(epoch=record.epoch),
                state,
                history,
                record.epoch,
                run_info,
            )

    if checkpoint_path is not None:
        _save(model, checkpoint_path / FINAL_CHECKPOINT, state, history, cfg.epochs, run_info)
    return model, history


__all__ = [
    "OptimizerState",
    "adamw_step",
    "evaluate_train_accuracy",
    "history_frame",
    "latest_checkpoint",
    "lr_at",
    "run_hash",
    "train",
    "warmup_steps",
]
