"""Input samplers, label synthesis and target selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import numpy as np

from models.entities import (
    DatasetMeta,
    DistributionKind,
    InputVector,
    LabeledExample,
    ModulusKind,
    ProblemSpec,
    TrainingTarget,
)
from modules.analysis import sparse_z_pmf
from utils.error_handling import DatasetValidationError, SpecValidationError
from utils.rng import Stream, make_rng
from utils.storage import read_dataset_rows, write_dataset_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Column-oriented labeled examples: x (M, N) int32, y_q and quotient int64."""

    x: np.ndarray
    y_q: np.ndarray
    quotient: np.ndarray
    meta: DatasetMeta

    def __post_init__(self) -> None:
        if self.x.ndim != 2:
            raise SpecValidationError(f"x must be 2-D, got shape {self.x.shape}")
        if not len(self.x) == len(self.y_q) == len(self.quotient):
            raise SpecValidationError("x, y_q and quotient must have the same length")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def totals(self) -> np.ndarray:
        return self.quotient * self.meta.q + self.y_q

    def example(self, index: int) -> LabeledExample:
        return LabeledExample(
            x=InputVector(entries=[int(v) for v in self.x[index]], q=self.meta.q),
            y_q=int(self.y_q[index]),
            quotient=int(self.quotient[index]),
        )

    def __iter__(self) -> Iterator[LabeledExample]:
        for index in range(len(self)):
            yield self.example(index)

    def subset(self, indices: np.ndarray) -> "Dataset":
        meta = self.meta.model_copy(update={"count": int(len(indices))})
        return Dataset(self.x[indices], self.y_q[indices], self.quotient[indices], meta)


def _check_spec(spec: ProblemSpec) -> None:
    # ProblemSpec validates itself; this guards hand-built or mutated copies.
    if spec.q < 2 or spec.N < 1:
        raise SpecValidationError(f"invalid problem (N={spec.N}, q={spec.q})")


def sample_uniform_batch(spec: ProblemSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    _check_spec(spec)
    return rng.integers(0, spec.q, size=(count, spec.N), dtype=np.int64).astype(np.int32)


def sample_sparse_batch(
    spec: ProblemSpec,
    count: int,
    rng: np.random.Generator,
    *,
    strict_nonzero: bool = False,
) -> np.ndarray:
    """
    Sparse construction: z ~ g on {1..N}, z positions chosen without
    replacement and filled uniformly, the rest set to zero.

    Fill values come from {0..q-1}, so a filled position can still be zero;
    ``strict_nonzero`` fills from {1..q-1} instead.
    """

    _check_spec(spec)
    N = spec.N
    z = rng.choice(np.arange(1, N + 1), size=count, p=sparse_z_pmf(N, 1))
    # Ranking i.i.d. keys gives a uniform random permutation per row; the first z ranks are kept.
    keys = rng.random((count, N))
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    populated = ranks < z[:, None]
    low = 1 if strict_nonzero else 0
    fills = rng.integers(low, spec.q, size=(count, N), dtype=np.int64)
    return np.where(populated, fills, 0).astype(np.int32)


def sample_uniform(spec: ProblemSpec, rng: np.random.Generator) -> InputVector:
    """Each entry i.i.d. uniform on {0..q-1}."""

    row = sample_uniform_batch(spec, 1, rng)[0]
    return InputVector(entries=[int(v) for v in row], q=spec.q)


def sample_sparse(
    spec: ProblemSpec, rng: np.random.Generator, *, strict_nonzero: bool = False
) -> InputVector:
    row = sample_sparse_batch(spec, 1, rng, strict_nonzero=strict_nonzero)[0]
    return InputVector(entries=[int(v) for v in row], q=spec.q)


def make_labels(x: InputVector, q: int) -> LabeledExample:
    """y_q = sum mod q and quotient = floor(sum / q)."""

    if x.q != q:
        raise SpecValidationError(f"input was drawn for q={x.q}, labelled with q={q}")
    quotient, y_q = divmod(sum(x.entries), q)
    return LabeledExample(x=x, y_q=y_q, quotient=quotient)


def label_batch(x: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    totals = x.astype(np.int64).sum(axis=1)
    return totals % q, totals // q


def aux_label(example: LabeledExample, q: int, K: int) -> int:
    """f_Kq(x), rebuilt from the stored quotient as (c*q + y_q) mod Kq."""

    return (example.quotient * q + example.y_q) % (K * q)


def aux_label_batch(y_q: np.ndarray, quotient: np.ndarray, q: int, K: int) -> np.ndarray:
    return (quotient * q + y_q) % (K * q)


def select_target(
    example: LabeledExample, spec: ProblemSpec, rng: np.random.Generator
) -> TrainingTarget:
    """Primary label with probability 1 - r, auxiliary label with probability r."""

    if rng.random() < spec.r:
        return TrainingTarget(
            value=aux_label(example, spec.q, spec.K),
            modulus_kind=ModulusKind.AUXILIARY_KQ,
        )
    return TrainingTarget(value=example.y_q, modulus_kind=ModulusKind.PRIMARY_Q)


def select_targets(count: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorized coin flips: True where the auxiliary target is used."""

    # Same comparison as select_target so one draw per example means the same decision.
    return rng.random(count) < r


def generate_dataset(
    spec: ProblemSpec,
    distribution: DistributionKind | str,
    count: int,
    seed: int,
    *,
    strict_nonzero: bool = False,
) -> Dataset:
    """Deterministic dataset for (spec.N, spec.q, distribution, count, seed)."""

    if count < 0:
        raise SpecValidationError(f"count must be non-negative, got {count}")
    distribution = DistributionKind(distribution)
    rng = make_rng(seed, Stream.DATA)
    if distribution is DistributionKind.UNIFORM:
        if strict_nonzero:
            logger.warning("strict_nonzero only affects the sparse sampler; ignoring")
            strict_nonzero = False
        x = sample_uniform_batch(spec, count, rng)
    else:
        x = sample_sparse_batch(spec, count, rng, strict_nonzero=strict_nonzero)
    y_q, quotient = label_batch(x, spec.q)
    meta = DatasetMeta(
        N=spec.N,
        q=spec.q,
        distribution=distribution,
        seed=seed,
        count=count,
        strict_nonzero=strict_nonzero,
    )
    logger.info(
        "Generated %d %s examples (N=%d, q=%d, seed=%d)",
        count,
        distribution.value,
        spec.N,
        spec.q,
        seed,
    )
    return Dataset(x=x, y_q=y_q.astype(np.int64), quotient=quotient.astype(np.int64), meta=meta)


def zero_counts(x: np.ndarray) -> np.ndarray:
    """n0(x) per row."""

    return (x == 0).sum(axis=1)


def write_dataset(path: str | Path, dataset: Dataset, *, run_id: Optional[str] = None) -> Path:
    """Header line (meta) followed by fixed-width little-endian rows.

    ``run_id`` ties the file to the manifest written next to it.
    """

    header: Dict[str, Any] = dataset.meta.model_dump(mode="json")
    if run_id:
        header["run_id"] = run_id
    target = write_dataset_rows(Path(path), header, dataset.x, dataset.y_q, dataset.quotient)
    logger.info("Wrote %d examples to %s", len(dataset), target)
    return target


def read_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset file; out-of-range rows are reported by index."""

    header, rows = read_dataset_rows(Path(path))
    try:
        meta = DatasetMeta(**{k: v for k, v in header.items() if k in DatasetMeta.model_fields})
    except ValueError as exc:
        raise DatasetValidationError(
            f"{path} has an invalid header", original_error=exc
        ) from exc
    x = np.array(rows["x"], dtype=np.int32)
    y_q = np.array(rows["y_q"], dtype=np.int64)
    quotient = np.array(rows["quotient"], dtype=np.int64)

    bad = np.flatnonzero(((x < 0) | (x >= meta.q)).any(axis=1))
    if bad.size:
        raise DatasetValidationError(
            f"row {int(bad[0])} has an entry outside [0, {meta.q - 1}]",
            suggestion="The file was written for a different q or is corrupted",
        )
    bad = np.flatnonzero((y_q < 0) | (y_q >= meta.q) | (quotient < 0))
    if bad.size:
        raise DatasetValidationError(f"row {int(bad[0])} has an out-of-range label")
    bad = np.flatnonzero(quotient * meta.q + y_q != x.astype(np.int64).sum(axis=1))
    if bad.size:
        raise DatasetValidationError(
            f"row {int(bad[0])} violates c*q + y_q = sum(x)"
        )
    return Dataset(x=x, y_q=y_q, quotient=quotient, meta=meta)


__all__ = [
    "Dataset",
    "aux_label",
    "aux_label_batch",
    "generate_dataset",
    "label_batch",
    "make_labels",
    "read_dataset",
    "sample_sparse",
    "sample_sparse_batch",
    "sample_uniform",
    "sample_uniform_batch",
    "select_target",
    "select_targets",
    "write_dataset",
    "zero_counts",
]
