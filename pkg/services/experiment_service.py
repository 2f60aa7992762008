"""Service layer behind the command-line subcommands.

Each public method performs one subcommand end to end: resolve paths under
the output root, run the modules, write CSV/JSON/binary artifacts and a
RunManifest recording the resolved configuration and output hashes.
"""

from __future__ import annotations

import datetime as dt
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv

from models.entities import (
    REFERENCE_TRAIN_DEFAULTS,
    DistributionKind,
    EmbeddingKind,
    MetricsReport,
    ModelConfig,
    ProblemSpec,
    RunManifest,
    TrainConfig,
    TrainHistory,
)
from modules import evaluator, trainer
from modules.analysis import analyze_row, rho_heatmap
from modules.sampling import generate_dataset, read_dataset, write_dataset
from modules.transformer import TransformerModel, apply_variant
from utils.error_handling import SpecValidationError, UserFacingError, safe_call
from utils.hashing import config_hash, file_hash
from utils.storage import resolve_output_root, save_csv, save_json

load_dotenv()
logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"

PRESETS: Dict[str, Dict[str, int]] = {
    "reference": {"layers": 4, "heads": 4, "d_model": 256, "d_ffn": 2048},
    "desk": {"layers": 2, "heads": 2, "d_model": 64, "d_ffn": 256},
    # the architecture study keeps the main dimensions and varies the four axes
    "variants": {"layers": 4, "heads": 4, "d_model": 256, "d_ffn": 2048},
}

DEFAULT_K_GRID = tuple(range(2, 11))
DEFAULT_R_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
SEARCH_K_GRID = tuple(range(4, 10))
SEARCH_R_GRID = (0.1, 0.2, 0.3, 0.4)
FALLBACK_AUX = (4, 0.3)

# (K, r) chosen by the 100K-sample grid search, per embedding and (N, q)
OPTIMAL_HYPERPARAMETERS: Dict[EmbeddingKind, Dict[Tuple[int, int], Tuple[int, float]]] = {
    EmbeddingKind.TOKEN_EXTENDED: {
        (8, 31): (5, 0.2),
        (8, 97): (4, 0.4),
        (8, 257): (8, 0.4),
        (16, 31): (5, 0.4),
        (16, 97): (4, 0.4),
        (16, 257): (4, 0.1),
        (32, 31): (5, 0.4),
        (32, 97): (8, 0.4),
        (32, 257): (9, 0.1),
    },
    EmbeddingKind.DUAL_ANGULAR: {
        (16, 97): (5, 0.4),
        (16, 257): (6, 0.3),
        (16, 433): (6, 0.3),
        (32, 97): (4, 0.1),
        (32, 257): (4, 0.2),
        (32, 433): (6, 0.1),
        (32, 3329): (4, 0.4),
        (32, 42899): (4, 0.3),
        (32, 974269): (4, 0.2),
        (64, 97): (4, 0.3),
        (64, 257): (4, 0.3),
        (64, 433): (4, 0.3),
        (64, 3329): (4, 0.3),
        (64, 42899): (4, 0.3),
        (64, 974269): (4, 0.2),
        (128, 257): (8, 0.4),
        (128, 3329): (6, 0.4),
        (128, 42899): (8, 0.4),
        (128, 974269): (8, 0.3),
    },
}


def optimal_hyperparameters(
    embedding: EmbeddingKind | str, N: int, q: int
) -> Optional[Tuple[int, float]]:
    """Grid-searched (K, r) for a setting, or None when it was not evaluated."""

    return OPTIMAL_HYPERPARAMETERS[EmbeddingKind(embedding)].get((N, q))


@dataclass(frozen=True)
class TrainOutcome:
    run_dir: Path
    checkpoint: Path
    history_csv: Path
    manifest: Path
    history: TrainHistory


def _now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


class ExperimentService:
    """Run subcommands against one output root."""

    def __init__(self, output_root: str | Path | None = None) -> None:
        self.output_root = Path(output_root) if output_root else resolve_output_root()
        self.output_root.mkdir(parents=True, exist_ok=True)

    def _path(self, path: str | Path) -> Path:
        candidate = Path(path).expanduser()
        if not candidate.is_absolute():
            candidate = self.output_root / candidate
        return candidate

    @staticmethod
    def _run_id(
        subcommand: str,
        config: Mapping[str, Any],
        seed: Optional[int],
        inputs: Mapping[str, Path] | None = None,
    ) -> str:
        """Identifier shared by a manifest and the outputs it lists.

        Built from content only (inputs by hash, never by path), so repeating a
        run under another output root yields the same identifier.
        """

        input_hashes = {k: file_hash(v) for k, v in (inputs or {}).items() if Path(v).is_file()}
        return config_hash(
            {
                "subcommand": subcommand,
                "config": dict(config),
                "seed": seed,
                "inputs": input_hashes,
                "tool_version": TOOL_VERSION,
            }
        )

    def _write_manifest(
        self,
        target: Path,
        subcommand: str,
        config: Mapping[str, Any],
        *,
        run_id: str,
        seed: Optional[int],
        inputs: Mapping[str, Path],
        outputs: Mapping[str, Path],
        started_at: dt.datetime,
        clock_start: float,
    ) -> Path:
        manifest = RunManifest(
            subcommand=subcommand,
            run_id=run_id,
            config=dict(config),
            seed=seed,
            tool_version=TOOL_VERSION,
            inputs={k: str(v) for k, v in inputs.items()},
            outputs={k: str(v) for k, v in outputs.items()},
            output_hashes={k: file_hash(v) for k, v in outputs.items() if Path(v).is_file()},
            started_at=started_at,
            wall_clock_seconds=time.perf_counter() - clock_start,
        )
        save_json(target, manifest)
        logger.info("Manifest written to %s", target)
        return target

    # ------------------------------------------------------------------ gen

    def generate(
        self,
        spec: ProblemSpec,
        distribution: DistributionKind | str,
        count: int,
        seed: int,
        out: str | Path,
        *,
        strict_nonzero: bool = False,
    ) -> Tuple[Path, Path]:
        started, clock = _now(), time.perf_counter()
        dataset = generate_dataset(spec, distribution, count, seed, strict_nonzero=strict_nonzero)
        config = {"spec": spec.model_dump(), "dataset": dataset.meta.model_dump(mode="json")}
        run_id = self._run_id("gen", config, seed)
        target = write_dataset(self._path(out), dataset, run_id=run_id)
        manifest = self._write_manifest(
            Path(f"{target}.manifest.json"),
            "gen",
            config,
            run_id=run_id,
            seed=seed,
            inputs={},
            outputs={"dataset": target},
            started_at=started,
            clock_start=clock,
        )
        return target, manifest

    # -------------------------------------------------------------- analyze

    def analyze(
        self,
        Ns: Sequence[int],
        qs: Sequence[int],
        Ks: Sequence[int] = (2,),
        rs: Sequence[float] = (0.0,),
        *,
        mc_samples: Optional[int] = None,
        seed: int = 0,
        out: str | Path = "analyze.csv",
    ) -> Tuple[pd.DataFrame, Path]:
        if not (Ns and qs and Ks and rs):
            raise SpecValidationError("analyze needs at least one value for every range")
        started, clock = _now(), time.perf_counter()
        rows = [
            analyze_row(ProblemSpec(N=N, q=q, K=K, r=r), mc_samples=mc_samples, seed=seed)
            for N, q, K, r in itertools.product(Ns, qs, Ks, rs)
        ]
        frame = pd.DataFrame(rows)
        config = {"N": list(Ns), "q": list(qs), "K": list(Ks), "r": list(rs), "mc_samples": mc_samples}
        run_id = self._run_id("analyze", config, seed)
        target = save_csv(self._path(out), frame.assign(run_id=run_id))
        self._write_manifest(
            Path(f"{target}.manifest.json"),
            "analyze",
            config,
            run_id=run_id,
            seed=seed,
            inputs={},
            outputs={"table": target},
            started_at=started,
            clock_start=clock,
        )
        return frame, target

    # -------------------------------------------------------------- heatmap

    def heatmap(
        self,
        Ks: Sequence[int] = DEFAULT_K_GRID,
        rs: Sequence[float] = DEFAULT_R_GRID,
        *,
        reports_dir: str | Path | None = None,
        out: str | Path = "heatmap.csv",
    ) -> Tuple[pd.DataFrame, Path]:
        if not Ks or not rs:
            raise SpecValidationError("heatmap ranges must not be empty")
        started, clock = _now(), time.perf_counter()
        frame = pd.DataFrame([cell.model_dump() for cell in rho_heatmap(Ks, rs)])
        inputs: Dict[str, Path] = {}
        report_files: Dict[str, Path] = {}
        if reports_dir is not None:
            reports_path = self._path(reports_dir)
            measured = _measured_grid(reports_path)
            inputs["reports"] = reports_path
            report_files = {
                str(p.relative_to(reports_path)): p for p in sorted(reports_path.rglob("metrics.json"))
            }
            if not measured.empty:
                frame = frame.merge(measured, on=["K", "r"], how="left")
        config = {"K": list(Ks), "r": list(rs)}
        run_id = self._run_id("heatmap", config, None, report_files)
        target = save_csv(self._path(out), frame.assign(run_id=run_id))
        self._write_manifest(
            Path(f"{target}.manifest.json"),
            "heatmap",
            config,
            run_id=run_id,
            seed=None,
            inputs=inputs,
            outputs={"grid": target},
            started_at=started,
            clock_start=clock,
        )
        return frame, target

    # ---------------------------------------------------------------- train

    def resolve_model_config(
        self,
        spec: ProblemSpec,
        embedding: EmbeddingKind | str,
        *,
        preset: str = "reference",
        variant: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> ModelConfig:
        if preset not in PRESETS:
            raise SpecValidationError(
                f"unknown preset {preset!r}", suggestion="Use one of " + ", ".join(PRESETS)
            )
        if variant and preset != "variants":
            logger.warning("--variant is meant for the variants preset; applying it anyway")
        fields: Dict[str, Any] = dict(PRESETS[preset])
        fields.update({k: v for k, v in (overrides or {}).items() if v is not None})
        config = ModelConfig(spec=spec, embedding_kind=EmbeddingKind(embedding), **fields)
        return apply_variant(config, variant) if variant else config

    def train(
        self,
        data: str | Path,
        *,
        embedding: EmbeddingKind | str = EmbeddingKind.TOKEN_EXTENDED,
        K: Optional[int] = None,
        r: Optional[float] = None,
        method: str = "aux",
        preset: str = "reference",
        variant: Optional[str] = None,
        model_overrides: Optional[Mapping[str, Any]] = None,
        train_config: TrainConfig = REFERENCE_TRAIN_DEFAULTS,
        out: str | Path = "train",
        resume: bool = False,
        track_train_accuracy: bool = False,
    ) -> TrainOutcome:
        started, clock = _now(), time.perf_counter()
        data_path = self._path(data)
        dataset = read_dataset(data_path)
        N, q = dataset.meta.N, dataset.meta.q
        embedding = EmbeddingKind(embedding)

        if method == "sparse":
            if r:
                logger.warning("the sparse baseline trains without the auxiliary target; r=%s ignored", r)
            if dataset.meta.distribution is not DistributionKind.SPARSE:
                logger.warning("sparse baseline is training on %s inputs", dataset.meta.distribution.value)
            K, r = K or 1, 0.0
        elif method == "aux":
            if K is None or r is None:
                tuned = optimal_hyperparameters(embedding, N, q)
                if tuned is None:
                    logger.warning(
                        "no grid-searched (K, r) for %s N=%d q=%d; using %s",
                        embedding.value,
                        N,
                        q,
                        FALLBACK_AUX,
                    )
                    tuned = FALLBACK_AUX
                K = tuned[0] if K is None else K
                r = tuned[1] if r is None else r
        else:
            raise SpecValidationError(f"unknown method {method!r}", suggestion="Use aux or sparse")

        spec = ProblemSpec(N=N, q=q, K=K, r=r)
        model_config = self.resolve_model_config(
            spec, embedding, preset=preset, variant=variant, overrides=model_overrides
        )
        _log_deviations(train_config)

        run_dir = self._path(out)
        checkpoint_dir = run_dir / "checkpoints"
        resume_from = trainer.latest_checkpoint(checkpoint_dir) if resume and checkpoint_dir.exists() else None
        if resume and resume_from is None:
            logger.warning("no checkpoint under %s; starting from scratch", checkpoint_dir)

        model = TransformerModel.build(model_config, seed=train_config.seed, precision=train_config.precision)
        run_info = {
            "method": method,
            "train_samples": len(dataset),
            "train_distribution": dataset.meta.distribution.value,
        }
        run_id = self._run_id(
            "train",
            {"run_hash": trainer.run_hash(model_config, spec, train_config), **run_info},
            train_config.seed,
            {"data": data_path},
        )
        run_info["run_id"] = run_id
        _, history = trainer.train(
            model,
            dataset,
            spec,
            train_config,
            checkpoint_dir=checkpoint_dir,
            resume_from=resume_from,
            track_train_accuracy=track_train_accuracy,
            run_info=run_info,
        )
        history_csv = save_csv(run_dir / "history.csv", trainer.history_frame(history).assign(run_id=run_id))
        history_json = save_json(
            run_dir / "history.json", {"run_id": run_id, **history.model_dump(mode="json")}
        )
        checkpoint = checkpoint_dir / trainer.FINAL_CHECKPOINT
        manifest = self._write_manifest(
            run_dir / "manifest.json",
            "train",
            {
                "spec": spec.model_dump(),
                "model": model_config.model_dump(mode="json"),
                "train": train_config.model_dump(mode="json"),
                "run_hash": history.config_hash,
                **run_info,
            },
            run_id=run_id,
            seed=train_config.seed,
            inputs={"data": data_path},
            outputs={"checkpoint": checkpoint, "history_csv": history_csv, "history_json": history_json},
            started_at=started,
            clock_start=clock,
        )
        return TrainOutcome(run_dir, checkpoint, history_csv, manifest, history)

    # ----------------------------------------------------------------- eval

    def evaluate(
        self,
        checkpoint: str | Path,
        test_data: str | Path,
        *,
        taus: Sequence[float] = evaluator.DEFAULT_TAUS,
        out: str | Path = "eval",
    ) -> MetricsReport:
        started, clock = _now(), time.perf_counter()
        checkpoint_path = self._path(checkpoint)
        test_path = self._path(test_data)
        model, header, _ = TransformerModel.load_checkpoint(checkpoint_path)
        dataset = read_dataset(test_path)
        run_info = header.get("extra", {}).get("run_info", {})
        eval_config = {
            "taus": list(taus),
            "model": header.get("config"),
            "model_config_hash": header.get("config_hash"),
            "test_data": dataset.meta.model_dump(mode="json"),
        }
        run_id = config_hash(eval_config)
        report = evaluator.evaluate(
            model,
            dataset,
            taus,
            meta={
                "method": run_info.get("method", "aux"),
                "train_samples": run_info.get("train_samples"),
                "checkpoint": str(checkpoint_path),
                "run_id": run_id,
            },
        )
        out_dir = self._path(out)
        outputs = {
            "metrics_json": save_json(out_dir / "metrics.json", report),
            "metrics_csv": save_csv(
                out_dir / "metrics.csv", evaluator.summary_frame(report).assign(run_id=run_id)
            ),
            "strata_csv": save_csv(
                out_dir / "strata.csv", evaluator.strata_frame(report).assign(run_id=run_id)
            ),
        }
        self._write_manifest(
            out_dir / "manifest.json",
            "eval",
            {**eval_config, "run_id": run_id},
            run_id=run_id,
            seed=None,
            inputs={"checkpoint": checkpoint_path, "test_data": test_path},
            outputs=outputs,
            started_at=started,
            clock_start=clock,
        )
        return report

    # ---------------------------------------------------------------- sweep

    def sweep(
        self,
        data: str | Path,
        test_data: str | Path,
        *,
        Ks: Sequence[int] = SEARCH_K_GRID,
        rs: Sequence[float] = SEARCH_R_GRID,
        embedding: EmbeddingKind | str = EmbeddingKind.TOKEN_EXTENDED,
        preset: str = "reference",
        variant: Optional[str] = None,
        model_overrides: Optional[Mapping[str, Any]] = None,
        train_config: TrainConfig = REFERENCE_TRAIN_DEFAULTS,
        taus: Sequence[float] = evaluator.DEFAULT_TAUS,
        parallel: int = 1,
        baseline_reports: Sequence[str | Path] = (),
        out: str | Path = "sweep",
    ) -> pd.DataFrame:
        """Train and evaluate every (K, r) cell; failed cells are recorded, not fatal."""

        if not Ks or not rs:
            raise SpecValidationError("sweep grids must not be empty")
        started, clock = _now(), time.perf_counter()
        out_dir = self._path(out)
        cells = list(itertools.product(Ks, rs))
        jobs = [
            _SweepJob(
                output_root=str(self.output_root),
                data=str(self._path(data)),
                test_data=str(self._path(test_data)),
                K=K,
                r=r,
                embedding=EmbeddingKind(embedding).value,
                preset=preset,
                variant=variant,
                model_overrides=dict(model_overrides or {}),
                train_config=train_config.model_copy(
                    update={"show_progress": train_config.show_progress and parallel <= 1}
                ),
                taus=tuple(taus),
                run_dir=str(out_dir / f"K{K}_r{r:g}"),
            )
            for K, r in cells
        ]
        logger.info("Sweeping %d cells with %d worker(s)", len(jobs), max(1, parallel))
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [pool.submit(_run_sweep_cell, job) for job in jobs]
                results = [future.result() for future in futures]
        else:
            results = [_run_sweep_cell(job) for job in jobs]

        cells_frame = pd.DataFrame([row for row, _ in results])
        reports = [report for _, report in results if report is not None]
        baseline = [
            MetricsReport.model_validate_json(self._path(p).read_text(encoding="utf-8"))
            for p in baseline_reports
        ]
        summary = evaluator.sensitivity_summary(reports, baseline or None)
        failed = int((cells_frame["status"] != "ok").sum()) if not cells_frame.empty else 0
        if failed:
            logger.warning("%d of %d sweep cells failed; see cells.csv", failed, len(jobs))
        config = {
            "K": list(Ks),
            "r": list(rs),
            "embedding": EmbeddingKind(embedding).value,
            "preset": preset,
            "variant": variant,
            "train": train_config.model_dump(mode="json"),
            "taus": list(taus),
            "parallel": parallel,
        }
        inputs = {"data": self._path(data), "test_data": self._path(test_data)}
        run_id = self._run_id("sweep", config, train_config.seed, inputs)
        outputs = {
            "cells_csv": save_csv(out_dir / "cells.csv", cells_frame.assign(run_id=run_id)),
            "summary_csv": save_csv(out_dir / "summary.csv", summary.assign(run_id=run_id)),
        }
        self._write_manifest(
            out_dir / "manifest.json",
            "sweep",
            {**config, "failed_cells": failed},
            run_id=run_id,
            seed=train_config.seed,
            inputs=inputs,
            outputs=outputs,
            started_at=started,
            clock_start=clock,
        )
        return summary


@dataclass(frozen=True)
class _SweepJob:
    output_root: str
    data: str
    test_data: str
    K: int
    r: float
    embedding: str
    preset: str
    variant: Optional[str]
    model_overrides: Dict[str, Any]
    train_config: TrainConfig
    taus: Tuple[float, ...]
    run_dir: str


@safe_call(error_message="Sweep cell failed")
def _train_and_evaluate(job: _SweepJob) -> MetricsReport:
    service = ExperimentService(job.output_root)
    outcome = service.train(
        job.data,
        embedding=job.embedding,
        K=job.K,
        r=job.r,
        preset=job.preset,
        variant=job.variant,
        model_overrides=job.model_overrides,
        train_config=job.train_config,
        out=job.run_dir,
    )
    return service.evaluate(
        outcome.checkpoint, job.test_data, taus=job.taus, out=Path(job.run_dir) / "eval"
    )


def _run_sweep_cell(job: _SweepJob) -> Tuple[Dict[str, Any], Optional[MetricsReport]]:
    row: Dict[str, Any] = {"K": job.K, "r": job.r, "run_dir": job.run_dir}
    try:
        report = _train_and_evaluate(job)
    except UserFacingError as exc:
        logger.error("cell K=%d r=%s failed: %s", job.K, job.r, exc.detail)
        row.update({"status": "failed", "error": exc.detail})
        return row, None
    row.update({"status": "ok", "error": "", "match_accuracy": report.match_accuracy})
    row.update({f"tau_{k}": v for k, v in report.tau_accuracy.items()})
    return row, report


def _measured_grid(reports_dir: Path) -> pd.DataFrame:
    """Mean measured accuracies per (K, r) from every metrics.json under ``reports_dir``."""

    rows: List[Dict[str, Any]] = []
    for path in sorted(reports_dir.rglob("metrics.json")):
        report = MetricsReport.model_validate_json(path.read_text(encoding="utf-8"))
        spec = report.meta.get("spec", {})
        if report.meta.get("method", "aux") != "aux":
            continue
        row = {"K": spec.get("K"), "r": spec.get("r"), "match_accuracy": report.match_accuracy}
        row.update({f"tau_{k}": v for k, v in report.tau_accuracy.items()})
        rows.append(row)
    if not rows:
        logger.warning("no metrics.json reports found under %s", reports_dir)
        return pd.DataFrame()
    frame = pd.DataFrame(rows)
    return frame.groupby(["K", "r"], as_index=False).mean()


def _log_deviations(cfg: TrainConfig) -> None:
    defaults = REFERENCE_TRAIN_DEFAULTS.model_dump()
    for name, value in cfg.model_dump().items():
        if name in {"show_progress", "checkpoint_every"}:
            continue
        if value != defaults[name]:
            logger.info("train.%s=%s (reference default %s)", name, value, defaults[name])


__all__ = [
    "DEFAULT_K_GRID",
    "DEFAULT_R_GRID",
    "ExperimentService",
    "OPTIMAL_HYPERPARAMETERS",
    "PRESETS",
    "SEARCH_K_GRID",
    "SEARCH_R_GRID",
    "TrainOutcome",
    "optimal_hyperparameters",
]
