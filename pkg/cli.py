"""Command-line entry point: ``python cli.py <gen|analyze|heatmap|train|eval|sweep>``."""

from __future__ import annotations

import os

# BLAS threads change reduction order; pin them before numpy loads.
for _variable in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_variable, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from fractions import Fraction  # noqa: E402
from typing import Any, Dict, List, Optional, Sequence  # noqa: E402

from dotenv import load_dotenv  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from models.entities import (  # noqa: E402
    REFERENCE_TRAIN_DEFAULTS,
    EmbeddingKind,
    InitScheme,
    NormPlacement,
    Pooling,
    ProblemSpec,
    TrainConfig,
)
from modules.evaluator import DEFAULT_TAUS  # noqa: E402
from services.experiment_service import (  # noqa: E402
    DEFAULT_K_GRID,
    DEFAULT_R_GRID,
    PRESETS,
    SEARCH_K_GRID,
    SEARCH_R_GRID,
    ExperimentService,
)
from utils.error_handling import UserFacingError  # noqa: E402

load_dotenv()
logger = logging.getLogger("modaddlab")

EMBEDDINGS = {"token": EmbeddingKind.TOKEN_EXTENDED, "angular": EmbeddingKind.DUAL_ANGULAR}
DEFAULTS = REFERENCE_TRAIN_DEFAULTS


def parse_int_list(text: str) -> List[int]:
    """'4..9' (inclusive) or '4,5,7'."""

    text = text.strip()
    if ".." in text:
        low, high = (int(part) for part in text.split("..", 1))
        if high < low:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return list(range(low, high + 1))
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def parse_float_list(text: str) -> List[float]:
    """'0.1..0.9' (step 0.1), '0.1..0.9:0.2' or '0.05,0.1'."""

    text = text.strip()
    if ".." in text:
        bounds, _, step_text = text.partition(":")
        low_text, high_text = bounds.split("..", 1)
        low, high = Fraction(low_text), Fraction(high_text)
        step = Fraction(step_text) if step_text else Fraction(1, 10)
        if high < low or step <= 0:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        count = int((high - low) / step) + 1
        return [round(float(low + i * step), 10) for i in range(count)]
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number list: {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--embedding", choices=sorted(EMBEDDINGS), default="token",
                       help="token: extended Kq vocabulary; angular: dual (cos, sin) pairs")
    group.add_argument("--preset", choices=sorted(PRESETS), default="reference",
                       help="reference: 4 layers, 4 heads, d_model 256, FFN 2048; desk: 2, 2, 64, 256")
    group.add_argument("--variant", default=None,
                       help="comma list of post_norm|pre_norm, no_bias|bias, "
                            "sigma002|default_init, dropout01|dropout00")
    group.add_argument("--layers", type=int, help="override the preset (reference: 4)")
    group.add_argument("--heads", type=int, help="override the preset (reference: 4)")
    group.add_argument("--d-model", type=int, help="override the preset (reference: 256)")
    group.add_argument("--d-ffn", type=int, help="override the preset (reference: 2048)")
    group.add_argument("--norm", choices=[n.value for n in NormPlacement],
                       help="layer-norm placement (reference: pre)")
    group.add_argument("--bias", dest="bias", action="store_true", default=None,
                       help="include bias terms (reference: included)")
    group.add_argument("--no-bias", dest="bias", action="store_false")
    group.add_argument("--init", choices=[i.value for i in InitScheme],
                       help="weight initialization (reference: default_kaiming)")
    group.add_argument("--dropout", type=float, help="dropout rate (reference: 0.0)")
    group.add_argument("--pooling", choices=[p.value for p in Pooling],
                       help="sequence pooling before the head (default: mean)")
    group.add_argument("--supervise-both-pairs", action="store_true", default=None,
                       help="angular mode: supervise both angle pairs on every example")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int, default=DEFAULTS.epochs,
                       help=f"(default: {DEFAULTS.epochs})")
    group.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size,
                       help=f"(default: {DEFAULTS.batch_size})")
    group.add_argument("--lr", type=float, default=DEFAULTS.peak_lr,
                       help=f"peak learning rate (default: {DEFAULTS.peak_lr:g})")
    group.add_argument("--warmup-ratio", type=float, default=DEFAULTS.warmup_ratio,
                       help=f"(default: {DEFAULTS.warmup_ratio})")
    group.add_argument("--weight-decay", type=float, default=DEFAULTS.weight_decay,
                       help=f"(default: {DEFAULTS.weight_decay})")
    group.add_argument("--beta1", type=float, default=DEFAULTS.beta1,
                       help=f"(default: {DEFAULTS.beta1})")
    group.add_argument("--beta2", type=float, default=DEFAULTS.beta2,
                       help=f"(default: {DEFAULTS.beta2})")
    group.add_argument("--adam-eps", type=float, default=DEFAULTS.adam_eps,
                       help=f"(default: {DEFAULTS.adam_eps:g})")
    group.add_argument("--precision", choices=["float32", "float64"], default=DEFAULTS.precision,
                       help="training precision (default: float32)")
    group.add_argument("--decay-norm-and-bias", action="store_true",
                       help="also decay layer-norm gains and biases (default: off)")
    group.add_argument("--checkpoint-every", type=int, default=0,
                       help="epoch interval for intermediate checkpoints (0: final only)")
    group.add_argument("--seed", type=int, default=0, help="run seed (default: 0)")
    group.add_argument("--no-progress", action="store_true", help="hide progress bars")


def _add_tau_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tau", type=parse_float_list, default=list(DEFAULT_TAUS),
                        help="tau list for tau-accuracy (default: 0.05,0.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modaddlab",
        description="Modular-addition experiments with an auxiliary modulus Kq.",
    )
    parser.add_argument("--output-root", default=None,
                        help="artifact root (default: $MODADD_OUTPUT_ROOT or ~/.modaddlab/runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a dataset file")
    gen.add_argument("--n", type=int, required=True, help="sequence length N")
    gen.add_argument("--q", type=int, required=True, help="modulus q")
    gen.add_argument("--dist", choices=["uniform", "sparse"], default="uniform",
                     help="input distribution (default: uniform)")
    gen.add_argument("--count", type=int, required=True, help="number of examples")
    gen.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    gen.add_argument("--strict-nonzero", action="store_true",
                     help="sparse only: fill populated positions from 1..q-1")
    gen.add_argument("--out", required=True, help="dataset file (relative to the output root)")

    analyze = sub.add_parser("analyze", help="closed-form wrap and gap tables")
    analyze.add_argument("--n", type=parse_int_list, required=True, help="N values, e.g. 8,16 or 8..32")
    analyze.add_argument("--q", type=parse_int_list, required=True, help="q values")
    analyze.add_argument("--k", type=parse_int_list, default=[2], help="K values (default: 2)")
    analyze.add_argument("--r", type=parse_float_list, default=[0.0], help="r values (default: 0)")
    analyze.add_argument("--mc", type=int, default=None,
                         help="add Monte Carlo cross-check columns with this many samples")
    analyze.add_argument("--seed", type=int, default=0, help="Monte Carlo seed (default: 0)")
    analyze.add_argument("--out", default="analyze.csv")

    heatmap = sub.add_parser("heatmap", help="rho grid with optional measured accuracies")
    heatmap.add_argument("--k-range", type=parse_int_list, default=list(DEFAULT_K_GRID),
                         help="K values (default: 2..10)")
    heatmap.add_argument("--r-range", type=parse_float_list, default=list(DEFAULT_R_GRID),
                         help="r values (default: 0.1..0.9)")
    heatmap.add_argument("--reports", default=None,
                         help="directory of sweep outputs whose metrics.json are joined per cell")
    heatmap.add_argument("--out", default="heatmap.csv")

    train = sub.add_parser("train", help="train one model")
    train.add_argument("--data", required=True, help="training dataset file")
    train.add_argument("--method", choices=["aux", "sparse"], default="aux",
                       help="aux: auxiliary-modulus targets; sparse: baseline with r=0")
    train.add_argument("--k", type=int, default=None,
                       help="auxiliary factor K (default: grid-searched value for (N, q))")
    train.add_argument("--r", type=float, default=None,
                       help="mixing probability r (default: grid-searched value; 0 = ablation)")
    _add_model_flags(train)
    _add_train_flags(train)
    train.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    train.add_argument("--track-train-accuracy", action="store_true",
                       help="record train match accuracy after every epoch")
    train.add_argument("--out", default="train", help="run directory")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--test-data", required=True)
    _add_tau_flag(evaluate)
    evaluate.add_argument("--out", default="eval", help="report directory")

    sweep = sub.add_parser("sweep", help="train and evaluate a (K, r) grid")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--test-data", required=True)
    sweep.add_argument("--k-grid", type=parse_int_list, default=list(SEARCH_K_GRID),
                       help="K grid (default search: 4..9)")
    sweep.add_argument("--r-grid", type=parse_float_list, default=list(SEARCH_R_GRID),
                       help="r grid (default search: 0.1..0.4)")
    _add_model_flags(sweep)
    _add_train_flags(sweep)
    _add_tau_flag(sweep)
    sweep.add_argument("--parallel", type=int, default=1, help="independent cells run at once")
    sweep.add_argument("--baseline", nargs="*", default=[],
                       help="baseline metrics.json files for the gain columns")
    sweep.add_argument("--out", default="sweep", help="sweep directory")
    return parser


def _model_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        "layers": args.layers,
        "heads": args.heads,
        "d_model": args.d_model,
        "d_ffn": args.d_ffn,
        "norm_placement": args.norm,
        "bias": args.bias,
        "init_scheme": args.init,
        "dropout": args.dropout,
        "pooling": args.pooling,
        "supervise_both_pairs": args.supervise_both_pairs,
    }
    return {k: v for k, v in overrides.items() if v is not None}


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        peak_lr=args.lr,
        warmup_ratio=args.warmup_ratio,
        weight_decay=args.weight_decay,
        beta1=args.beta1,
        beta2=args.beta2,
        adam_eps=args.adam_eps,
        seed=args.seed,
        precision=args.precision,
        decay_norm_and_bias=args.decay_norm_and_bias,
        checkpoint_every=args.checkpoint_every,
        show_progress=not args.no_progress,
    )


def run(args: argparse.Namespace) -> None:
    service = ExperimentService(args.output_root)
    if args.command == "gen":
        path, _ = service.generate(
            ProblemSpec(N=args.n, q=args.q),
            args.dist,
            args.count,
            args.seed,
            args.out,
            strict_nonzero=args.strict_nonzero,
        )
        print(path)
    elif args.command == "analyze":
        _, path = service.analyze(
            args.n, args.q, args.k, args.r, mc_samples=args.mc, seed=args.seed, out=args.out
        )
        print(path)
    elif args.command == "heatmap":
        _, path = service.heatmap(args.k_range, args.r_range, reports_dir=args.reports, out=args.out)
        print(path)
    elif args.command == "train":
        outcome = service.train(
            args.data,
            embedding=EMBEDDINGS[args.embedding],
            K=args.k,
            r=args.r,
            method=args.method,
            preset=args.preset,
            variant=args.variant,
            model_overrides=_model_overrides(args),
            train_config=_train_config(args),
            out=args.out,
            resume=args.resume,
            track_train_accuracy=args.track_train_accuracy,
        )
        print(outcome.checkpoint)
    elif args.command == "eval":
        report = service.evaluate(args.checkpoint, args.test_data, taus=args.tau, out=args.out)
        print(f"match_accuracy={report.match_accuracy:.6f}")
        for tau, value in report.tau_accuracy.items():
            print(f"tau_accuracy[{tau}]={value:.6f}")
    elif args.command == "sweep":
        summary = service.sweep(
            args.data,
            args.test_data,
            Ks=args.k_grid,
            rs=args.r_grid,
            embedding=EMBEDDINGS[args.embedding],
            preset=args.preset,
            variant=args.variant,
            model_overrides=_model_overrides(args),
            train_config=_train_config(args),
            taus=args.tau,
            parallel=args.parallel,
            baseline_reports=args.baseline,
            out=args.out,
        )
        print(summary.to_string(index=False))


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("MODADD_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except UserFacingError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        if exc.suggestion:
            print(f"hint: {exc.suggestion}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
