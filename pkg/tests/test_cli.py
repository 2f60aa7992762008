from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from cli import build_parser, main, parse_float_list, parse_int_list
from models.entities import REFERENCE_TRAIN_DEFAULTS, EmbeddingKind, InitScheme, NormPlacement, ProblemSpec
from modules.sampling import read_dataset
from modules.transformer import TransformerModel
from services.experiment_service import ExperimentService, optimal_hyperparameters
from utils.hashing import file_hash
from utils.storage import read_dataset_rows

TINY_MODEL = ["--preset", "desk", "--d-model", "8", "--d-ffn", "16", "--layers", "1", "--heads", "2"]


@pytest.fixture
def root(tmp_path):
    path = tmp_path / "out"
    path.mkdir()
    return path


def _run(root, *argv: str) -> int:
    return main(["--output-root", str(root), *argv])


def _gen(root, name: str, *, n: int = 4, q: int = 7, count: int = 40, seed: int = 1, dist: str = "uniform"):
    code = _run(root, "gen", "--n", str(n), "--q", str(q), "--dist", dist,
                "--count", str(count), "--seed", str(seed), "--out", name)
    assert code == 0
    return root / name


def _train(root, data: str, out: str, *extra: str) -> int:
    return _run(root, "train", "--data", data, *TINY_MODEL, "--epochs", "1", "--batch-size", "16",
                "--k", "2", "--r", "0.5", "--no-progress", "--out", out, *extra)


# ----------------------------------------------------------------- parsing


def test_parse_int_list_forms():
    assert parse_int_list("4..9") == [4, 5, 6, 7, 8, 9]
    assert parse_int_list("8,16,32") == [8, 16, 32]


def test_parse_float_list_forms():
    assert parse_float_list("0.1..0.4") == [0.1, 0.2, 0.3, 0.4]
    assert parse_float_list("0.1..0.9:0.4") == [0.1, 0.5, 0.9]
    assert parse_float_list("0.05,0.1") == [0.05, 0.1]


def test_train_parser_defaults_match_reference_protocol():
    args = build_parser().parse_args(["train", "--data", "d.bin"])
    assert args.epochs == REFERENCE_TRAIN_DEFAULTS.epochs == 10
    assert args.batch_size == 250
    assert args.lr == 3e-5
    assert args.warmup_ratio == 0.05
    assert args.weight_decay == 0.1
    assert (args.beta1, args.beta2, args.adam_eps) == (0.9, 0.999, 1e-8)
    assert args.preset == "reference"
    assert args.k is None and args.r is None


def test_help_annotates_defaults():
    parser = build_parser()
    subparsers = next(a for a in parser._actions if a.dest == "command")
    train_actions = {a.dest: a for a in subparsers.choices["train"]._actions}
    assert train_actions["epochs"].help == "(default: 10)"
    assert "3e-05" in train_actions["lr"].help
    sweep_actions = {a.dest: a for a in subparsers.choices["sweep"]._actions}
    assert sweep_actions["k_grid"].default == [4, 5, 6, 7, 8, 9]
    assert sweep_actions["r_grid"].default == [0.1, 0.2, 0.3, 0.4]


# --------------------------------------------------------------------- gen


def test_gen_writes_dataset_and_manifest(root):
    path = _gen(root, "train.bin", n=8, q=31, count=100, dist="sparse")
    data = read_dataset(path)
    assert len(data) == 100
    assert data.x.shape == (100, 8)
    manifest = json.loads((root / "train.bin.manifest.json").read_text(encoding="utf-8"))
    assert manifest["subcommand"] == "gen"
    assert manifest["seed"] == 1
    assert manifest["output_hashes"]["dataset"] == file_hash(path)


def test_gen_is_byte_deterministic(root):
    a = _gen(root, "a.bin", seed=11, count=64)
    b = _gen(root, "b.bin", seed=11, count=64)
    c = _gen(root, "c.bin", seed=12, count=64)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_gen_sparse_single_summand_strict(root):
    code = _run(root, "gen", "--n", "1", "--q", "5", "--dist", "sparse", "--count", "50",
                "--strict-nonzero", "--out", "one.bin")
    assert code == 0
    data = read_dataset(root / "one.bin")
    assert np.all((data.x != 0).sum(axis=1) == 1)


def test_gen_rejects_invalid_modulus(root, capsys):
    assert _run(root, "gen", "--n", "4", "--q", "1", "--count", "5", "--out", "bad.bin") == 2
    assert "invalid configuration" in capsys.readouterr().err


# ----------------------------------------------------------------- analyze


def test_analyze_gap_prefactors(root):
    assert _run(root, "analyze", "--n", "8,32", "--q", "17,113", "--out", "gap.csv") == 0
    frame = pd.read_csv(root / "gap.csv").set_index(["N", "q"])
    assert frame.loc[(8, 17), "gap_prefactor"] == pytest.approx(0.61, abs=0.01)
    assert frame.loc[(8, 113), "gap_prefactor"] == pytest.approx(0.93, abs=0.005)
    assert frame.loc[(32, 113), "gap_prefactor"] == pytest.approx(0.75, abs=0.005)
    assert (root / "gap.csv.manifest.json").exists()


def test_analyze_two_bits(root):
    assert _run(root, "analyze", "--n", "2", "--q", "2", "--k", "1", "--out", "bits.csv") == 0
    row = pd.read_csv(root / "bits.csv").iloc[0]
    assert row["E_DKq"] == pytest.approx(0.25)
    assert row["E_DKq_exact"] == "1/4"
    assert row["mode"] == "exact"


def test_analyze_with_monte_carlo_columns(root):
    frame, _ = ExperimentService(root).analyze([4], [7], [3], [0.5], mc_samples=20_000, seed=2)
    row = frame.iloc[0]
    assert abs(row["MC_DKq"] - row["E_DKq"]) <= 4 * row["MC_DKq_se"] + 1e-12
    assert row["MC_samples"] == 20_000


# ----------------------------------------------------------------- heatmap


def test_heatmap_default_grid(root):
    assert _run(root, "heatmap") == 0
    frame = pd.read_csv(root / "heatmap.csv")
    assert len(frame) == 81
    cells = frame.set_index(["K", "r"])
    assert bool(cells.loc[(5, 0.4), "in_band"])
    assert cells.loc[(2, 0.1), "rho"] == pytest.approx(1.425)
    assert not bool(cells.loc[(2, 0.1), "in_band"])


# ------------------------------------------------------- train, eval, sweep


def test_train_then_eval(root):
    _gen(root, "train.bin")
    _gen(root, "test.bin", seed=2, count=30)
    assert _train(root, "train.bin", "run") == 0
    run_dir = root / "run"
    checkpoint = run_dir / "checkpoints" / "final.ckpt"
    assert checkpoint.exists()
    history = pd.read_csv(run_dir / "history.csv")
    assert list(history["epoch"]) == [1]
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["spec"] == {"N": 4, "q": 7, "K": 2, "r": 0.5}
    assert manifest["output_hashes"]["checkpoint"] == file_hash(checkpoint)

    code = _run(root, "eval", "--checkpoint", "run/checkpoints/final.ckpt",
                "--test-data", "test.bin", "--tau", "0.05,0.1", "--out", "eval")
    assert code == 0
    metrics = json.loads((root / "eval" / "metrics.json").read_text(encoding="utf-8"))
    assert set(metrics["tau_accuracy"]) == {"0.05", "0.1"}
    assert metrics["total"] == 30
    assert metrics["meta"]["train_samples"] == 40
    strata = pd.read_csv(root / "eval" / "strata.csv")
    assert strata["count"].sum() == 30
    eval_manifest = json.loads((root / "eval" / "manifest.json").read_text(encoding="utf-8"))
    assert eval_manifest["config"]["run_id"] == metrics["meta"]["run_id"]


def _manifest(path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _csv_run_ids(path) -> set:
    return set(pd.read_csv(path, dtype={"run_id": str})["run_id"])


def test_every_output_names_its_manifest(root):
    data_path = _gen(root, "train.bin")
    _gen(root, "test.bin", seed=2, count=30)
    gen_id = _manifest(root / "train.bin.manifest.json")["run_id"]
    header, _ = read_dataset_rows(data_path)
    assert gen_id and header["run_id"] == gen_id

    assert _train(root, "train.bin", "run") == 0
    run_dir = root / "run"
    train_id = _manifest(run_dir / "manifest.json")["run_id"]
    _, ckpt_header, _ = TransformerModel.load_checkpoint(run_dir / "checkpoints" / "final.ckpt")
    assert ckpt_header["extra"]["run_info"]["run_id"] == train_id
    assert _csv_run_ids(run_dir / "history.csv") == {train_id}
    assert _manifest(run_dir / "history.json")["run_id"] == train_id

    assert _run(root, "eval", "--checkpoint", "run/checkpoints/final.ckpt",
                "--test-data", "test.bin", "--out", "eval") == 0
    eval_id = _manifest(root / "eval" / "manifest.json")["run_id"]
    assert _manifest(root / "eval" / "metrics.json")["meta"]["run_id"] == eval_id
    assert _csv_run_ids(root / "eval" / "metrics.csv") == {eval_id}
    assert _csv_run_ids(root / "eval" / "strata.csv") == {eval_id}

    assert _run(root, "analyze", "--n", "8", "--q", "17", "--out", "gap.csv") == 0
    analyze_id = _manifest(root / "gap.csv.manifest.json")["run_id"]
    assert _csv_run_ids(root / "gap.csv") == {analyze_id}
    assert len({gen_id, train_id, eval_id, analyze_id}) == 4


def test_run_id_does_not_depend_on_output_root(tmp_path):
    ids = []
    for name in ("a", "b"):
        service = ExperimentService(tmp_path / name)
        _, manifest = service.generate(ProblemSpec(N=4, q=7), "uniform", 20, 5, "d.bin")
        ids.append(_manifest(manifest)["run_id"])
    assert ids[0] == ids[1]


def test_eval_rejects_foreign_test_set(root, capsys):
    _gen(root, "train.bin")
    _gen(root, "other.bin", q=11, count=10)
    assert _train(root, "train.bin", "run") == 0
    code = _run(root, "eval", "--checkpoint", "run/checkpoints/final.ckpt", "--test-data", "other.bin")
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_missing_dataset_exits_with_error(root):
    assert _run(root, "train", "--data", "nope.bin", *TINY_MODEL) == 1


def test_heatmap_joins_measured_accuracies(root):
    _gen(root, "train.bin")
    _gen(root, "test.bin", seed=2, count=20)
    assert _train(root, "train.bin", "run") == 0
    assert _run(root, "eval", "--checkpoint", "run/checkpoints/final.ckpt",
                "--test-data", "test.bin", "--out", "reports/eval") == 0
    assert _run(root, "heatmap", "--k-range", "2..3", "--r-range", "0.5,0.6",
                "--reports", "reports", "--out", "joined.csv") == 0
    frame = pd.read_csv(root / "joined.csv").set_index(["K", "r"])
    assert len(frame) == 4
    assert 0.0 <= frame.loc[(2, 0.5), "match_accuracy"] <= 1.0
    assert np.isnan(frame.loc[(3, 0.6), "match_accuracy"])


def test_train_resume_continues_from_epoch_checkpoint(root):
    _gen(root, "train.bin")
    args = ("--epochs", "2", "--checkpoint-every", "1")
    assert _run(root, "train", "--data", "train.bin", *TINY_MODEL, "--batch-size", "16",
                "--k", "2", "--r", "0.5", "--no-progress", "--out", "straight", *args) == 0
    assert _run(root, "train", "--data", "train.bin", *TINY_MODEL, "--batch-size", "16",
                "--k", "2", "--r", "0.5", "--no-progress", "--out", "resumed", *args) == 0
    resumed_dir = root / "resumed" / "checkpoints"
    assert (resumed_dir / "epoch_001.ckpt").exists()
    (resumed_dir / "final.ckpt").unlink()
    assert _run(root, "train", "--data", "train.bin", *TINY_MODEL, "--batch-size", "16",
                "--k", "2", "--r", "0.5", "--no-progress", "--out", "resumed", "--resume", *args) == 0

    straight, _, _ = TransformerModel.load_checkpoint(root / "straight" / "checkpoints" / "final.ckpt")
    resumed, _, _ = TransformerModel.load_checkpoint(resumed_dir / "final.ckpt")
    for name, param in straight.params.items():
        assert np.array_equal(param.values, resumed.params[name].values), name
    straight_history = pd.read_csv(root / "straight" / "history.csv")
    resumed_history = pd.read_csv(root / "resumed" / "history.csv")
    assert list(resumed_history["mean_loss"]) == list(straight_history["mean_loss"])


def test_sweep_records_cells(root):
    _gen(root, "train.bin", count=32)
    _gen(root, "test.bin", seed=2, count=16)
    code = _run(root, "sweep", "--data", "train.bin", "--test-data", "test.bin",
                "--k-grid", "2", "--r-grid", "0.2,0.4", *TINY_MODEL, "--epochs", "1",
                "--batch-size", "16", "--no-progress", "--out", "sweep")
    assert code == 0
    cells = pd.read_csv(root / "sweep" / "cells.csv")
    assert list(cells["status"]) == ["ok", "ok"]
    assert (root / "sweep" / "K2_r0.2" / "eval" / "metrics.json").exists()
    summary = pd.read_csv(root / "sweep" / "summary.csv")
    assert summary.iloc[0]["cells"] == 2
    sweep_id = _manifest(root / "sweep" / "manifest.json")["run_id"]
    assert _csv_run_ids(root / "sweep" / "cells.csv") == {sweep_id}
    assert _csv_run_ids(root / "sweep" / "summary.csv") == {sweep_id}


def test_sweep_failed_cell_is_recorded_not_fatal(root):
    _gen(root, "train.bin", count=32)
    _gen(root, "test.bin", seed=2, count=16)
    summary = ExperimentService(root).sweep(
        "train.bin",
        "test.bin",
        Ks=[0, 2],
        rs=[0.3],
        preset="desk",
        model_overrides={"d_model": 8, "d_ffn": 16, "layers": 1, "heads": 2},
        train_config=REFERENCE_TRAIN_DEFAULTS.model_copy(
            update={"epochs": 1, "batch_size": 16, "show_progress": False}
        ),
        out="sweep",
    )
    cells = pd.read_csv(root / "sweep" / "cells.csv").set_index("K")
    assert cells.loc[0, "status"] == "failed"
    assert isinstance(cells.loc[0, "error"], str) and cells.loc[0, "error"]
    assert cells.loc[2, "status"] == "ok"
    assert summary.iloc[0]["cells"] == 1
    manifest = json.loads((root / "sweep" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["failed_cells"] == 1


# ---------------------------------------------------------- configuration


def test_variants_preset_applies_tokens(root):
    config = ExperimentService(root).resolve_model_config(
        ProblemSpec(N=8, q=31, K=5, r=0.2),
        "token_extended",
        preset="variants",
        variant="post_norm,no_bias,sigma002,dropout01",
    )
    assert config.norm_placement is NormPlacement.POST
    assert config.bias is False
    assert config.init_scheme is InitScheme.SIGMA_002
    assert config.dropout == 0.1
    assert (config.layers, config.heads, config.d_model, config.d_ffn) == (4, 4, 256, 2048)


def test_default_aux_hyperparameters_come_from_grid_search(root):
    assert optimal_hyperparameters(EmbeddingKind.TOKEN_EXTENDED, 8, 31) == (5, 0.2)
    assert optimal_hyperparameters("dual_angular", 128, 974269) == (8, 0.3)
    assert optimal_hyperparameters("token_extended", 4, 7) is None

    _gen(root, "train.bin", n=8, q=31, count=16)
    outcome = ExperimentService(root).train(
        "train.bin",
        preset="desk",
        model_overrides={"d_model": 8, "d_ffn": 16, "layers": 1, "heads": 2},
        train_config=REFERENCE_TRAIN_DEFAULTS.model_copy(
            update={"epochs": 1, "batch_size": 16, "show_progress": False}
        ),
        out="tuned",
    )
    manifest = json.loads(outcome.manifest.read_text(encoding="utf-8"))
    assert (manifest["config"]["spec"]["K"], manifest["config"]["spec"]["r"]) == (5, 0.2)


def test_sparse_method_trains_without_auxiliary_target(root):
    _gen(root, "train.bin", count=16, dist="sparse")
    outcome = ExperimentService(root).train(
        "train.bin",
        method="sparse",
        preset="desk",
        model_overrides={"d_model": 8, "d_ffn": 16, "layers": 1, "heads": 2},
        train_config=REFERENCE_TRAIN_DEFAULTS.model_copy(
            update={"epochs": 1, "batch_size": 16, "show_progress": False}
        ),
        out="baseline",
    )
    assert outcome.history.aux_frequency_overall == 0.0
    manifest = json.loads(outcome.manifest.read_text(encoding="utf-8"))
    assert manifest["config"]["method"] == "sparse"
    assert manifest["config"]["spec"]["r"] == 0.0
