from __future__ import annotations

import math

import numpy as np
import pytest

from models.entities import (
    EmbeddingKind,
    InitScheme,
    InputVector,
    ModelConfig,
    ModulusKind,
    NormPlacement,
    Pooling,
    ProblemSpec,
    TrainingTarget,
)
from modules.autodiff import Tensor, grad_check
from modules.transformer import (
    ModelOutput,
    TargetBatch,
    TransformerModel,
    angular_features,
    architecture_variants,
    apply_variant,
    build_model,
    decode_angular,
    decode_token,
    encode_angular,
    forward,
    parameter_count,
)
from utils.error_handling import (
    ConfigMismatchError,
    DatasetValidationError,
    NonFiniteError,
    ShapeMismatchError,
    SpecValidationError,
)
from utils.rng import Stream, make_rng
from utils.storage import read_arrays, write_arrays


def batch_targets(y_total: np.ndarray, q: int, K: int, is_aux: np.ndarray) -> TargetBatch:
    return TargetBatch(y_q=y_total % q, y_kq=y_total % (K * q), is_aux=is_aux)


# ------------------------------------------------------------- encoding


def test_encode_angular_examples():
    assert np.allclose(angular_features(np.array(0), 97, 5), [1.0, 0.0, 1.0, 0.0])
    assert np.allclose(angular_features(np.array(2), 4, 2), [-1.0, 0.0, 0.0, 1.0], atol=1e-12)


def test_angular_pairs_have_unit_norm():
    features = angular_features(np.arange(97), 97, 5)
    assert np.allclose(features[:, 0] ** 2 + features[:, 1] ** 2, 1.0, atol=1e-6)
    assert np.allclose(features[:, 2] ** 2 + features[:, 3] ** 2, 1.0, atol=1e-6)


def test_angular_round_trip_for_every_modulus_up_to_1024():
    for q in range(2, 1025):
        y = np.arange(q)
        cos, sin = encode_angular(y, q)
        pairs = np.stack([cos, sin], axis=1)
        _, s_round = decode_angular(pairs, q)
        assert np.array_equal(s_round, y), q


def test_decode_angular_examples():
    s_hat, s_round = decode_angular(np.array([1.0, 0.0, 0.3, 0.3]), 97)
    assert s_hat == 0.0
    assert s_round == 0
    cos, sin = encode_angular(50, 97)
    assert decode_angular(np.array([cos, sin, 0.0, 0.0]), 97)[1] == 50
    cos, sin = encode_angular(96.7, 97)
    s_hat, s_round = decode_angular(np.array([cos, sin]), 97)
    assert s_hat == pytest.approx(96.7)
    assert s_round == 0


def test_decode_angular_rounds_ties_up():
    # atan2(1, 1) is pi/4, which sits exactly halfway between residues 0 and 1 when q = 4
    s_hat, s_round = decode_angular(np.array([1.0, 1.0]), 4)
    assert s_hat == 0.5
    assert s_round == 1
    assert decode_angular(np.array([[2.0, 2.0]]), 4)[1].tolist() == [1]


def test_decode_angular_rejects_degenerate_pair():
    with pytest.raises(SpecValidationError):
        decode_angular(np.array([0.0, 0.0, 1.0, 0.0]), 97)


def test_decode_angular_scale_does_not_matter():
    cos, sin = encode_angular(13, 31)
    assert decode_angular(np.array([5 * cos, 5 * sin]), 31)[1] == 13


def test_decode_token_examples():
    q = 10
    logits = np.zeros(30)
    logits[3] = 2.0
    assert decode_token(logits, q) == 3
    logits = np.zeros(30)
    logits[q + 2] = 9.0
    logits[5] = 1.0
    assert decode_token(logits, q) == 5
    logits = np.zeros(30)
    logits[[2, 7]] = 4.0
    assert decode_token(logits, q) == 2


def test_decode_token_needs_q_logits():
    with pytest.raises(ShapeMismatchError):
        decode_token(np.zeros(4), 5)


# ------------------------------------------------------------ configs


def test_reference_scale_parameter_count():
    config = ModelConfig(spec=ProblemSpec(N=8, q=31, K=5))
    # embedding 155*256, 4 layers of 1_315_072, final norm 512, head 256*155 + 155
    assert parameter_count(config) == 5_340_315
    assert build_model(config).num_parameters == 5_340_315


def test_parameter_count_matches_checkpoint_for_every_variant(tmp_path, tiny_token_config, tiny_angular_config):
    for base in (tiny_token_config.model_copy(update={"layers": 2}), tiny_angular_config):
        configs = architecture_variants(base)
        assert len(configs) == 16
        assert len({(c.norm_placement, c.bias, c.init_scheme, c.dropout) for c in configs}) == 16
        for index, config in enumerate(configs):
            path = build_model(config, seed=index).save_checkpoint(tmp_path / f"{index}.ckpt")
            _, arrays = read_arrays(path)
            assert sum(a.size for a in arrays.values()) == parameter_count(config)


def test_sigma_init_standard_deviation(tiny_spec):
    config = ModelConfig(spec=tiny_spec, layers=1, init_scheme=InitScheme.SIGMA_002)
    weight = build_model(config).params["layers.0.ffn.w1.weight"].values
    assert weight.shape == (256, 2048)
    assert abs(weight.std() - 0.02) <= 0.002


def test_kaiming_init_scales_with_fan_in(tiny_spec):
    model = build_model(ModelConfig(spec=tiny_spec, layers=1, d_model=64, heads=4, d_ffn=128))
    weight = model.params["layers.0.ffn.w2.weight"].values
    assert np.abs(weight).max() <= 1 / math.sqrt(128) + 1e-7
    assert np.all(model.params["layers.0.ffn.w2.bias"].values == 0)
    assert np.all(model.params["layers.0.ln1.weight"].values == 1)


def test_no_bias_arrays_without_bias(tmp_path, tiny_token_config):
    config = tiny_token_config.model_copy(update={"bias": False})
    path = build_model(config).save_checkpoint(tmp_path / "nobias.ckpt")
    header, _ = read_arrays(path)
    assert header["parameters"]
    assert not [name for name in header["parameters"] if name.endswith(".bias")]


def test_apply_variant_tokens(tiny_token_config):
    config = apply_variant(tiny_token_config, "post_norm,no_bias,sigma002,dropout01")
    assert config.norm_placement is NormPlacement.POST
    assert config.bias is False
    assert config.init_scheme is InitScheme.SIGMA_002
    assert config.dropout == 0.1
    with pytest.raises(SpecValidationError):
        apply_variant(tiny_token_config, "layer_scale")
    with pytest.raises(SpecValidationError):
        apply_variant(tiny_token_config, ["pre_norm", "post_norm"])


def test_heads_must_divide_width(tiny_spec):
    with pytest.raises(ValueError):
        ModelConfig(spec=tiny_spec, heads=3, d_model=8)


def test_unusual_dropout_is_flagged(tiny_spec, caplog):
    ModelConfig(spec=tiny_spec, dropout=0.3)
    assert "dropout=0.3" in caplog.text


def test_no_decay_names(tiny_token_config):
    names = build_model(tiny_token_config).no_decay_names()
    assert "layers.0.ln1.weight" in names
    assert "final_ln.weight" in names
    assert "head.bias" in names
    assert "head.weight" not in names
    assert "embed.table" not in names


# -------------------------------------------------------------- forward


def test_embedding_table_has_kq_rows(tiny_token_config):
    model = build_model(tiny_token_config)
    assert model.params["embed.table"].shape == (14, 8)
    h = model.embed_token_extended(np.array([[1, 1, 3, 6]]))
    assert np.array_equal(h.values[0, 0], h.values[0, 1])


@pytest.mark.parametrize("kind", ["token", "angular"])
def test_inputs_outside_base_range_are_rejected(kind, tiny_token_config, tiny_angular_config):
    config = tiny_token_config if kind == "token" else tiny_angular_config
    with pytest.raises(SpecValidationError):
        build_model(config).forward(np.array([[0, 1, 2, 7]]))


def test_forward_rejects_wrong_length(tiny_token_config):
    with pytest.raises(ShapeMismatchError):
        build_model(tiny_token_config).forward(np.array([[0, 1, 2]]))


def test_output_widths(tiny_token_config, tiny_angular_config):
    x = np.array([[0, 1, 2, 3], [6, 6, 6, 6]])
    assert forward(build_model(tiny_token_config), x).values.shape == (2, 14)
    assert forward(build_model(tiny_angular_config), x).values.shape == (2, 4)


def test_forward_accepts_input_vectors(tiny_token_config):
    model = build_model(tiny_token_config)
    vectors = [InputVector(entries=[1, 2, 3, 4], q=7), InputVector(entries=[0, 0, 0, 6], q=7)]
    assert np.array_equal(
        model.predict(vectors).values, model.predict(np.array([[1, 2, 3, 4], [0, 0, 0, 6]])).values
    )


@pytest.mark.parametrize("norm", [NormPlacement.PRE, NormPlacement.POST])
@pytest.mark.parametrize("kind", [EmbeddingKind.TOKEN_EXTENDED, EmbeddingKind.DUAL_ANGULAR])
def test_mean_pooling_is_permutation_invariant(kind, norm):
    spec = ProblemSpec(N=8, q=31, K=5)
    config = ModelConfig(spec=spec, embedding_kind=kind, layers=2, heads=2, d_model=16, d_ffn=32, norm_placement=norm)
    model = build_model(config, seed=4)
    rng = make_rng(4, Stream.DATA)
    x = rng.integers(0, 31, size=(16, 8))
    perm = rng.permutation(8)
    a = model.predict(x).values
    b = model.predict(x[:, perm]).values
    assert a.dtype == np.float32
    assert np.max(np.abs(a - b)) <= 1e-5


def test_last_token_pooling_sees_order(tiny_token_config):
    model = build_model(tiny_token_config.model_copy(update={"pooling": Pooling.LAST_TOKEN}), seed=1)
    x = np.array([[0, 1, 2, 3]])
    assert not np.allclose(model.predict(x).values, model.predict(x[:, ::-1]).values)


def test_dropout_only_with_generator(tiny_token_config):
    model = build_model(tiny_token_config.model_copy(update={"dropout": 0.1}), seed=2)
    x = np.array([[0, 1, 2, 3], [4, 5, 6, 0]])
    assert np.array_equal(model.forward(x).values, model.forward(x).values)
    assert not np.array_equal(
        model.forward(x, rng=make_rng(0, Stream.DROPOUT)).values, model.forward(x).values
    )


def test_model_output_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ModelOutput(kind=EmbeddingKind.DUAL_ANGULAR, values=np.array([[np.nan, 0, 0, 0]]))


def test_model_output_decode_token():
    logits = np.zeros((1, 14))
    logits[0, 9] = 3.0
    logits[0, 4] = 1.0
    preds, continuous = ModelOutput(kind=EmbeddingKind.TOKEN_EXTENDED, values=logits).decode(7)
    assert preds.tolist() == [4]
    assert continuous.tolist() == [4.0]


# ----------------------------------------------------------------- loss


def test_uniform_logits_give_log_kq(tiny_token_config):
    model = build_model(tiny_token_config, precision="float64")
    model.params["head.weight"].values[...] = 0.0
    model.params["head.bias"].values[...] = 0.0
    x = np.array([[1, 2, 3, 4], [6, 6, 6, 6]])
    targets = batch_targets(x.sum(axis=1), 7, 2, np.array([False, True]))
    assert model.loss(model.forward(x), targets).item() == pytest.approx(math.log(14))


def test_angular_loss_is_zero_on_exact_target(tiny_angular_config):
    model = build_model(tiny_angular_config, precision="float64")
    targets = batch_targets(np.array([0, 9]), 7, 2, np.array([False, True]))
    exact = np.zeros((2, 4))
    exact[:, 0], exact[:, 1] = encode_angular(targets.y_q, 7)
    exact[:, 2], exact[:, 3] = encode_angular(targets.y_kq, 14)
    assert model.loss(Tensor(exact), targets).item() == 0.0
    assert np.allclose(exact[0, :2], [1.0, 0.0])


def test_unselected_angular_pair_gets_zero_gradient(tiny_angular_config):
    model = build_model(tiny_angular_config, precision="float64", seed=5)
    x = np.array([[1, 2, 3, 4], [6, 5, 4, 3], [0, 0, 0, 1]])
    primary_only = batch_targets(x.sum(axis=1), 7, 2, np.zeros(3, dtype=bool))
    model.loss(model.forward(x), primary_only).backward()
    assert np.all(model.params["head.weight"].grad[:, 2:] == 0.0)
    assert np.all(model.params["head.bias"].grad[2:] == 0.0)
    assert np.any(model.params["head.weight"].grad[:, :2] != 0.0)


def test_supervising_both_pairs_reaches_the_auxiliary_head(tiny_angular_config):
    config = tiny_angular_config.model_copy(update={"supervise_both_pairs": True})
    model = build_model(config, precision="float64", seed=5)
    x = np.array([[1, 2, 3, 4]])
    model.loss(model.forward(x), batch_targets(x.sum(axis=1), 7, 2, np.zeros(1, dtype=bool))).backward()
    assert np.any(model.params["head.weight"].grad[:, 2:] != 0.0)


def test_loss_checks_label_ranges_and_congruence(tiny_token_config):
    model = build_model(tiny_token_config)
    out = model.forward(np.array([[1, 2, 3, 4]]))
    with pytest.raises(SpecValidationError):
        model.loss(out, TargetBatch(np.array([7]), np.array([7]), np.array([False])))
    with pytest.raises(SpecValidationError):
        model.loss(out, TargetBatch(np.array([3]), np.array([17]), np.array([True])))
    with pytest.raises(DatasetValidationError):
        model.loss(out, TargetBatch(np.array([3]), np.array([4]), np.array([True])))


def test_loss_for_single_target(tiny_token_config):
    model = build_model(tiny_token_config, precision="float64")
    out = model.forward(np.array([[3, 4, 5, 0]]))
    target = TrainingTarget(value=12, modulus_kind=ModulusKind.AUXILIARY_KQ)
    batch = TargetBatch.from_targets([target], 7)
    assert (batch.y_q.tolist(), batch.classes().tolist()) == ([5], [12])
    assert model.loss_for_target(out, target).item() == pytest.approx(model.loss(out, batch).item())


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", [EmbeddingKind.TOKEN_EXTENDED, EmbeddingKind.DUAL_ANGULAR])
def test_one_layer_model_loss_gradients(kind, seed):
    spec = ProblemSpec(N=4, q=7, K=2, r=0.5)
    norm = NormPlacement.PRE if seed % 2 else NormPlacement.POST
    config = ModelConfig(
        spec=spec, embedding_kind=kind, layers=1, heads=2, d_model=4, d_ffn=8, norm_placement=norm
    )
    model = build_model(config, seed=seed, precision="float64")
    rng = make_rng(seed, Stream.GRAD_CHECK)
    x = rng.integers(0, 7, size=(3, 4))
    targets = batch_targets(x.sum(axis=1), 7, 2, rng.random(3) < 0.5)
    report = grad_check(
        lambda: model.loss(model.forward(x), targets),
        model.params,
        tol=1e-4,
        max_entries=12,
        rng=rng,
    )
    assert report.passed, report


# ---------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, tiny_angular_config):
    model = build_model(tiny_angular_config, seed=8)
    path = model.save_checkpoint(
        tmp_path / "model.ckpt", extra={"epoch": 3}, extra_arrays={"adam.m/head.bias": np.ones(4)}
    )
    loaded, header, extras = TransformerModel.load_checkpoint(path)
    assert header["extra"] == {"epoch": 3}
    assert np.array_equal(extras["adam.m/head.bias"], np.ones(4))
    assert loaded.config == model.config
    x = np.array([[0, 1, 2, 3]])
    assert np.array_equal(loaded.predict(x).values, model.predict(x).values)


def test_checkpoint_with_tampered_config_is_rejected(tmp_path, tiny_token_config):
    path = build_model(tiny_token_config).save_checkpoint(tmp_path / "model.ckpt")
    header, arrays = read_arrays(path)
    header.pop("arrays")
    header["config"]["d_ffn"] = 32
    write_arrays(path, header, arrays)
    with pytest.raises(ConfigMismatchError):
        TransformerModel.load_checkpoint(path)


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    path = write_arrays(tmp_path / "other.bin", {"kind": "dataset"}, {"x": np.zeros(2)})
    with pytest.raises(ConfigMismatchError):
        TransformerModel.load_checkpoint(path)


def test_build_is_deterministic(tiny_token_config):
    a = TransformerModel.build(tiny_token_config, seed=3)
    b = TransformerModel.build(tiny_token_config, seed=3)
    c = TransformerModel.build(tiny_token_config, seed=4)
    assert all(np.array_equal(a.params[n].values, b.params[n].values) for n in a.params)
    assert not np.array_equal(a.params["embed.table"].values, c.params["embed.table"].values)
    assert a.config_hash == b.config_hash
