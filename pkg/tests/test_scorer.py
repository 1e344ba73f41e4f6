"""Scorer forward/backward behavior plus the checkpoint round trip."""
import struct

import numpy as np
import pytest

from kermit import objective
from kermit.canvas import Canvas, PairedExample, Sequence
from kermit.checkpoint import load_checkpoint, save_checkpoint
from kermit.errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    InvalidInputError,
    LengthError,
)
from kermit.objective import TrainingMode, build_training_instance
from kermit.order_prior import OrderPrior
from kermit.scorer import (
    Scorer,
    ScorerConfig,
    forward,
    init_parameters,
    loss_and_gradients,
    parameter_shapes,
)

TINY = ScorerConfig(vocab_size=10, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16)


@pytest.fixture(scope="module")
def tiny_params():
    return init_parameters(TINY, seed=7)


def canvases_for_tests():
    return [
        Canvas(()),
        Canvas((6,)),
        Canvas((7, 8, 6)),
        Canvas((6, 7, 8, 9, 6), frozen=frozenset({0, 2})),
    ]


# --- configuration -------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ScorerConfig(vocab_size=6)
    with pytest.raises(ConfigError):
        ScorerConfig(vocab_size=10, d_model=6, n_heads=4)
    with pytest.raises(ConfigError):
        ScorerConfig(vocab_size=10, dropout=1.0)
    with pytest.raises(ConfigError):
        ScorerConfig(vocab_size=10, n_layers=0)


def test_boundary_row_is_last_embedding_row(tiny_params):
    assert TINY.boundary_id == TINY.vocab_size
    assert tiny_params.tensors["embed_tokens"].shape == (TINY.vocab_size + 1, TINY.d_model)


# --- initialization ------------------------------------------------------

def test_init_covers_declared_shapes(tiny_params):
    shapes = parameter_shapes(TINY)
    assert set(tiny_params.tensors) == set(shapes)
    for name, arr in tiny_params.tensors.items():
        assert arr.shape == shapes[name]
        assert arr.dtype == np.float64


def test_init_scale_matches_fan_in():
    config = ScorerConfig(vocab_size=40)
    params = init_parameters(config, seed=0)
    std = params.tensors["layers.0.wq"].std()
    expected = 1.0 / np.sqrt(64)
    assert abs(std - expected) < 0.2 * expected
    assert np.all(params.tensors["layers.0.ln1.g"] == 1.0)
    assert np.all(params.tensors["layers.0.bq"] == 0.0)
    assert np.all(params.tensors["content.b"] == 0.0)


def test_init_deterministic():
    a = init_parameters(TINY, seed=3)
    b = init_parameters(TINY, seed=3)
    c = init_parameters(TINY, seed=4)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert not np.array_equal(a.tensors["layers.0.wq"], c.tensors["layers.0.wq"])


# --- forward pass --------------------------------------------------------

def test_forward_shapes(tiny_params):
    outs = forward(tiny_params, canvases_for_tests())
    for canvas, out in zip(canvases_for_tests(), outs):
        assert out.num_slots == len(canvas.kept) + 1
        assert out.content.shape == (out.num_slots, TINY.vocab_size)
        assert np.isfinite(out.content).all() and np.isfinite(out.location).all()


def test_forward_deterministic(tiny_params):
    a = forward(tiny_params, canvases_for_tests())
    b = forward(tiny_params, canvases_for_tests())
    for x, y in zip(a, b):
        assert np.array_equal(x.content, y.content)
        assert np.array_equal(x.location, y.location)


def test_padding_does_not_change_logits(tiny_params):
    short = Canvas((7, 8))
    alone = forward(tiny_params, [short])[0]
    long = Canvas((6, 9, 6, 7, 8, 9, 7, 8, 9, 6))
    padded = forward(tiny_params, [short, long])[0]
    np.testing.assert_allclose(padded.content, alone.content, rtol=0, atol=1e-12)
    np.testing.assert_allclose(padded.location, alone.location, rtol=0, atol=1e-12)


def test_batch_order_irrelevant(tiny_params):
    cs = canvases_for_tests()
    fwd = forward(tiny_params, cs)
    rev = forward(tiny_params, cs[::-1])[::-1]
    for x, y in zip(fwd, rev):
        np.testing.assert_allclose(x.content, y.content, rtol=0, atol=1e-12)
        np.testing.assert_allclose(x.location, y.location, rtol=0, atol=1e-12)


def test_scorer_reads_right_context(tiny_params):
    base = forward(tiny_params, [Canvas((6, 7, 8))])[0]
    changed = forward(tiny_params, [Canvas((6, 7, 9))])[0]
    # slot 0 sits left of the edited token; attention is unmasked
    assert not np.allclose(base.content[0], changed.content[0])
    assert not np.allclose(base.location[:2], changed.location[:2])


def test_frozen_flags_do_not_change_logits(tiny_params):
    plain = forward(tiny_params, [Canvas((6, 7, 8))])[0]
    frozen = forward(tiny_params, [Canvas((6, 7, 8), frozen=frozenset({1}))])[0]
    assert np.array_equal(plain.content, frozen.content)
    assert np.array_equal(plain.location, frozen.location)


def test_forward_rejects_bad_input(tiny_params):
    with pytest.raises(InvalidInputError):
        forward(tiny_params, [])
    with pytest.raises(InvalidInputError):
        forward(tiny_params, [Canvas((TINY.vocab_size,))])
    with pytest.raises(LengthError):
        forward(tiny_params, [Canvas(tuple([6] * (TINY.max_len - 1)))])


def test_scorer_class_wraps_forward(tiny_params):
    scorer = Scorer(tiny_params)
    assert scorer.config is TINY
    assert scorer.max_canvas_len == TINY.max_len - 2
    out = scorer([Canvas((7,))])
    ref = forward(tiny_params, [Canvas((7,))])
    assert np.array_equal(out[0].content, ref[0].content)


def test_scorer_plugs_into_exact_bounds(tiny_params):
    scorer = Scorer(tiny_params)
    x = Sequence((7, 9, 6))
    prior = OrderPrior.uniform()
    elbo = objective.exact_elbo(x, scorer, prior)
    ll = objective.exact_log_likelihood(x, scorer, prior)
    assert np.isfinite(elbo) and np.isfinite(ll)
    assert elbo <= ll + 1e-12


# --- loss and gradients --------------------------------------------------

def make_instances(seed=11):
    rng = np.random.default_rng(seed)
    prior = OrderPrior.binary_tree(1.0)
    pair = PairedExample.pair(Sequence((6, 7, 8, 9)), Sequence((9, 8, 7)))
    out = []
    for mode in (TrainingMode.JOINT, TrainingMode.COND_Y_GIVEN_X, TrainingMode.MARGINAL_X):
        out.append(build_training_instance(pair, mode, prior, rng))
    return out


def test_loss_matches_reference_implementation(tiny_params):
    instances = make_instances()
    lam = 0.7
    got, _ = loss_and_gradients(tiny_params, instances, lambda_finish=lam)
    parts = []
    for canvas, targets, n_loss in instances:
        logits = forward(tiny_params, [canvas])[0]
        parts.append(objective.loss(logits, targets, lambda_finish=lam, n_loss=n_loss))
    want = objective.LossBreakdown.combine(parts)
    assert got.tokens_in_targets == want.tokens_in_targets
    assert got.n_loss == want.n_loss
    assert got.content_nll == pytest.approx(want.content_nll, abs=1e-9)
    assert got.location_nll == pytest.approx(want.location_nll, abs=1e-9)
    assert got.finish_nll == pytest.approx(want.finish_nll, abs=1e-9)
    assert got.total == pytest.approx(want.total, abs=1e-9)


def test_gradients_cover_all_parameters(tiny_params):
    _, grads = loss_and_gradients(tiny_params, make_instances(), lambda_finish=1.0)
    shapes = parameter_shapes(TINY)
    assert set(grads) == set(shapes)
    for name, g in grads.items():
        assert g.shape == shapes[name]
        assert np.isfinite(g).all()
    assert np.abs(grads["content.w"]).max() > 0.0


def test_duplicated_instance_doubles_its_gradient(tiny_params):
    single = make_instances()[:1]
    _, g1 = loss_and_gradients(tiny_params, single, lambda_finish=0.5)
    _, g2 = loss_and_gradients(tiny_params, single + single, lambda_finish=0.5)
    for name in g1:
        np.testing.assert_allclose(g2[name], 2.0 * g1[name], rtol=1e-9, atol=1e-12)


def test_gradients_deterministic(tiny_params):
    _, a = loss_and_gradients(tiny_params, make_instances(), lambda_finish=1.0)
    _, b = loss_and_gradients(tiny_params, make_instances(), lambda_finish=1.0)
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_gradients_match_finite_differences():
    params = init_parameters(TINY, seed=19)
    instances = make_instances(seed=23)
    lam = 0.9

    def objective_value():
        got, _ = loss_and_gradients(params, instances, lambda_finish=lam)
        return got.total

    _, grads = loss_and_gradients(params, instances, lambda_finish=lam)
    rng = np.random.default_rng(5)
    h = 1e-5
    checked = 0
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        for k in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + h
            fp = objective_value()
            flat[k] = orig - h
            fm = objective_value()
            flat[k] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = grads[name].reshape(-1)[k]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            assert err < 1e-4, f"{name}[{k}]: analytic {analytic}, numeric {numeric}"
            checked += 1
    assert checked >= 70


def test_loss_rejects_mismatched_targets(tiny_params):
    canvas, targets, n_loss = make_instances()[0]
    wrong = Canvas(canvas.kept + (6,))
    with pytest.raises(InvalidInputError):
        loss_and_gradients(tiny_params, [(wrong, targets, n_loss)], lambda_finish=1.0)
    with pytest.raises(InvalidInputError):
        loss_and_gradients(tiny_params, [], lambda_finish=1.0)


def test_dropout_only_active_with_generator():
    config = ScorerConfig(
        vocab_size=10, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16, dropout=0.4
    )
    params = init_parameters(config, seed=2)
    instances = make_instances()
    plain_a, _ = loss_and_gradients(params, instances, lambda_finish=1.0)
    plain_b, _ = loss_and_gradients(params, instances, lambda_finish=1.0)
    assert plain_a.total == plain_b.total
    drop_a, _ = loss_and_gradients(
        params, instances, lambda_finish=1.0, dropout_rng=np.random.default_rng(0)
    )
    drop_b, _ = loss_and_gradients(
        params, instances, lambda_finish=1.0, dropout_rng=np.random.default_rng(0)
    )
    drop_c, _ = loss_and_gradients(
        params, instances, lambda_finish=1.0, dropout_rng=np.random.default_rng(1)
    )
    assert drop_a.total == drop_b.total
    assert drop_a.total != plain_a.total
    assert drop_a.total != drop_c.total
    out_a = forward(params, [Canvas((6, 7))])
    out_b = forward(params, [Canvas((6, 7))])
    assert np.array_equal(out_a[0].content, out_b[0].content)


# --- checkpoints ---------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tiny_params, tmp_path):
    path = tmp_path / "model.kermit"
    save_checkpoint(tiny_params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == TINY
    assert set(loaded.tensors) == set(tiny_params.tensors)
    for name, arr in tiny_params.tensors.items():
        assert loaded.tensors[name].dtype == np.float64
        assert arr.tobytes() == loaded.tensors[name].tobytes()
    out_a = forward(tiny_params, [Canvas((7, 8))])[0]
    out_b = forward(loaded, [Canvas((7, 8))])[0]
    assert np.array_equal(out_a.content, out_b.content)


def saved_blob(params, tmp_path):
    path = tmp_path / "ok.kermit"
    save_checkpoint(params, path)
    return path, path.read_bytes()


def test_checkpoint_rejects_bad_magic(tiny_params, tmp_path):
    path, blob = saved_blob(tiny_params, tmp_path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tiny_params, tmp_path):
    path, blob = saved_blob(tiny_params, tmp_path)
    path.write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tiny_params, tmp_path):
    path, blob = saved_blob(tiny_params, tmp_path)
    path.write_bytes(blob[:-17])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(blob[:7])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tiny_params, tmp_path):
    path, blob = saved_blob(tiny_params, tmp_path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_corrupt_config(tiny_params, tmp_path):
    path, blob = saved_blob(tiny_params, tmp_path)
    path.write_bytes(blob[:10] + b"X" + blob[11:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_shape(tmp_path):
    params = init_parameters(TINY, seed=1)
    params.tensors["slot.b"] = np.zeros(TINY.d_model + 1)
    path = tmp_path / "bad.kermit"
    save_checkpoint(params, path)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_tensor(tmp_path):
    params = init_parameters(TINY, seed=1)
    params.tensors["extra"] = np.zeros(3)
    path = tmp_path / "bad.kermit"
    save_checkpoint(params, path)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_rejects_missing_tensor(tmp_path):
    params = init_parameters(TINY, seed=1)
    del params.tensors["loc.b"]
    path = tmp_path / "bad.kermit"
    save_checkpoint(params, path)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)
