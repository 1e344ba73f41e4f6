import math
from itertools import product

import numpy as np
import pytest
from scipy.special import log_softmax

from conftest import ConstScorer, FakeScorer
from kermit.canvas import (
    EOS_X_ID,
    EOS_Y_ID,
    NO_INSERT_ID,
    NUM_RESERVED,
    PairedExample,
    Sequence,
    slot_spans,
)
from kermit.errors import InvalidInputError, NumericError, SizeLimitError
from kermit.objective import (
    LossBreakdown,
    TrainingMode,
    build_training_instance,
    elbo_terms,
    estimate_elbo,
    exact_elbo,
    exact_log_likelihood,
    frozen_slots_for,
    insertion_mass_log,
    loss,
    mode_layout,
    terminated_log_likelihood,
)
from kermit.order_prior import (
    OrderPrior,
    SlotTargets,
    next_step_weights,
    step_distribution,
)

A, B, C, D, E = range(NUM_RESERVED, NUM_RESERVED + 5)
UNIFORM = OrderPrior.uniform()
TREE = OrderPrior.binary_tree(1.0)
V = NUM_RESERVED + 5  # reserved ids plus five user tokens


# ---------------------------------------------------------------- layouts

def test_mode_layout_joint():
    ex = PairedExample.pair((A, B), (C, D, E))
    lay = mode_layout(ex, TrainingMode.JOINT)
    assert lay.tokens == (A, B, EOS_X_ID, C, D, E, EOS_Y_ID)
    assert lay.eligible_runs == ((0, 2), (3, 6))
    assert lay.always_kept == (2, 6)


def test_mode_layout_conditionals():
    ex = PairedExample.pair((A, B), (C, D, E))
    lay = mode_layout(ex, TrainingMode.COND_Y_GIVEN_X)
    assert lay.eligible == (3, 4, 5)
    assert lay.always_kept == (0, 1, 2, 6)
    lay = mode_layout(ex, TrainingMode.COND_X_GIVEN_Y)
    assert lay.eligible == (0, 1)


def test_mode_layout_marginal_uses_one_side():
    ex = PairedExample.pair((A, B), (C,))
    lay = mode_layout(ex, TrainingMode.MARGINAL_X)
    assert lay.tokens == (A, B, EOS_X_ID)
    assert lay.eligible == (0, 1)
    lay = mode_layout(ex, TrainingMode.MARGINAL_Y)
    assert lay.tokens == (C, EOS_Y_ID)


def test_mode_layout_requirements():
    x_only = PairedExample.only_x((A,))
    with pytest.raises(InvalidInputError):
        mode_layout(x_only, TrainingMode.JOINT)
    with pytest.raises(InvalidInputError):
        mode_layout(x_only, TrainingMode.MARGINAL_Y)
    assert mode_layout(x_only, TrainingMode.MARGINAL_X).eligible == (0,)


def test_frozen_slots_conditional_windows():
    # x fully observed, y partially kept: only gaps between the markers
    # stay insertable.
    ex = PairedExample.pair((A, B), (C, D, E))
    lay = mode_layout(ex, TrainingMode.COND_Y_GIVEN_X)
    # keep x, both markers, and y position 4 (token D)
    kept = [0, 1, 2, 4, 6]
    frozen = frozen_slots_for(lay, kept)
    # canvas: A B EOS_X D EOS_Y -> slots 0..5
    assert frozen == {0, 1, 2, 5}
    # empty y side on the canvas: the single between-marker gap is open
    frozen = frozen_slots_for(lay, [0, 1, 2, 6])
    assert frozen == {0, 1, 2, 4}


def test_frozen_slots_joint_windows():
    ex = PairedExample.pair((A,), (B,))
    lay = mode_layout(ex, TrainingMode.JOINT)
    # everything kept: A EOS_X B EOS_Y -> only the slot after EOS_Y is frozen
    assert frozen_slots_for(lay, range(4)) == {4}
    # nothing kept but the markers: EOS_X EOS_Y
    assert frozen_slots_for(lay, [1, 3]) == {2}


# ------------------------------------------------------------------ loss

def _logits(content, location):
    from types import SimpleNamespace

    return SimpleNamespace(
        content=np.asarray(content, dtype=np.float64),
        location=np.asarray(location, dtype=np.float64),
    )


def test_loss_uniform_logits_single_target():
    lg = _logits(np.zeros((2, V)), np.zeros(2))
    targets = SlotTargets(
        slot_tokens=(((A, 1.0),), ()),
        location_weights=(1.0, 0.0),
        finish_slots=frozenset({1}),
    )
    out = loss(lg, targets, lambda_finish=0.0, n_loss=1)
    assert out.content_nll == pytest.approx(math.log(V))
    assert out.location_nll == pytest.approx(math.log(2))
    assert out.tokens_in_targets == 1
    assert out.total == pytest.approx(math.log(V) + math.log(2))


def test_loss_two_targets_equal_weight():
    rng = np.random.default_rng(3)
    row = rng.normal(size=V)
    lg = _logits(np.stack([row, row]), np.zeros(2))
    ls = log_softmax(row)
    targets = SlotTargets(
        slot_tokens=(((A, 0.5), (B, 0.5)), ()),
        location_weights=(1.0, 0.0),
        finish_slots=frozenset({1}),
    )
    out = loss(lg, targets, 0.0, 1)
    assert out.content_nll == pytest.approx(-0.5 * ls[A] - 0.5 * ls[B])


def test_loss_weight_linearity():
    sc = FakeScorer(V, seed=9)
    canvas, spans = slot_spans(Sequence((A, B, C, D)), {1})
    base = next_step_weights(spans, UNIFORM)
    half = SlotTargets(
        tuple(tuple((t, w * 0.5) for t, w in sl) for sl in base.slot_tokens),
        tuple(w * 0.5 for w in base.location_weights),
        base.finish_slots,
    )
    lg = sc([canvas])[0]
    full = loss(lg, base, 0.0, 4)
    halved = loss(lg, half, 0.0, 4)
    assert halved.content_nll == pytest.approx(0.5 * full.content_nll)
    assert halved.location_nll == pytest.approx(0.5 * full.location_nll)


def test_loss_excludes_frozen_from_location_softmax():
    # Slot 0 frozen: the location softmax support is slots 1 and 2 only.
    lg = _logits(np.zeros((3, V)), np.array([50.0, 1.0, 1.0]))
    targets = SlotTargets(
        slot_tokens=((), ((A, 1.0),), ()),
        location_weights=(0.0, 1.0, 0.0),
        finish_slots=frozenset({2}),
    )
    out = loss(lg, targets, 0.0, 1)
    # Equal logits on the two supported slots: -log(1/2), unaffected by
    # the huge logit on the frozen slot.
    assert out.location_nll == pytest.approx(math.log(2))


def test_loss_finish_component():
    big = np.full(V, -30.0)
    big[NO_INSERT_ID] = 30.0
    lg = _logits(np.stack([big, big]), np.zeros(2))
    targets = SlotTargets(((), ()), (0.0, 0.0), frozenset({0, 1}))
    out = loss(lg, targets, lambda_finish=2.0, n_loss=3)
    assert out.finish_nll == pytest.approx(0.0, abs=1e-12)
    assert out.total == pytest.approx(0.0, abs=1e-12)
    # n_loss scales only the insertion part.
    lg2 = _logits(np.zeros((2, V)), np.zeros(2))
    out2 = loss(lg2, targets, lambda_finish=2.0, n_loss=3)
    assert out2.total == pytest.approx(2.0 * math.log(V))


def test_loss_rejects_bad_inputs():
    lg = _logits(np.zeros((2, V)), np.zeros(2))
    targets = SlotTargets(((), ()), (0.0, 0.0), frozenset({0}))
    bad = _logits(np.full((2, V), np.nan), np.zeros(2))
    with pytest.raises(NumericError):
        loss(bad, targets, 1.0, 1)
    short = SlotTargets(((),), (0.0,), frozenset({0}))
    with pytest.raises(InvalidInputError):
        loss(lg, short, 1.0, 1)
    none_insertable = SlotTargets(((), ()), (0.0, 0.0), frozenset())
    with pytest.raises(InvalidInputError):
        loss(lg, none_insertable, 1.0, 1)


# ------------------------------------------------------- instance building

def test_instance_conditional_freezing_invariant():
    ex = PairedExample.pair((A, B, C), (D, E, A, B))
    rng = np.random.default_rng(11)
    for _ in range(50):
        canvas, targets, n_loss = build_training_instance(
            ex, TrainingMode.COND_Y_GIVEN_X, TREE, rng
        )
        assert n_loss == 4
        # observed side plus markers always present, in order
        assert canvas.kept[:4] == (A, B, C, EOS_X_ID)
        assert canvas.kept[-1] == EOS_Y_ID
        # x-side slots frozen and never supervised
        for s in range(4):
            assert s in canvas.frozen
        assert canvas.num_slots - 1 in canvas.frozen
        for s in canvas.frozen:
            assert not targets.slot_tokens[s]
            assert s not in targets.finish_slots
        if targets.target_count:
            assert abs(targets.total_weight - 1.0) < 1e-12


def test_instance_complete_canvas():
    ex = PairedExample.pair((A,), (B, C))
    rng = np.random.default_rng(5)
    canvas, targets, n_loss = build_training_instance(
        ex, TrainingMode.JOINT, TREE, rng, p_complete=1.0
    )
    assert canvas.kept == (A, EOS_X_ID, B, C, EOS_Y_ID)
    assert targets.target_count == 0
    # every non-frozen slot asks for a finish
    assert targets.finish_slots == frozenset(range(5))
    assert canvas.frozen == {5}


def test_instance_empty_loss_region_errors():
    ex = PairedExample.pair((A,), ())
    with pytest.raises(InvalidInputError):
        build_training_instance(ex, TrainingMode.COND_Y_GIVEN_X, TREE, np.random.default_rng(0))


def test_instance_deterministic_under_seed():
    ex = PairedExample.pair((A, B, C, D), (E, A, B))
    one = build_training_instance(ex, TrainingMode.JOINT, TREE, np.random.default_rng(77))
    two = build_training_instance(ex, TrainingMode.JOINT, TREE, np.random.default_rng(77))
    assert one == two


def test_instance_marginal_drops_other_side():
    ex = PairedExample.pair((A, B), (C, D, E))
    rng = np.random.default_rng(2)
    canvas, _, n_loss = build_training_instance(
        ex, TrainingMode.MARGINAL_Y, UNIFORM, rng, p_complete=1.0
    )
    assert canvas.kept == (C, D, E, EOS_Y_ID)
    assert n_loss == 3
    assert EOS_X_ID not in canvas.kept


# ----------------------------------------------------------- elbo oracles

def test_exact_elbo_matches_hand_enumeration_n2():
    x = Sequence((A, B))
    sc = FakeScorer(V, seed=21)

    def op_lp(kept, pos):
        canvas, _ = slot_spans(x, kept)
        lg = sc([canvas])[0]
        loc = log_softmax(lg.location)
        con = log_softmax(lg.content, axis=-1)
        slot = sum(1 for k in kept if k < pos)
        return loc[slot] + con[slot, x[pos]]

    # i = 1: empty canvas, either token may come first with weight 1/2.
    expected = 0.5 * op_lp(set(), 0) + 0.5 * op_lp(set(), 1)
    # i = 2: each singleton kept set has prior mass 1/2 and one option.
    expected += 0.5 * op_lp({0}, 1) + 0.5 * op_lp({1}, 0)
    assert exact_elbo(x, sc, UNIFORM) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("prior", [UNIFORM, TREE])
def test_estimator_inner_matches_exact_terms(prior):
    # The sampled estimator's per-canvas value, computed through
    # next_step_weights and loss, must equal the enumerated conditional
    # expectation term by term.
    x = Sequence((A, B, C, D))
    sc = FakeScorer(V, seed=33)
    for _, kept, _, inner in elbo_terms(x, sc, prior):
        canvas, spans = slot_spans(x, kept)
        targets = next_step_weights(spans, prior)
        breakdown = loss(sc([canvas])[0], targets, 0.0, len(x))
        est_inner = -(breakdown.content_nll + breakdown.location_nll)
        assert abs(est_inner - inner) < 1e-9


@pytest.mark.parametrize("prior", [UNIFORM, TREE])
def test_estimate_elbo_is_unbiased(prior):
    x = Sequence((A, B, C))
    sc = FakeScorer(V, seed=4)
    exact = exact_elbo(x, sc, prior)
    rng = np.random.default_rng(100)
    draws = 4000
    samples = [estimate_elbo(x, sc, prior, 1, rng) for _ in range(draws)]
    se = np.std(samples, ddof=1) / math.sqrt(draws)
    assert abs(np.mean(samples) - exact) < 3.0 * se + 1e-9


def test_estimate_elbo_deterministic_and_n1_exact():
    x = Sequence((B,))
    sc = FakeScorer(V, seed=8)
    a = estimate_elbo(x, sc, UNIFORM, 5, np.random.default_rng(1))
    b = estimate_elbo(x, sc, UNIFORM, 5, np.random.default_rng(1))
    assert a == b
    # n = 1 has no order variance at all.
    assert a == pytest.approx(exact_elbo(x, sc, UNIFORM), abs=1e-12)


@pytest.mark.parametrize("prior", [UNIFORM, TREE])
@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_jensen_gap_nonnegative(prior, n):
    x = Sequence(tuple([A, B, C, D, E][:n]))
    sc = FakeScorer(V, seed=50 + n)
    lo = exact_elbo(x, sc, prior)
    hi = exact_log_likelihood(x, sc, prior)
    assert hi - lo >= -1e-12
    if n == 1:
        assert abs(hi - lo) < 1e-12


@pytest.mark.parametrize("prior", [UNIFORM, TREE])
def test_canvas_independent_scorer_closed_form(prior):
    # With logits that ignore the canvas, every order gives the same
    # product, so log p(x) collapses to sum of token log-probs minus
    # log n! and the bound is tight.
    rng = np.random.default_rng(60)
    row = rng.normal(size=V)
    sc = ConstScorer(row, loc_value=0.7)
    ls = log_softmax(row)
    x = Sequence((C, A, C, E))
    expected = sum(ls[t] for t in x) - math.log(math.factorial(len(x)))
    assert exact_log_likelihood(x, sc, prior) == pytest.approx(expected, abs=1e-10)
    assert exact_elbo(x, sc, prior) == pytest.approx(expected, abs=1e-10)


def test_fixed_length_mass_at_most_one():
    sc = FakeScorer(NUM_RESERVED + 2, seed=71)
    tokens = (NUM_RESERVED, NUM_RESERVED + 1)
    total = sum(
        math.exp(exact_log_likelihood(Sequence(p), sc, UNIFORM))
        for p in product(tokens, repeat=2)
    )
    assert total <= 1.0 + 1e-12


def test_terminated_likelihood_partitions_unity():
    # All sequences up to length 3 plus the continuation mass at length
    # 4 account for every path of the terminated process.
    sc = FakeScorer(NUM_RESERVED + 2, seed=72)
    tokens = (NUM_RESERVED, NUM_RESERVED + 1)
    total = 0.0
    for n in range(4):
        for p in product(tokens, repeat=n):
            total += math.exp(terminated_log_likelihood(Sequence(p), sc))
    for p in product(tokens, repeat=4):
        total += math.exp(insertion_mass_log(Sequence(p), sc))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_enumeration_guards():
    sc = FakeScorer(V)
    long = Sequence(tuple([A] * 9))
    with pytest.raises(SizeLimitError):
        exact_elbo(long, sc, UNIFORM)
    with pytest.raises(SizeLimitError):
        exact_log_likelihood(long, sc, UNIFORM)
    with pytest.raises(InvalidInputError):
        exact_elbo(Sequence(()), sc, UNIFORM)


def test_breakdown_combine():
    a = LossBreakdown(1.0, 2.0, 3.0, 4.0, 2, 3)
    b = LossBreakdown(0.5, 0.5, 0.5, 0.5, 1, 2)
    c = LossBreakdown.combine([a, b])
    assert c.total == 4.5
    assert c.n_loss == 5
    assert c.per_token == pytest.approx(4.5 / 5)
