"""Order-marginalized training objective and its exhaustive oracles.

The model scores one insertion step: given a canvas it emits, per slot,
a location logit and content logits over the vocabulary, factorized as
p(content, slot) = p(slot) * p(content | slot). The training loss for a
canvas averages the next-step log-likelihood over the order prior's
conditional, which yields a lower bound on log p(x); sampling the step
index uniformly and scaling by the sequence length keeps the estimate
unbiased. For n <= 8 everything can be enumerated exactly, which is
what the oracle functions below do; they share no code with the
sampled path beyond the scorer itself, so the two routes check each
other.

Training instances are built per mode. The flat layout is the pair
concatenation (x, EOS_X, y, EOS_Y) with an absent side omitted; the
mode decides which positions are droppable (the loss region) and every
other position stays on the canvas. Slots that can never receive a
loss-region token, such as slots inside a fully observed side or the
slot after the final marker, are frozen and excluded from the location
softmax. Empty-span slots that are not frozen receive NO_INSERT finish
supervision so the decoder learns when to stop.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import log_softmax as _log_softmax
from scipy.special import logsumexp as _logsumexp

from .canvas import (
    CLS_ID,
    EOS_X_ID,
    EOS_Y_ID,
    NO_INSERT_ID,
    PAD_ID,
    SEP_ID,
    Canvas,
    PairedExample,
    Sequence,
    slot_spans,
)
from .errors import InvalidInputError, NumericError, SizeLimitError
from .order_prior import (
    ENUMERATION_LIMIT,
    OrderPrior,
    SlotTargets,
    enumerate_partial_orders,
    next_step_weights,
    sample_partial_order,
    sample_step,
    sample_tree_positions,
    step_distribution,
)

#: A scorer is any callable mapping a list of canvases to a list of
#: per-canvas logits objects with ``.content`` (num_slots, vocab) and
#: ``.location`` (num_slots,) float64 arrays.
ScorerFn = Callable[[list[Canvas]], list]


class TrainingMode(str, Enum):
    JOINT = "joint"
    COND_Y_GIVEN_X = "cond_y_given_x"
    COND_X_GIVEN_Y = "cond_x_given_y"
    MARGINAL_X = "marginal_x"
    MARGINAL_Y = "marginal_y"


_NEEDS_BOTH = (TrainingMode.JOINT, TrainingMode.COND_Y_GIVEN_X, TrainingMode.COND_X_GIVEN_Y)


@dataclass(frozen=True)
class ModeLayout:
    """Flat token layout of one training problem.

    ``tokens`` is the mode's full sequence including end markers.
    ``eligible_runs`` are the maximal [a, b) position ranges whose
    tokens belong to the loss region; everything outside them is always
    kept. A canvas gap between kept positions p_a < p_b is insertable
    exactly when some run satisfies a - 1 <= p_a and p_b <= b, i.e. the
    gap lies strictly inside that run's anchor window.
    """

    tokens: tuple[int, ...]
    eligible_runs: tuple[tuple[int, int], ...]

    @property
    def eligible(self) -> tuple[int, ...]:
        return tuple(p for a, b in self.eligible_runs for p in range(a, b))

    @property
    def always_kept(self) -> tuple[int, ...]:
        drop = set(self.eligible)
        return tuple(p for p in range(len(self.tokens)) if p not in drop)


def mode_layout(example: PairedExample, mode: TrainingMode) -> ModeLayout:
    """Flatten an example for a mode and mark its loss region."""
    mode = TrainingMode(mode)
    if mode in _NEEDS_BOTH:
        if not (example.has_x and example.has_y):
            raise InvalidInputError(f"mode {mode.value} requires both sides")
        nx, ny = len(example.x), len(example.y)
        tokens = tuple(example.x) + (EOS_X_ID,) + tuple(example.y) + (EOS_Y_ID,)
        x_run = (0, nx)
        y_run = (nx + 1, nx + 1 + ny)
        if mode is TrainingMode.JOINT:
            runs = tuple(r for r in (x_run, y_run) if r[1] > r[0])
        elif mode is TrainingMode.COND_Y_GIVEN_X:
            runs = (y_run,) if ny else ()
        else:
            runs = (x_run,) if nx else ()
        return ModeLayout(tokens, runs)
    if mode is TrainingMode.MARGINAL_X:
        if not example.has_x:
            raise InvalidInputError("marginal_x requires the x side")
        side, marker = example.x, EOS_X_ID
    else:
        if not example.has_y:
            raise InvalidInputError("marginal_y requires the y side")
        side, marker = example.y, EOS_Y_ID
    tokens = tuple(side) + (marker,)
    runs = ((0, len(side)),) if len(side) else ()
    return ModeLayout(tokens, runs)


def frozen_slots_for(layout: ModeLayout, kept_positions: Iterable[int]) -> frozenset[int]:
    """Slots of the kept-position canvas that lie outside every anchor window."""
    kept = sorted(set(kept_positions))
    bounds = [-1] + kept + [len(layout.tokens)]
    frozen = []
    for s, (pa, pb) in enumerate(zip(bounds[:-1], bounds[1:])):
        if not any(a - 1 <= pa and pb <= b for a, b in layout.eligible_runs):
            frozen.append(s)
    return frozenset(frozen)


def _sample_kept_eligible(
    layout: ModeLayout, count: int, prior: OrderPrior, rng: np.random.Generator
) -> frozenset[int]:
    """Sample which ``count`` loss-region positions are already placed."""
    eligible = layout.eligible
    if prior.kind == "uniform":
        picked = rng.choice(len(eligible), size=count, replace=False)
        return frozenset(eligible[int(k)] for k in picked)
    chosen: list[int] = []
    runs = list(layout.eligible_runs)
    # Sequential tree conditionals over all runs jointly: pick a run
    # (slot) uniformly, then a position by the midpoint softmax.
    for _ in range(count):
        ridx = int(rng.integers(len(runs)))
        a, b = runs.pop(ridx)
        pos = a + sample_tree_positions(b - a, 1, prior.tau, rng)[0]
        chosen.append(pos)
        if pos > a:
            runs.append((a, pos))
        if pos + 1 < b:
            runs.append((pos + 1, b))
    return frozenset(chosen)


def build_training_instance(
    example: PairedExample,
    mode: TrainingMode,
    prior: OrderPrior,
    rng: np.random.Generator,
    p_complete: float | None = None,
) -> tuple[Canvas, SlotTargets, int]:
    """Draw one training instance: canvas, targets and loss-region size.

    The step index is uniform over 1..n_loss. With probability
    ``p_complete`` (default 1 / (n_loss + 1)) the instance is instead
    the complete canvas, whose only supervision is finishing; without
    this the finish head would never see finished interiors.
    """
    layout = mode_layout(example, mode)
    n_loss = len(layout.eligible)
    if n_loss == 0:
        raise InvalidInputError(f"empty loss region for mode {TrainingMode(mode).value}")
    pc = 1.0 / (n_loss + 1) if p_complete is None else p_complete
    if not 0.0 <= pc <= 1.0:
        raise InvalidInputError("p_complete must lie in [0, 1]")
    if rng.random() < pc:
        kept_eligible: frozenset[int] = frozenset(layout.eligible)
    else:
        i = int(rng.integers(1, n_loss + 1))
        kept_eligible = _sample_kept_eligible(layout, i - 1, prior, rng)
    kept_positions = sorted(set(layout.always_kept) | kept_eligible)
    seq = Sequence(layout.tokens)
    base, spans = slot_spans(seq, kept_positions)
    frozen = frozen_slots_for(layout, kept_positions)
    canvas = Canvas(base.kept, frozen=frozen)
    targets = next_step_weights(spans, prior, frozen=frozen)
    return canvas, targets, n_loss


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components for one instance (or sums over a batch).

    ``total = n_loss * (content_nll + location_nll) + lambda_finish * finish_nll``
    for a single instance; the length scaling keeps the sampled
    estimator unbiased for the order-averaged bound.
    """

    content_nll: float
    location_nll: float
    finish_nll: float
    total: float
    tokens_in_targets: int
    n_loss: int

    @property
    def per_token(self) -> float:
        return self.total / self.n_loss if self.n_loss else 0.0

    @staticmethod
    def combine(parts: Iterable["LossBreakdown"]) -> "LossBreakdown":
        parts = list(parts)
        return LossBreakdown(
            content_nll=sum(p.content_nll for p in parts),
            location_nll=sum(p.location_nll for p in parts),
            finish_nll=sum(p.finish_nll for p in parts),
            total=sum(p.total for p in parts),
            tokens_in_targets=sum(p.tokens_in_targets for p in parts),
            n_loss=sum(p.n_loss for p in parts),
        )


def loss(
    logits, targets: SlotTargets, lambda_finish: float, n_loss: int
) -> LossBreakdown:
    """Weighted next-step negative log-likelihood for one canvas.

    The location softmax runs over the insertable (non-frozen) slots
    only; content softmaxes run over the full vocabulary. Weights enter
    linearly, so scaling all target weights scales content_nll the same
    way.
    """
    content = np.asarray(logits.content, dtype=np.float64)
    location = np.asarray(logits.location, dtype=np.float64)
    if content.ndim != 2 or location.shape != (content.shape[0],):
        raise InvalidInputError("malformed logits")
    if content.shape[0] != targets.num_slots:
        raise InvalidInputError(
            f"logits cover {content.shape[0]} slots, targets {targets.num_slots}"
        )
    if n_loss < 0:
        raise InvalidInputError("n_loss must be non-negative")
    if not (np.isfinite(content).all() and np.isfinite(location).all()):
        raise NumericError("non-finite slot logits")
    support = targets.insertable_slots
    if not support:
        raise InvalidInputError("no insertable slot in targets")

    content_nll = 0.0
    tokens = 0
    log_c: dict[int, np.ndarray] = {}

    def content_ls(s: int) -> np.ndarray:
        if s not in log_c:
            log_c[s] = _log_softmax(content[s])
        return log_c[s]

    for s, targs in enumerate(targets.slot_tokens):
        if not targs:
            continue
        ls = content_ls(s)
        for tok, w in targs:
            content_nll -= w * ls[tok]
            tokens += 1

    loc_ls = _log_softmax(location[list(support)])
    loc_index = {s: k for k, s in enumerate(support)}
    location_nll = 0.0
    for s, w in enumerate(targets.location_weights):
        if w > 0.0:
            location_nll -= w * loc_ls[loc_index[s]]

    finish_nll = 0.0
    if targets.finish_slots:
        finish_nll = -float(
            np.mean([content_ls(s)[NO_INSERT_ID] for s in sorted(targets.finish_slots)])
        )

    total = n_loss * (content_nll + location_nll) + lambda_finish * finish_nll
    return LossBreakdown(
        content_nll=float(content_nll),
        location_nll=float(location_nll),
        finish_nll=float(finish_nll),
        total=float(total),
        tokens_in_targets=tokens,
        n_loss=n_loss,
    )


def estimate_elbo(
    x: Sequence,
    scorer: ScorerFn,
    prior: OrderPrior,
    num_samples: int,
    rng: np.random.Generator,
) -> float:
    """Unbiased sampled estimate of the order-averaged bound on log p(x).

    Each sample draws a step index uniformly, a partial order from the
    prior, and evaluates the weighted next-step log-likelihood scaled
    by n. Finish supervision is not part of the bound.
    """
    n = len(x)
    if n < 1:
        raise InvalidInputError("need a non-empty sequence")
    if num_samples < 1:
        raise InvalidInputError("need at least one sample")
    vals = []
    for _ in range(num_samples):
        i = sample_step(n, rng)
        kept = sample_partial_order(n, i, prior, rng)
        canvas, spans = slot_spans(x, kept)
        targets = next_step_weights(spans, prior)
        breakdown = loss(scorer([canvas])[0], targets, 0.0, n)
        vals.append(-breakdown.total)
    return float(np.mean(vals))


#: Reserved ids that are never insertable content. The terminated
#: process below renormalizes content softmaxes over the remaining
#: support (real tokens plus NO_INSERT) so that its one-step event
#: space partitions exactly.
STRUCTURAL_IDS = (PAD_ID, CLS_ID, SEP_ID, EOS_X_ID, EOS_Y_ID)


def _subset_logits(
    x: Sequence, scorer: ScorerFn, sizes: Iterable[int], restrict_content: bool = False
) -> dict[frozenset[int], tuple[np.ndarray, np.ndarray]]:
    """Log-softmaxed scorer outputs for every kept subset of the given sizes.

    Canvases are deduplicated by kept set (the canvas depends only on
    the set) and scored in one batched call. Returns per subset the
    location log-probs over all slots and content log-probs per slot.
    """
    from itertools import combinations

    subsets: list[frozenset[int]] = []
    canvases: list[Canvas] = []
    for size in sorted(set(sizes)):
        for c in combinations(range(len(x)), size):
            subsets.append(frozenset(c))
            canvases.append(slot_spans(x, c)[0])
    out: dict[frozenset[int], tuple[np.ndarray, np.ndarray]] = {}
    for kept, lg in zip(subsets, scorer(canvases)):
        loc = np.asarray(lg.location, dtype=np.float64)
        con = np.asarray(lg.content, dtype=np.float64)
        if not (np.isfinite(loc).all() and np.isfinite(con).all()):
            raise NumericError("non-finite slot logits")
        if restrict_content:
            con = con.copy()
            con[:, list(STRUCTURAL_IDS)] = -np.inf
        out[kept] = (_log_softmax(loc), _log_softmax(con, axis=-1))
    return out


def _op_logprob(
    x: Sequence,
    kept: frozenset[int],
    pos: int,
    table: dict[frozenset[int], tuple[np.ndarray, np.ndarray]],
) -> float:
    """log p(content = x[pos], slot) on the kept-set canvas."""
    slot = sum(1 for k in kept if k < pos)
    loc_ls, con_ls = table[kept]
    return float(loc_ls[slot] + con_ls[slot, x[pos]])


def elbo_terms(
    x: Sequence, scorer: ScorerFn, prior: OrderPrior
) -> Iterator[tuple[int, frozenset[int], float, float]]:
    """Yield (step i, kept set, prior probability, inner expectation).

    The inner value is the exact conditional expectation of the next
    insertion's log-probability on that canvas; summing prob * inner
    over all terms gives the exact bound. Guarded to n <= 8.
    """
    n = len(x)
    if n < 1:
        raise InvalidInputError("need a non-empty sequence")
    if n > ENUMERATION_LIMIT:
        raise SizeLimitError(f"enumeration limited to n <= {ENUMERATION_LIMIT}")
    table = _subset_logits(x, scorer, range(n))
    for i in range(1, n + 1):
        for kept, p in enumerate_partial_orders(n, i, prior):
            inner = sum(
                w * _op_logprob(x, kept, pos, table)
                for pos, w in step_distribution(n, kept, prior)
            )
            yield i, kept, p, float(inner)


def exact_elbo(x: Sequence, scorer: ScorerFn, prior: OrderPrior) -> float:
    """Exact order-averaged bound on log p(x) by full enumeration (n <= 8)."""
    return float(sum(p * inner for _, _, p, inner in elbo_terms(x, scorer, prior)))


def exact_log_likelihood(x: Sequence, scorer: ScorerFn, prior: OrderPrior) -> float:
    """Exact log p(x) = log sum over orders of p(order) p(x | order).

    A dynamic program over kept sets accumulates, in log space, the
    total mass of every insertion history reaching each set; orders
    that share a canvas prefix share computation.
    """
    n = len(x)
    if n < 1:
        raise InvalidInputError("need a non-empty sequence")
    if n > ENUMERATION_LIMIT:
        raise SizeLimitError(f"enumeration limited to n <= {ENUMERATION_LIMIT}")
    table = _subset_logits(x, scorer, range(n))
    mass: dict[frozenset[int], float] = {frozenset(): 0.0}
    for _ in range(n):
        nxt: dict[frozenset[int], float] = {}
        for kept, la in mass.items():
            for pos, w in step_distribution(n, kept, prior):
                term = la + np.log(w) + _op_logprob(x, kept, pos, table)
                key = kept | {pos}
                nxt[key] = float(np.logaddexp(nxt[key], term)) if key in nxt else float(term)
        mass = nxt
    return mass[frozenset(range(n))]


def insertion_mass_log(x: Sequence, scorer: ScorerFn) -> float:
    """log of the total model mass of insertion histories building x.

    Unlike :func:`exact_log_likelihood` there is no prior weighting:
    each history is weighted purely by the model's own step
    probabilities, with content renormalized over real tokens plus
    NO_INSERT. Used by the termination accounting below.
    """
    n = len(x)
    if n > ENUMERATION_LIMIT:
        raise SizeLimitError(f"enumeration limited to n <= {ENUMERATION_LIMIT}")
    if n == 0:
        return 0.0
    table = _subset_logits(x, scorer, range(n), restrict_content=True)
    mass: dict[frozenset[int], float] = {frozenset(): 0.0}
    for _ in range(n):
        nxt: dict[frozenset[int], float] = {}
        for kept, la in mass.items():
            for pos in (p for p in range(n) if p not in kept):
                term = la + _op_logprob(x, kept, pos, table)
                key = kept | {pos}
                nxt[key] = float(np.logaddexp(nxt[key], term)) if key in nxt else float(term)
        mass = nxt
    return mass[frozenset(range(n))]


def stop_log_prob(x: Sequence, scorer: ScorerFn) -> float:
    """log probability that the next event on the complete canvas is a stop.

    A stop draws a slot from the location softmax and NO_INSERT from
    that slot's content softmax (renormalized over real tokens plus
    NO_INSERT). This is our termination construction; with it,
    insertion mass times stop probability sums to one over all
    sequences, plus continuation mass past any length cutoff.
    """
    lg = scorer([slot_spans(x, range(len(x)))[0]])[0]
    loc_ls = _log_softmax(np.asarray(lg.location, dtype=np.float64))
    con = np.asarray(lg.content, dtype=np.float64).copy()
    con[:, list(STRUCTURAL_IDS)] = -np.inf
    con_ls = _log_softmax(con, axis=-1)
    return float(_logsumexp(loc_ls + con_ls[:, NO_INSERT_ID]))


def terminated_log_likelihood(x: Sequence, scorer: ScorerFn) -> float:
    """log probability that generation builds exactly x and then stops."""
    return insertion_mass_log(x, scorer) + stop_log_prob(x, scorer)
