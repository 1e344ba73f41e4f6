"""Priors over the order in which tokens are inserted.

Two priors are supported. ``uniform`` weights every remaining missing
token equally, which makes every generation order equally likely.
``binary_tree`` picks a slot uniformly among slots that still hide
tokens, then a position k within that slot's span of length m with
probability softmax(-d_k / tau) where d_k = |k - (m - 1) / 2| is the
distance to the span midpoint. Small tau concentrates on the middle,
which steers training toward balanced splits and decoding toward
logarithmic depth; tau -> infinity recovers uniform within the span.

Probabilities of *partial* orders collapse naturally onto kept-index
sets: a canvas depends only on which positions were inserted, not in
what order, so enumeration and estimation work at the set level.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Iterable, Sequence as Seq

import numpy as np

from .errors import InvalidInputError, SizeLimitError

ENUMERATION_LIMIT = 8

_PRIOR_KINDS = ("uniform", "binary_tree")


@dataclass(frozen=True)
class OrderPrior:
    kind: str
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in _PRIOR_KINDS:
            raise InvalidInputError(f"unknown prior kind {self.kind!r}")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")

    @classmethod
    def uniform(cls) -> "OrderPrior":
        return cls("uniform")

    @classmethod
    def binary_tree(cls, tau: float = 1.0) -> "OrderPrior":
        return cls("binary_tree", tau)


@dataclass(frozen=True)
class SlotTargets:
    """Next-insertion supervision for one canvas.

    ``slot_tokens[s]`` lists ``(token_id, weight)`` pairs for slot s in
    span order; weights across all slots sum to 1 for a canvas with
    missing tokens. ``location_weights[s]`` is the total weight landing
    in slot s. ``finish_slots`` are slots whose span is empty and that
    are not frozen; they are supervised toward NO_INSERT.
    """

    slot_tokens: tuple[tuple[tuple[int, float], ...], ...]
    location_weights: tuple[float, ...]
    finish_slots: frozenset[int]

    def __post_init__(self) -> None:
        if len(self.slot_tokens) != len(self.location_weights):
            raise InvalidInputError("per-slot fields must have equal length")
        for s in self.finish_slots:
            if not 0 <= s < len(self.location_weights):
                raise InvalidInputError(f"finish slot {s} out of range")

    @property
    def num_slots(self) -> int:
        return len(self.location_weights)

    @property
    def target_count(self) -> int:
        return sum(len(t) for t in self.slot_tokens)

    @property
    def total_weight(self) -> float:
        return float(sum(self.location_weights))

    @property
    def insertable_slots(self) -> tuple[int, ...]:
        """Slots in the location-softmax support: those with targets or
        finish supervision, i.e. exactly the non-frozen slots."""
        keep = set(self.finish_slots)
        keep.update(s for s, w in enumerate(self.location_weights) if w > 0.0)
        return tuple(sorted(keep))


def sample_step(n: int, rng: np.random.Generator) -> int:
    """Draw the step index i uniformly from 1..n."""
    if n < 1:
        raise InvalidInputError("need n >= 1")
    return int(rng.integers(1, n + 1))


_WEIGHT_CACHE: dict[tuple[int, float], np.ndarray] = {}
_CUM_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _span_weight_cdf(m: int, tau: float) -> np.ndarray:
    key = (m, tau)
    cached = _CUM_CACHE.get(key)
    if cached is None:
        cached = np.cumsum(binary_tree_span_weights(m, tau))
        _CUM_CACHE[key] = cached
    return cached


def binary_tree_span_weights(m: int, tau: float) -> np.ndarray:
    """softmax(-d/tau) over positions 0..m-1, d = distance to midpoint.

    The result is palindromic and sums to 1. For m = 5, tau = 1 the
    unnormalized weights are (e^-2, e^-1, 1, e^-1, e^-2).
    """
    if m < 1:
        raise InvalidInputError("span length must be >= 1")
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    key = (m, tau)
    cached = _WEIGHT_CACHE.get(key)
    if cached is None:
        d = np.abs(np.arange(m, dtype=np.float64) - (m - 1) / 2.0)
        e = np.exp((d.min() - d) / tau)
        cached = e / e.sum()
        _WEIGHT_CACHE[key] = cached
    return cached.copy()


def next_step_weights(
    spans: Seq[tuple[int, ...]],
    prior: OrderPrior,
    frozen: frozenset[int] = frozenset(),
) -> SlotTargets:
    """Distribution of the next insertion given the current spans.

    ``spans[s]`` holds the missing tokens hidden behind slot s. Frozen
    slots must have empty spans; they are excluded from finish
    supervision as well as from targets. If every span is empty the
    targets are empty and all non-frozen slots become finish slots.
    """
    spans = tuple(tuple(sp) for sp in spans)
    for s in frozen:
        if not 0 <= s < len(spans):
            raise InvalidInputError(f"frozen slot {s} out of range")
        if spans[s]:
            raise InvalidInputError(f"frozen slot {s} has a non-empty span")
    total = sum(len(sp) for sp in spans)
    nonempty = [s for s, sp in enumerate(spans) if sp]
    slot_tokens: list[tuple[tuple[int, float], ...]] = []
    location_weights: list[float] = []
    for s, span in enumerate(spans):
        if not span:
            slot_tokens.append(())
            location_weights.append(0.0)
            continue
        if prior.kind == "uniform":
            w = np.full(len(span), 1.0 / total)
        else:
            w = binary_tree_span_weights(len(span), prior.tau) / len(nonempty)
        slot_tokens.append(tuple((tok, float(wk)) for tok, wk in zip(span, w)))
        location_weights.append(float(w.sum()))
    finish = frozenset(
        s for s, sp in enumerate(spans) if not sp and s not in frozen
    )
    return SlotTargets(tuple(slot_tokens), tuple(location_weights), finish)


def _missing_runs(n: int, kept: Iterable[int]) -> list[tuple[int, int]]:
    """Maximal runs [a, b) of positions not in ``kept``."""
    kept_sorted = sorted(set(kept))
    bounds = [-1] + kept_sorted + [n]
    return [(a + 1, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a + 1]


def step_distribution(
    n: int, kept: frozenset[int], prior: OrderPrior
) -> list[tuple[int, float]]:
    """Probability of each missing position being inserted next.

    Positions refer to the full length-n sequence; ``kept`` is the set
    already placed. Used by the exhaustive oracles; sampling goes
    through an equivalent incremental path.
    """
    runs = _missing_runs(n, kept)
    out: list[tuple[int, float]] = []
    if prior.kind == "uniform":
        total = sum(b - a for a, b in runs)
        for a, b in runs:
            out.extend((p, 1.0 / total) for p in range(a, b))
        return out
    for a, b in runs:
        w = binary_tree_span_weights(b - a, prior.tau) / len(runs)
        out.extend((a + k, float(w[k])) for k in range(b - a))
    return out


def sample_partial_order(
    x_len: int, i: int, prior: OrderPrior, rng: np.random.Generator
) -> frozenset[int]:
    """Sample the kept-index set after i - 1 insertions into length x_len."""
    if not 1 <= i <= x_len:
        raise InvalidInputError(f"step {i} out of range for length {x_len}")
    if prior.kind == "uniform":
        return frozenset(int(v) for v in rng.choice(x_len, size=i - 1, replace=False))
    return frozenset(sample_tree_positions(x_len, i - 1, prior.tau, rng))


def sample_tree_positions(
    span_len: int, count: int, tau: float, rng: np.random.Generator
) -> list[int]:
    """Draw ``count`` positions from one span under the tree conditionals.

    Maintains the list of missing runs incrementally: each draw picks a
    run uniformly, then a position within it by the midpoint softmax,
    splitting the run in two.
    """
    runs: list[tuple[int, int]] = [(0, span_len)] if span_len else []
    chosen: list[int] = []
    for _ in range(count):
        ridx = int(rng.integers(len(runs)))
        a, b = runs.pop(ridx)
        m = b - a
        if m > 1:
            k = min(int(np.searchsorted(_span_weight_cdf(m, tau), rng.random(), side="right")), m - 1)
        else:
            k = 0
        pos = a + k
        chosen.append(pos)
        if pos > a:
            runs.append((a, pos))
        if pos + 1 < b:
            runs.append((pos + 1, b))
    return chosen


def enumerate_partial_orders(
    n: int, i: int, prior: OrderPrior
) -> list[tuple[frozenset[int], float]]:
    """All kept-index sets of size i - 1 with their prior probability.

    Guarded to n <= 8; the binary-tree case runs a dynamic program over
    subsets, accumulating sequential conditionals, so probabilities sum
    to 1 by construction.
    """
    if n > ENUMERATION_LIMIT:
        raise SizeLimitError(f"enumeration limited to n <= {ENUMERATION_LIMIT}")
    if not 1 <= i <= n:
        raise InvalidInputError(f"step {i} out of range for length {n}")
    if prior.kind == "uniform":
        p = 1.0 / comb(n, i - 1)
        return [(frozenset(c), p) for c in combinations(range(n), i - 1)]
    level: dict[frozenset[int], float] = {frozenset(): 1.0}
    for _ in range(i - 1):
        nxt: dict[frozenset[int], float] = {}
        for kept, p in level.items():
            for pos, w in step_distribution(n, kept, prior):
                key = kept | {pos}
                nxt[key] = nxt.get(key, 0.0) + p * w
        level = nxt
    return sorted(level.items(), key=lambda kv: tuple(sorted(kv[0])))
