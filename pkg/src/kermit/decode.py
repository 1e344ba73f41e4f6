"""Decoding: grow a canvas by repeated insertions until every slot declines.

Three loops share one per-slot choice rule:

* parallel: every active slot proposes a token (or declines) from the
  same scorer snapshot, and all proposals are applied at once. Balanced
  models need roughly log2(n) passes.
* serial: one event per iteration, the argmax of location log-prob plus
  content log-prob over all active slots.
* sampling: ancestral version of serial (slot from the location
  softmax, token from that slot's content softmax), with a temperature;
  temperature 0 falls back to argmax.

A slot that picks the no-insert token is marked finished and never
revisited, even when its neighborhood changes later. Structural ids
(padding, sentinels, end markers) are masked out of every content
choice; end markers are part of the start canvas instead, which is how
conditioning works: the known side is laid down frozen and only the
window for the unknown side accepts insertions, matching what training
canvases look like. ``eos_penalty`` is subtracted from the no-insert
logit before the choice (in every loop), so positive values give
longer outputs.

Traces record, per iteration, the applied insertions with
already-remapped slot indices plus the slots finished (indexed after
this iteration's insertions). Replaying a trace therefore only needs
``apply_insertion`` folds and reproduces the final canvas exactly;
frozen-slot violations would raise during the fold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from statistics import median
from typing import Callable, Iterable

import numpy as np
from scipy.special import log_softmax

from .canvas import (
    EOS_X_ID,
    EOS_Y_ID,
    NO_INSERT_ID,
    NUM_RESERVED,
    Canvas,
    InsertionOp,
    PairedExample,
    Sequence,
    Vocab,
    apply_insertion,
    split_pair,
)
from .errors import InvalidInputError, OracleFailure
from .objective import STRUCTURAL_IDS, ScorerFn, TrainingMode

#: Sentinel for an open gap in an infill template.
GAP = -1


@dataclass(frozen=True)
class DecodeLimits:
    """Stopping knobs. ``max_iterations`` None picks a per-loop default
    (64 parallel passes; serial loops get room for one event per token).
    ``max_len`` None allows 4x the start length plus 16, clamped to what
    the scorer's position table supports."""

    max_iterations: int | None = None
    max_len: int | None = None
    eos_penalty: float = 0.0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be positive")
        if self.max_len is not None and self.max_len < 1:
            raise InvalidInputError("max_len must be positive")
        if self.temperature < 0.0:
            raise InvalidInputError("temperature must be non-negative")


@dataclass(frozen=True)
class IterationRecord:
    ops: tuple[InsertionOp, ...]
    finished: tuple[int, ...]


@dataclass(frozen=True)
class DecodeTrace:
    start: Canvas
    iterations: tuple[IterationRecord, ...]
    final: Canvas
    stop_reason: str

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)

    @property
    def tokens_generated(self) -> int:
        return len(self.final.kept) - len(self.start.kept)


def start_canvas(
    mode: TrainingMode | str,
    x: Sequence | None = None,
    y: Sequence | None = None,
) -> Canvas:
    """Initial canvas for a mode: markers down, known side frozen.

    The insertable slots are exactly the gaps a training canvas with
    zero generated tokens would expose, so a trained scorer sees
    familiar shapes from the first iteration on.
    """
    mode = TrainingMode(mode)
    if mode is TrainingMode.JOINT:
        return Canvas((EOS_X_ID, EOS_Y_ID), frozen=frozenset({2}))
    if mode is TrainingMode.COND_Y_GIVEN_X:
        if x is None:
            raise InvalidInputError("cond_y_given_x needs the x side")
        kept = tuple(x) + (EOS_X_ID, EOS_Y_ID)
        open_slot = len(x) + 1
        frozen = frozenset(s for s in range(len(kept) + 1) if s != open_slot)
        return Canvas(kept, frozen=frozen)
    if mode is TrainingMode.COND_X_GIVEN_Y:
        if y is None:
            raise InvalidInputError("cond_x_given_y needs the y side")
        kept = (EOS_X_ID,) + tuple(y) + (EOS_Y_ID,)
        frozen = frozenset(range(1, len(kept) + 1))
        return Canvas(kept, frozen=frozen)
    marker = EOS_X_ID if mode is TrainingMode.MARGINAL_X else EOS_Y_ID
    return Canvas((marker,), frozen=frozenset({1}))


def _gap_template(template: Iterable[int]) -> tuple[list[int], set[int]]:
    kept: list[int] = []
    open_slots: set[int] = set()
    previous_gap = False
    for tok in template:
        if tok == GAP:
            if previous_gap:
                raise InvalidInputError("adjacent gaps are ambiguous, merge them")
            open_slots.add(len(kept))
            previous_gap = True
        else:
            if tok < NUM_RESERVED:
                raise InvalidInputError(f"template token id {tok} is reserved")
            kept.append(tok)
            previous_gap = False
    if not open_slots:
        raise InvalidInputError("template has no gap")
    return kept, open_slots


def infill_canvas(template: Iterable[int], side: str = "x") -> Canvas:
    """Canvas from a template with :data:`GAP` holes; only the holes accept
    insertions, so everything else is untouchable by construction. Each
    hole may receive any number of tokens. Adjacent holes must be merged
    by the caller (two holes need a kept token between them)."""
    if side not in ("x", "y"):
        raise InvalidInputError("side must be 'x' or 'y'")
    marker = EOS_X_ID if side == "x" else EOS_Y_ID
    kept, open_slots = _gap_template(template)
    kept.append(marker)
    frozen = frozenset(s for s in range(len(kept) + 1) if s not in open_slots)
    return Canvas(tuple(kept), frozen=frozen)


def infill_pair_canvas(x: Sequence, y_template: Iterable[int]) -> Canvas:
    """Cloze canvas over a full pair: the x side is given in full and the
    y side has :data:`GAP` holes. Insertions are restricted to the holes,
    so the source context informs the fill but can never change."""
    prefix = tuple(x) + (EOS_X_ID,)
    y_kept, y_open = _gap_template(y_template)
    kept = prefix + tuple(y_kept) + (EOS_Y_ID,)
    open_slots = {len(prefix) + s for s in y_open}
    frozen = frozenset(s for s in range(len(kept) + 1) if s not in open_slots)
    return Canvas(kept, frozen=frozen)


def extract_pair(canvas: Canvas) -> PairedExample:
    """Final canvas back into (x, y) by splitting at the end markers."""
    return split_pair(Sequence(canvas.kept))


def _finish_all(canvas: Canvas, slots: Iterable[int]) -> Canvas:
    for s in slots:
        canvas = canvas.with_finished(s)
    return canvas


def _length_cap(limits: DecodeLimits, start: Canvas, scorer) -> int:
    scorer_cap = getattr(scorer, "max_canvas_len", None)
    cap = limits.max_len if limits.max_len is not None else 4 * len(start.kept) + 16
    if scorer_cap is not None:
        cap = min(cap, scorer_cap)
    return max(cap, len(start.kept))


def _masked_content(row: np.ndarray, eos_penalty: float) -> np.ndarray:
    out = np.array(row, dtype=np.float64)
    out[list(STRUCTURAL_IDS)] = -np.inf
    out[NO_INSERT_ID] -= eos_penalty
    return out


def _parallel_step(
    canvas: Canvas, logits, eos_penalty: float, cap: int
) -> tuple[IterationRecord, Canvas, str | None]:
    """Apply one snapshot's proposals; returns (record, canvas, stop)."""
    active = canvas.active
    proposals: list[tuple[int, int]] = []
    declines: list[int] = []
    for s in active:
        choice = int(np.argmax(_masked_content(logits.content[s], eos_penalty)))
        if choice == NO_INSERT_ID:
            declines.append(s)
        else:
            proposals.append((s, choice))

    budget = cap - len(canvas.kept)
    capped = len(proposals) > budget
    proposals = proposals[:budget]

    ops: list[InsertionOp] = []
    offset = 0
    for s, tok in sorted(proposals):
        op = InsertionOp(tok, s + offset)
        canvas = apply_insertion(canvas, op)
        ops.append(op)
        offset += 1
    shifted = tuple(
        s + sum(1 for slot, _ in proposals if slot < s) for s in sorted(declines)
    )
    canvas = _finish_all(canvas, shifted)
    record = IterationRecord(tuple(ops), shifted)
    stop = None
    if capped:
        stop = "length_cap"
    elif not canvas.active:
        stop = "all_finished"
    return record, canvas, stop


def parallel_decode(scorer: ScorerFn, start: Canvas, limits: DecodeLimits = DecodeLimits()) -> DecodeTrace:
    """All active slots act at once per iteration."""
    return parallel_decode_batch(scorer, [start], limits)[0]


def parallel_decode_batch(
    scorer: ScorerFn,
    starts: list[Canvas],
    limits: DecodeLimits = DecodeLimits(),
    chunk_size: int = 32,
) -> list[DecodeTrace]:
    """Lockstep parallel decoding; canvases are scored together in chunks
    so a batch of decodes costs far fewer scorer calls than one-by-one."""
    if chunk_size < 1:
        raise InvalidInputError("chunk_size must be positive")
    max_iters = limits.max_iterations if limits.max_iterations is not None else 64
    states = list(starts)
    caps = [_length_cap(limits, c, scorer) for c in starts]
    records: list[list[IterationRecord]] = [[] for _ in starts]
    reasons: list[str | None] = [None if c.active else "all_finished" for c in states]

    for _ in range(max_iters):
        live = [i for i, r in enumerate(reasons) if r is None]
        if not live:
            break
        outputs: dict[int, object] = {}
        for lo in range(0, len(live), chunk_size):
            chunk = live[lo:lo + chunk_size]
            for i, logits in zip(chunk, scorer([states[i] for i in chunk])):
                outputs[i] = logits
        for i in live:
            record, states[i], stop = _parallel_step(
                states[i], outputs[i], limits.eos_penalty, caps[i]
            )
            records[i].append(record)
            reasons[i] = stop
    return [
        DecodeTrace(
            start=starts[i],
            iterations=tuple(records[i]),
            final=states[i],
            stop_reason=reasons[i] or "max_iterations",
        )
        for i in range(len(starts))
    ]


def _serial_like(
    scorer: ScorerFn,
    start: Canvas,
    limits: DecodeLimits,
    choose: Callable[[np.ndarray, np.ndarray, tuple[int, ...]], tuple[int, int]],
) -> DecodeTrace:
    cap = _length_cap(limits, start, scorer)
    max_iters = (
        limits.max_iterations if limits.max_iterations is not None else 2 * cap + 8
    )
    canvas = start
    records: list[IterationRecord] = []
    reason = None if canvas.active else "all_finished"
    for _ in range(max_iters):
        if reason is not None:
            break
        logits = scorer([canvas])[0]
        active = canvas.active
        loc_ls = log_softmax(np.asarray(logits.location, dtype=np.float64)[list(active)])
        slot, tok = choose(loc_ls, logits.content, active)
        if tok == NO_INSERT_ID:
            canvas = canvas.with_finished(slot)
            records.append(IterationRecord((), (slot,)))
        else:
            op = InsertionOp(tok, slot)
            canvas = apply_insertion(canvas, op)
            records.append(IterationRecord((op,), ()))
            if len(canvas.kept) >= cap and canvas.active:
                reason = "length_cap"
        if reason is None and not canvas.active:
            reason = "all_finished"
    return DecodeTrace(
        start=start,
        iterations=tuple(records),
        final=canvas,
        stop_reason=reason or "max_iterations",
    )


def greedy_serial(scorer: ScorerFn, start: Canvas, limits: DecodeLimits = DecodeLimits()) -> DecodeTrace:
    """One event per iteration: the jointly most probable (slot, token)."""

    def choose(loc_ls, content, active):
        best = (-np.inf, -1, -1)
        for k, s in enumerate(active):
            masked = _masked_content(content[s], limits.eos_penalty)
            con_ls = log_softmax(masked[np.isfinite(masked)])
            ids = np.flatnonzero(np.isfinite(masked))
            j = int(np.argmax(con_ls))
            score = loc_ls[k] + con_ls[j]
            if score > best[0]:
                best = (score, s, int(ids[j]))
        return best[1], best[2]

    return _serial_like(scorer, start, limits, choose)


def sample_decode(
    scorer: ScorerFn,
    start: Canvas,
    rng: np.random.Generator,
    limits: DecodeLimits = DecodeLimits(),
) -> DecodeTrace:
    """Ancestral sampling, one event per iteration. Temperature scales
    both the location and content logits; zero reduces to greedy argmax
    of each factor in turn."""

    def choose(loc_ls, content, active):
        if limits.temperature == 0.0:
            k = int(np.argmax(loc_ls))
        else:
            p = np.exp(log_softmax(loc_ls / limits.temperature))
            k = int(rng.choice(len(active), p=p / p.sum()))
        s = active[k]
        masked = _masked_content(content[s], limits.eos_penalty)
        ids = np.flatnonzero(np.isfinite(masked))
        finite = masked[ids]
        if limits.temperature == 0.0:
            return s, int(ids[np.argmax(finite)])
        p = np.exp(log_softmax(finite / limits.temperature))
        return s, int(ids[rng.choice(len(ids), p=p / p.sum())])

    return _serial_like(scorer, start, limits, choose)


def replay(trace: DecodeTrace) -> Canvas:
    """Fold the recorded ops and finish marks from the start canvas.

    Raises :class:`kermit.errors.ConstraintError` if any recorded op
    would touch a frozen slot, so a clean replay doubles as the
    no-frozen-insertions check."""
    canvas = trace.start
    for record in trace.iterations:
        for op in record.ops:
            canvas = apply_insertion(canvas, op)
        canvas = _finish_all(canvas, record.finished)
    return canvas


def verify_trace(trace: DecodeTrace) -> Canvas:
    """Replay and insist the result matches the recorded final canvas."""
    got = replay(trace)
    if got != trace.final:
        raise OracleFailure(
            f"trace replay diverged: got {got.kept}, recorded {trace.final.kept}"
        )
    return got


# --- reporting -----------------------------------------------------------

def render_canvas(canvas: Canvas, vocab: Vocab, highlight: frozenset[int] = frozenset()) -> str:
    parts = []
    for i, tok in enumerate(canvas.kept):
        text = vocab.token(tok)
        parts.append(f"«{text}»" if i in highlight else text)
    return " ".join(parts)


def render_trace(trace: DecodeTrace, vocab: Vocab) -> list[str]:
    """One line per state, new tokens of each iteration in guillemets."""
    lines = [render_canvas(trace.start, vocab)]
    canvas = trace.start
    for record in trace.iterations:
        for op in record.ops:
            canvas = apply_insertion(canvas, op)
        canvas = _finish_all(canvas, record.finished)
        new = frozenset(op.location for op in record.ops)
        lines.append(render_canvas(canvas, vocab, highlight=new))
    lines.append(f"[stop: {trace.stop_reason}]")
    return lines


def trace_to_json(trace: DecodeTrace) -> str:
    payload = {
        "start": list(trace.start.kept),
        "iterations": [
            {
                "ops": [[op.content, op.location] for op in record.ops],
                "finished": list(record.finished),
            }
            for record in trace.iterations
        ],
        "final": list(trace.final.kept),
        "stop_reason": trace.stop_reason,
    }
    return json.dumps(payload, separators=(",", ":"))


@dataclass(frozen=True)
class BucketStats:
    lo: int
    hi: int
    count: int
    median_iterations: float
    median_generated: float


DEFAULT_BUCKETS = (1, 4, 8, 16, 32, 64, 128)


def iteration_stats(
    traces: Iterable[DecodeTrace], edges: tuple[int, ...] = DEFAULT_BUCKETS
) -> tuple[BucketStats, ...]:
    """Median iteration counts bucketed by tokens generated."""
    buckets: dict[int, list[DecodeTrace]] = {}
    for trace in traces:
        n = trace.tokens_generated
        for k, lo in enumerate(edges):
            hi = edges[k + 1] if k + 1 < len(edges) else float("inf")
            if lo <= n < hi:
                buckets.setdefault(k, []).append(trace)
                break
    out = []
    for k in sorted(buckets):
        group = buckets[k]
        hi = edges[k + 1] if k + 1 < len(edges) else 0
        out.append(
            BucketStats(
                lo=edges[k],
                hi=hi,
                count=len(group),
                median_iterations=median(t.num_iterations for t in group),
                median_generated=median(t.tokens_generated for t in group),
            )
        )
    return tuple(out)


def log2_slope(traces: Iterable[DecodeTrace]) -> float:
    """Least-squares slope of iterations against log2(generated + 1);
    near 1 means the decoder really halves the work each pass."""
    pts = [(np.log2(t.tokens_generated + 1), t.num_iterations) for t in traces]
    if len(pts) < 2:
        raise InvalidInputError("need at least two traces")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    vx = ((xs - xs.mean()) ** 2).sum()
    if vx == 0.0:
        raise InvalidInputError("all traces generated the same length")
    return float(((xs - xs.mean()) * (ys - ys.mean())).sum() / vx)
