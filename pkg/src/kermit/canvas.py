"""Vocabulary, sequences, partial canvases and insertion operations.

Conventions used everywhere in this package:

* Token ids 0..5 are reserved (PAD, CLS, SEP, EOS_X, EOS_Y, NO_INSERT).
  User tokens start at id 6, and a vocabulary file stores only user
  tokens, one per line, so line number equals id minus 6.
* Slot indices are 0-based. A canvas with k kept tokens has k + 1 slots;
  inserting at slot ``s`` places the new token at list position ``s`` of
  ``kept``, so slot 0 precedes the first kept token and slot k follows
  the last one.
* A generation order is a permutation of ``range(n)``: ``z[i]`` is the
  original position of the token produced at step ``i + 1``.

All types here are immutable; operations return new values, which keeps
sharing across worker threads safe without locks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ConstraintError, InvalidInputError, ParseError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
EOS_X_ID = 3
EOS_Y_ID = 4
NO_INSERT_ID = 5
NUM_RESERVED = 6

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[EOS_X]", "[EOS_Y]", "[NO_INSERT]")

#: Surface form marking an infill gap on the command line. Never a
#: legal vocabulary item.
GAP_TOKEN = "___"


@dataclass(frozen=True)
class Vocab:
    """Bidirectional token/id map with a fixed reserved prefix."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[:NUM_RESERVED] != RESERVED_TOKENS:
            raise InvalidInputError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ParseError("duplicate token in vocabulary")
        if GAP_TOKEN in self.tokens:
            raise ParseError(f"literal {GAP_TOKEN!r} is not allowed as a vocabulary token")

    @classmethod
    def from_tokens(cls, user_tokens: Iterable[str]) -> "Vocab":
        """Build a vocabulary from user tokens; ids start at 6."""
        return cls(RESERVED_TOKENS + tuple(user_tokens))

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocab":
        """Load user tokens from a UTF-8 file, one token per line."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(line for line in lines if line)

    def save(self, path: str | Path) -> None:
        """Write user tokens only; line number equals id minus 6."""
        text = "".join(tok + "\n" for tok in self.tokens[NUM_RESERVED:])
        Path(path).write_text(text, encoding="utf-8")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def real_ids(self) -> range:
        """Ids of user tokens (everything past the reserved prefix)."""
        return range(NUM_RESERVED, len(self.tokens))

    def lookup(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InvalidInputError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise InvalidInputError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.lookup(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.token(i) for i in ids)


@dataclass(frozen=True)
class Sequence:
    """An immutable token-id sequence. PAD and NO_INSERT never occur."""

    ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        for i in self.ids:
            if i in (PAD_ID, NO_INSERT_ID):
                raise InvalidInputError(f"reserved id {i} cannot appear in a sequence")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def __getitem__(self, i: int) -> int:
        return self.ids[i]

    def __bool__(self) -> bool:
        return bool(self.ids)


@dataclass(frozen=True)
class PairedExample:
    """A source/target pair; either side may be absent (marginal data).

    An absent side is stored empty. At least one side must be present.
    """

    x: Sequence = Sequence()
    y: Sequence = Sequence()
    has_x: bool = True
    has_y: bool = True

    def __post_init__(self) -> None:
        if not (self.has_x or self.has_y):
            raise InvalidInputError("example must have at least one side")
        if not self.has_x and len(self.x):
            raise InvalidInputError("absent x side must be empty")
        if not self.has_y and len(self.y):
            raise InvalidInputError("absent y side must be empty")

    @classmethod
    def pair(cls, x: Iterable[int], y: Iterable[int]) -> "PairedExample":
        return cls(x=Sequence(tuple(x)), y=Sequence(tuple(y)))

    @classmethod
    def only_x(cls, x: Iterable[int]) -> "PairedExample":
        return cls(x=Sequence(tuple(x)), has_y=False)

    @classmethod
    def only_y(cls, y: Iterable[int]) -> "PairedExample":
        return cls(y=Sequence(tuple(y)), has_x=False)


@dataclass(frozen=True)
class InsertionOp:
    """Insert ``content`` at 0-based slot ``location`` of a canvas."""

    content: int
    location: int


@dataclass(frozen=True)
class Canvas:
    """A partial hypothesis: kept tokens plus per-slot bookkeeping.

    ``frozen`` slots never accept insertions (used to pin the observed
    side of a conditional problem). ``finished`` slots have emitted
    NO_INSERT during decoding and are not revisited.
    """

    kept: tuple[int, ...] = ()
    frozen: frozenset[int] = frozenset()
    finished: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kept", tuple(int(i) for i in self.kept))
        object.__setattr__(self, "frozen", frozenset(self.frozen))
        object.__setattr__(self, "finished", frozenset(self.finished))
        for i in self.kept:
            if i in (PAD_ID, NO_INSERT_ID):
                raise InvalidInputError(f"reserved id {i} cannot appear on a canvas")
        n_slots = len(self.kept) + 1
        for s in self.frozen | self.finished:
            if not 0 <= s < n_slots:
                raise InvalidInputError(f"slot index {s} out of range for {n_slots} slots")

    @property
    def num_slots(self) -> int:
        return len(self.kept) + 1

    @property
    def slots(self) -> range:
        return range(self.num_slots)

    @property
    def insertable(self) -> tuple[int, ...]:
        """Slots that may still receive insertions (not frozen)."""
        return tuple(s for s in self.slots if s not in self.frozen)

    @property
    def active(self) -> tuple[int, ...]:
        """Insertable slots that have not yet finished."""
        return tuple(s for s in self.slots if s not in self.frozen and s not in self.finished)

    def with_finished(self, slot: int) -> "Canvas":
        if not 0 <= slot < self.num_slots:
            raise InvalidInputError(f"slot index {slot} out of range")
        return Canvas(self.kept, self.frozen, self.finished | {slot})


def concat_pair(example: PairedExample, vocab: Vocab) -> Sequence:
    """Flatten a pair into one sequence with per-side end markers.

    Each present side is emitted followed by its marker; an absent side
    is omitted entirely, marker included. Side tokens must be user
    tokens of ``vocab``.
    """
    ids: list[int] = []
    for side, has, marker in ((example.x, example.has_x, EOS_X_ID),
                              (example.y, example.has_y, EOS_Y_ID)):
        if not has:
            continue
        for t in side:
            if t < NUM_RESERVED:
                raise InvalidInputError(f"reserved id {t} in pair content")
            if t >= len(vocab):
                raise InvalidInputError(f"token id {t} outside vocabulary")
            ids.append(t)
        ids.append(marker)
    return Sequence(tuple(ids))


def split_pair(seq: Sequence, vocab: Vocab | None = None) -> PairedExample:
    """Invert :func:`concat_pair`.

    Accepts the three well-formed layouts: ``x EOS_X y EOS_Y``,
    ``x EOS_X`` and ``y EOS_Y``. Anything else is a parse error. With a
    vocabulary, token ids are also bound-checked against it.
    """
    ids = tuple(seq)
    xs = [i for i, t in enumerate(ids) if t == EOS_X_ID]
    ys = [i for i, t in enumerate(ids) if t == EOS_Y_ID]
    if len(xs) > 1 or len(ys) > 1:
        raise ParseError("duplicate end marker")
    if not xs and not ys:
        raise ParseError("no end marker present")
    for i, t in enumerate(ids):
        if t < NUM_RESERVED and t not in (EOS_X_ID, EOS_Y_ID):
            raise ParseError(f"reserved id {t} inside pair sequence")
        if vocab is not None and t >= len(vocab):
            raise ParseError(f"token id {t} outside vocabulary")
    if xs:
        px = xs[0]
        x = Sequence(ids[:px])
        rest = ids[px + 1:]
        if not ys:
            if rest:
                raise ParseError("trailing tokens after x marker without y marker")
            return PairedExample(x=x, y=Sequence(), has_x=True, has_y=False)
        py = ys[0]
        if py < px:
            raise ParseError("y marker precedes x marker")
        if ids[-1] != EOS_Y_ID:
            raise ParseError("trailing tokens after y marker")
        return PairedExample(x=x, y=Sequence(rest[:-1]), has_x=True, has_y=True)
    if ids[-1] != EOS_Y_ID:
        raise ParseError("trailing tokens after y marker")
    return PairedExample(x=Sequence(), y=Sequence(ids[:-1]), has_x=False, has_y=True)


def ops_from_order(x: Sequence, z: Iterable[int]) -> tuple[InsertionOp, ...]:
    """Turn a generation order into the insertion ops that rebuild ``x``.

    ``z`` must be a permutation of ``range(len(x))``. Op ``i`` inserts
    ``x[z[i]]`` at slot ``#{j < i : z[j] < z[i]}``, the number of
    already-placed tokens that sit to its left.
    """
    order = tuple(int(v) for v in z)
    if sorted(order) != list(range(len(x))):
        raise InvalidInputError(f"{order!r} is not a permutation of range({len(x)})")
    ops = []
    for i, pos in enumerate(order):
        slot = sum(1 for j in range(i) if order[j] < pos)
        ops.append(InsertionOp(content=x[pos], location=slot))
    return tuple(ops)


def apply_insertion(canvas: Canvas, op: InsertionOp) -> Canvas:
    """Insert one token, remapping slot bookkeeping around it.

    Slots strictly left of the insertion keep their index, slots right
    of it shift up by one, and the two slots created next to the new
    token start neither frozen nor finished. Inserting into a frozen
    slot raises :class:`ConstraintError`.
    """
    loc = op.location
    if not 0 <= loc < canvas.num_slots:
        raise InvalidInputError(f"slot {loc} out of range for {canvas.num_slots} slots")
    if loc in canvas.frozen:
        raise ConstraintError(f"slot {loc} is frozen")
    kept = canvas.kept[:loc] + (op.content,) + canvas.kept[loc:]

    def remap(slots: frozenset[int]) -> frozenset[int]:
        return frozenset(s if s < loc else s + 1 for s in slots if s != loc)

    return Canvas(kept, remap(canvas.frozen), remap(canvas.finished))


def slot_spans(
    x: Sequence, kept_indices: Iterable[int]
) -> tuple[Canvas, tuple[tuple[int, ...], ...]]:
    """Project ``x`` onto a kept subset and report what each slot hides.

    ``kept_indices`` are 0-based positions into ``x``. Returns the
    canvas of kept tokens (no slots frozen or finished) and, per slot,
    the tuple of dropped tokens that belong there, in original order.
    Concatenating span 0, kept token 0, span 1, ... reproduces ``x``.
    """
    kept = sorted(set(int(i) for i in kept_indices))
    for i in kept:
        if not 0 <= i < len(x):
            raise InvalidInputError(f"kept index {i} out of range")
    bounds = [-1] + kept + [len(x)]
    spans = tuple(
        tuple(x[p] for p in range(a + 1, b)) for a, b in zip(bounds[:-1], bounds[1:])
    )
    canvas = Canvas(tuple(x[i] for i in kept))
    return canvas, spans


def interleave(kept: tuple[int, ...], spans: tuple[tuple[int, ...], ...]) -> tuple[int, ...]:
    """Inverse of :func:`slot_spans`: weave spans back between kept tokens."""
    if len(spans) != len(kept) + 1:
        raise InvalidInputError("need exactly one span per slot")
    out: list[int] = []
    for i, span in enumerate(spans):
        out.extend(span)
        if i < len(kept):
            out.append(kept[i])
    return tuple(out)
