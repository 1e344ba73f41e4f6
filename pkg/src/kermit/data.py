"""Toy sequence-pair tasks and example IO.

Each task maps a random source sequence to a deterministic target, so
exact-match accuracy is well defined in both directions:

* ``copy``      y = x
* ``reverse``   y = x reversed
* ``sort``      y = x sorted by token id
* ``cipher_pair``  y = x reversed, each token pushed through a fixed
  permutation of the user vocabulary. The permutation depends only on
  the vocabulary size, not on any dataset seed, so every split of a
  task agrees on the mapping and the inverse is available for checks.

Examples on disk are JSON lines with string tokens, e.g.
``{"x": ["w03", "w01"], "y": ["w09"]}``; either key may be missing for
one-sided data.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .canvas import NUM_RESERVED, PairedExample, Sequence, Vocab
from .errors import InvalidInputError, ParseError

TASKS = ("copy", "reverse", "sort", "cipher_pair")

#: Fixed entropy for the cipher permutation; a task property, not a knob.
_CIPHER_ENTROPY = 0x5EC2E7

MAX_USER_TOKENS = 10_000


def vocab_for_task(num_user_tokens: int) -> Vocab:
    """Vocabulary of ``w00``-style tokens sized for the toy tasks."""
    if not 1 <= num_user_tokens <= MAX_USER_TOKENS:
        raise InvalidInputError("num_user_tokens out of range")
    width = max(2, len(str(num_user_tokens - 1)))
    return Vocab.from_tokens([f"w{i:0{width}d}" for i in range(num_user_tokens)])


def cipher_permutation(num_user_tokens: int) -> tuple[int, ...]:
    """Permutation over user ids used by ``cipher_pair``; index by
    ``id - NUM_RESERVED`` to get the substituted id."""
    rng = np.random.default_rng([_CIPHER_ENTROPY, num_user_tokens])
    perm = rng.permutation(num_user_tokens)
    return tuple(int(p) + NUM_RESERVED for p in perm)


def apply_cipher(x: Sequence, num_user_tokens: int) -> Sequence:
    perm = cipher_permutation(num_user_tokens)
    return Sequence(tuple(perm[t - NUM_RESERVED] for t in reversed(tuple(x))))


def invert_cipher(y: Sequence, num_user_tokens: int) -> Sequence:
    perm = cipher_permutation(num_user_tokens)
    inverse = {sub: NUM_RESERVED + i for i, sub in enumerate(perm)}
    return Sequence(tuple(inverse[t] for t in reversed(tuple(y))))


def target_for(task: str, x: Sequence, num_user_tokens: int) -> Sequence:
    if task == "copy":
        return Sequence(tuple(x))
    if task == "reverse":
        return Sequence(tuple(reversed(tuple(x))))
    if task == "sort":
        return Sequence(tuple(sorted(tuple(x))))
    if task == "cipher_pair":
        return apply_cipher(x, num_user_tokens)
    raise InvalidInputError(f"unknown task {task!r}, expected one of {TASKS}")


def make_toy_dataset(
    task: str,
    num_user_tokens: int,
    count: int,
    min_len: int,
    max_len: int,
    seed: int,
) -> list[PairedExample]:
    """Sample ``count`` pairs with lengths uniform on [min_len, max_len]."""
    if task not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}, expected one of {TASKS}")
    if not 1 <= min_len <= max_len:
        raise InvalidInputError("need 1 <= min_len <= max_len")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    vocab_for_task(num_user_tokens)
    rng = np.random.default_rng([seed, num_user_tokens, min_len, max_len])
    out = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(NUM_RESERVED, NUM_RESERVED + num_user_tokens, size=n)
        x = Sequence(tuple(int(t) for t in ids))
        out.append(PairedExample.pair(x, target_for(task, x, num_user_tokens)))
    return out


def as_marginal(examples: list[PairedExample], side: str = "x") -> list[PairedExample]:
    """Strip pairs down to one side, for unpaired-data experiments."""
    if side == "x":
        return [PairedExample.only_x(ex.x) for ex in examples]
    if side == "y":
        return [PairedExample.only_y(ex.y) for ex in examples]
    raise InvalidInputError("side must be 'x' or 'y'")


def load_jsonl(path: str | Path, vocab: Vocab) -> list[PairedExample]:
    """Read examples from JSON lines; errors carry the line number."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise ParseError(f"{path}:{lineno}: expected an object")
        unknown = set(record) - {"x", "y"}
        if unknown:
            raise ParseError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        if "x" not in record and "y" not in record:
            raise ParseError(f"{path}:{lineno}: need at least one of x, y")
        def side(key: str) -> Sequence | None:
            if key not in record:
                return None
            value = record[key]
            if not isinstance(value, list) or not all(isinstance(t, str) for t in value):
                raise ParseError(f"{path}:{lineno}: {key} must be a list of tokens")
            try:
                ids = vocab.encode(value)
            except InvalidInputError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            bad = [t for t in ids if t < NUM_RESERVED]
            if bad:
                raise ParseError(f"{path}:{lineno}: reserved token in {key}")
            return Sequence(ids)

        x = side("x")
        y = side("y")
        if x is not None and y is not None:
            out.append(PairedExample.pair(x, y))
        elif x is not None:
            out.append(PairedExample.only_x(x))
        else:
            out.append(PairedExample.only_y(y))
    return out


def save_jsonl(examples: list[PairedExample], vocab: Vocab, path: str | Path) -> None:
    lines = []
    for ex in examples:
        record = {}
        if ex.has_x:
            record["x"] = list(vocab.decode(ex.x))
        if ex.has_y:
            record["y"] = list(vocab.decode(ex.y))
        lines.append(json.dumps(record, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
