"""Shared test doubles.

FakeScorer produces deterministic pseudo-random logits keyed by the
kept tuple, so identical canvases always get identical logits without
any real model. ConstScorer emits the same logits on every canvas and
slot, which makes likelihoods collapse to closed forms.
"""
from types import SimpleNamespace

import numpy as np


class FakeScorer:
    def __init__(self, vocab_size: int, seed: int = 0, scale: float = 1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.scale = scale
        self._cache: dict[tuple, SimpleNamespace] = {}

    def _one(self, canvas):
        key = tuple(canvas.kept)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, len(key), *key])
            n_slots = len(key) + 1
            self._cache[key] = SimpleNamespace(
                content=self.scale * rng.normal(size=(n_slots, self.vocab_size)),
                location=self.scale * rng.normal(size=(n_slots,)),
            )
        return self._cache[key]

    def __call__(self, canvases):
        return [self._one(c) for c in canvases]


class ConstScorer:
    """Same content row and location logit everywhere, regardless of canvas."""

    def __init__(self, content_row, loc_value: float = 0.0):
        self.row = np.asarray(content_row, dtype=np.float64)
        self.loc_value = float(loc_value)

    def __call__(self, canvases):
        out = []
        for c in canvases:
            n_slots = len(c.kept) + 1
            out.append(
                SimpleNamespace(
                    content=np.tile(self.row, (n_slots, 1)),
                    location=np.full(n_slots, self.loc_value),
                )
            )
        return out
