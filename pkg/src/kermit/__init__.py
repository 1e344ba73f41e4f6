"""Insertion-based generative sequence modeling.

Sequences are generated by repeatedly inserting (token, slot) pairs
into a partial canvas, in any order. The package provides the canvas
algebra, order priors, an order-marginalized training objective with
exhaustive small-n oracles, a float64 transformer scorer with exact
hand-derived gradients, serial and parallel decoders, toy data and a
training loop, and a command line front end.
"""

from .canvas import (
    Canvas,
    InsertionOp,
    PairedExample,
    Sequence,
    Vocab,
    apply_insertion,
    concat_pair,
    ops_from_order,
    slot_spans,
    split_pair,
)
from .errors import KermitError
from .order_prior import OrderPrior, SlotTargets

__all__ = [
    "Canvas",
    "InsertionOp",
    "KermitError",
    "OrderPrior",
    "PairedExample",
    "Sequence",
    "SlotTargets",
    "Vocab",
    "apply_insertion",
    "concat_pair",
    "ops_from_order",
    "slot_spans",
    "split_pair",
]
