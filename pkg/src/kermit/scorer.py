"""Transformer scorer: canvas in, per-slot location and content logits out.

The model input is (CLS, kept tokens, boundary), where the boundary is
a dedicated learned embedding row appended after the last kept token.
Both sentinels flow through the unmasked transformer stack, so slot
s can read the contextual hidden states of its two neighbors: the slot
representation is a linear projection of the concatenation of hidden
states s and s + 1. A content head maps each slot to vocabulary logits
and a location head to one scalar. Canvas length plus the two
sentinels must fit the learned position table (``max_len``).

Everything runs in float64 on the small reverse-mode engine in
:mod:`kermit.autodiff`; gradients are exact, which the finite
difference tests confirm coordinate by coordinate. Batches are padded
with PAD ids and an additive -1e30 attention mask, which underflows to
exactly zero attention weight, so padding never changes any real
slot's logits, bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .canvas import CLS_ID, PAD_ID, Canvas
from .errors import ConfigError, InvalidInputError, LengthError, NumericError
from .objective import LossBreakdown
from .order_prior import SlotTargets

NEG_MASK = -1e30


@dataclass(frozen=True)
class ScorerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.vocab_size < 7:
            raise ConfigError("vocab_size must cover the reserved ids plus a token")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads must divide d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def boundary_id(self) -> int:
        """Embedding row used for the right-boundary sentinel."""
        return self.vocab_size

    @property
    def max_canvas_len(self) -> int:
        return self.max_len - 2


@dataclass
class Parameters:
    config: ScorerConfig
    tensors: dict[str, np.ndarray]


@dataclass(frozen=True)
class SlotLogits:
    """Per-slot outputs for one canvas: content (slots, vocab), location (slots,)."""

    content: np.ndarray
    location: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "content", np.asarray(self.content, dtype=np.float64))
        object.__setattr__(self, "location", np.asarray(self.location, dtype=np.float64))
        if self.content.ndim != 2 or self.location.shape != (self.content.shape[0],):
            raise InvalidInputError("malformed slot logits")

    @property
    def num_slots(self) -> int:
        return self.content.shape[0]


def parameter_shapes(config: ScorerConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes; init and checkpoints share this."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed_tokens": (v + 1, d),
        "embed_pos": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[p + b] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w1"] = (d, config.d_ff)
        shapes[p + "b1"] = (config.d_ff,)
        shapes[p + "w2"] = (config.d_ff, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["slot.w"] = (2 * d, d)
    shapes["slot.b"] = (d,)
    shapes["content.w"] = (d, v)
    shapes["content.b"] = (v,)
    shapes["loc.w"] = (d, 1)
    shapes["loc.b"] = (1,)
    return shapes


def init_parameters(config: ScorerConfig, seed: int) -> Parameters:
    """Weights drawn N(0, 1/fan_in); norms start at identity, biases at zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = config.d_model if name.startswith("embed_") else shape[0]
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return Parameters(config=config, tensors=tensors)


def _batch_arrays(canvases: list[Canvas], config: ScorerConfig):
    if not canvases:
        raise InvalidInputError("empty canvas batch")
    lens = [len(c.kept) + 2 for c in canvases]
    t_max = max(lens)
    if t_max > config.max_len:
        worst = int(np.argmax(lens))
        raise LengthError(
            f"canvas {worst} needs {lens[worst]} positions, model allows {config.max_len}"
        )
    batch = len(canvases)
    s_max = max(len(c.kept) + 1 for c in canvases)
    ids = np.full((batch, t_max), PAD_ID, dtype=np.int64)
    key_mask = np.full((batch, 1, 1, t_max), NEG_MASK)
    left = np.zeros((batch, s_max), dtype=np.int64)
    right = np.zeros((batch, s_max), dtype=np.int64)
    for b, c in enumerate(canvases):
        for tok in c.kept:
            if tok >= config.vocab_size:
                raise InvalidInputError(f"token id {tok} outside vocabulary")
        n = len(c.kept)
        ids[b, 0] = CLS_ID
        if n:
            ids[b, 1:n + 1] = c.kept
        ids[b, n + 1] = config.boundary_id
        key_mask[b, 0, 0, :n + 2] = 0.0
        left[b, :n + 1] = np.arange(n + 1)
        right[b, :n + 1] = np.arange(1, n + 2)
    return ids, key_mask, left, right


def _dropout_mask(shape, p: float, rng: np.random.Generator | None):
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward_graph(
    tensors: dict[str, ad.Tensor],
    config: ScorerConfig,
    ids: np.ndarray,
    key_mask: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    batch, t_max = ids.shape
    d, heads = config.d_model, config.n_heads
    d_head = d // heads
    scale = 1.0 / np.sqrt(d_head)
    p_drop = config.dropout

    x = ad.add(
        ad.embedding(tensors["embed_tokens"], ids),
        ad.embedding(tensors["embed_pos"], np.arange(t_max)),
    )
    mask = _dropout_mask(x.shape, p_drop, dropout_rng)
    if mask is not None:
        x = ad.mul_const(x, mask)

    def linear(h: ad.Tensor, w: str, b: str) -> ad.Tensor:
        return ad.add(ad.matmul(h, tensors[w]), tensors[b])

    def split_heads(h: ad.Tensor) -> ad.Tensor:
        return ad.transpose(ad.reshape(h, (batch, t_max, heads, d_head)), (0, 2, 1, 3))

    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = ad.layer_norm(x, tensors[p + "ln1.g"], tensors[p + "ln1.b"])
        q = split_heads(linear(h, p + "wq", p + "bq"))
        k = split_heads(linear(h, p + "wk", p + "bk"))
        v = split_heads(linear(h, p + "wv", p + "bv"))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        ctx = ad.matmul(ad.scaled_masked_softmax(scores, scale, key_mask), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, t_max, d))
        attn_out = linear(ctx, p + "wo", p + "bo")
        mask = _dropout_mask(attn_out.shape, p_drop, dropout_rng)
        if mask is not None:
            attn_out = ad.mul_const(attn_out, mask)
        x = ad.add(x, attn_out)
        h = ad.layer_norm(x, tensors[p + "ln2.g"], tensors[p + "ln2.b"])
        ff = linear(ad.gelu(linear(h, p + "w1", p + "b1")), p + "w2", p + "b2")
        mask = _dropout_mask(ff.shape, p_drop, dropout_rng)
        if mask is not None:
            ff = ad.mul_const(ff, mask)
        x = ad.add(x, ff)

    h = ad.layer_norm(x, tensors["lnf.g"], tensors["lnf.b"])
    pair = ad.concat([ad.gather_time(h, left), ad.gather_time(h, right)], axis=2)
    slot_repr = ad.add(ad.matmul(pair, tensors["slot.w"]), tensors["slot.b"])
    content = ad.add(ad.matmul(slot_repr, tensors["content.w"]), tensors["content.b"])
    location = ad.reshape(
        ad.add(ad.matmul(slot_repr, tensors["loc.w"]), tensors["loc.b"]),
        (batch, left.shape[1]),
    )
    return content, location


def _as_tensors(params: Parameters) -> dict[str, ad.Tensor]:
    return {name: ad.Tensor(arr) for name, arr in params.tensors.items()}


def forward(params: Parameters, canvas_batch: Iterable[Canvas]) -> list[SlotLogits]:
    """Score a batch of canvases; output order matches input order."""
    canvases = list(canvas_batch)
    ids, key_mask, left, right = _batch_arrays(canvases, params.config)
    content, location = _forward_graph(
        _as_tensors(params), params.config, ids, key_mask, left, right
    )
    out = []
    for b, c in enumerate(canvases):
        s = len(c.kept) + 1
        out.append(SlotLogits(content.data[b, :s].copy(), location.data[b, :s].copy()))
    return out


class Scorer:
    """Callable view of trained parameters, usable wherever a scorer
    function is expected."""

    def __init__(self, params: Parameters):
        self.params = params

    @property
    def config(self) -> ScorerConfig:
        return self.params.config

    @property
    def max_canvas_len(self) -> int:
        return self.params.config.max_canvas_len

    def __call__(self, canvases: Iterable[Canvas]) -> list[SlotLogits]:
        return forward(self.params, canvases)


Instance = tuple[Canvas, SlotTargets, int]


def loss_and_gradients(
    params: Parameters,
    instances: list[Instance],
    lambda_finish: float,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Summed batch loss and exact gradients for every parameter.

    Each instance is (canvas, targets, n_loss) as produced by
    :func:`kermit.objective.build_training_instance`. The loss is the
    sum of per-instance totals, so duplicating an instance doubles its
    gradient contribution. Dropout is active only when a generator is
    supplied and the config rate is positive.
    """
    if not instances:
        raise InvalidInputError("empty instance batch")
    from .canvas import NO_INSERT_ID

    config = params.config
    canvases = [inst[0] for inst in instances]
    ids, key_mask, left, right = _batch_arrays(canvases, config)
    batch, s_max = left.shape
    vocab = config.vocab_size

    w_content = np.zeros((batch, s_max, vocab))
    w_finish = np.zeros((batch, s_max, vocab))
    w_location = np.zeros((batch, s_max))
    loc_mask = np.full((batch, s_max), NEG_MASK)
    n_scale = np.zeros(batch)
    tokens_in_targets = 0
    for b, (canvas, targets, n_loss) in enumerate(instances):
        if targets.num_slots != len(canvas.kept) + 1:
            raise InvalidInputError(f"instance {b}: targets do not match canvas")
        if not targets.insertable_slots:
            raise InvalidInputError(f"instance {b}: no insertable slot")
        n_scale[b] = n_loss
        for s, targs in enumerate(targets.slot_tokens):
            for tok, w in targs:
                w_content[b, s, tok] += w
                tokens_in_targets += 1
        for s, w in enumerate(targets.location_weights):
            w_location[b, s] = w
        for s in targets.insertable_slots:
            loc_mask[b, s] = 0.0
        if targets.finish_slots:
            share = 1.0 / len(targets.finish_slots)
            for s in targets.finish_slots:
                w_finish[b, s, NO_INSERT_ID] = share

    tensors = _as_tensors(params)
    content, location = _forward_graph(
        tensors, config, ids, key_mask, left, right, dropout_rng
    )
    log_c = ad.log_softmax(content, axis=-1)
    log_l = ad.log_softmax(ad.add_const(location, loc_mask), axis=-1)

    scaled = n_scale[:, None, None] * w_content + lambda_finish * w_finish
    total_t = ad.add(
        ad.weighted_sum(log_c, -scaled),
        ad.weighted_sum(log_l, -(n_scale[:, None] * w_location)),
    )

    content_nll = -float((w_content * log_c.data).sum())
    location_nll = -float((w_location * log_l.data).sum())
    finish_nll = -float((w_finish * log_c.data).sum())
    total = float(total_t.data)
    if not np.isfinite(total):
        for b, (canvas, targets, n_loss) in enumerate(instances):
            part = (w_content[b] * log_c.data[b]).sum() + (w_location[b] * log_l.data[b]).sum()
            if not np.isfinite(part):
                raise NumericError(f"non-finite loss at instance {b}")
        raise NumericError("non-finite loss")

    ad.backward(total_t)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }
    breakdown = LossBreakdown(
        content_nll=content_nll,
        location_nll=location_nll,
        finish_nll=finish_nll,
        total=total,
        tokens_in_targets=tokens_in_targets,
        n_loss=int(n_scale.sum()),
    )
    return breakdown, grads
