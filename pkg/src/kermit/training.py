"""Training loop, optimizer and evaluation for the insertion scorer.

Randomness policy: every batch slot owns an rng stream keyed by
(seed, step, slot). The first draw on each stream is always the coin
that decides paired-versus-unpaired, even when the unpaired fraction
is zero. Because of that, removing the unpaired pool does not shift
any later draw: the paired instances of a mixed run are, slot by slot,
identical to the instances of a paired-only run with the same seed.
Refining-with-unpaired-data comparisons therefore differ only in the
extra marginal instances, not in a reshuffled batch sequence.

Metrics are written as CSV with a fixed header and %.10g formatting,
and contain no wall-clock values, so reruns are byte-identical.
``KERMIT_THREADS`` caps the worker threads used to spread evaluation
chunks; results are ordered and thread-count independent.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence as TypingSequence

import numpy as np

from .canvas import PairedExample
from .decode import DecodeLimits, DecodeTrace, extract_pair, parallel_decode_batch, start_canvas
from .errors import ConfigError, InvalidInputError
from .objective import LossBreakdown, TrainingMode, build_training_instance
from .order_prior import OrderPrior
from .scorer import Parameters, Scorer, ScorerConfig, init_parameters, loss_and_gradients

DEFAULT_MODE_MIX: dict[TrainingMode, float] = {
    TrainingMode.JOINT: 0.5,
    TrainingMode.COND_Y_GIVEN_X: 0.2,
    TrainingMode.COND_X_GIVEN_Y: 0.2,
    TrainingMode.MARGINAL_X: 0.05,
    TrainingMode.MARGINAL_Y: 0.05,
}

PAIRED_MODES = (
    TrainingMode.JOINT,
    TrainingMode.COND_Y_GIVEN_X,
    TrainingMode.COND_X_GIVEN_Y,
)


@dataclass(frozen=True)
class TrainConfig:
    scorer: ScorerConfig
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    lambda_finish: float = 1.0
    p_complete: float | None = None
    prior: OrderPrior = field(default_factory=OrderPrior.uniform)
    mode_mix: tuple[tuple[TrainingMode, float], ...] | None = None
    unpaired_fraction: float | None = None
    seed: int = 0
    log_every: int = 100
    eval_every: int = 0
    eval_mode: TrainingMode = TrainingMode.COND_Y_GIVEN_X

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.lambda_finish < 0:
            raise ConfigError("lambda_finish must be non-negative")
        if self.unpaired_fraction is not None and not 0 <= self.unpaired_fraction <= 1:
            raise ConfigError("unpaired_fraction must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")

    def mode_distribution(self) -> tuple[tuple[TrainingMode, float], ...]:
        mix = dict(DEFAULT_MODE_MIX) if self.mode_mix is None else dict(self.mode_mix)
        total = sum(mix.values())
        if total <= 0 or any(w < 0 for w in mix.values()):
            raise ConfigError("mode mix weights must be non-negative and sum > 0")
        return tuple((TrainingMode(m), w / total) for m, w in mix.items() if w > 0)


class Adam:
    """Adam with global-norm gradient clipping applied before the update
    and optional linear learning-rate warmup."""

    def __init__(self, config: TrainConfig, shapes: dict[str, tuple[int, ...]]):
        self.lr = config.lr
        self.warmup = config.warmup_steps
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.clip_norm = config.clip_norm
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update tensors in place; returns the pre-clip gradient norm."""
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        self.t += 1
        lr = self.lr if self.t >= self.warmup else self.lr * self.t / self.warmup
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = g * scale
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


METRICS_HEADER = (
    "step,examples_seen,loss_total,content_nll,location_nll,finish_nll,"
    "per_token,grad_norm,eval_exact_match,eval_token_accuracy,eval_mean_iterations"
)


@dataclass(frozen=True)
class MetricsRow:
    step: int
    examples_seen: int
    loss: LossBreakdown
    grad_norm: float
    eval_exact_match: float | None = None
    eval_token_accuracy: float | None = None
    eval_mean_iterations: float | None = None

    def to_csv(self) -> str:
        def num(v: float | None) -> str:
            return "" if v is None else format(float(v), ".10g")

        cells = [
            str(self.step),
            str(self.examples_seen),
            num(self.loss.total),
            num(self.loss.content_nll),
            num(self.loss.location_nll),
            num(self.loss.finish_nll),
            num(self.loss.per_token),
            num(self.grad_norm),
            num(self.eval_exact_match),
            num(self.eval_token_accuracy),
            num(self.eval_mean_iterations),
        ]
        return ",".join(cells)


@dataclass
class TrainResult:
    params: Parameters
    rows: list[MetricsRow]
    examples_seen: int

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss.total if self.rows else float("nan")


def _resolve_unpaired_fraction(config: TrainConfig, unpaired: TypingSequence) -> float:
    if config.unpaired_fraction is None:
        return 0.1 if unpaired else 0.0
    if config.unpaired_fraction > 0 and not unpaired:
        raise ConfigError("unpaired_fraction > 0 but no unpaired examples given")
    return config.unpaired_fraction


def draw_batch(
    config: TrainConfig,
    step: int,
    paired: TypingSequence[PairedExample],
    unpaired: TypingSequence[PairedExample] = (),
):
    """The instances for one step, with their paired/unpaired tags.

    Pure in (config, step, data): used by the loop and directly
    testable for the stream-alignment property described in the module
    docstring.
    """
    fraction = _resolve_unpaired_fraction(config, unpaired)
    modes = config.mode_distribution()
    names = [m for m, _ in modes]
    probs = np.array([w for _, w in modes])
    instances = []
    tags = []
    for k in range(config.batch_size):
        rng = np.random.default_rng([config.seed, step, k])
        coin = rng.random()
        if coin < fraction:
            example = unpaired[int(rng.integers(len(unpaired)))]
            mode = TrainingMode.MARGINAL_X if example.has_x else TrainingMode.MARGINAL_Y
            tags.append("unpaired")
        else:
            example = paired[int(rng.integers(len(paired)))]
            mode = names[int(rng.choice(len(names), p=probs))]
            tags.append("paired")
        instances.append(
            build_training_instance(example, mode, config.prior, rng, config.p_complete)
        )
    return instances, tags


def _validate_pools(
    config: TrainConfig,
    paired: TypingSequence[PairedExample],
    unpaired: TypingSequence[PairedExample],
) -> None:
    if not paired:
        raise InvalidInputError("no training examples")
    modes = [m for m, _ in config.mode_distribution()]
    needs_pairs = any(m in PAIRED_MODES for m in modes)
    for ex in paired:
        if needs_pairs and not (ex.has_x and ex.has_y):
            raise InvalidInputError(
                "mode mix includes paired modes but an example is one-sided"
            )
        if TrainingMode.MARGINAL_X in modes and not ex.has_x:
            raise InvalidInputError("marginal_x in mix but an example lacks x")
        if TrainingMode.MARGINAL_Y in modes and not ex.has_y:
            raise InvalidInputError("marginal_y in mix but an example lacks y")
    for ex in unpaired:
        if ex.has_x and ex.has_y:
            raise InvalidInputError("unpaired pool contains a full pair")


def train(
    config: TrainConfig,
    examples: TypingSequence[PairedExample],
    unpaired: TypingSequence[PairedExample] = (),
    eval_examples: TypingSequence[PairedExample] = (),
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Run the full loop; returns trained parameters and metric rows.

    A metrics row is emitted every ``log_every`` steps and at the last
    step. When ``eval_every`` is positive and eval examples are given,
    those rows also carry greedy exact-match accuracy for
    ``config.eval_mode``."""
    _validate_pools(config, examples, unpaired)
    params = init_parameters(config.scorer, seed=config.seed)
    optimizer = Adam(config, {k: v.shape for k, v in params.tensors.items()})
    rows: list[MetricsRow] = []
    examples_seen = 0

    for step in range(1, config.steps + 1):
        instances, _ = draw_batch(config, step, examples, unpaired)
        examples_seen += len(instances)
        dropout_rng = (
            np.random.default_rng([config.seed, step, config.batch_size])
            if config.scorer.dropout > 0
            else None
        )
        breakdown, grads = loss_and_gradients(
            params, instances, config.lambda_finish, dropout_rng
        )
        grad_norm = optimizer.step(params.tensors, grads)

        eval_due = bool(eval_examples) and (
            step == config.steps
            or (config.eval_every and step % config.eval_every == 0)
        )
        row_due = eval_due or step % config.log_every == 0 or step == config.steps
        if row_due:
            em = acc = iters = None
            if eval_due:
                result = evaluate(Scorer(params), eval_examples, config.eval_mode)
                em = result.exact_match
                acc = result.token_accuracy
                iters = result.mean_iterations
            rows.append(
                MetricsRow(
                    step=step,
                    examples_seen=examples_seen,
                    loss=breakdown,
                    grad_norm=grad_norm,
                    eval_exact_match=em,
                    eval_token_accuracy=acc,
                    eval_mean_iterations=iters,
                )
            )

    if metrics_path is not None:
        lines = [METRICS_HEADER] + [r.to_csv() for r in rows]
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    return TrainResult(params=params, rows=rows, examples_seen=examples_seen)


@dataclass(frozen=True)
class EvalResult:
    exact_match: float
    token_accuracy: float
    mean_iterations: float
    traces: tuple[DecodeTrace, ...]


def _answer(mode: TrainingMode, example: PairedExample) -> tuple[int, ...]:
    if mode is TrainingMode.COND_Y_GIVEN_X:
        return tuple(example.y)
    if mode is TrainingMode.COND_X_GIVEN_Y:
        return tuple(example.x)
    raise InvalidInputError("exact match needs a conditional mode")


def _start_for(mode: TrainingMode, example: PairedExample):
    if mode is TrainingMode.COND_Y_GIVEN_X:
        return start_canvas(mode, x=example.x)
    return start_canvas(mode, y=example.y)


def evaluate(
    scorer,
    examples: TypingSequence[PairedExample],
    mode: TrainingMode | str = TrainingMode.COND_Y_GIVEN_X,
    limits: DecodeLimits = DecodeLimits(),
    chunk_size: int = 32,
) -> EvalResult:
    """Greedy parallel decoding exact match for a conditional direction.

    Work is split into chunks of ``chunk_size`` decodes; chunks run on
    up to ``KERMIT_THREADS`` threads (default 1). Outputs are collected
    in input order either way."""
    mode = TrainingMode(mode)
    if not examples:
        raise InvalidInputError("no evaluation examples")
    starts = [_start_for(mode, ex) for ex in examples]
    groups = [
        list(range(lo, min(lo + chunk_size, len(starts))))
        for lo in range(0, len(starts), chunk_size)
    ]
    threads = int(os.environ.get("KERMIT_THREADS", "1"))

    def run(group: list[int]) -> list[DecodeTrace]:
        return parallel_decode_batch(
            scorer, [starts[i] for i in group], limits, chunk_size=chunk_size
        )

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, groups))
    else:
        chunks = [run(g) for g in groups]
    traces = tuple(t for chunk in chunks for t in chunk)

    hits = 0
    tok_hits = 0
    tok_total = 0
    for ex, trace in zip(examples, traces):
        got = extract_pair(trace.final)
        side = tuple(got.y if mode is TrainingMode.COND_Y_GIVEN_X else got.x)
        want = _answer(mode, ex)
        hits += side == want
        # positional matches over the longer of the two lengths, so extra
        # or missing tokens both count against accuracy
        tok_hits += sum(a == b for a, b in zip(side, want))
        tok_total += max(len(side), len(want))
    return EvalResult(
        exact_match=hits / len(examples),
        token_accuracy=tok_hits / tok_total if tok_total else 1.0,
        mean_iterations=sum(len(t.iterations) for t in traces) / len(traces),
        traces=traces,
    )
