"""Self-check battery behind the ``oracle-check`` subcommand.

Each check compares a fast-path computation against brute force or a
closed form on problems small enough to enumerate. Any deviation past
tolerance raises :class:`kermit.errors.OracleFailure`; the caller maps
that to exit code 5. The checks run on freshly initialized tiny
scorers by default and can additionally exercise a trained checkpoint.
"""
from __future__ import annotations

import math
from itertools import product
from types import SimpleNamespace

import numpy as np
from scipy.special import log_softmax

from .canvas import NUM_RESERVED, Sequence
from .errors import OracleFailure
from .objective import (
    estimate_elbo,
    exact_elbo,
    exact_log_likelihood,
    insertion_mass_log,
    terminated_log_likelihood,
)
from .order_prior import (
    OrderPrior,
    binary_tree_span_weights,
    enumerate_partial_orders,
)
from .scorer import Scorer, ScorerConfig, init_parameters

TINY = ScorerConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=24)


def _fail(name: str, detail: str) -> None:
    raise OracleFailure(f"{name}: {detail}")


def _priors() -> tuple[OrderPrior, ...]:
    return (OrderPrior.uniform(), OrderPrior.binary_tree(1.0))


def _random_sequence(rng: np.random.Generator, vocab_size: int, n: int) -> Sequence:
    ids = rng.integers(NUM_RESERVED, vocab_size, size=n)
    return Sequence(tuple(int(t) for t in ids))


def check_order_prior(seed: int) -> str:
    rng = np.random.default_rng([seed, 1])
    for prior in _priors():
        for n in range(2, 7):
            i = int(rng.integers(1, n + 1))
            mass = sum(p for _, p in enumerate_partial_orders(n, i, prior))
            if abs(mass - 1.0) > 1e-12:
                _fail("order_prior", f"kept-set masses sum to {mass} at n={n}, i={i}")
    for _ in range(5):
        m = int(rng.integers(1, 12))
        tau = float(rng.uniform(0.05, 5.0))
        w = binary_tree_span_weights(m, tau)
        if abs(sum(w) - 1.0) > 1e-12:
            _fail("order_prior", f"span weights sum to {sum(w)} at m={m}")
        if any(abs(a - b) > 1e-12 for a, b in zip(w, reversed(w))):
            _fail("order_prior", f"span weights not symmetric at m={m}")
    return "ok: order prior normalization and symmetry"


def check_bound_vs_likelihood(trials: int, seed: int, scorer=None, vocab_size=None) -> str:
    rng = np.random.default_rng([seed, 2])
    for t in range(trials):
        sc = scorer or Scorer(init_parameters(TINY, seed=seed * 1000 + t))
        v = vocab_size or TINY.vocab_size
        for prior in _priors():
            x = _random_sequence(rng, v, int(rng.integers(2, 5)))
            lo = exact_elbo(x, sc, prior)
            hi = exact_log_likelihood(x, sc, prior)
            if hi - lo < -1e-12:
                _fail("bound", f"bound {lo} exceeds likelihood {hi} for {tuple(x)}")
            one = _random_sequence(rng, v, 1)
            gap = exact_log_likelihood(one, sc, prior) - exact_elbo(one, sc, prior)
            if abs(gap) > 1e-12:
                _fail("bound", f"length-1 gap {gap} should vanish")
    return "ok: sampled-order bound stays below the exact likelihood"


def check_estimator(trials: int, seed: int, scorer=None, vocab_size=None, draws: int = 400) -> str:
    rng = np.random.default_rng([seed, 3])
    for t in range(trials):
        sc = scorer or Scorer(init_parameters(TINY, seed=seed * 2000 + t))
        v = vocab_size or TINY.vocab_size
        prior = _priors()[t % 2]
        x = _random_sequence(rng, v, 3)
        exact = exact_elbo(x, sc, prior)
        samples = [estimate_elbo(x, sc, prior, 1, rng) for _ in range(draws)]
        mean = float(np.mean(samples))
        se = float(np.std(samples)) / math.sqrt(draws)
        if abs(mean - exact) > max(6.0 * se, 1e-9):
            _fail(
                "estimator",
                f"mean {mean} vs exact {exact} beyond 6 standard errors ({se})",
            )
    return "ok: single-draw estimator agrees with enumeration in expectation"


class _FlatScorer:
    """Same content row and location value on every slot of every canvas."""

    def __init__(self, row: np.ndarray):
        self.row = np.asarray(row, dtype=np.float64)

    def __call__(self, canvases):
        out = []
        for c in canvases:
            s = len(c.kept) + 1
            out.append(
                SimpleNamespace(
                    content=np.tile(self.row, (s, 1)), location=np.zeros(s)
                )
            )
        return out


def check_flat_scorer_closed_form(seed: int) -> str:
    rng = np.random.default_rng([seed, 4])
    row = rng.normal(size=TINY.vocab_size)
    sc = _FlatScorer(row)
    ls = log_softmax(row)
    for prior in _priors():
        for n in (1, 2, 4):
            x = _random_sequence(rng, TINY.vocab_size, n)
            want = float(sum(ls[t] for t in x)) - math.log(math.factorial(n))
            for name, got in (
                ("likelihood", exact_log_likelihood(x, sc, prior)),
                ("bound", exact_elbo(x, sc, prior)),
            ):
                if abs(got - want) > 1e-9:
                    _fail(
                        "flat_scorer",
                        f"{name} {got} differs from closed form {want} at n={n}",
                    )
    return "ok: canvas-independent scorer matches its closed form"


def check_termination_partition(seed: int, max_len: int) -> str:
    config = ScorerConfig(
        vocab_size=NUM_RESERVED + 2, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16
    )
    sc = Scorer(init_parameters(config, seed=seed))
    tokens = tuple(range(NUM_RESERVED, NUM_RESERVED + 2))
    total = 0.0
    for n in range(max_len + 1):
        for p in product(tokens, repeat=n):
            total += math.exp(terminated_log_likelihood(Sequence(p), sc))
    for p in product(tokens, repeat=max_len + 1):
        total += math.exp(insertion_mass_log(Sequence(p), sc))
    if abs(total - 1.0) > 1e-6:
        _fail("termination", f"stop-probability partition sums to {total}")
    return f"ok: termination partition sums to one up to length {max_len}"


def run_all(
    trials: int = 5,
    seed: int = 0,
    checkpoint: str | None = None,
    max_terminated_len: int = 3,
) -> list[str]:
    report = [
        check_order_prior(seed),
        check_bound_vs_likelihood(trials, seed),
        check_estimator(max(1, trials // 2), seed),
        check_flat_scorer_closed_form(seed),
        check_termination_partition(seed, max_terminated_len),
    ]
    if checkpoint is not None:
        from .checkpoint import load_checkpoint

        params = load_checkpoint(checkpoint)
        sc = Scorer(params)
        v = params.config.vocab_size
        report.append(
            check_bound_vs_likelihood(min(2, trials), seed, scorer=sc, vocab_size=v)
            + " (checkpoint)"
        )
        report.append(
            check_estimator(1, seed, scorer=sc, vocab_size=v, draws=200) + " (checkpoint)"
        )
    return report
