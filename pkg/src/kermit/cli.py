"""Command line interface.

Subcommands: ``train``, ``decode``, ``sample``, ``infill``, ``eval`` and
``oracle-check``. Every subcommand accepts ``--config FILE`` with
``key = value`` lines (``#`` comments allowed); keys are flag names with
either dashes or underscores, and explicit command-line flags always win
over file values.

Exit codes: 0 success, 2 bad configuration or input, 3 numeric failure,
4 over-length input, 5 failed self-check.

Text conventions: sequences are space-separated vocabulary tokens,
``___`` marks an infill gap, and ``|||`` separates the two sides of a
pair in evaluation files and joint outputs.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .canvas import GAP_TOKEN, NUM_RESERVED, PairedExample, Sequence, Vocab
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    TASKS,
    as_marginal,
    load_jsonl,
    make_toy_dataset,
    vocab_for_task,
)
from .decode import (
    GAP,
    DecodeLimits,
    greedy_serial,
    infill_canvas,
    infill_pair_canvas,
    iteration_stats,
    log2_slope,
    parallel_decode,
    parallel_decode_batch,
    extract_pair,
    render_trace,
    sample_decode,
    start_canvas,
    trace_to_json,
)
from .errors import (
    ConfigError,
    KermitError,
    LengthError,
    NumericError,
    OracleFailure,
    ParseError,
    SizeLimitError,
)
from .objective import TrainingMode
from .order_prior import OrderPrior
from .scorer import Scorer, ScorerConfig
from .training import (
    DEFAULT_MODE_MIX,
    TrainConfig,
    evaluate,
    train,
)

MODE_MIX_PRESETS: dict[str, dict[TrainingMode, float]] = {
    "bidirectional": DEFAULT_MODE_MIX,
    "joint": {TrainingMode.JOINT: 1.0},
    "conditionals": {
        TrainingMode.COND_Y_GIVEN_X: 0.5,
        TrainingMode.COND_X_GIVEN_Y: 0.5,
    },
    "marginal_x": {TrainingMode.MARGINAL_X: 1.0},
    "marginal_y": {TrainingMode.MARGINAL_Y: 1.0},
}

CONDITIONAL_MODES = ("cond_y_given_x", "cond_x_given_y")
ALL_MODES = tuple(m.value for m in TrainingMode)


# --- argument plumbing ---------------------------------------------------

def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; dashes in keys are treated as underscores."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def apply_config_defaults(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            try:
                sub.set_defaults(**{key: _BOOL_WORDS[value.lower()]})
            except KeyError:
                raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")
        else:
            sub.set_defaults(**{key: value})


def parse_mode_mix(text: str) -> tuple[tuple[TrainingMode, float], ...]:
    preset = MODE_MIX_PRESETS.get(text)
    if preset is not None:
        return tuple(preset.items())
    out = []
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(
                f"bad mode mix {text!r}: expected a preset "
                f"({', '.join(MODE_MIX_PRESETS)}) or name=weight pairs"
            )
        name, weight = part.split("=", 1)
        try:
            mode = TrainingMode(name.strip())
        except ValueError:
            raise ConfigError(f"unknown mode {name.strip()!r} in mode mix") from None
        try:
            out.append((mode, float(weight)))
        except ValueError:
            raise ConfigError(f"bad weight {weight!r} in mode mix") from None
    return tuple(out)


def _add_task_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--task", choices=TASKS, default="cipher_pair", help="toy task")
    sub.add_argument("--num-user-tokens", type=int, default=20, help="user vocabulary size")
    sub.add_argument("--min-len", type=int, default=2, help="shortest source length")
    sub.add_argument("--max-len", type=int, default=10, help="longest source length")


def _add_decode_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--checkpoint", required=True, help="model checkpoint path")
    sub.add_argument("--vocab", default=None, help="vocabulary file (default: vocab.txt beside the checkpoint)")
    sub.add_argument("--max-iterations", type=int, default=None, help="decode iteration cap")
    sub.add_argument("--max-output-len", type=int, default=None, help="canvas length cap")
    sub.add_argument("--eos-penalty", type=float, default=0.0, help="subtracted from the stop logit")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="kermit",
        description="Insertion-based sequence model: train, decode, inspect.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        sub.add_argument("--config", default=None, help="key = value defaults file")
        registry[name] = sub
        return sub

    t = add("train", "train a scorer on a toy task or JSONL data")
    _add_task_flags(t)
    t.add_argument("--train-count", type=int, default=2048, help="generated training pairs")
    t.add_argument("--data-seed", type=int, default=1, help="seed for the training pool")
    t.add_argument("--train-file", default=None, help="JSONL training data (overrides --task)")
    t.add_argument("--unpaired-file", default=None, help="JSONL one-sided examples")
    t.add_argument("--vocab-file", default=None, help="vocabulary (required with --train-file)")
    t.add_argument("--unpaired-count", type=int, default=0, help="extra generated one-sided examples")
    t.add_argument("--unpaired-side", choices=("x", "y"), default="x", help="side kept for generated one-sided examples")
    t.add_argument("--unpaired-fraction", type=float, default=None, help="share of batch drawn from the one-sided pool (default: 0.1 when such data exists)")
    t.add_argument("--steps", type=int, default=1000, help="optimizer steps")
    t.add_argument("--batch-size", type=int, default=16, help="instances per step")
    t.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    t.add_argument("--warmup-steps", type=int, default=0, help="linear lr ramp-in steps")
    t.add_argument("--beta1", type=float, default=0.9, help="Adam first-moment decay")
    t.add_argument("--beta2", type=float, default=0.98, help="Adam second-moment decay")
    t.add_argument("--clip-norm", type=float, default=1.0, help="global gradient norm cap")
    t.add_argument("--lambda-finish", type=float, default=1.0, help="weight of the finish term")
    t.add_argument("--p-complete", type=float, default=None, help="probability of a complete-canvas instance (default: 1/(n+1))")
    t.add_argument("--prior", choices=("uniform", "binary_tree"), default="binary_tree", help="generation-order prior")
    t.add_argument("--tau", type=float, default=1.0, help="binary_tree temperature")
    t.add_argument("--mode-mix", default="bidirectional", help="preset name or comma list of mode=weight")
    t.add_argument("--d-model", type=int, default=64, help="model width")
    t.add_argument("--n-layers", type=int, default=2, help="transformer layers")
    t.add_argument("--n-heads", type=int, default=4, help="attention heads")
    t.add_argument("--d-ff", type=int, default=128, help="feed-forward width")
    t.add_argument("--max-positions", type=int, default=128, help="position table size")
    t.add_argument("--dropout", type=float, default=0.0, help="dropout rate")
    t.add_argument("--seed", type=int, default=0, help="training seed")
    t.add_argument("--log-every", type=int, default=100, help="steps between metric rows")
    t.add_argument("--eval-every", type=int, default=0, help="steps between exact-match evals (0: final only)")
    t.add_argument("--eval-count", type=int, default=0, help="held-out pairs for exact match")
    t.add_argument("--eval-seed", type=int, default=2, help="seed for the held-out pool")
    t.add_argument("--eval-mode", choices=CONDITIONAL_MODES, default="cond_y_given_x", help="direction scored during training")
    t.add_argument("--out", required=True, help="output directory")

    d = add("decode", "greedy decoding from a checkpoint")
    _add_decode_flags(d)
    d.add_argument("--mode", choices=ALL_MODES, default="cond_y_given_x", help="what to generate")
    d.add_argument("--input", default=None, help="space-separated tokens of the given side")
    d.add_argument("--input-file", default=None, help="file with one input per line")
    d.add_argument("--strategy", choices=("parallel", "serial"), default="parallel", help="all slots at once, or one token per iteration")
    d.add_argument("--trace", action="store_true", help="print every intermediate canvas")
    d.add_argument("--trace-json", default=None, help="write the trace as JSON to this path")

    s = add("sample", "stochastic decoding from a checkpoint")
    _add_decode_flags(s)
    s.add_argument("--mode", choices=ALL_MODES, default="marginal_x", help="what to generate")
    s.add_argument("--input", default=None, help="space-separated tokens of the given side")
    s.add_argument("--temperature", type=float, default=1.0, help="softmax temperature (0: greedy)")
    s.add_argument("--count", type=int, default=1, help="number of samples")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")

    f = add("infill", "fill gaps in a partial sequence")
    _add_decode_flags(f)
    f.add_argument("--template", required=True, help=f"tokens with {GAP_TOKEN!r} for each gap")
    f.add_argument("--side", choices=("x", "y"), default="x", help="which side the sequence belongs to")
    f.add_argument("--input", default=None, help="full source side; the template then fills the target side")
    f.add_argument("--trace", action="store_true", help="print every intermediate canvas")

    e = add("eval", "exact match and iteration statistics")
    _add_decode_flags(e)
    _add_task_flags(e)
    e.add_argument("--eval-count", type=int, default=200, help="generated held-out pairs")
    e.add_argument("--eval-seed", type=int, default=2, help="seed for the held-out pool")
    e.add_argument("--eval-file", default=None, help="file of 'x tokens ||| y tokens' lines (overrides --task)")
    e.add_argument("--direction", choices=("yx", "xy", "both"), default="both", help="conditional directions to score")
    e.add_argument("--serial-check", action="store_true", help="also decode serially and report iteration counts")

    o = add("oracle-check", "self-check the math against brute force")
    o.add_argument("--trials", type=int, default=5, help="random scorers per check")
    o.add_argument("--seed", type=int, default=0, help="seed for the random scorers")
    o.add_argument("--checkpoint", default=None, help="also check a trained checkpoint")
    o.add_argument("--max-terminated-len", type=int, default=3, help="length bound for the stop-probability sum")

    return parser, registry


# --- shared helpers ------------------------------------------------------

def _load_model(args) -> tuple[Scorer, Vocab]:
    params = load_checkpoint(args.checkpoint)
    vocab_path = args.vocab or str(Path(args.checkpoint).parent / "vocab.txt")
    if not Path(vocab_path).exists():
        raise ConfigError(f"vocabulary file {vocab_path} not found; pass --vocab")
    vocab = Vocab.from_file(vocab_path)
    if len(vocab) != params.config.vocab_size:
        raise ConfigError(
            f"vocabulary has {len(vocab)} entries, checkpoint expects "
            f"{params.config.vocab_size}"
        )
    return Scorer(params), vocab


def _encode_side(text: str, vocab: Vocab) -> Sequence:
    ids = vocab.encode(text.split())
    bad = [t for t in ids if t < NUM_RESERVED]
    if bad:
        raise ParseError(f"reserved token in input: {vocab.token(bad[0])!r}")
    return Sequence(ids)


def _limits(args, **extra) -> DecodeLimits:
    return DecodeLimits(
        max_iterations=args.max_iterations,
        max_len=args.max_output_len,
        eos_penalty=args.eos_penalty,
        **extra,
    )


def _start_for_mode(mode: TrainingMode, given: Sequence | None):
    if mode in (TrainingMode.COND_Y_GIVEN_X, TrainingMode.MARGINAL_X, TrainingMode.MARGINAL_Y, TrainingMode.JOINT):
        if mode is TrainingMode.COND_Y_GIVEN_X:
            return start_canvas(mode, x=given)
        return start_canvas(mode)
    return start_canvas(mode, y=given)


def _format_output(mode: TrainingMode, canvas, vocab: Vocab) -> str:
    pair = extract_pair(canvas)
    x = " ".join(vocab.decode(pair.x))
    y = " ".join(vocab.decode(pair.y))
    if mode is TrainingMode.JOINT:
        return f"{x} ||| {y}"
    if mode in (TrainingMode.COND_Y_GIVEN_X, TrainingMode.MARGINAL_Y):
        return y
    if mode is TrainingMode.COND_X_GIVEN_Y:
        return x
    return x if pair.has_x else y


def _needs_input(mode: TrainingMode) -> bool:
    return mode in (TrainingMode.COND_Y_GIVEN_X, TrainingMode.COND_X_GIVEN_Y)


# --- subcommand handlers -------------------------------------------------

def cmd_train(args) -> int:
    if args.train_file:
        if not args.vocab_file:
            raise ConfigError("--train-file needs --vocab-file")
        vocab = Vocab.from_file(args.vocab_file)
        examples = load_jsonl(args.train_file, vocab)
        paired = [ex for ex in examples if ex.has_x and ex.has_y]
        unpaired = [ex for ex in examples if not (ex.has_x and ex.has_y)]
        if args.unpaired_file:
            unpaired += load_jsonl(args.unpaired_file, vocab)
        eval_examples = []
    else:
        vocab = vocab_for_task(args.num_user_tokens)
        paired = make_toy_dataset(
            args.task, args.num_user_tokens, args.train_count,
            args.min_len, args.max_len, seed=args.data_seed,
        )
        unpaired = []
        if args.unpaired_count:
            extra = make_toy_dataset(
                args.task, args.num_user_tokens, args.unpaired_count,
                args.min_len, args.max_len, seed=args.data_seed + 1,
            )
            unpaired = as_marginal(extra, args.unpaired_side)
        eval_examples = []
        if args.eval_count:
            eval_examples = make_toy_dataset(
                args.task, args.num_user_tokens, args.eval_count,
                args.min_len, args.max_len, seed=args.eval_seed,
            )

    scorer_config = ScorerConfig(
        vocab_size=len(vocab),
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_len=args.max_positions,
        dropout=args.dropout,
    )
    prior = OrderPrior.uniform() if args.prior == "uniform" else OrderPrior.binary_tree(args.tau)
    config = TrainConfig(
        scorer=scorer_config,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        beta1=args.beta1,
        beta2=args.beta2,
        clip_norm=args.clip_norm,
        lambda_finish=args.lambda_finish,
        p_complete=args.p_complete,
        prior=prior,
        mode_mix=parse_mode_mix(args.mode_mix),
        unpaired_fraction=args.unpaired_fraction,
        seed=args.seed,
        log_every=args.log_every,
        eval_every=args.eval_every,
        eval_mode=TrainingMode(args.eval_mode),
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        config,
        paired,
        unpaired=unpaired,
        eval_examples=eval_examples,
        metrics_path=out_dir / "metrics.csv",
    )
    save_checkpoint(result.params, out_dir / "model.kermit")
    vocab.save(out_dir / "vocab.txt")

    last = result.rows[-1]
    print(f"trained {config.steps} steps on {result.examples_seen} instances")
    print(f"final loss {last.loss.total:.6g} (per token {last.loss.per_token:.6g})")
    if last.eval_exact_match is not None:
        print(f"exact match ({config.eval_mode.value}): {last.eval_exact_match:.4f}")
    print(f"checkpoint: {out_dir / 'model.kermit'}")
    return 0


def cmd_decode(args) -> int:
    scorer, vocab = _load_model(args)
    mode = TrainingMode(args.mode)
    limits = _limits(args)

    if args.input is not None and args.input_file is not None:
        raise ConfigError("pass --input or --input-file, not both")
    if _needs_input(mode):
        if args.input is None and args.input_file is None:
            raise ConfigError(f"mode {mode.value} needs --input or --input-file")
    inputs: list[Sequence | None]
    if args.input_file is not None:
        lines = Path(args.input_file).read_text().splitlines()
        inputs = [_encode_side(line, vocab) for line in lines if line.strip()]
        if not inputs:
            raise ConfigError(f"{args.input_file} holds no inputs")
    else:
        inputs = [_encode_side(args.input, vocab) if args.input else None]

    starts = [_start_for_mode(mode, given) for given in inputs]
    if args.strategy == "parallel":
        traces = parallel_decode_batch(scorer, starts, limits)
    else:
        traces = [greedy_serial(scorer, s, limits) for s in starts]

    for trace in traces:
        if args.trace:
            for line in render_trace(trace, vocab):
                print(line)
        print(_format_output(mode, trace.final, vocab))
    if args.trace_json:
        payload = "\n".join(trace_to_json(t) for t in traces) + "\n"
        Path(args.trace_json).write_text(payload)
    return 0


def cmd_sample(args) -> int:
    scorer, vocab = _load_model(args)
    mode = TrainingMode(args.mode)
    if _needs_input(mode) and args.input is None:
        raise ConfigError(f"mode {mode.value} needs --input")
    if args.count < 1:
        raise ConfigError("--count must be positive")
    given = _encode_side(args.input, vocab) if args.input else None
    limits = _limits(args, temperature=args.temperature)
    for k in range(args.count):
        rng = np.random.default_rng([args.seed, k])
        trace = sample_decode(scorer, _start_for_mode(mode, given), rng, limits)
        print(_format_output(mode, trace.final, vocab))
    return 0


def cmd_infill(args) -> int:
    scorer, vocab = _load_model(args)
    template = [
        GAP if tok == GAP_TOKEN else vocab.lookup(tok) for tok in args.template.split()
    ]
    if args.input is not None:
        canvas = infill_pair_canvas(_encode_side(args.input, vocab), template)
        out_side = "y"
    else:
        canvas = infill_canvas(template, side=args.side)
        out_side = args.side
    trace = parallel_decode(scorer, canvas, _limits(args))
    if args.trace:
        for line in render_trace(trace, vocab):
            print(line)
    pair = extract_pair(trace.final)
    side = pair.x if out_side == "x" else pair.y
    print(" ".join(vocab.decode(side)))
    return 0


def _read_pair_file(path: str, vocab: Vocab) -> list[PairedExample]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("|||")
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'x tokens ||| y tokens'")
        out.append(
            PairedExample.pair(_encode_side(parts[0], vocab), _encode_side(parts[1], vocab))
        )
    if not out:
        raise ParseError(f"{path} holds no pairs")
    return out


def cmd_eval(args) -> int:
    scorer, vocab = _load_model(args)
    if args.eval_file:
        examples = _read_pair_file(args.eval_file, vocab)
    else:
        if len(vocab) != len(vocab_for_task(args.num_user_tokens)):
            raise ConfigError(
                "--num-user-tokens does not match the checkpoint vocabulary; "
                "pass the value used at training time"
            )
        examples = make_toy_dataset(
            args.task, args.num_user_tokens, args.eval_count,
            args.min_len, args.max_len, seed=args.eval_seed,
        )
    limits = _limits(args)

    directions = {
        "yx": (TrainingMode.COND_Y_GIVEN_X,),
        "xy": (TrainingMode.COND_X_GIVEN_Y,),
        "both": (TrainingMode.COND_Y_GIVEN_X, TrainingMode.COND_X_GIVEN_Y),
    }[args.direction]
    all_traces = []
    for mode in directions:
        result = evaluate(scorer, examples, mode, limits)
        print(
            f"exact_match {mode.value}: {result.exact_match:.4f} "
            f"token_accuracy {result.token_accuracy:.4f} (n={len(examples)})"
        )
        all_traces.extend(result.traces)

    for bucket in iteration_stats(all_traces):
        hi = "+" if not bucket.hi else f"-{bucket.hi - 1}"
        print(
            f"parallel iterations, {bucket.lo}{hi} tokens: "
            f"median {bucket.median_iterations:g} over {bucket.count} decodes"
        )
    try:
        print(f"log2 slope: {log2_slope(all_traces):.3f}")
    except KermitError:
        pass

    if args.serial_check:
        mode = directions[0]
        serial_iters = []
        for ex in examples[: min(20, len(examples))]:
            start = (
                start_canvas(mode, x=ex.x)
                if mode is TrainingMode.COND_Y_GIVEN_X
                else start_canvas(mode, y=ex.y)
            )
            trace = greedy_serial(scorer, start, limits)
            serial_iters.append(trace.num_iterations)
        print(
            f"serial iterations ({mode.value}): "
            f"min {min(serial_iters)} max {max(serial_iters)}"
        )
    return 0


def cmd_oracle_check(args) -> int:
    from . import oracle_suite

    report = oracle_suite.run_all(
        trials=args.trials,
        seed=args.seed,
        checkpoint=args.checkpoint,
        max_terminated_len=args.max_terminated_len,
    )
    for line in report:
        print(line)
    return 0


HANDLERS = {
    "train": cmd_train,
    "decode": cmd_decode,
    "sample": cmd_sample,
    "infill": cmd_infill,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
}

EXIT_CODES = (
    (OracleFailure, 5),
    (LengthError, 4),
    (SizeLimitError, 4),
    (NumericError, 3),
    (KermitError, 2),
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            apply_config_defaults(registry[args.command], read_config_file(args.config))
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        return HANDLERS[args.command](args)
    except KermitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                return code
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
