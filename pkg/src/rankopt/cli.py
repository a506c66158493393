"""Command-line entry point.

Modes: gen-data, train, eval, inspect, selfcheck. Every flag can also be
set through a key=value config file (--config); explicit command-line
flags win. Exit codes: 0 success, 1 usage error, 2 data or model error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import inference, selfcheck
from .data_episodes import (
    EpisodeSpec,
    evaluate,
    generate_synthetic,
    load_dataset,
    sample_batch,
    save_dataset,
    split_by_class,
)
from .errors import (
    ContractError,
    DataFormatError,
    Diverged,
    EmptyGradient,
    PlacementFailed,
)
from .learner import (
    METRICS_CSV_HEADER,
    GradientRule,
    TrainConfig,
    train,
)
from .ranking_metrics import relevance_mask
from .scoring import (
    DEFAULT_HIDDEN_DIMS,
    EmbeddingModel,
    decompose_batch,
    load_model,
    save_model,
    similarity_matrix,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from exc


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats: {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="rankopt", allow_abbrev=False)
    sub = parser.add_subparsers(dest="mode", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int, default=0)

    gen = sub.add_parser("gen-data", help="write a synthetic CSV dataset")
    common(gen)
    gen.add_argument("--out", help="output CSV path")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--per-class", type=int, default=60)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--spread", type=float, default=1.0)
    gen.add_argument("--separation", type=float, default=6.0)

    tr = sub.add_parser("train", help="train an embedding model")
    common(tr)
    tr.add_argument("--data", help="dataset CSV path")
    tr.add_argument("--rule", choices=("ssvm", "dlm"), default="dlm")
    tr.add_argument("--direction", choices=("positive", "negative"))
    tr.add_argument("--epsilon", type=float, default=1.0)
    tr.add_argument("--alpha", type=float, default=10.0)
    tr.add_argument("--lr", type=float, default=0.001)
    tr.add_argument("--decay-every", type=int, default=2000)
    tr.add_argument("--decay-factor", type=float, default=0.75)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--classes-per-batch", type=int, default=4)
    tr.add_argument("--points-per-class", type=int, default=4)
    tr.add_argument("--arch", type=_int_list, default=DEFAULT_HIDDEN_DIMS,
                    help="hidden and embedding widths after the input layer")
    tr.add_argument("--split-fractions", type=_float_list, default=(1.0, 0.0, 0.0))
    tr.add_argument("--split", choices=("train", "val", "test", "all"), default="train")
    tr.add_argument("--model-out", help="checkpoint output path")
    tr.add_argument("--metrics-out", help="per-step metrics CSV path")

    ev = sub.add_parser("eval", help="few-shot episode evaluation")
    common(ev)
    ev.add_argument("--data", help="dataset CSV path")
    ev.add_argument("--model", help="checkpoint path")
    ev.add_argument("--episodes", type=int, default=1000)
    ev.add_argument("--n-way", type=int, default=5)
    ev.add_argument("--k-shot", type=int, default=1)
    ev.add_argument("--n-query", type=int, default=5)
    ev.add_argument("--split-fractions", type=_float_list, default=(1.0, 0.0, 0.0))
    ev.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    ev.add_argument("--out", help="also write the summary row to this CSV")
    ev.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker threads for episode evaluation")

    ins = sub.add_parser("inspect", help="per-query inference breakdown")
    common(ins)
    ins.add_argument("--data", help="dataset CSV path")
    ins.add_argument("--model", help="checkpoint path (default: fresh init)")
    ins.add_argument("--arch", type=_int_list, default=DEFAULT_HIDDEN_DIMS)
    ins.add_argument("--rule", choices=("ssvm", "dlm"), default="dlm")
    ins.add_argument("--direction", choices=("positive", "negative"))
    ins.add_argument("--epsilon", type=float, default=1.0)
    ins.add_argument("--alpha", type=float, default=10.0)
    ins.add_argument("--classes-per-batch", type=int, default=4)
    ins.add_argument("--points-per-class", type=int, default=4)
    ins.add_argument("--query", type=int, help="batch index to inspect")

    sc = sub.add_parser("selfcheck", help="oracle and gradient verification suites")
    common(sc)
    sc.add_argument("--scale", type=float, default=1.0,
                    help="instance-count multiplier (1.0 = acceptance counts)")

    return parser


def _read_config(path: str) -> dict[str, str]:
    entries = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                entries[key.strip()] = value.strip()
    except OSError as exc:
        raise UsageError(f"--config {path}: {exc.strerror or exc}") from exc
    return entries


def _apply_config(parser: _Parser, args: argparse.Namespace, argv: list[str]) -> None:
    """Fill non-explicit options from the config file, rejecting unknown
    keys. A flag given on the command line keeps its value."""
    sub_actions = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub_actions = action.choices[args.mode]._actions
    assert sub_actions is not None
    by_dest = {a.dest: a for a in sub_actions if a.option_strings}

    def explicit(action) -> bool:
        return any(
            tok == opt or tok.startswith(opt + "=")
            for tok in argv
            for opt in action.option_strings
        )

    for key, raw in _read_config(args.config).items():
        dest = key.replace("-", "_")
        action = by_dest.get(dest)
        if action is None or dest == "config":
            raise UsageError(f"unknown config key '{key}' in {args.config}")
        if explicit(action):
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key '{key}' in {args.config}: {exc}") from exc
        if action.choices and value not in action.choices:
            raise UsageError(
                f"config key '{key}' in {args.config}: "
                f"{value!r} not in {tuple(action.choices)}"
            )
        setattr(args, dest, value)


def _require(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise UsageError(f"--{name} is required for mode '{args.mode}'")


def _build_rule(args) -> GradientRule:
    direction = args.direction
    if args.rule == "dlm" and direction is None:
        direction = "positive"
    try:
        return GradientRule(args.rule, direction, args.epsilon, args.alpha)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc


def _load_split(args):
    dataset = load_dataset(args.data)
    if args.split == "all":
        return dataset
    parts = dict(zip(("train", "val", "test"), split_by_class(dataset, args.split_fractions)))
    part = parts[args.split]
    if not part.classes:
        raise ContractError(
            f"--split {args.split} of {args.data} is empty under "
            f"fractions {args.split_fractions}"
        )
    return part


def _cmd_gen_data(args) -> int:
    _require(args, "out")
    dataset = generate_synthetic(
        args.classes, args.per_class, args.dim, args.spread, args.separation, args.seed
    )
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.n_points} points / {len(dataset.classes)} classes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    _require(args, "data")
    rule = _build_rule(args)
    try:
        config = TrainConfig(
            max_steps=args.steps,
            learning_rate=args.lr,
            decay_every=args.decay_every,
            decay_factor=args.decay_factor,
            classes_per_batch=args.classes_per_batch,
            points_per_class=args.points_per_class,
            seed=args.seed,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    dataset = _load_split(args)
    model = EmbeddingModel.initialize((dataset.dim, *args.arch), seed=args.seed)

    metrics_fh = None
    try:
        if args.metrics_out:
            metrics_fh = open(args.metrics_out, "w", encoding="ascii")
            metrics_fh.write(METRICS_CSV_HEADER + "\n")
            metrics_fh.flush()

        def on_step(row):
            if metrics_fh is not None:
                metrics_fh.write(row.csv_row() + "\n")
                metrics_fh.flush()

        trained, log = train(model, dataset, rule, config, on_step=on_step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if args.model_out:
        save_model(trained, args.model_out)
    last = log[-1]
    print(
        f"trained {config.max_steps} steps: objective {last.objective:.6f}, "
        f"batch mAP {last.batch_map:.6f}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    _require(args, "data", "model")
    model = load_model(args.model)
    dataset = _load_split(args)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    spec = EpisodeSpec(args.n_way, args.k_shot, args.n_query, args.seed)
    summary = evaluate(model, dataset, spec, args.episodes, threads=args.threads)
    header = "episodes,n_way,k_shot,n_query,accuracy_mean,accuracy_ci95,map_mean,map_ci95"
    row = (
        f"{args.episodes},{args.n_way},{args.k_shot},{args.n_query},"
        f"{summary.accuracy_mean!r},{summary.accuracy_ci95!r},"
        f"{summary.map_mean!r},{summary.map_ci95!r}"
    )
    print(header)
    print(row)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(header + "\n" + row + "\n")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    _require(args, "data")
    dataset = load_dataset(args.data)
    if args.model:
        model = load_model(args.model)
    else:
        model = EmbeddingModel.initialize(
            (dataset.dim, *args.arch), seed=args.seed
        )
    rule = _build_rule(args)
    batch = sample_batch(
        dataset, args.classes_per_batch, args.points_per_class, seed=args.seed
    )
    decomps = decompose_batch(batch)
    if args.query is not None:
        decomps = [d for d in decomps if d.query_index == args.query]
        if not decomps:
            raise ContractError(
                f"--query {args.query} is not a usable query of the sampled batch"
            )
    decomp = decomps[0]
    sims = similarity_matrix(model, batch.points)[decomp.query_index]
    objective = rule.augmented_objective()
    gt = inference.ground_truth_interleaving(decomp)
    y_w = inference.standard_inference(decomp, sims)
    y_aug = inference.loss_augmented_inference(decomp, sims, gt, objective)

    print(f"query {decomp.query_index} (class {batch.labels[decomp.query_index]}), "
          f"|P|={len(decomp.positives)}, |N|={len(decomp.negatives)}")
    print(f"positives: {decomp.positives}")
    print(f"negatives: {decomp.negatives}")
    with np.printoptions(precision=4, suppress=True):
        print(f"similarities: {np.array([sims[i] for i in decomp.positives + decomp.negatives])}")
    std_obj = inference.AugmentedObjective(inference.STANDARD)
    for name, itl, obj in (
        ("ground-truth", gt, std_obj),
        ("standard y_w", y_w, std_obj),
        (f"augmented ({objective.mode})", y_aug, objective),
    ):
        f_val = inference.objective_value(decomp, sims, itl, std_obj)
        ap = inference.interleaving_ap(itl)
        aug = inference.objective_value(decomp, sims, itl, obj)
        print(
            f"{name}: positions {itl.positions}, score {f_val:.6f}, "
            f"AP {ap:.6f}, objective {aug:.6f}"
        )
    rel = relevance_mask(batch, decomp.query_index)
    print(f"relevant set: {sorted(rel.relevant)}")
    return EXIT_OK


def _cmd_selfcheck(args) -> int:
    if args.scale <= 0:
        raise UsageError("--scale must be > 0")
    results = selfcheck.run_all(seed=args.seed, scale=args.scale)
    for result in results:
        print(result.line())
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} suites passed")
    return EXIT_OK if passed == len(results) else EXIT_DATA


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
    "selfcheck": _cmd_selfcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            _apply_config(parser, args, argv)
        return _COMMANDS[args.mode](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, DataFormatError, PlacementFailed, EmptyGradient, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())
