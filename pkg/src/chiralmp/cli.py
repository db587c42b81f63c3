"""Command-line entry point: ``chiralmp <subcommand> ...``.

Exit codes: 0 success, 1 failure (bad records, failed checks, divergence),
2 usage error or empty input, 3 neighbor-ordering error, 4 schema mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import datagen
from .edgegraph import to_edge_graph
from .model import LayerStack, StackConfig
from .molgraph import SDFParseError, iter_sdf, mirror
from .ordering import OrderingError, ParallelNeighborError, all_orders, format_orders
from .train import (
    TrainConfig,
    TrainingDiverged,
    encode,
    evaluate,
    split_dataset,
    stream,
    train_model,
)
from .verify import run_checks

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ORDER, EXIT_SCHEMA = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(args, out: Path | None) -> None:
    if out is None:
        return
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _read_text(path: str) -> str:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_USAGE) from None
    if not text.strip():
        raise CliError(f"{path}: empty input", EXIT_USAGE)
    return text


def _emit(text: str, out: Path | None, filename: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        (out / filename).write_text(text)


# -- subcommands ---------------------------------------------------------------------


def cmd_convert(args) -> int:
    text = _read_text(args.sdf)
    out = _out_dir(args)
    _echo_config(args, out)
    lines, failed = [], 0
    for rec, item in iter_sdf(text):
        if isinstance(item, SDFParseError):
            print(f"record {rec}: {item}", file=sys.stderr)
            failed += 1
            continue
        lines.append(to_edge_graph(item).to_json())
    _emit("".join(l + "\n" for l in lines), out, "edge_graphs.jsonl")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_order(args) -> int:
    text = _read_text(args.sdf)
    out = _out_dir(args)
    _echo_config(args, out)
    chunks, failed = [], 0
    for rec, item in iter_sdf(text):
        if isinstance(item, SDFParseError):
            print(f"record {rec}: {item}", file=sys.stderr)
            failed += 1
            continue
        g = mirror(item) if args.mirror else item
        try:
            orders = all_orders(to_edge_graph(g), permissive=args.permissive_ordering)
        except ParallelNeighborError as e:
            raise CliError(f"record {rec}: {e}", EXIT_ORDER) from None
        except OrderingError as e:
            raise CliError(f"record {rec}: {e}", EXIT_ORDER) from None
        chunks.append(f"# record {rec} {g.name}\n{format_orders(orders.values())}\n")
    _emit("".join(chunks), out, "orders.txt")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_generate(args) -> int:
    out = _out_dir(args)
    _echo_config(args, out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if args.count % 2 == 0 else "default")
        if args.task == "rs":
            samples = datagen.gen_tetrahedral(args.seed, args.count)
        else:
            samples = datagen.flatten_pairs(datagen.gen_ranking_pairs(args.seed, args.count, args.delta))
    text = "".join(json.dumps(s.to_dict()) + "\n" for s in samples)
    _emit(text, out, "dataset.jsonl")
    return EXIT_OK


def _load_dataset(path: str) -> list[datagen.SyntheticSample]:
    _read_text(path)
    try:
        return datagen.read_jsonl(path)
    except (ValueError, KeyError) as e:
        raise CliError(f"{path}: {e}", EXIT_SCHEMA) from None


def _task_of(samples, requested: str | None) -> str:
    if requested:
        return requested
    return samples[0].meta.get("task", "classification")


def cmd_train(args) -> int:
    out = _out_dir(args)
    if out is None:
        raise CliError("train needs --out", EXIT_USAGE)
    samples = _load_dataset(args.dataset)
    task = _task_of(samples, args.task)
    args.task = task
    _echo_config(args, out)
    g = samples[0].graph
    stack = LayerStack.init(
        StackConfig(
            in_dim=g.bond_features.shape[1] + 2 * g.atom_features.shape[1],
            out_dim=2 if task == "classification" else 1,
            H=args.hidden,
            H_mid=args.hidden,
            k=args.k,
            layers=args.layers,
            head_hidden=args.hidden,
        ),
        stream(args.seed, "init"),
    )
    cfg = TrainConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs if args.warmup_epochs is not None else min(10, args.epochs - 1),
        base_lr=args.lr,
        clip_norm=args.clip_norm,
        batch_size=args.batch_size,
        seed=args.seed,
        task=task,
    )
    with open(out / "metrics.jsonl", "w") as fh:

        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        try:
            result = train_model(
                stack, split_dataset(samples, args.seed), cfg, on_epoch, permissive=args.permissive_ordering
            )
        except TrainingDiverged as e:
            raise CliError(f"training diverged: {e}", EXIT_FAIL) from None
    ckpt = stack.to_dict()
    ckpt["train"] = {"seed": args.seed, "task": task, "permissive_ordering": args.permissive_ordering}
    (out / "checkpoint.json").write_text(json.dumps(ckpt))
    final = {"best_epoch": result["best_epoch"], **result["final"]}
    (out / "final_metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    _echo_config(args, out)
    try:
        ckpt = json.loads(Path(args.checkpoint).read_text())
        stack = LayerStack.from_dict(ckpt)
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}", EXIT_USAGE) from None
    except (ValueError, KeyError, TypeError) as e:
        raise CliError(f"bad checkpoint: {e}", EXIT_SCHEMA) from None
    meta = ckpt.get("train", {})
    samples = _load_dataset(args.dataset)
    task = meta.get("task") or _task_of(samples, None)
    if args.split == "all":
        chosen = samples
    else:
        chosen = split_dataset(samples, meta.get("seed", args.seed))[args.split]
    if not chosen:
        raise CliError(f"split {args.split!r} is empty", EXIT_USAGE)
    metrics = evaluate(stack, encode(chosen, stack.config.k, meta.get("permissive_ordering", False)), task)
    text = json.dumps({"split": args.split, **metrics}, sort_keys=True) + "\n"
    print(text, end="")
    if out is not None:
        (out / "eval_metrics.json").write_text(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    out = _out_dir(args)
    _echo_config(args, out)
    results = run_checks(seed=args.seed, trials=args.trials, only=args.only)
    lines = [r.line() for r in results]
    failed = sum(not r.ok for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} properties passed")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out is not None:
        (out / "verify_report.txt").write_text(text)
    return EXIT_FAIL if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chiralmp", description="Chirality-aware message passing on edge graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help=out_help)

    sp = sub.add_parser("convert", help="write edge-graph JSON for every SDF record")
    sp.add_argument("sdf")
    common(sp)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("order", help="print neighbor orders for every edge-graph node")
    sp.add_argument("sdf")
    sp.add_argument("--mirror", action="store_true", help="reflect molecules first")
    sp.add_argument("--permissive-ordering", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_order)

    sp = sub.add_parser("generate", help="write a synthetic dataset as JSON lines")
    sp.add_argument("--task", choices=("rs", "ranking"), default="rs")
    sp.add_argument("--count", type=int, default=4000, help="samples (rs) or pairs (ranking)")
    sp.add_argument("--delta", type=float, default=datagen.DEFAULT_DELTA)
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a stack on a dataset file")
    sp.add_argument("dataset")
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--warmup-epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--clip-norm", type=float, default=5.0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--task", choices=("classification", "regression", "ranking"), default=None)
    sp.add_argument("--permissive-ordering", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run the randomized invariant suite")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--only", nargs="*", default=None, help="check-name prefixes to run")
    common(sp)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"chiralmp {args.command}: {e}", file=sys.stderr)
        return e.code
    except ValueError as e:
        print(f"chiralmp {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
