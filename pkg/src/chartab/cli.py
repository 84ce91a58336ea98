"""Command-line entry point.

One executable, subcommand per stage: generate synthetic control data,
train either model on a CSV, evaluate a bundle, and run the three analysis
tools (attribution, embedding pairs, permutation test).  Every command
writes its fully resolved configuration next to its outputs, and all
randomness flows from explicit seeds, so identical invocations produce
identical bytes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    aggregate_attribution,
    pairwise_embedding,
    permutation_test,
    write_attribution_chars_csv,
    write_attribution_csv,
    write_embedding_csv,
    write_permutation_csv,
)
from .encoding import build_vocabulary, encode_structured
from .engine import NumericalError
from .models import MlpSpec, TransformerSpec, load_bundle, save_bundle
from .pipeline import (
    CONTROL_TARGETS,
    SplitConfig,
    TrainConfig,
    evaluate,
    generate_controls,
    load_csv,
    split,
    train,
    write_controls_csv,
)

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 1, 2, 3

TASKS = ("control1", "control2", "control3", "classify")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


class UsageError(ValueError):
    pass


def _write_config(out_path: str, command: str, resolved: dict) -> None:
    path = Path(str(out_path) + ".config.json")
    payload = {"command": command, **resolved}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="ascii")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(loaded, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return loaded


def _resolve(args, config: dict, name: str, default=None):
    """Explicit flag beats config file value beats default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _task_columns(task: str, target: str | None):
    if task == "classify":
        if not target:
            raise UsageError("--target is required for --task classify")
        return target, ()
    target_column = f"y{task[-1]}"
    drop = tuple(t for t in CONTROL_TARGETS if t != target_column)
    return target_column, drop


def cmd_generate(args) -> int:
    config = _load_config_file(args.config)
    rows = _resolve(args, config, "rows")
    seed = _resolve(args, config, "seed")
    missing_prob = _resolve(args, config, "missing-prob", 0.0)
    if rows is None or rows < 1:
        raise UsageError("--rows must be a positive integer")
    if seed is None:
        raise UsageError("--seed is required for generate")
    controls = generate_controls(rows, seed, missing_prob)
    write_controls_csv(args.out, controls)
    _write_config(args.out, "generate",
                  {"rows": rows, "seed": seed, "missing_prob": missing_prob,
                   "out": str(args.out)})
    print(f"wrote {rows} control rows to {args.out}")
    return 0


def _model_spec_from_flags(args, config, model, schema, vocab, out_width):
    if model == "mlp":
        hidden = _resolve(args, config, "hidden-widths", "512,128,32")
        widths = tuple(int(w) for w in str(hidden).split(","))
        return MlpSpec(input_width=schema.total_width * vocab.dim,
                       hidden_widths=widths, output_width=out_width)
    return TransformerSpec(
        seq_len=schema.total_width,
        raw_dim=vocab.dim,
        n_layers=_resolve(args, config, "layers", 2),
        n_heads=_resolve(args, config, "heads", 4),
        decoder_hidden=_resolve(args, config, "decoder-hidden", 256),
        output_width=out_width,
        positional_encoding=bool(_resolve(args, config, "positional-encoding", False)),
        encoder_enabled=not bool(_resolve(args, config, "no-encoder", False)),
    )


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    task = _resolve(args, config, "task")
    model = _resolve(args, config, "model", "mlp")
    if task not in TASKS:
        raise UsageError(f"--task must be one of {', '.join(TASKS)}")
    if model not in ("mlp", "transformer"):
        raise UsageError("--model must be mlp or transformer")
    seeds = _resolve(args, config, "seeds")
    seed = _resolve(args, config, "seed")
    if seeds is not None:
        seed_list = [int(s) for s in str(seeds).split(",")]
    elif seed is not None:
        seed_list = [seed]
    else:
        raise UsageError("--seed (or --seeds) is required for train")

    target_column, drop = _task_columns(task, _resolve(args, config, "target"))
    ml_task = "classification" if task == "classify" else "regression"
    epochs = _resolve(args, config, "epochs", 30)
    encoding_mode = _resolve(args, config, "encoding", "structured")
    missing_mode = _resolve(args, config, "missing", "placeholder")
    batch_size = _resolve(args, config, "batch-size", 64)
    learning_rate = _resolve(args, config, "lr", 1e-3)
    clip_norm = _resolve(args, config, "clip-norm", 1.0)
    train_fraction = _resolve(args, config, "train-fraction", 0.8)
    width_cap = _resolve(args, config, "width-cap", 8)

    rows, schema = load_csv(args.data, target_column=target_column, task=ml_task,
                            width_cap=width_cap, drop_columns=drop)
    vocab = build_vocabulary(rows)  # vocabulary spans the whole file

    out = Path(args.out)
    metrics_rows = []
    for run_seed in seed_list:
        train_rows, test_rows = split(rows, SplitConfig(train_fraction, run_seed))
        n_classes = len(sorted({r.target for r in rows})) if ml_task == "classification" else 1
        spec = _model_spec_from_flags(args, config, model, schema, vocab,
                                      1 if ml_task == "regression" else n_classes)
        train_config = TrainConfig(
            epochs=epochs, seed=run_seed, batch_size=batch_size,
            learning_rate=learning_rate, clip_norm=clip_norm,
            encoding_mode=encoding_mode, missing_mode=missing_mode, task=ml_task,
        )
        bundle = train(train_rows, train_config, spec, schema=schema, vocab=vocab)
        bundle.training_meta["target_column"] = target_column
        bundle.training_meta["data"] = str(args.data)

        bundle_path = out if len(seed_list) == 1 else out.with_name(
            f"{out.stem}-seed{run_seed}{out.suffix}")
        save_bundle(bundle_path, bundle)
        report = evaluate(bundle, test_rows)
        if ml_task == "classification":
            metrics_rows.append((run_seed, f"accuracy {report.accuracy!r}"))
        else:
            metrics_rows.append(
                (run_seed, f"mean_l1 {report.mean_l1!r} pearson {report.pearson!r}"))
        report.write(Path(str(bundle_path) + ".metrics.txt"))
        print(f"seed {run_seed}: {metrics_rows[-1][1]} -> {bundle_path}")

    _write_config(args.out, "train", {
        "data": str(args.data), "task": task, "model": model,
        "encoding": encoding_mode, "missing": missing_mode, "epochs": epochs,
        "seeds": seed_list, "batch_size": batch_size,
        "learning_rate": learning_rate, "clip_norm": clip_norm,
        "train_fraction": train_fraction, "width_cap": width_cap,
        "target_column": target_column, "out": str(args.out),
    })
    if len(seed_list) > 1:
        summary = Path(str(out) + ".seeds.txt")
        summary.write_text(
            "".join(f"seed {s} {line}\n" for s, line in metrics_rows),
            encoding="utf-8")
    return 0


def _rows_for_bundle(args, bundle, limit=None):
    target_column = args.target or bundle.training_meta.get("target_column")
    if target_column is None:
        raise UsageError("bundle does not record a target column; pass --target")
    task = bundle.task if bundle.task == "classification" else "regression"
    drop = tuple(t for t in CONTROL_TARGETS
                 if t != target_column) if target_column in CONTROL_TARGETS else ()
    rows, _ = load_csv(args.data, target_column=target_column, task=task,
                       drop_columns=drop)
    return rows


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = _rows_for_bundle(args, bundle)
    report = evaluate(bundle, rows)
    report.write(args.out)
    if args.pairs_out:
        report.write_pairs_csv(args.pairs_out)
    _write_config(args.out, "evaluate", {
        "bundle": str(args.bundle), "data": str(args.data),
        "out": str(args.out),
        "pairs_out": None if not args.pairs_out else str(args.pairs_out),
    })
    print(report.to_text().rstrip())
    return 0


def cmd_attribute(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = _rows_for_bundle(args, bundle)
    samples = rows[: args.samples]
    report = aggregate_attribution(bundle, samples, method=args.method,
                                   aggregation=args.aggregation,
                                   window=args.window)
    write_attribution_csv(args.out, bundle, report)
    if args.per_char_out:
        example = None
        if len(samples) == 1:
            example = encode_structured(samples[0], bundle.schema, bundle.vocab,
                                        bundle.missing_mode)
        write_attribution_chars_csv(args.per_char_out, bundle, report, example)
    _write_config(args.out, "attribute", {
        "bundle": str(args.bundle), "data": str(args.data),
        "method": args.method, "aggregation": args.aggregation,
        "window": args.window, "samples": args.samples, "out": str(args.out),
    })
    names = list(bundle.schema.names)
    best = names[int(np.argmax(report.per_column))]
    print(f"attributed {len(samples)} samples; top column: {best}")
    return 0


def cmd_embed(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = _rows_for_bundle(args, bundle)
    k = min(args.k, len(rows))
    rng = np.random.default_rng(args.seed)
    chosen = [rows[i] for i in rng.choice(len(rows), size=k, replace=False)]
    result = pairwise_embedding(bundle, chosen, layer_id=args.layer)
    write_embedding_csv(args.out, result)
    _write_config(args.out, "embed", {
        "bundle": str(args.bundle), "data": str(args.data), "layer": args.layer,
        "k": k, "seed": args.seed, "out": str(args.out),
    })
    print(f"{len(result.pairs)} pairs, pearson {result.correlation:.4f}")
    return 0


def cmd_permute(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = _rows_for_bundle(args, bundle)[: args.samples]
    report = permutation_test(bundle, rows, args.permutations, args.seed)
    write_permutation_csv(args.out, report)
    _write_config(args.out, "permute", {
        "bundle": str(args.bundle), "data": str(args.data),
        "permutations": args.permutations, "samples": args.samples,
        "seed": args.seed, "out": str(args.out),
    })
    print(f"{len(report.deltas)} trials: min {report.min:.3g} "
          f"mean {report.mean:.3g} max {report.max:.3g}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="chartab",
                     description="Character-encoded tabular learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic controls CSV")
    p.add_argument("--rows", type=int, help="number of rows to generate")
    p.add_argument("--seed", type=int, help="generator seed (required)")
    p.add_argument("--missing-prob", type=float,
                   help="chance that each target-free field is blanked")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a CSV")
    p.add_argument("--data", required=True, help="input CSV with header row")
    p.add_argument("--task", choices=TASKS, help="what to predict")
    p.add_argument("--target", help="target column (classify task)")
    p.add_argument("--model", choices=("mlp", "transformer"))
    p.add_argument("--encoding", choices=("structured", "unstructured"))
    p.add_argument("--missing", choices=("placeholder", "zero"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="training seed (required unless --seeds)")
    p.add_argument("--seeds", help="comma-separated seeds, one run per seed")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--width-cap", type=int)
    p.add_argument("--hidden-widths", help="mlp hidden widths, e.g. 512,128,32")
    p.add_argument("--layers", type=int, help="transformer encoder layers")
    p.add_argument("--heads", type=int, help="transformer attention heads")
    p.add_argument("--decoder-hidden", type=int)
    p.add_argument("--positional-encoding", action="store_const", const=True)
    p.add_argument("--no-encoder", action="store_const", const=True,
                   help="ablation: decoder reads the flattened inputs directly")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", required=True, help="output bundle path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a bundle on a CSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="override the bundle's target column")
    p.add_argument("--pairs-out", help="also write predicted,actual CSV")
    p.add_argument("--out", required=True, help="metrics text file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="per-column input attribution")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="override the bundle's target column")
    p.add_argument("--method", default="combined",
                   choices=("occlusion", "gradient_input", "combined"))
    p.add_argument("--aggregation", default="max", choices=("max", "average"))
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--per-char-out", help="also write position,character,value CSV")
    p.add_argument("--out", required=True, help="column_name,value CSV")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("embed", help="pairwise hidden-layer distance dump")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="override the bundle's target column")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--k", type=int, default=200, help="sample size (k*(k-1)/2 pairs)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("permute", help="positional-information permutation test")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="override the bundle's target column")
    p.add_argument("--permutations", type=int, default=10)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_permute)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"chartab: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NumericalError as exc:
        print(f"chartab: numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (OSError, ValueError, KeyError, IndexError) as exc:
        print(f"chartab: data error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
