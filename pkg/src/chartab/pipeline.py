"""Data generation, CSV ingestion, training loops, and evaluation.

The synthetic control datasets have targets that are exact functions of the
rendered field text, so the irreducible error of a model reading the
characters is zero.  Training is deterministic under a fixed seed: identical
seeds give bit-identical parameter trajectories and bundles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .encoding import (
    FieldSchema,
    RawExample,
    Vocabulary,
    build_vocabulary,
    encode_structured,
    encode_unstructured,
    infer_schema,
)
from .engine import AdamState, NumericalError, Tensor, adam_step, clip_grad_norm, cross_entropy, l1_loss, zero_grads
from .models import MlpSpec, ModelBundle, TransformerSpec, apply_model, init_params

__all__ = [
    "ControlRow",
    "SplitConfig",
    "TrainConfig",
    "MetricsReport",
    "generate_controls",
    "control_examples",
    "write_controls_csv",
    "load_csv",
    "split",
    "train",
    "evaluate",
    "encode_dataset",
    "CONTROL_TARGETS",
]

CONTROL_TARGETS = ("y1", "y2", "y3")

# fields that feed no target; only these may go missing in generated data
_MISSING_ELIGIBLE = (0, 1, 6, 8)


@dataclass(frozen=True)
class ControlRow:
    """Nine decimal-text fields and the three targets computed from them."""

    values: tuple  # 9 optional strings
    y1: float
    y2: float
    y3: float

    def target(self, name: str) -> float:
        return {"y1": self.y1, "y2": self.y2, "y3": self.y3}[name]


def control_targets_from_text(values) -> tuple:
    """Recompute the three targets from rendered field text.

    This is the ground-truth oracle: any encode/decode round trip of a row
    must reproduce these numbers bit for bit.
    """
    a2, a3, a4, a5, a7 = (float(values[i]) for i in (2, 3, 4, 5, 7))
    y1 = 10.0 * a4
    y2 = (a3 / 100.0) * a5
    y3 = math.sin(a2) * a5 / (a4 + 0.01) + a7 / 10.0
    return y1, y2, y3


def generate_controls(n_rows: int, seed: int, missing_prob: float = 0.0):
    """Synthetic design matrix with targets defined exactly on the text.

    Field layout: a0 integer id, a1 date-like string, a2 angle in [0, 6.28],
    a3 in [0, 100], a4 in [0, 10], a5 in [0, 50], a6 integer count,
    a7 in [0, 100], a8 a noisy linear readout of a4 (see y1).  Fields the
    targets read are never dropped; a0/a1/a6/a8 go missing with
    ``missing_prob``.
    """
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    if not 0.0 <= missing_prob < 1.0:
        raise ValueError("missing_prob must be in [0, 1)")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_rows):
        a4 = f"{rng.uniform(0, 10):.1f}"
        values = [
            str(rng.integers(1, 100)),
            f"{rng.integers(2013, 2017)}-{rng.integers(1, 13):02d}-{rng.integers(1, 29):02d}",
            f"{rng.uniform(0, 6.28):.2f}",
            f"{rng.uniform(0, 100):.1f}",
            a4,
            f"{rng.uniform(0, 50):.1f}",
            str(rng.integers(0, 1000)),
            f"{rng.uniform(0, 100):.1f}",
            f"{10.0 * float(a4) + rng.uniform(-5, 5):.1f}",
        ]
        if missing_prob > 0:
            for i in _MISSING_ELIGIBLE:
                if rng.random() < missing_prob:
                    values[i] = None
        y1, y2, y3 = control_targets_from_text(values)
        rows.append(ControlRow(tuple(values), y1, y2, y3))
    return rows


def control_examples(rows, target: str):
    """View control rows as raw examples for one of the three tasks."""
    if target not in CONTROL_TARGETS:
        raise ValueError(f"target must be one of {CONTROL_TARGETS}")
    return [RawExample(r.values, r.target(target)) for r in rows]


def write_controls_csv(path, rows) -> None:
    """Header a0..a8,y1,y2,y3; missing fields become empty cells and targets
    are written with shortest-round-trip float formatting so re-parsing is
    exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"a{i}" for i in range(9)] + list(CONTROL_TARGETS))
        for row in rows:
            cells = ["" if v is None else v for v in row.values]
            writer.writerow(cells + [repr(row.y1), repr(row.y2), repr(row.y3)])


def load_csv(path, target_column: str | None = None, task: str = "regression",
             width_cap: int = 8, drop_columns=(), field_names=None):
    """Read a headered CSV into raw examples plus an inferred schema.

    Empty cells are missing values.  The target column (when given) is
    parsed as a float for regression or kept as a class label string for
    classification; every other non-dropped cell becomes an input field.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        drop = set(drop_columns)
        if target_column is not None and target_column not in header:
            raise ValueError(f"{path}: target column {target_column!r} not in header")
        keep = [i for i, name in enumerate(header)
                if name != target_column and name not in drop]
        target_idx = header.index(target_column) if target_column is not None else None
        names = tuple(header[i] for i in keep)

        rows = []
        for line_no, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}: row {line_no} has {len(cells)} cells, expected {len(header)}"
                )
            values = tuple(cells[i] if cells[i] != "" else None for i in keep)
            target = None
            if target_idx is not None:
                raw = cells[target_idx]
                if raw == "":
                    raise ValueError(f"{path}: row {line_no} is missing the target")
                target = float(raw) if task == "regression" else raw
            rows.append(RawExample(values, target))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    schema = infer_schema(rows, names=field_names or names, width_cap=width_cap)
    return rows, schema


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def split(rows, config: SplitConfig):
    """Seeded shuffle then prefix/suffix split; both sides must be non-empty."""
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("need at least 2 rows to split")
    order = np.arange(len(rows))
    if config.shuffle:
        np.random.default_rng(config.seed).shuffle(order)
    n_train = int(len(rows) * config.train_fraction)
    if n_train == 0 or n_train == len(rows):
        raise ValueError(
            f"train_fraction {config.train_fraction} leaves an empty side for "
            f"{len(rows)} rows"
        )
    train_rows = [rows[i] for i in order[:n_train]]
    test_rows = [rows[i] for i in order[n_train:]]
    return train_rows, test_rows


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int
    batch_size: int = 64
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    encoding_mode: str = "structured"  # "structured" | "unstructured"
    missing_mode: str = "placeholder"  # "placeholder" | "zero"
    task: str = "regression"  # "regression" | "classification"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.encoding_mode not in ("structured", "unstructured"):
            raise ValueError(f"unknown encoding_mode {self.encoding_mode!r}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


def encode_dataset(rows, schema: FieldSchema, vocab: Vocabulary,
                   encoding_mode: str, missing_mode: str) -> np.ndarray:
    """Stack per-row one-hot matrices into one (n, slots, dim) array.

    Unstructured encodings are placeholder-padded to the schema's total
    width so rows batch together; structured ones have that length already.
    """
    mats = []
    for row in rows:
        if encoding_mode == "structured":
            enc = encode_structured(row, schema, vocab, missing_mode)
        else:
            enc = encode_unstructured(row, vocab, pad_to=schema.total_width,
                                      schema=schema)
        mats.append(enc.matrix)
    return np.stack(mats)


def _targets_array(rows, task: str):
    targets = [r.target for r in rows]
    if any(t is None for t in targets):
        raise ValueError("every training row needs a target")
    if task == "regression":
        return np.asarray(targets, dtype=np.float64), None
    classes = sorted(set(targets))
    index = {c: i for i, c in enumerate(classes)}
    return np.asarray([index[t] for t in targets], dtype=np.intp), classes


def _build_spec(model_spec, schema, vocab, task, n_classes):
    """Fill in the data-dependent sizes of a partially specified model."""
    out_width = 1 if task == "regression" else n_classes
    if model_spec in ("mlp", None):
        return "mlp", MlpSpec(input_width=schema.total_width * vocab.dim,
                              output_width=out_width)
    if model_spec == "transformer":
        return "transformer", TransformerSpec(seq_len=schema.total_width,
                                              raw_dim=vocab.dim,
                                              output_width=out_width)
    if isinstance(model_spec, MlpSpec):
        return "mlp", model_spec
    if isinstance(model_spec, TransformerSpec):
        return "transformer", model_spec
    raise TypeError(f"unsupported model spec {model_spec!r}")


def train(train_rows, config: TrainConfig, model_spec="mlp",
          schema: FieldSchema | None = None,
          vocab: Vocabulary | None = None) -> ModelBundle:
    """Fixed-epoch training: forward, loss, backward, clip, Adam.

    model_spec may be "mlp"/"transformer" (sizes derived from the data) or a
    fully built spec.  The per-epoch mean training loss lands in the
    bundle's training_meta.  A non-finite loss aborts with the epoch, batch
    and value in the message.
    """
    train_rows = list(train_rows)
    if not train_rows:
        raise ValueError("empty training set")
    schema = schema or infer_schema(train_rows)
    vocab = vocab or build_vocabulary(train_rows)
    targets, classes = _targets_array(train_rows, config.task)
    kind, spec = _build_spec(model_spec, schema, vocab, config.task,
                             len(classes) if classes else 1)
    if kind == "mlp" and spec.input_width != schema.total_width * vocab.dim:
        raise ValueError(
            f"spec input width {spec.input_width} does not match the "
            f"schema/vocab encoding size {schema.total_width * vocab.dim}"
        )
    if kind == "transformer" and (spec.seq_len, spec.raw_dim) != (schema.total_width, vocab.dim):
        raise ValueError("transformer spec does not match the schema/vocab sizes")

    x_all = encode_dataset(train_rows, schema, vocab,
                           config.encoding_mode, config.missing_mode)
    if kind == "mlp":
        x_all = x_all.reshape(len(train_rows), -1)

    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)
    param_list = list(params.values())
    state = AdamState.for_params(param_list, learning_rate=config.learning_rate)
    bundle = ModelBundle(kind, spec, params, schema, vocab, config.task,
                         config.encoding_mode, config.missing_mode)

    losses = []
    n = len(train_rows)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(x_all[idx])
            out = apply_model(bundle, x)
            if config.task == "regression":
                loss = l1_loss(out.reshape(len(idx)), Tensor(targets[idx]))
            else:
                loss = cross_entropy(out, targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {batch_no + 1}"
                )
            epoch_loss += value * len(idx)
            zero_grads(param_list)
            loss.backward()
            clip_grad_norm(param_list, config.clip_norm)
            adam_step(param_list, state)
        losses.append(epoch_loss / n)

    meta = {
        "epochs": config.epochs,
        "seed": config.seed,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "clip_norm": config.clip_norm,
        "losses": losses,
    }
    if classes:
        meta["classes"] = classes
    bundle.training_meta = meta
    return bundle


@dataclass
class MetricsReport:
    task: str
    n_examples: int
    accuracy: float | None = None
    per_class: dict | None = None
    mean_l1: float | None = None
    pearson: float | None = None
    pairs: list | None = None  # (predicted, actual)

    def to_text(self) -> str:
        lines = [f"task {self.task}", f"n_examples {self.n_examples}"]
        if self.task == "classification":
            lines.append(f"accuracy {self.accuracy!r}")
            for label, counts in sorted(self.per_class.items()):
                lines.append(
                    f"class {label} correct {counts['correct']} total {counts['total']}"
                )
        else:
            lines.append(f"mean_l1 {self.mean_l1!r}")
            lines.append(f"pearson {self.pearson!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def write_pairs_csv(self, path) -> None:
        if self.pairs is None:
            raise ValueError("no prediction pairs recorded for this task")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predicted", "actual"])
            for pred, actual in self.pairs:
                writer.writerow([repr(pred), repr(actual)])


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return float("nan")
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def predict(bundle: ModelBundle, rows, batch_size: int = 256) -> np.ndarray:
    """Raw model outputs for a list of raw examples."""
    x_all = encode_dataset(rows, bundle.schema, bundle.vocab,
                           bundle.encoding_mode, bundle.missing_mode)
    if bundle.kind == "mlp":
        x_all = x_all.reshape(len(rows), -1)
    outs = []
    for start in range(0, len(rows), batch_size):
        out = apply_model(bundle, Tensor(x_all[start:start + batch_size]))
        outs.append(out.data)
    return np.concatenate(outs, axis=0)


def evaluate(bundle: ModelBundle, rows) -> MetricsReport:
    """Accuracy and per-class counts for classifiers; mean L1 error,
    Pearson correlation and the (prediction, truth) pairs for regressors."""
    rows = list(rows)
    targets = [r.target for r in rows]
    if any(t is None for t in targets):
        raise ValueError("evaluation rows need targets")
    outputs = predict(bundle, rows)

    if bundle.task == "classification":
        classes = bundle.classes
        if classes is None:
            raise ValueError("classification bundle lacks a class list")
        if any(t not in classes for t in targets):
            unknown = sorted({t for t in targets if t not in classes})
            raise ValueError(f"labels {unknown} were never seen in training")
        pred_idx = outputs.argmax(axis=1)
        true_idx = np.asarray([classes.index(t) for t in targets])
        per_class = {
            c: {"total": int((true_idx == i).sum()),
                "correct": int(((true_idx == i) & (pred_idx == i)).sum())}
            for i, c in enumerate(classes)
        }
        return MetricsReport(
            task="classification",
            n_examples=len(rows),
            accuracy=float((pred_idx == true_idx).mean()),
            per_class=per_class,
        )

    if bundle.task != "regression":
        raise ValueError(f"unknown task {bundle.task!r}")
    preds = outputs.reshape(len(rows))
    truth = np.asarray(targets, dtype=np.float64)
    return MetricsReport(
        task="regression",
        n_examples=len(rows),
        mean_l1=float(np.abs(preds - truth).mean()),
        pearson=pearson(preds, truth),
        pairs=list(zip(preds.tolist(), truth.tolist())),
    )
