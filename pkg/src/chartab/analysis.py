"""Interpretability toolkit for trained bundles.

Occlusion attribution scores each character slot by how much masking it
(with the reserved occluder symbol) moves the output; gradient*input scores
it by |d(output)/d(input)| times the input itself.  The combined score is
the per-slot mean of the two max-normalized measures, collapsed to one
value per column by taking the maximum over that column's slots.

Embedding quality is probed without any learned projection: the L1 distance
between hidden activations of every pair of sampled inputs is plotted
against the distance between their targets; a correlation means the layer
orders inputs the way the task does.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .encoding import EncodedExample, encode_structured, occlude
from .engine import Tensor, softmax
from .models import ModelBundle, apply_model, example_input, forward_example, permute_input

__all__ = [
    "AttributionReport",
    "EmbeddingPairs",
    "PermutationReport",
    "occlusion_attribution",
    "gradient_input_attribution",
    "combined_attribution",
    "aggregate_attribution",
    "pairwise_embedding",
    "permutation_test",
    "write_attribution_csv",
    "write_embedding_csv",
]


@dataclass
class AttributionReport:
    method: str  # "occlusion" | "gradient_input" | "combined"
    per_character: np.ndarray  # one value per structured slot
    per_column: np.ndarray  # one value per schema field
    normalized: bool
    sample_count: int = 1


def _max_normalize(values: np.ndarray) -> np.ndarray:
    top = values.max() if values.size else 0.0
    return values / top if top > 0 else values.copy()


def _encode_row(bundle: ModelBundle, row) -> EncodedExample:
    return encode_structured(row, bundle.schema, bundle.vocab, bundle.missing_mode)


def _output_vector(bundle: ModelBundle, example: EncodedExample) -> np.ndarray:
    out = forward_example(bundle, example)
    if bundle.task == "classification":
        return softmax(out).data[0]
    return out.data[0]


def _columns_from_chars(bundle: ModelBundle, per_char: np.ndarray,
                        how: str = "max") -> np.ndarray:
    slices = bundle.schema.field_slices()
    if how == "max":
        return np.array([per_char[sl].max() for sl in slices])
    return np.array([per_char[sl].mean() for sl in slices])


def occlusion_attribution(bundle: ModelBundle, example: EncodedExample,
                          window: int = 2, stride: int = 1) -> AttributionReport:
    """Slide an occlusion window over the slots; each slot's raw score is
    the largest output change among the windows covering it, and the result
    is max-normalized.

    Regression scores |before - after|; classification sums that over the
    softmax probability vector, which keeps values bounded.
    """
    if example.mode != "structured":
        raise ValueError("occlusion attribution requires a structured encoding")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    base = _output_vector(bundle, example)
    n = example.matrix.shape[0]
    per_char = np.zeros(n)
    for start in range(0, n - window + 1, stride):
        shifted = _output_vector(bundle, occlude(example, start, window))
        value = float(np.abs(base - shifted).sum())
        sl = slice(start, start + window)
        per_char[sl] = np.maximum(per_char[sl], value)
    per_char = _max_normalize(per_char)
    return AttributionReport("occlusion", per_char,
                             _columns_from_chars(bundle, per_char), True)


def gradient_input_attribution(bundle: ModelBundle,
                               example: EncodedExample) -> AttributionReport:
    """|gradient of the output w.r.t. the input| * input, per slot.

    Only hot entries survive the product, so the per-slot score is the row
    sum.  Classification differentiates the predicted class probability.
    """
    if example.mode != "structured":
        raise ValueError("gradient*input attribution requires a structured encoding")
    x = Tensor(example_input(bundle, example), requires_grad=True)
    out = apply_model(bundle, x)
    if bundle.task == "classification":
        probs = softmax(out)
        k = int(np.argmax(probs.data[0]))
        onehot = np.zeros(probs.data.shape)
        onehot[0, k] = 1.0
        scalar = (probs * Tensor(onehot)).sum()
    else:
        scalar = out.sum()
    scalar.backward()
    saliency = np.abs(x.grad) * x.data
    per_char = saliency.reshape(example.matrix.shape).sum(axis=1)
    per_char = _max_normalize(per_char)
    return AttributionReport("gradient_input", per_char,
                             _columns_from_chars(bundle, per_char), True)


def combined_attribution(bundle: ModelBundle, example: EncodedExample,
                         window: int = 2) -> AttributionReport:
    """Mean of the two max-normalized per-slot scores; per column, the
    maximum of those means over the column's slots."""
    occ = occlusion_attribution(bundle, example, window)
    grad = gradient_input_attribution(bundle, example)
    per_char = (occ.per_character + grad.per_character) / 2.0
    return AttributionReport("combined", per_char,
                             _columns_from_chars(bundle, per_char), False)


def _single_report(bundle, example, method, window) -> AttributionReport:
    if method == "occlusion":
        return occlusion_attribution(bundle, example, window)
    if method == "gradient_input":
        return gradient_input_attribution(bundle, example)
    if method == "combined":
        return combined_attribution(bundle, example, window)
    raise ValueError(f"unknown attribution method {method!r}")


def aggregate_attribution(bundle: ModelBundle, rows, method: str = "combined",
                          aggregation: str = "max",
                          window: int = 2) -> AttributionReport:
    """Per-column attribution averaged over many inputs.

    Each example is scored on its own; its per-column values use either the
    max or the mean over the column's slots, and the per-column vectors are
    then averaged across examples and max-normalized.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("need at least one example to aggregate")
    if aggregation not in ("max", "average"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    how = "max" if aggregation == "max" else "mean"
    char_totals = np.zeros(bundle.schema.total_width)
    col_totals = np.zeros(bundle.schema.n_fields)
    for row in rows:
        example = row if isinstance(row, EncodedExample) else _encode_row(bundle, row)
        report = _single_report(bundle, example, method, window)
        char_totals += report.per_character
        col_totals += _columns_from_chars(bundle, report.per_character, how)
    per_char = _max_normalize(char_totals / len(rows))
    per_col = _max_normalize(col_totals / len(rows))
    return AttributionReport(method, per_char, per_col, True, len(rows))


@dataclass
class EmbeddingPairs:
    layer_id: int
    pairs: list  # (embedding_distance, reference_distance)
    correlation: float


def pairwise_embedding(bundle: ModelBundle, rows, layer_id: int) -> EmbeddingPairs:
    """L1 distances between hidden activations of all unique row pairs,
    paired with the distance between their regression targets.

    k rows give k(k-1)/2 pairs; the Pearson coefficient over the pair set
    summarizes how well the layer's geometry tracks the task.
    """
    if bundle.task != "regression":
        raise ValueError("embedding pairs are defined for regression bundles only")
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("need at least 2 rows for pairwise distances")
    targets = [r.target for r in rows]
    if any(t is None for t in targets):
        raise ValueError("embedding reference distances need row targets")
    flats = []
    for row in rows:
        example = _encode_row(bundle, row)
        _, acts = forward_example(bundle, example, capture=True)
        if not 0 <= layer_id < len(acts):
            raise ValueError(
                f"layer_id {layer_id} out of range; model captures {len(acts)} layers"
            )
        flats.append(acts[layer_id].data.reshape(-1))
    activations = np.stack(flats)
    y = np.asarray(targets, dtype=np.float64)

    pairs = []
    for i in range(len(rows)):
        diffs = np.abs(activations[i + 1:] - activations[i]).sum(axis=1)
        refs = np.abs(y[i + 1:] - y[i])
        pairs.extend(zip(diffs.tolist(), refs.tolist()))
    m = np.array([p[0] for p in pairs])
    ref = np.array([p[1] for p in pairs])
    denom = m.std() * ref.std()
    corr = float(((m - m.mean()) * (ref - ref.mean())).mean() / denom) if denom > 0 else float("nan")
    return EmbeddingPairs(layer_id, pairs, corr)


@dataclass
class PermutationReport:
    deltas: list  # one L1 output change per (example, permutation) trial
    min: float
    mean: float
    max: float


def permutation_test(bundle: ModelBundle, rows, n_permutations: int,
                     seed: int) -> PermutationReport:
    """Shuffle input rows and measure the L1 output change, per example and
    permutation.  A transformer that carries positional information shows
    nonzero deltas even without positional encoding."""
    if bundle.kind != "transformer":
        raise ValueError("the permutation test targets transformer bundles")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    rng = np.random.default_rng(seed)
    deltas = []
    for row in rows:
        example = row if isinstance(row, EncodedExample) else _encode_row(bundle, row)
        base = forward_example(bundle, example).data
        n = example.matrix.shape[0]
        for _ in range(n_permutations):
            perm = rng.permutation(n)
            shuffled = forward_example(bundle, permute_input(example, perm)).data
            deltas.append(float(np.abs(base - shuffled).sum()))
    return PermutationReport(deltas, min(deltas), float(np.mean(deltas)), max(deltas))


# -- report files -------------------------------------------------------------


def write_attribution_csv(path, bundle: ModelBundle,
                          report: AttributionReport) -> None:
    """Aggregated view: one `column_name,value` row per schema field."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column_name", "value"])
        for name, value in zip(bundle.schema.names, report.per_column):
            writer.writerow([name, repr(float(value))])


def write_attribution_chars_csv(path, bundle: ModelBundle,
                                report: AttributionReport,
                                example: EncodedExample | None = None) -> None:
    """Per-slot view: `position,character,value`; the character column shows
    the decoded character when an example is supplied."""
    chars = [""] * len(report.per_character)
    if example is not None:
        for pos, row in enumerate(example.matrix):
            hot = np.nonzero(row)[0]
            if hot.size == 1 and hot[0] < len(bundle.vocab.characters):
                chars[pos] = bundle.vocab.characters[int(hot[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "character", "value"])
        for pos, value in enumerate(report.per_character):
            writer.writerow([pos, chars[pos], repr(float(value))])


def write_embedding_csv(path, result: EmbeddingPairs) -> None:
    """Plot-ready pair list with a trailing comment line carrying the
    Pearson coefficient."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["embedding_distance", "reference_distance"])
        for m, ref in result.pairs:
            writer.writerow([repr(m), repr(ref)])
        fh.write(f"# pearson {result.correlation!r}\n")


def write_permutation_csv(path, report: PermutationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta"])
        for d in report.deltas:
            writer.writerow([repr(d)])
        fh.write(f"# min {report.min!r} mean {report.mean!r} max {report.max!r}\n")
