"""One-hot character encodings of tabular rows.

Two schemes are provided.  Structured encoding gives every column a fixed
budget of character slots, so each slot position always belongs to the same
column; short or missing values are filled with a reserved placeholder (or
all-zero rows).  Unstructured encoding simply concatenates the one-hot rows
of whatever characters are present, which is shorter but loses the mapping
from position to column.

The placeholder and the occluder are reserved *indices* past the end of the
observed character set, so they can never collide with dataset text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Vocabulary",
    "FieldSchema",
    "RawExample",
    "EncodedExample",
    "build_vocabulary",
    "infer_schema",
    "encode_structured",
    "encode_unstructured",
    "occlude",
    "decode",
    "save_schema_vocab",
    "load_schema_vocab",
]

DEFAULT_WIDTH_CAP = 8


@dataclass(frozen=True)
class Vocabulary:
    """Ordered character set plus two reserved one-hot indices.

    Index layout: dataset characters occupy [0, len(characters)); the
    placeholder sits at len(characters) and the occluder one past that,
    giving one-hot dimension len(characters) + 2.
    """

    characters: tuple
    index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self, "index", {c: i for i, c in enumerate(self.characters)}
        )
        if len(self.index) != len(self.characters):
            raise ValueError("vocabulary characters must be distinct")

    @property
    def placeholder_index(self) -> int:
        return len(self.characters)

    @property
    def occluder_index(self) -> int:
        return len(self.characters) + 1

    @property
    def dim(self) -> int:
        return len(self.characters) + 2

    def onehot(self, ch: str) -> np.ndarray:
        row = np.zeros(self.dim)
        row[self.index[ch]] = 1.0
        return row


@dataclass(frozen=True)
class FieldSchema:
    """Ordered (name, width) budget for every column of a dataset."""

    fields: tuple  # of (name, width)

    def __post_init__(self):
        for name, width in self.fields:
            if width < 1:
                raise ValueError(f"field {name!r} has width {width}; must be >= 1")

    @property
    def names(self):
        return tuple(name for name, _ in self.fields)

    @property
    def widths(self):
        return tuple(width for _, width in self.fields)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def total_width(self) -> int:
        return sum(self.widths)

    def field_slices(self):
        """Row index range occupied by each field in a structured matrix."""
        start = 0
        out = []
        for _, width in self.fields:
            out.append(slice(start, start + width))
            start += width
        return out

    def field_of_position(self, pos: int) -> int:
        start = 0
        for i, (_, width) in enumerate(self.fields):
            if pos < start + width:
                return i
            start += width
        raise IndexError(f"position {pos} outside total width {self.total_width}")


@dataclass(frozen=True)
class RawExample:
    """One table row: an optional string per schema field, plus a target.

    A missing cell is None, never an empty string.
    """

    values: tuple
    target: object = None


@dataclass
class EncodedExample:
    mode: str  # "structured" | "unstructured"
    matrix: np.ndarray  # (n_rows, vocab.dim)
    char_to_field: np.ndarray | None = None  # structured mode only


def build_vocabulary(rows) -> Vocabulary:
    """Collect every distinct character across present values, in
    first-appearance order."""
    seen = {}
    for row in rows:
        values = row.values if isinstance(row, RawExample) else row
        for value in values:
            if value is None:
                continue
            for ch in value:
                if ch not in seen:
                    seen[ch] = len(seen)
    if not seen:
        raise ValueError("no characters observed")
    return Vocabulary(tuple(seen))


def infer_schema(rows, names=None, width_cap: int = DEFAULT_WIDTH_CAP) -> FieldSchema:
    """Per-field width = longest observed value, capped.

    Missing values contribute length 0; a column that is always missing
    still gets width 1 so it occupies a slot.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot infer a schema from an empty dataset")
    n = len(rows[0].values if isinstance(rows[0], RawExample) else rows[0])
    maxima = [0] * n
    for row in rows:
        values = row.values if isinstance(row, RawExample) else row
        if len(values) != n:
            raise ValueError("rows disagree on field count")
        for i, value in enumerate(values):
            if value is not None:
                maxima[i] = max(maxima[i], len(value))
    if names is None:
        names = tuple(f"f{i}" for i in range(n))
    widths = [min(max(m, 1), width_cap) for m in maxima]
    return FieldSchema(tuple(zip(names, widths)))


def encode_structured(row: RawExample, schema: FieldSchema, vocab: Vocabulary,
                      missing_mode: str = "placeholder") -> EncodedExample:
    """Fixed-length encoding: each field fills exactly its width in slots.

    Over-long values keep their first `width` characters; short or missing
    ones are topped up with placeholder rows (or all-zero rows under
    missing_mode="zero").
    """
    if missing_mode not in ("placeholder", "zero"):
        raise ValueError(f"unknown missing_mode {missing_mode!r}")
    if len(row.values) != schema.n_fields:
        raise ValueError(
            f"row has {len(row.values)} values but schema has {schema.n_fields} fields"
        )
    matrix = np.zeros((schema.total_width, vocab.dim))
    char_to_field = np.zeros(schema.total_width, dtype=np.intp)
    pos = 0
    for fi, ((name, width), value) in enumerate(zip(schema.fields, row.values)):
        text = "" if value is None else value[:width]
        for ch in text:
            idx = vocab.index.get(ch)
            if idx is None:
                raise ValueError(f"unknown character {ch!r} in field {name!r}")
            matrix[pos, idx] = 1.0
            char_to_field[pos] = fi
            pos += 1
        for _ in range(width - len(text)):
            if missing_mode == "placeholder":
                matrix[pos, vocab.placeholder_index] = 1.0
            char_to_field[pos] = fi
            pos += 1
    return EncodedExample("structured", matrix, char_to_field)


def encode_unstructured(row: RawExample, vocab: Vocabulary,
                        pad_to: int | None = None,
                        schema: FieldSchema | None = None) -> EncodedExample:
    """Variable-length encoding: present characters only, in field order.

    Missing fields contribute nothing, which is exactly how this scheme
    loses track of which column a character came from.  When a schema is
    given, each field is truncated to its width so both encodings see the
    same characters.  pad_to appends placeholder rows up to a fixed length
    for batching.
    """
    rows = []
    widths = schema.widths if schema is not None else None
    for fi, value in enumerate(row.values):
        if value is None:
            continue
        if widths is not None:
            value = value[: widths[fi]]
        for ch in value:
            idx = vocab.index.get(ch)
            if idx is None:
                raise ValueError(f"unknown character {ch!r} in field {fi}")
            onehot = np.zeros(vocab.dim)
            onehot[idx] = 1.0
            rows.append(onehot)
    if pad_to is not None:
        if pad_to < len(rows):
            raise ValueError(f"pad_to={pad_to} is below natural length {len(rows)}")
        pad = np.zeros(vocab.dim)
        pad[vocab.placeholder_index] = 1.0
        rows.extend([pad] * (pad_to - len(rows)))
    matrix = np.array(rows) if rows else np.zeros((0, vocab.dim))
    return EncodedExample("unstructured", matrix)


def occlude(example: EncodedExample, start: int, window: int) -> EncodedExample:
    """Copy the example with rows [start, start+window) replaced by the
    occluder one-hot.  The occluder index is the last vocabulary slot."""
    if example.mode != "structured":
        raise ValueError("occlusion requires a structured encoding")
    if not 1 <= window <= 4:
        raise ValueError(f"occlusion window must be 1..4, got {window}")
    n = example.matrix.shape[0]
    if start < 0 or start + window > n:
        raise ValueError(f"occlusion [{start}, {start + window}) outside {n} rows")
    matrix = example.matrix.copy()
    matrix[start:start + window] = 0.0
    matrix[start:start + window, example.matrix.shape[1] - 1] = 1.0
    mapping = None if example.char_to_field is None else example.char_to_field.copy()
    return EncodedExample("structured", matrix, mapping)


def decode(example: EncodedExample, schema: FieldSchema, vocab: Vocabulary) -> RawExample:
    """Invert encode_structured, up to the truncation it performed.

    Placeholder and all-zero rows end a field's text; a field made only of
    them decodes to missing.  Rows that are neither one-hot nor all-zero
    (or that carry the occluder) cannot come from an encode and are
    rejected.
    """
    if example.mode != "structured":
        raise ValueError("decode requires a structured encoding")
    if example.matrix.shape != (schema.total_width, vocab.dim):
        raise ValueError(
            f"matrix shape {example.matrix.shape} does not match schema/vocab "
            f"({schema.total_width}, {vocab.dim})"
        )
    values = []
    for sl in schema.field_slices():
        chars = []
        for row in example.matrix[sl]:
            hot = np.nonzero(row)[0]
            if hot.size == 0:
                continue  # zero-mode filler
            if hot.size > 1 or row[hot[0]] != 1.0:
                raise ValueError("malformed encoding")
            idx = int(hot[0])
            if idx == vocab.placeholder_index:
                continue
            if idx == vocab.occluder_index:
                raise ValueError("cannot decode an occluded row")
            chars.append(vocab.characters[idx])
        values.append("".join(chars) if chars else None)
    return RawExample(tuple(values))


# -- serialization ----------------------------------------------------------

SCHEMA_VOCAB_VERSION = "chartab-schema-v1"


def schema_vocab_to_dict(schema: FieldSchema, vocab: Vocabulary) -> dict:
    return {
        "format": SCHEMA_VOCAB_VERSION,
        "fields": [[name, width] for name, width in schema.fields],
        "characters": list(vocab.characters),
    }


def schema_vocab_from_dict(d: dict):
    if d.get("format") != SCHEMA_VOCAB_VERSION:
        raise ValueError(f"unsupported schema file format {d.get('format')!r}")
    schema = FieldSchema(tuple((name, int(width)) for name, width in d["fields"]))
    vocab = Vocabulary(tuple(d["characters"]))
    return schema, vocab


def save_schema_vocab(path, schema: FieldSchema, vocab: Vocabulary) -> None:
    """Human-readable schema+vocabulary file; key order and ascii escaping
    are fixed so equal inputs always produce identical bytes."""
    with open(path, "w", encoding="ascii") as fh:
        json.dump(schema_vocab_to_dict(schema, vocab), fh,
                  indent=2, ensure_ascii=True, sort_keys=False)
        fh.write("\n")


def load_schema_vocab(path):
    with open(path, encoding="ascii") as fh:
        return schema_vocab_from_dict(json.load(fh))
