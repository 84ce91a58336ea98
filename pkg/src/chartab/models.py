"""The two model families trained on character encodings.

Both consume the one-hot matrices produced by the encoding module.  The MLP
flattens them into a single wide vector; the transformer encoder treats each
character row as one sequence position (zero-padded up to a head-divisible
width, since one-hots are fed in directly with no learned embedding) and a
single fully connected hidden layer decodes the flattened encoder output.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .encoding import (
    EncodedExample,
    FieldSchema,
    Vocabulary,
    schema_vocab_from_dict,
    schema_vocab_to_dict,
)
from .engine import Tensor, concat, layer_norm, matmul, relu, softmax, uniform_init

__all__ = [
    "MlpSpec",
    "TransformerSpec",
    "ModelBundle",
    "init_params",
    "mlp_forward",
    "transformer_forward",
    "forward_example",
    "apply_model",
    "permute_input",
    "save_bundle",
    "load_bundle",
    "sinusoidal_encoding",
]

BUNDLE_MAGIC = b"chartab-bundle-v1\n"


@dataclass(frozen=True)
class MlpSpec:
    """Three hidden rectified layers by default; input width is the
    flattened encoding size (slots x one-hot dimension)."""

    input_width: int
    hidden_widths: tuple = (512, 128, 32)
    output_width: int = 1

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("widths must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be >= 1")


@dataclass(frozen=True)
class TransformerSpec:
    """Encoder stack over character positions plus a one-hidden-layer
    decoder on the flattened per-position outputs.

    model_dim is the one-hot dimension zero-padded up to a multiple of
    n_heads; padding with zeros adds no information to the input.
    """

    seq_len: int
    raw_dim: int
    n_layers: int = 2
    n_heads: int = 4
    feedforward_dim: int | None = None
    decoder_hidden: int = 256
    output_width: int = 1
    positional_encoding: bool = False
    encoder_enabled: bool = True

    def __post_init__(self):
        if self.seq_len < 1 or self.raw_dim < 1:
            raise ValueError("sequence length and input dim must be >= 1")
        if self.n_heads < 1 or self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def model_dim(self) -> int:
        d = self.raw_dim
        return d + (-d) % self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.feedforward_dim if self.feedforward_dim else 4 * self.model_dim


@dataclass
class ModelBundle:
    """Everything needed to run or analyze a trained model as one unit."""

    kind: str  # "mlp" | "transformer"
    spec: object
    params: dict  # name -> Tensor
    schema: FieldSchema
    vocab: Vocabulary
    task: str  # "regression" | "classification"
    encoding_mode: str = "structured"
    missing_mode: str = "placeholder"
    training_meta: dict = field(default_factory=dict)

    def param_list(self):
        return list(self.params.values())

    @property
    def classes(self):
        return self.training_meta.get("classes")


# -- initialization ----------------------------------------------------------


def _linear(rng, fan_in, fan_out):
    w = uniform_init(rng, fan_in, (fan_in, fan_out))
    b = uniform_init(rng, fan_in, (fan_out,))
    return w, b


def init_params(spec, rng: np.random.Generator) -> dict:
    """Seeded parameter set for either spec; names are stable so bundles
    serialize and reload identically."""
    params = {}
    if isinstance(spec, MlpSpec):
        widths = [spec.input_width, *spec.hidden_widths, spec.output_width]
        for i, (m, n) in enumerate(zip(widths, widths[1:])):
            params[f"w{i}"], params[f"b{i}"] = _linear(rng, m, n)
        return params
    if isinstance(spec, TransformerSpec):
        d, f = spec.model_dim, spec.ff_dim
        if spec.encoder_enabled:
            for i in range(spec.n_layers):
                for proj in ("q", "k", "v", "o"):
                    params[f"enc{i}.w{proj}"], params[f"enc{i}.b{proj}"] = _linear(rng, d, d)
                params[f"enc{i}.ln1_g"] = Tensor(np.ones(d), requires_grad=True)
                params[f"enc{i}.ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
                params[f"enc{i}.ff_w1"], params[f"enc{i}.ff_b1"] = _linear(rng, d, f)
                params[f"enc{i}.ff_w2"], params[f"enc{i}.ff_b2"] = _linear(rng, f, d)
                params[f"enc{i}.ln2_g"] = Tensor(np.ones(d), requires_grad=True)
                params[f"enc{i}.ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
        params["dec.w1"], params["dec.b1"] = _linear(rng, spec.seq_len * d, spec.decoder_hidden)
        params["dec.w2"], params["dec.b2"] = _linear(rng, spec.decoder_hidden, spec.output_width)
        return params
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def sinusoidal_encoding(seq_len: int, dim: int) -> np.ndarray:
    """Classic sin/cos position table, one row per sequence position."""
    pos = np.arange(seq_len)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table


# -- forward passes ----------------------------------------------------------


def _mlp_apply(params, spec: MlpSpec, x: Tensor, capture: bool = False):
    if x.data.shape[-1] != spec.input_width:
        raise ValueError(
            f"input width {x.data.shape[-1]} does not match spec {spec.input_width}"
        )
    activations = []
    h = x
    n_hidden = len(spec.hidden_widths)
    for i in range(n_hidden):
        h = relu(matmul(h, params[f"w{i}"]) + params[f"b{i}"])
        if capture:
            activations.append(h)
    out = matmul(h, params[f"w{n_hidden}"]) + params[f"b{n_hidden}"]
    return (out, activations) if capture else out


def _attention(params, prefix, x: Tensor, n_heads: int):
    b, s, d = x.data.shape
    dh = d // n_heads
    heads = []
    for name in ("q", "k", "v"):
        proj = matmul(x, params[f"{prefix}.w{name}"]) + params[f"{prefix}.b{name}"]
        heads.append(proj.reshape(b, s, n_heads, dh).swapaxes(1, 2))
    q, k, v = heads
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    ctx = matmul(softmax(scores), v)
    merged = ctx.swapaxes(1, 2).reshape(b, s, d)
    return matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _transformer_apply(params, spec: TransformerSpec, x: Tensor, capture: bool = False):
    """x: (batch, seq_len, raw_dim).  Returns (batch, output_width)."""
    b, s, d_raw = x.data.shape
    if s != spec.seq_len or d_raw != spec.raw_dim:
        raise ValueError(
            f"input shape {(s, d_raw)} does not match spec "
            f"{(spec.seq_len, spec.raw_dim)}"
        )
    if spec.model_dim > d_raw:
        pad = Tensor(np.zeros((b, s, spec.model_dim - d_raw)))
        x = concat([x, pad], axis=2)
    activations = []
    h = x
    if spec.encoder_enabled:
        if spec.positional_encoding:
            h = h + Tensor(sinusoidal_encoding(s, spec.model_dim))
        for i in range(spec.n_layers):
            attended = layer_norm(
                h + _attention(params, f"enc{i}", h, spec.n_heads),
                params[f"enc{i}.ln1_g"], params[f"enc{i}.ln1_b"],
            )
            ff = matmul(relu(matmul(attended, params[f"enc{i}.ff_w1"])
                             + params[f"enc{i}.ff_b1"]),
                        params[f"enc{i}.ff_w2"]) + params[f"enc{i}.ff_b2"]
            h = layer_norm(attended + ff,
                           params[f"enc{i}.ln2_g"], params[f"enc{i}.ln2_b"])
            if capture:
                activations.append(h)
    hidden = relu(matmul(h.reshape(b, s * spec.model_dim), params["dec.w1"])
                  + params["dec.b1"])
    if capture:
        activations.append(hidden)
    out = matmul(hidden, params["dec.w2"]) + params["dec.b2"]
    return (out, activations) if capture else out


def apply_model(bundle: ModelBundle, x: Tensor, capture: bool = False):
    """Batched forward through whichever architecture the bundle holds.

    MLP expects (batch, input_width); transformer (batch, seq_len, raw_dim).
    """
    if bundle.kind == "mlp":
        return _mlp_apply(bundle.params, bundle.spec, x, capture)
    if bundle.kind == "transformer":
        return _transformer_apply(bundle.params, bundle.spec, x, capture)
    raise ValueError(f"unknown model kind {bundle.kind!r}")


def example_input(bundle: ModelBundle, example: EncodedExample) -> np.ndarray:
    """Batch-of-one input array for this bundle's architecture."""
    if bundle.kind == "mlp":
        return example.matrix.reshape(1, -1)
    return example.matrix[None, :, :]


def mlp_forward(bundle: ModelBundle, example: EncodedExample, capture: bool = False):
    """Single-example forward; with capture, also returns the post-rectifier
    activation of each hidden layer."""
    x = Tensor(example.matrix.reshape(1, -1))
    result = _mlp_apply(bundle.params, bundle.spec, x, capture)
    return result


def transformer_forward(bundle: ModelBundle, example: EncodedExample,
                        capture: bool = False):
    """Single-example forward; with capture, also returns each encoder
    layer's output followed by the decoder hidden activation."""
    x = Tensor(example.matrix[None, :, :])
    return _transformer_apply(bundle.params, bundle.spec, x, capture)


def forward_example(bundle: ModelBundle, example: EncodedExample,
                    capture: bool = False):
    if bundle.kind == "mlp":
        return mlp_forward(bundle, example, capture)
    return transformer_forward(bundle, example, capture)


def permute_input(example: EncodedExample, permutation) -> EncodedExample:
    """Reorder the character rows of an encoding.

    Used by the positional-information test; the char_to_field map is kept
    as-is since a permuted example no longer aligns with the schema anyway.
    """
    perm = np.asarray(permutation, dtype=np.intp)
    n = example.matrix.shape[0]
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"not a permutation of {n} row indices")
    mapping = None if example.char_to_field is None else example.char_to_field.copy()
    return EncodedExample(example.mode, example.matrix[perm].copy(), mapping)


# -- persistence ---------------------------------------------------------------


def _spec_to_dict(spec) -> dict:
    d = asdict(spec)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def _spec_from_dict(kind: str, d: dict):
    if kind == "mlp":
        d = dict(d)
        d["hidden_widths"] = tuple(d["hidden_widths"])
        return MlpSpec(**d)
    return TransformerSpec(**d)


def save_bundle(path, bundle: ModelBundle) -> None:
    """One file per model: versioned magic, JSON header with the spec,
    schema, vocabulary and training record, then the parameter container."""
    header = {
        "kind": bundle.kind,
        "spec": _spec_to_dict(bundle.spec),
        "schema_vocab": schema_vocab_to_dict(bundle.schema, bundle.vocab),
        "task": bundle.task,
        "encoding_mode": bundle.encoding_mode,
        "missing_mode": bundle.missing_mode,
        "training_meta": bundle.training_meta,
    }
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":"), ensure_ascii=True,
                            sort_keys=True).encode("ascii") + b"\n")
        engine.save_tensors(fh, bundle.params)


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != BUNDLE_MAGIC:
            raise ValueError(
                f"not a chartab bundle (or an incompatible version): magic {magic!r}"
            )
        header = json.loads(fh.readline().decode("ascii"))
        arrays = engine.load_tensors(fh)
    schema, vocab = schema_vocab_from_dict(header["schema_vocab"])
    spec = _spec_from_dict(header["kind"], header["spec"])
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return ModelBundle(
        kind=header["kind"],
        spec=spec,
        params=params,
        schema=schema,
        vocab=vocab,
        task=header["task"],
        encoding_mode=header["encoding_mode"],
        missing_mode=header["missing_mode"],
        training_meta=header["training_meta"],
    )
