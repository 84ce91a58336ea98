"""chartab: learn directly from raw tabular text via one-hot character
encodings, then look inside the trained model.

The package is organized around five layers:

- encoding: rows of optional strings -> one-hot character matrices
- engine: reverse-mode autodiff, losses, Adam with gradient clipping
- models: a three-hidden-layer MLP and a small transformer encoder
- pipeline: synthetic control data, CSV ingestion, training, evaluation
- analysis: occlusion / gradient*input attribution, embedding distances,
  and the positional-information permutation test
"""

from .encoding import (
    EncodedExample,
    FieldSchema,
    RawExample,
    Vocabulary,
    build_vocabulary,
    decode,
    encode_structured,
    encode_unstructured,
    infer_schema,
    load_schema_vocab,
    occlude,
    save_schema_vocab,
)
from .engine import Tensor, NumericalError
from .models import (
    MlpSpec,
    ModelBundle,
    TransformerSpec,
    forward_example,
    load_bundle,
    permute_input,
    save_bundle,
)
from .pipeline import (
    MetricsReport,
    SplitConfig,
    TrainConfig,
    control_examples,
    evaluate,
    generate_controls,
    load_csv,
    split,
    train,
    write_controls_csv,
)
from .analysis import (
    AttributionReport,
    EmbeddingPairs,
    aggregate_attribution,
    combined_attribution,
    gradient_input_attribution,
    occlusion_attribution,
    pairwise_embedding,
    permutation_test,
)

__version__ = "0.1.0"
