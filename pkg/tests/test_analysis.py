import numpy as np
import pytest

import chartab.analysis as analysis
from chartab.analysis import (
    aggregate_attribution,
    combined_attribution,
    gradient_input_attribution,
    occlusion_attribution,
    pairwise_embedding,
    permutation_test,
    write_attribution_chars_csv,
    write_attribution_csv,
    write_embedding_csv,
)
from chartab.encoding import FieldSchema, RawExample, Vocabulary, encode_structured, encode_unstructured
from chartab.models import MlpSpec, ModelBundle, TransformerSpec, init_params

VOCAB = Vocabulary(tuple("0123456789"))
SCHEMA = FieldSchema((("left", 2), ("mid", 2), ("right", 1)))  # 5 slots


def encode(row=("12", "34", "5")):
    return encode_structured(RawExample(row), SCHEMA, VOCAB)


def make_mlp(seed=0, task="regression", out=1):
    spec = MlpSpec(input_width=SCHEMA.total_width * VOCAB.dim,
                   hidden_widths=(6, 5, 4), output_width=out)
    params = init_params(spec, np.random.default_rng(seed))
    meta = {"classes": ["a", "b"]} if task == "classification" else {}
    return ModelBundle("mlp", spec, params, SCHEMA, VOCAB, task,
                       training_meta=meta)


def make_linear_readout(slot: int, char: str, weight: float = 7.0):
    """MLP that computes weight * x[hot index of `slot`] and nothing else."""
    bundle = make_mlp()
    for p in bundle.params.values():
        p.data[...] = 0.0
    flat_index = slot * VOCAB.dim + VOCAB.index[char]
    bundle.params["w0"].data[flat_index, 0] = weight
    bundle.params["w1"].data[0, 0] = 1.0
    bundle.params["w2"].data[0, 0] = 1.0
    bundle.params["w3"].data[0, 0] = 1.0
    return bundle


def make_transformer(seed=0, **overrides):
    kwargs = dict(seq_len=SCHEMA.total_width, raw_dim=VOCAB.dim,
                  n_layers=1, n_heads=4, decoder_hidden=8, output_width=1)
    kwargs.update(overrides)
    spec = TransformerSpec(**kwargs)
    params = init_params(spec, np.random.default_rng(seed))
    return ModelBundle("transformer", spec, params, SCHEMA, VOCAB, "regression")


class TestOcclusion:
    def test_blind_model_all_zero(self):
        bundle = make_mlp()
        for p in bundle.params.values():
            p.data[...] = 0.0
        report = occlusion_attribution(bundle, encode())
        np.testing.assert_array_equal(report.per_character, np.zeros(5))
        np.testing.assert_array_equal(report.per_column, np.zeros(3))

    def test_linear_readout_argmax(self):
        # slot 3 holds the character '4' of row ("12", "34", "5")
        bundle = make_linear_readout(slot=3, char="4")
        example = encode()
        report = occlusion_attribution(bundle, example, window=1)
        assert int(np.argmax(report.per_character)) == 3
        # brute-force oracle: the model is y = 7*x[flat], so occluding any
        # slot but 3 changes nothing and occluding slot 3 drops 7
        want = np.zeros(5)
        want[3] = 1.0  # after max-normalization
        np.testing.assert_allclose(report.per_character, want)
        assert report.per_column.tolist() == [0.0, 1.0, 0.0]

    def test_forward_count_matches_stride_arithmetic(self, monkeypatch):
        bundle = make_mlp(seed=1)
        calls = {"n": 0}
        real = analysis.forward_example

        def counting(*args, **kwargs):
            calls["n"] += 1
            return real(*args, **kwargs)

        monkeypatch.setattr(analysis, "forward_example", counting)
        occlusion_attribution(bundle, encode(), window=2, stride=1)
        assert calls["n"] == 1 + 4  # base forward + one per window start

    def test_unstructured_rejected(self):
        bundle = make_mlp()
        enc = encode_unstructured(RawExample(("12", "34", "5")), VOCAB)
        with pytest.raises(ValueError, match="structured"):
            occlusion_attribution(bundle, enc)

    def test_unread_slice_scores_zero(self):
        # zero the first-layer weights of slot 0's input slice: the model
        # provably cannot react to occlusions there
        bundle = make_mlp(seed=2)
        bundle.params["w0"].data[:VOCAB.dim, :] = 0.0
        report = occlusion_attribution(bundle, encode(), window=1)
        assert report.per_character[0] == 0.0

    def test_max_normalization(self):
        bundle = make_mlp(seed=3)
        report = occlusion_attribution(bundle, encode())
        assert report.normalized
        assert np.all(report.per_character >= 0)
        assert report.per_character.max() == 1.0

    def test_classification_uses_probability_vector(self):
        bundle = make_mlp(seed=4, task="classification", out=2)
        report = occlusion_attribution(bundle, encode())
        assert np.all(np.isfinite(report.per_character))
        assert report.per_character.max() == 1.0


class TestGradientInput:
    def test_zero_rows_zero_attribution(self):
        bundle = make_mlp(seed=5)
        bundle.missing_mode = "zero"
        example = encode_structured(RawExample((None, "34", "5")), SCHEMA, VOCAB,
                                    missing_mode="zero")
        report = gradient_input_attribution(bundle, example)
        np.testing.assert_array_equal(report.per_character[:2], [0.0, 0.0])

    def test_linear_readout_value(self):
        bundle = make_linear_readout(slot=3, char="4", weight=7.0)
        report = gradient_input_attribution(bundle, encode())
        want = np.zeros(5)
        want[3] = 1.0
        np.testing.assert_allclose(report.per_character, want)

    def test_linear_model_identity(self):
        # for y = w.x the saliency at a hot entry is exactly |w| * 1;
        # the sign goes on the output layer so the rectifiers stay open
        bundle = make_linear_readout(slot=1, char="2", weight=1.0)
        bundle.params["w3"].data[0, 0] = -3.0
        example = encode()
        from chartab.engine import Tensor
        from chartab.models import apply_model

        x = Tensor(example.matrix.reshape(1, -1), requires_grad=True)
        apply_model(bundle, x).sum().backward()
        saliency = np.abs(x.grad) * x.data
        flat = 1 * VOCAB.dim + VOCAB.index["2"]
        assert saliency[0, flat] == pytest.approx(3.0)

    def test_agrees_with_finite_differences_on_hot_entries(self):
        bundle = make_mlp(seed=6)
        example = encode()
        from chartab.engine import Tensor
        from chartab.models import apply_model

        x = Tensor(example.matrix.reshape(1, -1), requires_grad=True)
        apply_model(bundle, x).sum().backward()
        flat = example.matrix.reshape(-1)
        h = 1e-5
        for idx in np.nonzero(flat)[0]:
            shifted = example.matrix.reshape(1, -1).copy()
            shifted[0, idx] += h
            up = float(apply_model(bundle, Tensor(shifted)).data[0, 0])
            shifted[0, idx] -= 2 * h
            down = float(apply_model(bundle, Tensor(shifted)).data[0, 0])
            numeric = (up - down) / (2 * h)
            analytic = x.grad[0, idx]
            denom = max(abs(numeric), abs(analytic), 1e-4)
            assert abs(numeric - analytic) / denom <= 1e-6


class TestCombined:
    def test_both_zero_gives_zero(self):
        bundle = make_mlp()
        for p in bundle.params.values():
            p.data[...] = 0.0
        report = combined_attribution(bundle, encode())
        np.testing.assert_array_equal(report.per_character, np.zeros(5))

    def test_halfway_mix(self):
        # occlusion sees the step function, gradient sees the zero local
        # slope: a slot scored 1 by one method and 0 by the other lands at .5
        bundle = make_linear_readout(slot=3, char="4")
        occ = occlusion_attribution(bundle, encode(), window=2)
        grad = gradient_input_attribution(bundle, encode())
        combined = combined_attribution(bundle, encode(), window=2)
        np.testing.assert_allclose(
            combined.per_character, (occ.per_character + grad.per_character) / 2
        )
        # window 2 smears occlusion onto slot 2; gradient stays sharp
        assert combined.per_character[2] == pytest.approx(0.5)

    def test_per_column_is_max_of_slots(self):
        bundle = make_mlp(seed=7)
        report = combined_attribution(bundle, encode())
        slices = SCHEMA.field_slices()
        for value, sl in zip(report.per_column, slices):
            assert value == pytest.approx(report.per_character[sl].max())


class TestAggregate:
    def rows(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        digits = np.array(list("0123456789"))
        out = []
        for _ in range(n):
            out.append(RawExample((
                "".join(rng.choice(digits, 2)),
                "".join(rng.choice(digits, 2)),
                "".join(rng.choice(digits, 1)),
            )))
        return out

    def test_single_example_matches_direct_report(self):
        bundle = make_mlp(seed=8)
        row = self.rows(1)[0]
        agg = aggregate_attribution(bundle, [row], method="combined")
        single = combined_attribution(bundle, encode_structured(row, SCHEMA, VOCAB))
        top = single.per_column.max()
        np.testing.assert_allclose(agg.per_column, single.per_column / top)
        assert agg.sample_count == 1

    def test_sample_order_irrelevant(self):
        bundle = make_mlp(seed=9)
        rows = self.rows(5)
        a = aggregate_attribution(bundle, rows, method="occlusion")
        b = aggregate_attribution(bundle, rows[::-1], method="occlusion")
        np.testing.assert_allclose(a.per_column, b.per_column, rtol=1e-12)

    def test_both_aggregations_run(self):
        bundle = make_mlp(seed=10)
        rows = self.rows(4)
        for aggregation in ("max", "average"):
            report = aggregate_attribution(bundle, rows, aggregation=aggregation)
            assert report.per_column.shape == (3,)
            assert report.per_column.max() == pytest.approx(1.0)

    def test_empty_sample_set_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            aggregate_attribution(make_mlp(), [])


class TestEmbedding:
    def rows_with_targets(self, n=8, seed=0):
        rng = np.random.default_rng(seed)
        digits = np.array(list("0123456789"))
        out = []
        for _ in range(n):
            values = ("".join(rng.choice(digits, 2)), "".join(rng.choice(digits, 2)),
                      "".join(rng.choice(digits, 1)))
            out.append(RawExample(values, float(rng.uniform(0, 10))))
        return out

    def test_identical_inputs_zero_distance(self):
        bundle = make_mlp(seed=11)
        row = self.rows_with_targets(1)[0]
        result = pairwise_embedding(bundle, [row, row], layer_id=2)
        assert result.pairs[0][0] == 0.0
        assert result.pairs[0][1] == 0.0

    def test_known_activations_distance(self, monkeypatch):
        # O(a1)=[1,2], O(a2)=[3,1] -> m = |1-3| + |2-1| = 3
        bundle = make_mlp(seed=12)
        canned = iter([np.array([[1.0, 2.0]]), np.array([[3.0, 1.0]])])

        class Fake:
            def __init__(self, data):
                self.data = data

        def fake_forward(b, e, capture=False):
            return Fake(None), [Fake(next(canned))]

        monkeypatch.setattr(analysis, "forward_example", fake_forward)
        rows = self.rows_with_targets(2)
        result = pairwise_embedding(bundle, rows, layer_id=0)
        assert result.pairs[0][0] == pytest.approx(3.0)

    def test_pair_count(self):
        bundle = make_mlp(seed=13)
        rows = self.rows_with_targets(10)
        result = pairwise_embedding(bundle, rows, layer_id=1)
        assert len(result.pairs) == 10 * 9 // 2

    def test_metric_axioms_on_triples(self):
        bundle = make_mlp(seed=14)
        rows = self.rows_with_targets(3, seed=3)
        result = pairwise_embedding(bundle, rows, layer_id=2)
        d12, d13, d23 = [p[0] for p in result.pairs]
        assert d12 >= 0 and d13 >= 0 and d23 >= 0
        assert d12 + d23 >= d13 - 1e-12
        assert d12 + d13 >= d23 - 1e-12
        assert d13 + d23 >= d12 - 1e-12

    def test_symmetry(self):
        bundle = make_mlp(seed=15)
        a, b = self.rows_with_targets(2, seed=5)
        forward = pairwise_embedding(bundle, [a, b], layer_id=0).pairs[0][0]
        backward = pairwise_embedding(bundle, [b, a], layer_id=0).pairs[0][0]
        assert forward == pytest.approx(backward)

    def test_classification_bundle_rejected(self):
        bundle = make_mlp(task="classification", out=2)
        with pytest.raises(ValueError, match="regression"):
            pairwise_embedding(bundle, self.rows_with_targets(2), layer_id=0)

    def test_invalid_layer(self):
        bundle = make_mlp(seed=16)
        with pytest.raises(ValueError, match="layer_id"):
            pairwise_embedding(bundle, self.rows_with_targets(2), layer_id=9)


class TestPermutationTest:
    def test_identity_permutation_zero_delta(self):
        from chartab.models import forward_example, permute_input
        bundle = make_transformer(seed=17)
        example = encode()
        base = forward_example(bundle, example).data
        same = forward_example(bundle, permute_input(example, range(5))).data
        assert np.abs(base - same).sum() == 0.0

    def test_swapping_identical_rows_zero_delta(self):
        from chartab.models import forward_example, permute_input
        bundle = make_transformer(seed=18)
        example = encode_structured(RawExample(("11", "34", "5")), SCHEMA, VOCAB)
        swapped = permute_input(example, [1, 0, 2, 3, 4])
        base = forward_example(bundle, example).data
        same = forward_example(bundle, swapped).data
        assert np.abs(base - same).sum() == 0.0

    def test_random_permutations_move_output(self):
        bundle = make_transformer(seed=19)
        rows = [RawExample(("12", "34", "5")), RawExample(("67", "89", "0"))]
        report = permutation_test(bundle, rows, n_permutations=20, seed=1)
        assert len(report.deltas) == 40
        assert report.max > 1e-6
        assert report.min >= 0.0
        assert report.min <= report.mean <= report.max

    def test_requires_transformer(self):
        with pytest.raises(ValueError, match="transformer"):
            permutation_test(make_mlp(), [RawExample(("12", "34", "5"))], 1, 0)

    def test_permutation_count_validated(self):
        with pytest.raises(ValueError, match="n_permutations"):
            permutation_test(make_transformer(), [], 0, 0)


class TestReportFiles:
    def test_attribution_csvs(self, tmp_path):
        bundle = make_mlp(seed=20)
        example = encode()
        report = combined_attribution(bundle, example)
        write_attribution_csv(tmp_path / "cols.csv", bundle, report)
        lines = (tmp_path / "cols.csv").read_text().splitlines()
        assert lines[0] == "column_name,value"
        assert lines[1].startswith("left,")
        assert len(lines) == 4

        write_attribution_chars_csv(tmp_path / "chars.csv", bundle, report, example)
        lines = (tmp_path / "chars.csv").read_text().splitlines()
        assert lines[0] == "position,character,value"
        assert lines[1].startswith("0,1,")
        assert len(lines) == 6

    def test_embedding_csv(self, tmp_path):
        bundle = make_mlp(seed=21)
        rng = np.random.default_rng(0)
        rows = [RawExample(("12", "34", "5"), 1.0), RawExample(("67", "89", "0"), 4.0)]
        result = pairwise_embedding(bundle, rows, layer_id=2)
        write_embedding_csv(tmp_path / "pairs.csv", result)
        lines = (tmp_path / "pairs.csv").read_text().splitlines()
        assert lines[0] == "embedding_distance,reference_distance"
        assert lines[-1].startswith("# pearson")
        assert len(lines) == 3
