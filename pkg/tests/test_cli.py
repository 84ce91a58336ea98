import json

import pytest

from chartab.cli import main
from chartab.models import load_bundle
from chartab.pipeline import control_targets_from_text, load_csv


@pytest.fixture(scope="module")
def controls_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "controls.csv"
    code = main(["generate", "--rows", "120", "--seed", "7",
                 "--missing-prob", "0.2", "--out", str(path)])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def trained_bundle(tmp_path_factory, controls_csv):
    out = tmp_path_factory.mktemp("model") / "c1.ctb"
    code = main(["train", "--data", str(controls_csv), "--task", "control1",
                 "--model", "mlp", "--epochs", "2", "--seed", "3",
                 "--hidden-widths", "32,16,8", "--out", str(out)])
    assert code == 0
    return out


class TestGenerate:
    def test_idempotent(self, tmp_path):
        paths = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            assert main(["generate", "--rows", "50", "--seed", "1",
                         "--out", str(out)]) == 0
            paths.append(out.read_bytes())
        assert paths[0] == paths[1]

    def test_rows_zero_is_usage_error(self, tmp_path, capsys):
        code = main(["generate", "--rows", "0", "--seed", "1",
                     "--out", str(tmp_path / "x.csv")])
        assert code == 1
        assert "rows" in capsys.readouterr().err

    def test_seed_required(self, tmp_path):
        code = main(["generate", "--rows", "5", "--out", str(tmp_path / "x.csv")])
        assert code == 1

    def test_generated_targets_verify(self, controls_csv):
        rows, _ = load_csv(controls_csv, target_column="y1",
                           drop_columns=("y2", "y3"))
        raw, _ = load_csv(controls_csv)
        for row in raw:
            y1, y2, y3 = control_targets_from_text(row.values[:9])
            assert (float(row.values[9]), float(row.values[10]),
                    float(row.values[11])) == (y1, y2, y3)

    def test_writes_resolved_config(self, controls_csv):
        with open(str(controls_csv) + ".config.json") as fh:
            config = json.load(fh)
        assert config["command"] == "generate"
        assert config["seed"] == 7

    def test_unknown_flag_rejected(self, tmp_path):
        code = main(["generate", "--rows", "5", "--seed", "1",
                     "--frobnicate", "--out", str(tmp_path / "x.csv")])
        assert code == 1


class TestTrain:
    def test_bundle_and_metrics_written(self, trained_bundle):
        bundle = load_bundle(trained_bundle)
        assert bundle.kind == "mlp"
        assert bundle.training_meta["target_column"] == "y1"
        metrics = (str(trained_bundle) + ".metrics.txt")
        assert "pearson" in open(metrics).read()

    def test_missing_data_file(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "nope.csv"),
                     "--task", "control1", "--epochs", "1", "--seed", "1",
                     "--out", str(tmp_path / "m.ctb")])
        assert code == 2

    def test_seed_required(self, tmp_path, controls_csv):
        code = main(["train", "--data", str(controls_csv), "--task", "control1",
                     "--epochs", "1", "--out", str(tmp_path / "m.ctb")])
        assert code == 1

    def test_multi_seed_runs(self, tmp_path, controls_csv):
        out = tmp_path / "multi.ctb"
        code = main(["train", "--data", str(controls_csv), "--task", "control1",
                     "--epochs", "1", "--seeds", "1,2", "--out", str(out),
                     "--hidden-widths", "16,8,4"])
        assert code == 0
        assert (tmp_path / "multi-seed1.ctb").exists()
        assert (tmp_path / "multi-seed2.ctb").exists()
        summary = (tmp_path / "multi.ctb.seeds.txt").read_text()
        assert summary.count("seed") == 2

    def test_config_file_with_flag_override(self, tmp_path, controls_csv):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"task": "control1", "epochs": 1,
                                   "hidden-widths": "16,8,4"}))
        out = tmp_path / "cfgrun.ctb"
        code = main(["train", "--data", str(controls_csv), "--config", str(cfg),
                     "--seed", "5", "--epochs", "2", "--out", str(out)])
        assert code == 0
        resolved = json.loads((tmp_path / "cfgrun.ctb.config.json").read_text())
        assert resolved["epochs"] == 2  # flag beat the config file
        assert load_bundle(out).training_meta["epochs"] == 2

    def test_classify_requires_target(self, tmp_path, controls_csv):
        code = main(["train", "--data", str(controls_csv), "--task", "classify",
                     "--epochs", "1", "--seed", "1", "--out", str(tmp_path / "x.ctb")])
        assert code == 1

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_numerical_failure_exit_code(self, tmp_path, controls_csv):
        code = main(["train", "--data", str(controls_csv), "--task", "control1",
                     "--epochs", "3", "--seed", "1", "--lr", "1e154",
                     "--clip-norm", "1e308", "--hidden-widths", "8,8,8",
                     "--out", str(tmp_path / "x.ctb")])
        assert code == 3


class TestEvaluate:
    def test_metrics_file(self, tmp_path, trained_bundle, controls_csv):
        out = tmp_path / "metrics.txt"
        pairs = tmp_path / "pairs.csv"
        code = main(["evaluate", "--bundle", str(trained_bundle),
                     "--data", str(controls_csv), "--out", str(out),
                     "--pairs-out", str(pairs)])
        assert code == 0
        text = out.read_text()
        assert "mean_l1" in text and "pearson" in text
        assert pairs.read_text().splitlines()[0] == "predicted,actual"

    def test_input_files_untouched(self, tmp_path, trained_bundle, controls_csv):
        before = controls_csv.read_bytes()
        main(["evaluate", "--bundle", str(trained_bundle),
              "--data", str(controls_csv), "--out", str(tmp_path / "m.txt")])
        assert controls_csv.read_bytes() == before


class TestAnalysisCommands:
    def test_attribute_single_sample_matches_aggregate_of_one(self, tmp_path,
                                                              trained_bundle,
                                                              controls_csv):
        out = tmp_path / "attr.csv"
        code = main(["attribute", "--bundle", str(trained_bundle),
                     "--data", str(controls_csv), "--samples", "1",
                     "--per-char-out", str(tmp_path / "chars.csv"),
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "column_name,value"
        assert len(lines) == 10  # a0..a8
        chars = (tmp_path / "chars.csv").read_text().splitlines()
        assert chars[0] == "position,character,value"

    def test_embed_pair_count(self, tmp_path, trained_bundle, controls_csv):
        out = tmp_path / "pairs.csv"
        code = main(["embed", "--bundle", str(trained_bundle),
                     "--data", str(controls_csv), "--layer", "2",
                     "--k", "20", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 20 * 19 // 2 + 1  # header + pairs + summary
        assert lines[-1].startswith("# pearson")

    def test_permute_rejects_mlp_bundle(self, tmp_path, trained_bundle,
                                        controls_csv):
        code = main(["permute", "--bundle", str(trained_bundle),
                     "--data", str(controls_csv), "--seed", "1",
                     "--out", str(tmp_path / "p.csv")])
        assert code == 2

    def test_permute_on_transformer(self, tmp_path, controls_csv):
        bundle_path = tmp_path / "t.ctb"
        code = main(["train", "--data", str(controls_csv), "--task", "control1",
                     "--model", "transformer", "--epochs", "1", "--seed", "2",
                     "--layers", "1", "--decoder-hidden", "16",
                     "--out", str(bundle_path)])
        assert code == 0
        out = tmp_path / "perm.csv"
        code = main(["permute", "--bundle", str(bundle_path),
                     "--data", str(controls_csv), "--permutations", "3",
                     "--samples", "4", "--seed", "9", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "delta"
        assert len(lines) == 1 + 12 + 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def test_subcommand_help_lists_flags(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--data", "--task", "--model", "--encoding", "--missing",
                 "--epochs", "--seed", "--out"):
        assert flag in out
