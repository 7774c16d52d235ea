import json

import pytest

from abstract_spamlens_test import AbstractSpamLensTest
from spamlens.checkpoint import save_checkpoint
from spamlens.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from spamlens.cnn_model import build_model


def prediction_lines(tp, tn, fp, fn):
    records = (
        [{"label": "spam", "prediction": "spam"}] * tp
        + [{"label": "normal", "prediction": "normal"}] * tn
        + [{"label": "normal", "prediction": "spam"}] * fp
        + [{"label": "spam", "prediction": "normal"}] * fn
    )
    return "".join(json.dumps(r) + "\n" for r in records)


class TestCli(AbstractSpamLensTest):
    @pytest.fixture(scope="function")
    def checkpoint(self, tmp_path):
        return save_checkpoint(build_model(seed=1), tmp_path / "model.spl")

    @pytest.fixture(scope="function")
    def spam_image(self, synthetic_corpus):
        return sorted((synthetic_corpus / "spam").iterdir())[0]

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "gen-synthetic" in capsys.readouterr().out

    def test_missing_source_is_usage_error(self, tmp_path, capsys):
        assert main(["ingest", str(tmp_path / "missing"), str(tmp_path / "out")]) == EXIT_USAGE
        assert "missing" in capsys.readouterr().err

    def test_unknown_method_is_usage_error(self, checkpoint, spam_image, tmp_path):
        code = main(["explain", str(checkpoint), str(spam_image), "--method", "gradcam", "--out", str(tmp_path / "e")])
        assert code == EXIT_USAGE

    def test_missing_image_is_usage_error(self, checkpoint, tmp_path, capsys):
        missing = tmp_path / "nope.png"
        code = main(["explain", str(checkpoint), str(missing), "--method", "heatmap", "--out", str(tmp_path / "e")])
        assert code == EXIT_USAGE
        assert "nope.png" in capsys.readouterr().err

    def test_zero_synthetic_images_is_usage_error(self, tmp_path):
        assert main(["gen-synthetic", str(tmp_path / "c"), "--n", "0"]) == EXIT_USAGE

    def test_ingest(self, corpus_with_duplicates_and_corrupt, tmp_path, capsys):
        out = tmp_path / "clean"
        assert main(["ingest", str(corpus_with_duplicates_and_corrupt), str(out), "--json"]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["duplicates_removed"] == 2
        assert json.loads((out / "ingest_report.json").read_text()) == document
        assert len(list((out / "spam").iterdir())) == 2

    def test_eval_predictions_file(self, tmp_path, capsys):
        path = tmp_path / "predictions.jsonl"
        path.write_text(prediction_lines(tp=820, tn=790, fp=30, fn=37))
        assert main(["eval", "--predictions", str(path)]) == EXIT_OK
        assert "95.68%" in capsys.readouterr().out

        assert main(["eval", "--predictions", str(path), "--json"]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert (document["tp"], document["tn"], document["fp"], document["fn"]) == (820, 790, 30, 37)

    def test_eval_bad_predictions_line(self, tmp_path, capsys):
        path = tmp_path / "predictions.jsonl"
        path.write_text('{"label": "spam"}\n')
        assert main(["eval", "--predictions", str(path)]) == EXIT_USAGE
        assert ":1:" in capsys.readouterr().err

    def test_eval_needs_inputs(self):
        assert main(["eval"]) == EXIT_USAGE

    def test_eval_checkpoint_on_corpus(self, checkpoint, synthetic_corpus, capsys):
        code = main(["eval", "--checkpoint", str(checkpoint), "--data", str(synthetic_corpus), "--split", "all", "--json"])
        assert code == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["tp"] + document["tn"] + document["fp"] + document["fn"] == 8

    def test_corrupt_checkpoint_is_runtime_failure(self, tmp_path, synthetic_corpus, capsys):
        bad = tmp_path / "bad.spl"
        bad.write_bytes(b"SPL0" + bytes(60))
        assert main(["eval", "--checkpoint", str(bad), "--data", str(synthetic_corpus)]) == EXIT_FAILURE
        assert "CheckpointError" in capsys.readouterr().err

    def test_explain_lime_is_reproducible(self, checkpoint, spam_image, tmp_path, capsys):
        documents = []
        for run in ("a", "b"):
            prefix = tmp_path / run
            argv = [
                "explain", str(checkpoint), str(spam_image), "--method", "lime", "--out", str(prefix),
                "--segments", "4", "--samples", "12", "--seed", "3", "--threads", "2",
            ]
            assert main(argv) == EXIT_OK
            documents.append((tmp_path / f"{run}.json").read_text())
            assert (tmp_path / f"{run}.png").is_file()
            assert (tmp_path / f"{run}.segments.png").is_file()
        assert documents[0] == documents[1]
        assert json.loads(documents[0])["seed"] == 3

    def test_explain_shap_satisfies_efficiency(self, checkpoint, spam_image, tmp_path, capsys):
        argv = [
            "explain", str(checkpoint), str(spam_image), "--method", "shap",
            "--out", str(tmp_path / "s"), "--segments", "4", "--json",
        ]
        assert main(argv) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        explanation = document["explanation"]
        assert explanation["mode"] == "exact"
        assert explanation["base_value"] + sum(explanation["phi"]) == pytest.approx(explanation["fx"], abs=1e-9)
        assert explanation["fx"] == pytest.approx(document["probability"], abs=1e-6)
        assert document["prediction"] in ("spam", "normal")

    def test_explain_heatmap(self, checkpoint, spam_image, tmp_path, capsys):
        argv = [
            "explain", str(checkpoint), str(spam_image), "--method", "heatmap",
            "--out", str(tmp_path / "h"), "--patch-size", "64", "--stride", "64", "--json",
        ]
        assert main(argv) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert set(document["outputs"]) == {"json", "png"}
        assert len(document["explanation"]["grid"]) == 2

    def test_config_file_supplies_defaults_and_flags_win(self, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("n = 3\nseed = 5\njson = yes\n")

        assert main(["gen-synthetic", str(tmp_path / "a"), "--config", str(config)]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert (document["files"], document["seed"]) == (6, 5)

        assert main(["gen-synthetic", str(tmp_path / "b"), "--config", str(config), "--n", "2"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["files"] == 4

    def test_unknown_config_key(self, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("segments = 4\n")
        assert main(["gen-synthetic", str(tmp_path / "a"), "--config", str(config)]) == EXIT_USAGE
        assert "segments" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-synthetic", str(tmp_path / "a"), "--config", str(tmp_path / "none.cfg")]) == EXIT_USAGE

    def test_train_is_reproducible(self, synthetic_corpus, tmp_path, capsys):
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / f"{run}.spl"
            argv = [
                "train", str(synthetic_corpus), "--out", str(out),
                "--epochs", "1", "--batch-size", "3", "--seed", "2", "--json",
            ]
            assert main(argv) == EXIT_OK
            document = json.loads(capsys.readouterr().out)
            assert document["epochs"] == 1
            assert (document["train_size"], document["test_size"]) == (6, 2)
            assert len((tmp_path / f"{run}.spl.history.jsonl").read_text().splitlines()) == 1
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
