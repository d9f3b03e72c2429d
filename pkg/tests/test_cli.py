import json

import numpy as np
import pytest

from msrspeech.cli import main
from msrspeech.objective import read_codebook, read_label_sidecar


def write_spec(path, count=3, duration=1.0, classes=3, seed=11):
    path.write_text(
        f"duration_s={duration}\nnum_classes={classes}\ncount={count}\nseed={seed}\n"
    )
    return path


class TestPlanCommand:
    def test_canonical_2205(self, capsys):
        assert main(["plan", "--rate", "22050"]) == 0
        out = capsys.readouterr().out
        assert "7,7,3,3" in out
        assert "19,14,4,3" in out
        assert "dr: 441" in out
        assert "VALID" in out

    def test_incompatible_rate_exit_code(self, capsys):
        assert main(["plan", "--rate", "11025"]) == 2
        err = capsys.readouterr().err
        assert "dr = 220.5" in err

    def test_derived_rate_valid(self, capsys):
        assert main(["plan", "--rate", "32000", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["valid"] is True
        assert payload["dr"] == 640
        assert 25.0 <= payload["receptive_field_ms"] <= 27.0

    def test_json_structure(self, capsys):
        assert main(["plan", "--rate", "16000", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert [l["stride"] for l in payload["layers"]] == [5, 2, 2, 2, 2, 2, 2]


class TestGenCorpusCommand:
    def test_layout_and_counts(self, tmp_path, capsys):
        spec = write_spec(tmp_path / "spec.txt", count=3)
        out = tmp_path / "corpus"
        assert main(["gen-corpus", "--spec", str(spec), "--out", str(out)]) == 0
        manifest = (out / "manifest.tsv").read_text().strip().splitlines()
        assert len(manifest) == 12  # 3 utterances x 4 default rates
        assert (out / "segments.tsv").exists()
        assert (out / "run_manifest.json").exists()
        wavs = sorted((out / "wavs").glob("*.wav"))
        assert len(wavs) == 12

    def test_rerun_identical_manifest(self, tmp_path):
        spec = write_spec(tmp_path / "spec.txt", count=2)
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        main(["gen-corpus", "--spec", str(spec), "--out", str(out1)])
        main(["gen-corpus", "--spec", str(spec), "--out", str(out2)])
        assert (out1 / "manifest.tsv").read_bytes() == (out2 / "manifest.tsv").read_bytes()
        assert (out1 / "segments.tsv").read_bytes() == (out2 / "segments.tsv").read_bytes()

    def test_rates_flag(self, tmp_path):
        spec = write_spec(tmp_path / "spec.txt", count=2)
        out = tmp_path / "corpus"
        assert main(["gen-corpus", "--spec", str(spec), "--out", str(out),
                     "--rates", "16000,48000"]) == 0
        manifest = (out / "manifest.tsv").read_text().strip().splitlines()
        assert len(manifest) == 4

    def test_missing_spec_file(self, tmp_path, capsys):
        rc = main(["gen-corpus", "--spec", str(tmp_path / "nope.txt"),
                   "--out", str(tmp_path / "c")])
        assert rc == 1


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_spec(root / "spec.txt", count=4, duration=1.0, classes=3, seed=5)
    corpus = root / "corpus"
    assert main(["gen-corpus", "--spec", str(spec), "--out", str(corpus),
                 "--rates", "16000,24000"]) == 0
    assert main(["labels", "--corpus", str(corpus), "--k", "8", "--seed", "3"]) == 0
    return corpus


class TestLabelsCommand:
    def test_outputs(self, cli_corpus):
        codebook = read_codebook(cli_corpus / "codebook.bin")
        assert codebook.k == 8
        labels = read_label_sidecar(cli_corpus / "labels.tsv")
        assert len(labels) == 8  # 4 utterances x 2 rates
        assert all(seq.max() < 8 for seq in labels.values())


class TestPretrainProbeReport:
    @pytest.fixture(scope="class")
    def run_dir(self, cli_corpus, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        config = out / "config.json"
        config.write_text(json.dumps({
            "model": {"rates": [16000, 24000], "dim": 32, "inner_channels": 16,
                      "num_layers": 1, "num_heads": 2, "ffn_dim": 64,
                      "num_clusters": 8},
            "train": {"total_steps": 3, "micro_batch_seconds": 2.0,
                      "accum_count": 2, "seed": 5,
                      "rate_weights": {"16000": 0.5, "24000": 0.5}},
        }))
        rc = main(["pretrain", "--corpus", str(cli_corpus), "--config", str(config),
                   "--out", str(out)])
        assert rc == 0
        return out

    def test_pretrain_outputs(self, run_dir):
        assert (run_dir / "checkpoint.msrh").exists()
        metrics = (run_dir / "metrics.csv").read_text().strip().splitlines()
        assert metrics[0] == "step,loss,grad_norm,lr,rate_mix"
        assert len(metrics) == 4
        manifest = json.loads((run_dir / "run_manifest.json").read_text())
        assert manifest["command"] == "pretrain"

    def test_probe_matched(self, run_dir, cli_corpus, capsys):
        rc = main(["probe", "--checkpoint", str(run_dir / "checkpoint.msrh"),
                   "--corpus", str(cli_corpus), "--rate", "16000",
                   "--epochs", "2", "--out", str(run_dir)])
        assert rc == 0
        rows = (run_dir / "probe_results.csv").read_text().strip().splitlines()
        assert rows[0] == "model,rate,mode,accuracy"
        assert len(rows) >= 2
        assert (run_dir / "layer_weights_16000_matched.json").exists()

    def test_probe_mismatch(self, run_dir, cli_corpus, capsys):
        rc = main(["probe", "--checkpoint", str(run_dir / "checkpoint.msrh"),
                   "--corpus", str(cli_corpus), "--rate", "24000", "--mismatch",
                   "--branch-rate", "16000", "--epochs", "2", "--out", str(run_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "effective shift" in out

    def test_report(self, run_dir, capsys):
        rc = main(["report", "--run", str(run_dir)])
        assert rc == 0
        summary = json.loads((run_dir / "summary.json").read_text())
        assert [row["frames_for_1s"] for row in summary["alignment"]] == [49, 49, 49, 49]
        assert summary["overhead"]["marginal_percent_per_added_rate"] <= 5.0
        assert summary["training"]["steps"] == 3
        assert any(r["mode"] == "matched" for r in summary["probes"])


class TestRunManifest:
    def test_same_inputs_same_run_id(self, tmp_path):
        spec = write_spec(tmp_path / "spec.txt", count=2)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["gen-corpus", "--spec", str(spec), "--out", str(out1)])
        main(["gen-corpus", "--spec", str(spec), "--out", str(out2)])
        id1 = json.loads((out1 / "run_manifest.json").read_text())["run_id"]
        id2 = json.loads((out2 / "run_manifest.json").read_text())["run_id"]
        assert id1 == id2

    def test_different_seed_different_run_id(self, tmp_path):
        s1 = write_spec(tmp_path / "s1.txt", count=2, seed=1)
        s2 = write_spec(tmp_path / "s2.txt", count=2, seed=2)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["gen-corpus", "--spec", str(s1), "--out", str(out1)])
        main(["gen-corpus", "--spec", str(s2), "--out", str(out2)])
        id1 = json.loads((out1 / "run_manifest.json").read_text())["run_id"]
        id2 = json.loads((out2 / "run_manifest.json").read_text())["run_id"]
        assert id1 != id2


class TestHelp:
    @pytest.mark.parametrize(
        "command", ["plan", "gen-corpus", "labels", "pretrain", "probe", "report"]
    )
    def test_help_lists_defaults(self, command, capsys):
        with pytest.raises(SystemExit) as ei:
            main([command, "--help"])
        assert ei.value.code == 0
        out = capsys.readouterr().out
        assert "default" in out
