import json

import numpy as np
import pytest

from visitgan import cli, data, metrics
from visitgan.checkpoint import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("make-toy", "--canonical", out, "--patients", 300, "--seed", 5) == 0
    return out


@pytest.fixture(scope="module")
def pretrain_ckpt(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("pre") / "pre.mtgn"
    assert run("pretrain", corpus_dir, out, "--epochs", 3, "--hidden", 8,
               "--batch", 64, "--seed", 2) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, corpus_dir, pretrain_ckpt):
    out = tmp_path_factory.mktemp("run")
    assert run("train", corpus_dir, pretrain_ckpt, out, "--iterations", 30,
               "--batch", 16, "--hidden", 8, "--seed", 3) == 0
    return out


class TestMakeToy:
    def test_writes_dataset_oracle_and_manifest(self, corpus_dir):
        ds = data.load_dataset(corpus_dir)
        assert len(ds) == 300 and ds.num_diseases == 30
        oracle = json.loads((corpus_dir / "oracle.json").read_text())
        assert len(oracle["visit_frequencies"]) == 30
        assert len(oracle["state_weights"]) == 4
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        assert manifest["command"] == "make-toy" and manifest["seed"] == 5

    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("make-toy", "--canonical", a, "--patients", 40, "--seed", 9) == 0
        assert run("make-toy", "--canonical", b, "--patients", 40, "--seed", 9) == 0
        assert (a / "patients.jsonl").read_bytes() == (b / "patients.jsonl").read_bytes()
        assert (a / "vocab.json").read_bytes() == (b / "vocab.json").read_bytes()

    def test_missing_spec_file_exit_2(self, tmp_path):
        assert run("make-toy", tmp_path / "nope.json", tmp_path / "out") == 2

    def test_spec_file_round_trip(self, tmp_path):
        spec = data.canonical_toy_spec(seed=31)
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(spec.to_json())
        assert run("make-toy", spec_file, tmp_path / "out", "--patients", 20) == 0
        assert len(data.load_dataset(tmp_path / "out")) == 20

    def test_invalid_spec_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"transition": [[0.7, 0.2], [0.5, 0.5]],
                                   "emission": [[0.1], [0.2]],
                                   "length_probs": [1.0]}))
        assert run("make-toy", bad, tmp_path / "out") == 2


class TestPretrainCommand:
    def test_zero_epochs_exit_2(self, corpus_dir, tmp_path):
        assert run("pretrain", corpus_dir, tmp_path / "p.mtgn", "--epochs", 0) == 2

    def test_writes_checkpoint_and_loss_csv(self, pretrain_ckpt):
        tensors = load_checkpoint(pretrain_ckpt)
        assert {"pre.gru.w_x", "pre.gru.w_h", "pre.gru.b", "pre.decode.w"} <= set(tensors)
        loss_csv = pretrain_ckpt.parent / "pre.loss.csv"
        lines = loss_csv.read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 4

    def test_deterministic_rerun(self, corpus_dir, tmp_path):
        a, b = tmp_path / "a.mtgn", tmp_path / "b.mtgn"
        for out in (a, b):
            assert run("pretrain", corpus_dir, out, "--epochs", 2, "--hidden", 8,
                       "--batch", 64, "--seed", 7) == 0
        assert a.read_bytes() == b.read_bytes()


class TestTrainCommand:
    def test_smoke_run_writes_all_artifacts(self, train_dir):
        assert (train_dir / "manifest.json").exists()
        assert (train_dir / "history.csv").exists()
        final = load_checkpoint(train_dir / "checkpoint_final.mtgn")
        assert {"gen.decode.w", "gen.gru.w_x", "gen.gru.w_h", "gen.gru.b",
                "gen.attn.w", "critic.mlp.0.w", "critic.mlp.0.b", "critic.mlp.1.w",
                "critic.mlp.1.b", "pre.gru.w_x", "pre.decode.w",
                "meta.condition", "meta.hidden_critique"} <= set(final)
        header = (train_dir / "history.csv").read_text().splitlines()[0]
        assert header == "iteration,critic_loss,gen_loss,wasserstein,gen_disease_types,avg_diseases_per_visit"

    def test_hidden_mismatch_exit_2(self, corpus_dir, pretrain_ckpt, tmp_path):
        assert run("train", corpus_dir, pretrain_ckpt, tmp_path, "--iterations", 1,
                   "--hidden", 16) == 2

    def test_ablation_toggles_run(self, corpus_dir, pretrain_ckpt, tmp_path):
        base = ("--iterations", 4, "--batch", 8, "--hidden", 8, "--seed", 5)
        assert run("train", corpus_dir, pretrain_ckpt, tmp_path / "h", "--no-hidden-critic",
                   *base) == 0
        assert run("train", corpus_dir, pretrain_ckpt, tmp_path / "c", "--no-condition",
                   *base) == 0
        assert run("train", corpus_dir, pretrain_ckpt, tmp_path / "d",
                   "--target-dist", "empirical", *base) == 0
        narrow = load_checkpoint(tmp_path / "h" / "checkpoint_final.mtgn")
        assert narrow["critic.mlp.0.w"].shape[1] == 30  # visits alone, no features
        assert narrow["meta.hidden_critique"].item() == 0.0
        nocond = load_checkpoint(tmp_path / "c" / "checkpoint_final.mtgn")
        assert nocond["meta.condition"].item() == 0.0

    def test_missing_checkpoint_exit_2(self, corpus_dir, tmp_path):
        assert run("train", corpus_dir, tmp_path / "nope.mtgn", tmp_path / "out") == 2


class TestGenerateCommand:
    def test_zero_patients_valid_empty_file(self, corpus_dir, train_dir, tmp_path):
        out = tmp_path / "syn0"
        assert run("generate", train_dir / "checkpoint_final.mtgn", corpus_dir, out,
                   "--patients", 0) == 0
        assert len(data.load_dataset(out)) == 0

    def test_output_is_format_valid(self, corpus_dir, train_dir, tmp_path):
        out = tmp_path / "syn"
        assert run("generate", train_dir / "checkpoint_final.mtgn", corpus_dir, out,
                   "--patients", 25, "--seed", 4) == 0
        ds = data.load_dataset(out)
        assert len(ds) == 25
        for rec in ds.records:
            for visit in rec.visits:
                assert all(0 <= i < 30 for i in visit)

    def test_same_seed_identical_output(self, corpus_dir, train_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("generate", train_dir / "checkpoint_final.mtgn", corpus_dir, out,
                       "--patients", 15, "--seed", 42) == 0
        assert (a / "patients.jsonl").read_bytes() == (b / "patients.jsonl").read_bytes()

    def test_vocabulary_dimension_mismatch_exit_2(self, train_dir, tmp_path, capsys):
        small = tmp_path / "small"
        ds = data.EHRDataset(["x", "y"], [data.PatientRecord("p", [(0,)])])
        data.save_dataset(ds, small)
        assert run("generate", train_dir / "checkpoint_final.mtgn", small,
                   tmp_path / "out", "--patients", 1) == 2
        err = capsys.readouterr().err
        assert "30" in err and "2" in err  # names both dimensions


class TestEvaluateCommand:
    def test_real_vs_real_zero_divergences(self, corpus_dir, tmp_path):
        report_path = tmp_path / "report.json"
        assert run("evaluate", corpus_dir, corpus_dir, report_path) == 0
        report = json.loads(report_path.read_text())
        assert list(report) == ["gt", "jsd_v", "jsd_p", "nd_v", "nd_p", "rn"]
        assert report["jsd_v"] == 0.0 and report["nd_p"] == 0.0

    def test_checkpoint_mode(self, corpus_dir, train_dir, tmp_path):
        report_path = tmp_path / "report.json"
        assert run("evaluate", corpus_dir, train_dir / "checkpoint_final.mtgn",
                   report_path, "--rn-cap", 1280, "--seed", 1) == 0
        report = metrics.EvalReport.from_json(report_path.read_text())
        assert report.rn == "cap" or report.rn <= 1280

    def test_vocabulary_mismatch_exit_2(self, corpus_dir, tmp_path):
        other = tmp_path / "other"
        ds = data.EHRDataset(["x", "y"], [data.PatientRecord("p", [(0,)])])
        data.save_dataset(ds, other)
        assert run("evaluate", corpus_dir, other, tmp_path / "r.json") == 2

    def test_nonexistent_synthetic_exit_2(self, corpus_dir, tmp_path):
        assert run("evaluate", corpus_dir, tmp_path / "missing", tmp_path / "r.json") == 2


class TestCLISurface:
    def test_argparse_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train"])  # missing positions
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0

    def test_manifest_written_before_outputs(self, corpus_dir, pretrain_ckpt, tmp_path):
        out = tmp_path / "run"
        assert run("train", corpus_dir, pretrain_ckpt, out, "--iterations", 2,
                   "--batch", 8, "--hidden", 8) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["iterations"] == 2
        assert any(key.endswith("vocab.json") for key in manifest["inputs"])
        assert manifest["tool_version"]
