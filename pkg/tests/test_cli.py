import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dimnet import autodiff as ad
from dimnet.checkpoint import load_checkpoint
from dimnet.cli import main


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def small_dir(work):
    assert main(["synth", "--entities", "10", "--relations", "2", "--period", "2", "--timesteps", "30",
                 "--seed", "0", "--out", "small"]) == 0
    return work / "small"


def usage_error(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestSynth:
    def test_reference_files(self, work):
        assert main(["synth", "--entities", "20", "--relations", "2", "--period", "2", "--timesteps", "200",
                     "--seed", "1", "--out", "s"]) == 0
        names = sorted(p.name for p in (work / "s").iterdir())
        assert names == ["stat.txt", "test.txt", "train.txt", "valid.txt"]
        assert (work / "s" / "stat.txt").read_text().split() == ["20", "2", "200"]
        assert (work / "s.manifest.json").exists()

    def test_byte_identical_regeneration(self, work):
        args = ["synth", "--entities", "8", "--timesteps", "12", "--seed", "5"]
        main(args + ["--out", "a"])
        main(args + ["--out", "b"])
        for name in ("train.txt", "valid.txt", "test.txt", "stat.txt"):
            assert (work / "a" / name).read_bytes() == (work / "b" / name).read_bytes()

    def test_period_zero_is_usage_error(self, work):
        assert usage_error(["synth", "--period", "0", "--out", "x"]) == 2


class TestTrain:
    def test_builtin_synth_deterministic(self, work):
        for out in ("r1", "r2"):
            assert main(["train", "--data", "synth", "--epochs", "2", "--seed", "7", "--out", out]) == 0
        first, second = read_log(work / "r1" / "train_log.jsonl"), read_log(work / "r2" / "train_log.jsonl")
        assert len(first) == 2 and first == second
        assert set(first[0]) == {"epoch", "l_pred", "l_dis", "valid_mrr"}

    def test_manifest_written_with_resolved_config(self, small_dir, work):
        cfg = work / "run.cfg"
        cfg.write_text("m = 3\nk = 4\n")
        assert main(["train", "--data", str(small_dir), "--preset", "synth", "--config", str(cfg),
                     "--k", "5", "--d", "8", "--epochs", "0", "--out", "r"]) == 0
        manifest = json.loads((work / "r" / "manifest.json").read_text())
        assert manifest["config"]["m"] == "3" and manifest["config"]["k"] == "5"
        assert manifest["config"]["d"] == "8" and manifest["config"]["layers"] == "2"
        assert len(manifest["dataset_fingerprint"]) == 64
        assert manifest["finished"] is not None and manifest["command"] == "train"

    def test_ablation_flag(self, small_dir, work):
        assert main(["train", "--data", str(small_dir), "--d", "8", "--epochs", "1", "--ablate", "multi-span",
                     "--ablate", "disentangle", "--out", "r"]) == 0
        manifest = json.loads((work / "r" / "manifest.json").read_text())
        assert manifest["config"]["multi_span"] == "false" and manifest["config"]["disentangle"] == "false"
        assert read_log(work / "r" / "train_log.jsonl")[0]["l_dis"] == 0.0

    def test_resume_continues_log(self, small_dir, work):
        base = ["train", "--data", str(small_dir), "--d", "8", "--seed", "2"]
        assert main(base + ["--epochs", "2", "--out", "straight"]) == 0
        assert main(base + ["--epochs", "1", "--out", "part"]) == 0
        assert main(base + ["--epochs", "2", "--out", "part", "--resume", "part/checkpoint.bin"]) == 0
        assert read_log(work / "part" / "train_log.jsonl") == read_log(work / "straight" / "train_log.jsonl")
        a, b = load_checkpoint(work / "part" / "checkpoint.bin"), load_checkpoint(work / "straight" / "checkpoint.bin")
        assert a.epoch == b.epoch == 2
        assert a.tensors.keys() == b.tensors.keys()
        assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)

    def test_zero_dimension_is_usage_error(self, work):
        assert usage_error(["train", "--data", "synth", "--d", "0", "--out", "r"]) == 2

    def test_missing_dataset(self, work):
        assert main(["train", "--data", "nowhere", "--out", "r"]) == 1


class TestEval:
    @pytest.fixture
    def trained(self, small_dir, work):
        assert main(["train", "--data", str(small_dir), "--d", "8", "--epochs", "1", "--out", "r"]) == 0
        return work / "r" / "checkpoint.bin"

    def test_identical_json(self, trained, small_dir, work):
        for out in ("a.json", "b.json"):
            assert main(["eval", "--checkpoint", str(trained), "--data", str(small_dir), "--out", out]) == 0
        assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()
        assert (work / "a.manifest.json").exists()

    def test_splits_disjoint_and_csv(self, trained, small_dir, work):
        main(["eval", "--checkpoint", str(trained), "--data", str(small_dir), "--split", "valid",
              "--out", "v.json", "--csv", "v.csv"])
        main(["eval", "--checkpoint", str(trained), "--data", str(small_dir), "--split", "test", "--out", "t.json"])
        valid = {r["time_index"] for r in json.loads((work / "v.json").read_text())["per_timestamp"]}
        test = {r["time_index"] for r in json.loads((work / "t.json").read_text())["per_timestamp"]}
        assert valid and test and not valid & test
        rows = list(csv.DictReader(open(work / "v.csv")))
        assert {int(r["time_index"]) for r in rows} == valid

    def test_no_virtual_graph_changes_scores(self, trained, small_dir, work):
        main(["eval", "--checkpoint", str(trained), "--data", str(small_dir), "--out", "full.json"])
        main(["eval", "--checkpoint", str(trained), "--data", str(small_dir), "--no-virtual-graph", "--out", "first.json"])
        manifest = json.loads((work / "first.manifest.json").read_text())
        assert manifest["config"]["virtual_graph"] == "false"
        assert (work / "full.json").read_text() != (work / "first.json").read_text()

    def test_mismatched_dataset(self, trained, work):
        main(["synth", "--entities", "12", "--timesteps", "12", "--out", "other"])
        assert main(["eval", "--checkpoint", str(trained), "--data", "other", "--out", "x.json"]) == 1

    def test_missing_checkpoint(self, small_dir, work):
        assert main(["eval", "--checkpoint", "none.bin", "--data", str(small_dir)]) == 1


class TestSweep:
    def test_three_rows(self, small_dir, work):
        assert main(["sweep", "--data", str(small_dir), "--d", "8", "--epochs", "1", "--param", "m",
                     "--values", "1,2,4", "--out", "s.csv"]) == 0
        rows = list(csv.DictReader(open(work / "s.csv")))
        assert [r["value"] for r in rows] == ["1", "2", "4"]
        assert set(rows[0]) == {"param", "value", "mrr", "hits1", "hits3", "hits10"}

    def test_parallel_matches_sequential(self, small_dir, work):
        base = ["sweep", "--data", str(small_dir), "--d", "8", "--epochs", "1", "--param", "omega", "--values", "1,2"]
        assert main(base + ["--out", "seq.csv"]) == 0
        assert main(base + ["--out", "par.csv", "--workers", "2"]) == 0
        assert (work / "seq.csv").read_text() == (work / "par.csv").read_text()

    def test_k_without_virtual_graph_rejected(self, small_dir):
        assert usage_error(["sweep", "--data", str(small_dir), "--param", "k", "--values", "1,2",
                            "--no-virtual-graph"]) == 2

    def test_bad_grid(self, small_dir):
        assert usage_error(["sweep", "--data", str(small_dir), "--param", "m", "--values", "a,b"]) == 2


@pytest.mark.slow
class TestGradcheck:
    def test_default_passes(self, work, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "decoder" in out
        assert json.loads((work / "gradcheck_manifest.json").read_text())["passed"] is True

    def test_coarse_step_passes(self, work):
        assert main(["gradcheck", "--eps", "1e-3"]) == 0

    def test_injected_sign_bug_detected(self, work, monkeypatch, capsys):
        def bad_sigmoid(a):
            y = 1.0 / (1.0 + np.exp(-a.data))
            return ad._make(y, (a,), lambda g: ad._accumulate(a, -g * y * (1.0 - y)))

        monkeypatch.setattr(ad, "sigmoid", bad_sigmoid)
        assert main(["gradcheck"]) == 1
        err = capsys.readouterr().err
        assert "gradient check failed" in err and "decoder" in err


def test_module_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "dimnet", "synth", "--entities", "5", "--timesteps", "9",
                           "--out", "e"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (work / "e" / "train.txt").exists()


def test_dry_run_writes_manifest_only(small_dir, work):
    assert main(["train", "--data", str(small_dir), "--preset", "icews14", "--dry-run", "--out", "r"]) == 0
    manifest = json.loads((work / "r" / "manifest.json").read_text())
    assert manifest["dry_run"] is True and manifest["config"]["max_epochs"] == "60"
    assert not (work / "r" / "checkpoint.bin").exists()
