import csv
import json

import pytest

from namrank.cli import main
from namrank.training import load_checkpoint

GEN = ["--set", "n_users=40,n_items=60,n_queries=4,sessions_per_user=4"]
TINY = ["--set", "d_e=4,n_heads=2,d_k=3,d_v=2,d_k_ta=3,d_v_ta=3,d_user=2,d_query=2,"
        "tower_sizes=4 3,n_max=5", "--epochs", "1", "--batch_size", "32"]


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def log(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    run("gen", "--seed", 5, *GEN, "--out", out)
    return out / "events.tsv"


@pytest.fixture(scope="module")
def trained(log, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    run("train", log, "--out", out, *TINY)
    return out


class TestGen:
    def test_manifest(self, log):
        m = json.loads((log.parent / "manifest.json").read_text())
        assert m["command"] == "gen"
        assert m["seed"] == 5
        assert m["config"]["n_users"] == 40
        assert set(m["outputs"]) == {"events.tsv"}
        assert m["finished"] >= m["started"]

    def test_byte_identical_rerun(self, log, tmp_path):
        run("gen", "--seed", 5, *GEN, "--out", tmp_path)
        assert (tmp_path / "events.tsv").read_bytes() == log.read_bytes()

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "syn.cfg"
        cfg.write_text("# tiny\nn_users=10\nn_items=12\nn_queries=2\nseed=3\n")
        run("gen", "--config", cfg, "--out", tmp_path / "o")
        m = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert m["config"]["n_items"] == 12 and str(cfg) in m["inputs"]

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        assert main(["gen", "--set", "n_items=0", "--out", str(tmp_path)]) == 1
        assert "n_items" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert main(["gen", "--set", "bogus=1", "--out", str(tmp_path)]) == 1


class TestAnalyze:
    def test_tables(self, log, tmp_path):
        run("analyze", log, "--out", tmp_path)
        hr = read_csv(tmp_path / "hitrate.csv")
        assert hr[0] == ["Method", "HitRate@10", "HitRate@20", "HitRate@30"]
        assert [r[0] for r in hr[1:]] == ["Co-occurrence Frequency", "Jaccard", "Cosine"]
        assert all(0 <= float(v) <= 1 for r in hr[1:] for v in r[1:])
        pc = read_csv(tmp_path / "popularity_pcoc.csv")
        assert len(pc) == 5
        shares = [float(r[2]) for r in pc[1:]]
        assert sum(shares) == pytest.approx(1.0, abs=1e-5)
        rt = read_csv(tmp_path / "retarget.csv")
        assert rt[0][-1] == "Retarget/NonRetarget"
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert {"hitrate.csv", "hitrate.txt", "popularity_pcoc.csv", "retarget.csv"} <= set(m["outputs"])

    def test_with_scores(self, log, tmp_path):
        scores = tmp_path / "s.csv"
        lines = log.read_text().splitlines()
        item = lines[0].split("\t")[1]
        n_imp = sum(1 for ln in lines if ln.split("\t")[1] == item and ln.endswith("impression"))
        scores.write_text(f"item_id,impressions,p_ctcvr\n{item},1,0.5\n")
        run("analyze", log, "--out", tmp_path / "o", "--scores", scores, "--k-list", "5")
        pc = read_csv(tmp_path / "o" / "popularity_pcoc.csv")
        assert sum(int(r[1]) for r in pc[1:]) == n_imp
        scored = [r for r in pc[1:] if int(r[1])]
        assert float(scored[0][3]) == 0.5

    def test_bad_log(self, tmp_path, capsys):
        bad = tmp_path / "bad.tsv"
        bad.write_text("u1\ti1\tq\tnot-a-time\tclick\n")
        assert main(["analyze", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "line 1" in capsys.readouterr().err

    def test_missing_log(self, tmp_path):
        assert main(["analyze", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 1


class TestTrainEval:
    def test_outputs(self, trained):
        m = json.loads((trained / "manifest.json").read_text())
        assert m["command"] == "train"
        assert {"checkpoint.nam", "history.csv"} <= set(m["outputs"])
        assert isinstance(m["config"]["split_ts"], int)
        hist = read_csv(trained / "history.csv")
        assert len(hist) == 2

    def test_bit_identical_checkpoint(self, log, trained, tmp_path):
        run("train", log, "--out", tmp_path, *TINY)
        assert (tmp_path / "checkpoint.nam").read_bytes() == (trained / "checkpoint.nam").read_bytes()
        assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()

    def test_eval_identical_metrics(self, log, trained, tmp_path):
        run("eval", trained / "checkpoint.nam", log, "--out", tmp_path / "a")
        run("eval", trained / "checkpoint.nam", log, "--out", tmp_path / "b")
        for name in ("metrics.csv", "pcoc.csv", "item_scores.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = dict(read_csv(tmp_path / "a" / "metrics.csv")[1:])
        assert set(rows) == {"auc_ctr", "auc_ctcvr", "gauc_ctr", "gauc_ctcvr"}

    def test_zero_epochs(self, log, tmp_path):
        run("train", log, "--out", tmp_path, *TINY[:-4], "--epochs", "0")
        params, _ = load_checkpoint(tmp_path / "checkpoint.nam")
        assert params

    def test_periodic_checkpoints(self, log, tmp_path):
        run("train", log, "--out", tmp_path, *TINY[:-4], "--epochs", "2", "--checkpoint_every", "1")
        assert (tmp_path / "checkpoint_epoch1.nam").exists()
        assert (tmp_path / "checkpoint_epoch2.nam").read_bytes() == \
            (tmp_path / "checkpoint.nam").read_bytes()

    def test_flags_and_train_config(self, log, tmp_path):
        tc = tmp_path / "train.cfg"
        tc.write_text("epochs=1\nbatch_size=16\n")
        run("train", log, "--out", tmp_path / "o", *TINY[:2], "--train-config", tc,
            "--flags", "use_global_norm=false")
        m = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert m["config"]["model"]["use_global_norm"] is False
        assert m["config"]["train"]["batch_size"] == 16

    def test_invalid_train_value(self, log, tmp_path):
        assert main(["train", str(log), "--out", str(tmp_path), "--learning_rate", "-1"]) == 1

    def test_corrupt_checkpoint(self, log, tmp_path, capsys):
        bad = tmp_path / "bad.nam"
        bad.write_bytes(b"garbage")
        assert main(["eval", str(bad), str(log), "--out", str(tmp_path / "o")]) == 1
        assert "checkpoint" in capsys.readouterr().err


def test_ablate(log, tmp_path):
    run("ablate", log, "--out", tmp_path, *TINY)
    table = read_csv(tmp_path / "ablation.csv")
    assert [r[0] for r in table[1:]] == ["NAM", "NAM w/o GlobalNorm", "NAM w/o IIF based P13n", "AEM"]
    cmp = read_csv(tmp_path / "pcoc_compare.csv")
    assert cmp[0] == ["Level", "PCOC_A", "PCOC_B", "PCOC_Diff_%"]
    assert len(cmp) == 5
    assert (tmp_path / "aem.nam").exists()
