import csv
import json

import numpy as np
import pytest

from dgd.cli import main
from dgd.checkpoint import load_checkpoint
from dgd.data import CountMatrix, save_mtx
from dgd.synthetic import make_binary, make_counts

FAST = ["--epochs", "3", "--latent-dim", "2", "--hidden", "8", "--batch-size", "16", "-q"]


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def counts_files(tmp_path):
    rng = np.random.default_rng(0)
    counts, labels, _, _ = make_counts(60, rng, n_genes=10)
    counts[:, 3] = 0
    save_mtx(CountMatrix(counts), tmp_path / "x.mtx")
    (tmp_path / "labels.txt").write_text("".join(f"c{v}\n" for v in labels))
    (tmp_path / "genes.txt").write_text("".join(f"g{j}\n" for j in range(10)))
    return tmp_path


@pytest.fixture
def run_dir(counts_files):
    d = counts_files
    out = d / "run"
    code = main(["train", "--mtx", str(d / "x.mtx"), "--labels", str(d / "labels.txt"),
                 "--genes", str(d / "genes.txt"), "--k", "auto", "--out", str(out), *FAST])
    assert code == 0
    return out


def test_train_outputs(run_dir):
    for name in ("config.json", "split.json", "history.csv", "timing.csv", "report_train.csv",
                 "checkpoint/manifest.json", "checkpoint/params.bin"):
        assert (run_dir / name).exists(), name
    hist = read_csv(run_dir / "history.csv")
    assert hist[0] == ["epoch", "total_loss", "recon_loss", "gmm_loss"]
    assert len(hist) == 4
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["n_components"] == 4
    parts = json.loads((run_dir / "split.json").read_text())
    assert sorted(parts["train"] + parts["val"] + parts["test"]) == list(range(60))
    bundle = load_checkpoint(run_dir / "checkpoint")
    assert bundle.decoder.n_out == 9
    assert "g3" not in bundle.config["feature_names"]


def test_config_rerun_is_bitwise(run_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(run_dir / "config.json"), "--out", str(again),
                 "-q"]) == 0
    for name in ("history.csv", "checkpoint/params.bin", "split.json"):
        assert (run_dir / name).read_bytes() == (again / name).read_bytes()


def test_eval_train_split_matches_training_report(run_dir, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["eval", "--run", str(run_dir), "--split", "train", "--out", str(out),
                 "-q"]) == 0
    a, b = read_csv(run_dir / "report_train.csv"), read_csv(out)
    col = a[0].index("seconds")
    assert [r[:col] + r[col + 1:] for r in a] == [r[:col] + r[col + 1:] for r in b]


def test_eval_test_split(run_dir):
    assert main(["eval", "--run", str(run_dir), "--split", "test", "--epochs", "2", "-q"]) == 0
    rows = read_csv(run_dir / "report_test.csv")
    assert rows[1][1] == "test"


def test_unknown_split_is_usage_error(run_dir):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--run", str(run_dir), "--split", "holdout"])
    assert info.value.code == 2


def test_infer_and_export(run_dir, counts_files, tmp_path):
    out = tmp_path / "z.csv"
    assert main(["infer", "--checkpoint", str(run_dir), "--mtx", str(counts_files / "x.mtx"),
                 "--epochs", "2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["sample_id", "z_1", "z_2", "hard_cluster", "max_posterior"]
    assert len(rows) == 61
    assert all(0 < float(r[4]) <= 1 for r in rows[1:])

    exp = tmp_path / "lat.csv"
    assert main(["export-latent", "--checkpoint", str(run_dir), "--out", str(exp)]) == 0
    rows = read_csv(exp)
    n_train = len(json.loads((run_dir / "split.json").read_text())["train"])
    kinds = [r[0] for r in rows[1:]]
    assert kinds.count("representation") == n_train and kinds.count("mean") == 4


def test_sample(run_dir, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sample", "--checkpoint", str(run_dir), "--n", "5", "--component", "2",
                 "--seed", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 6 and all(r[0] == "2" for r in rows[1:])
    assert rows[0][3] == "g0"
    vals = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
    assert vals.shape == (5, 9) and vals.min() > 0 and vals.max() < 1
    assert main(["sample", "--checkpoint", str(run_dir), "--component", "7",
                 "--out", str(out)]) == 2


def test_profile_mismatch(run_dir, tmp_path):
    x, _ = make_binary(5, np.random.default_rng(0), n_features=9)
    np.savetxt(tmp_path / "b.csv", x, delimiter=",", fmt="%g")
    assert main(["infer", "--checkpoint", str(run_dir), "--csv", str(tmp_path / "b.csv"),
                 "--out", str(tmp_path / "o.csv")]) == 2
    assert main(["infer", "--checkpoint", str(run_dir), "--profile", "binary",
                 "--csv", str(tmp_path / "b.csv"), "--out", str(tmp_path / "o.csv")]) == 2


def test_k_required_without_labels(counts_files, capsys):
    code = main(["train", "--mtx", str(counts_files / "x.mtx"),
                 "--out", str(counts_files / "o"), *FAST])
    assert code == 2
    assert "--k" in capsys.readouterr().err
    assert main(["train", "--mtx", str(counts_files / "x.mtx"), "--k", "auto",
                 "--out", str(counts_files / "o"), *FAST]) == 2


def test_empty_input_exits_2(tmp_path):
    p = tmp_path / "e.mtx"
    p.write_text("%%MatrixMarket matrix coordinate integer general\n0 4 0\n")
    assert main(["train", "--mtx", str(p), "--k", "2", "--out", str(tmp_path / "o"),
                 *FAST]) == 2
    assert main(["train", "--mtx", str(tmp_path / "missing.mtx"), "--k", "2",
                 "--out", str(tmp_path / "o"), *FAST]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_1(counts_files):
    code = main(["train", "--mtx", str(counts_files / "x.mtx"), "--k", "2",
                 "--lr-decoder", "1e300", "--out", str(counts_files / "d"), *FAST])
    assert code == 1
    assert (counts_files / "d" / "history.csv").exists()


def test_binary_profile_end_to_end(tmp_path):
    x, labels = make_binary(40, np.random.default_rng(1), n_features=12)
    np.savetxt(tmp_path / "b.csv", x, delimiter=",", fmt="%g")
    (tmp_path / "l.txt").write_text("".join(f"{v}\n" for v in labels))
    out = tmp_path / "run"
    assert main(["train", "--profile", "binary", "--csv", str(tmp_path / "b.csv"),
                 "--labels", str(tmp_path / "l.txt"), "--k", "auto", "--supervised",
                 "--out", str(out), *FAST]) == 0
    rows = read_csv(out / "report_train.csv")
    assert rows[1][0] == "dgd" and rows[1][1] == "train"
