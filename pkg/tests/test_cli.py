import csv
import io

import numpy as np
import pytest

from hed.cli import ABLATION_GRID, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from hed.data import consensus, load_corpus
from hed.netpbm import read_pfm, read_pnm, write_pfm


def call(*argv):
    buf = io.StringIO()
    code = run([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    code, text = call("synth", "--n", 2, "--size", 40, "--seed", 1, "--out", root)
    assert code == EXIT_OK and "wrote 2 images" in text
    return root


@pytest.fixture(scope="module")
def weights(corpus_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "w.bin"
    code, text = call("train", "--corpus", corpus_dir, "--iterations", 20, "--out-weights", path)
    assert code == EXIT_OK
    assert "[train]" in text and "iterations = 20" in text and "sha256" in text
    return path


def test_train_infer_roundtrip(corpus_dir, weights, tmp_path):
    code, _ = call("infer", "--weights", weights, "--image", corpus_dir / "images",
                   "--out", tmp_path, "--strategy", "average(1..5)")
    assert code == EXIT_OK
    for item in load_corpus(corpus_dir):
        prob = read_pfm(tmp_path / f"{item.id}.pfm")
        assert prob.shape == item.shape
        assert np.all((prob > 0) & (prob < 1))
        assert read_pnm(tmp_path / f"{item.id}.pgm").shape == item.shape


def test_infer_rejects_unknown_strategy(corpus_dir, weights, tmp_path):
    code, _ = call("infer", "--weights", weights, "--image", corpus_dir / "images", "--out", tmp_path, "--strategy", "side9")
    assert code == EXIT_USAGE


def test_eval_perfect_consensus_prediction(corpus_dir, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for item in load_corpus(corpus_dir):
        write_pfm(pred / f"{item.id}.pfm", consensus(item.annotations, 3).values.astype(float))
    code, text = call("eval", "--pred-dir", pred, "--gt-dir", corpus_dir, "--consensus", 3, "--no-nms", "--out", tmp_path / "ev")
    assert code == EXIT_OK
    row = next(csv.DictReader(open(tmp_path / "ev" / "summary.csv")))
    assert float(row["ods"]) == float(row["ois"]) == float(row["ap"]) == 1.0
    assert len(open(tmp_path / "ev" / "pr_curve.csv").read().splitlines()) == 100


def test_gradcheck_small_budget():
    code, text = call("gradcheck", "--budget", 300)
    assert code == EXIT_OK
    assert "max relative error" in text and "fuse.weight" in text


def test_ablate_writes_four_rows(corpus_dir, tmp_path):
    code, _ = call("ablate", "--corpus", corpus_dir, "--iterations", 4, "--out", tmp_path / "ab.csv")
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "ab.csv")))
    assert [(r["deep_supervision"], r["pooling"]) for r in rows] == list(ABLATION_GRID)
    assert all(float(r["fuse_loss"]) > 0 for r in rows)


def test_config_file_and_overrides(corpus_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("iterations = 3\nlearning_rate = 0.001\n")
    code, text = call("train", "--corpus", corpus_dir, "--train-config", cfg, "--set", "momentum=0.5",
                      "--seed", 4, "--out-weights", tmp_path / "w.bin")
    assert code == EXIT_OK
    assert "iterations = 3" in text and "momentum = 0.5" in text and "seed = 4" in text


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["train", "--bogus"],
    [],
    ["train", "--corpus", "x", "--out-weights", "y", "--set", "nonsense=1"],
    ["--threads", "0", "gradcheck"],
])
def test_usage_errors(argv):
    assert call(*argv)[0] == EXIT_USAGE


def test_data_errors(tmp_path, corpus_dir):
    assert call("train", "--corpus", tmp_path / "missing", "--out-weights", tmp_path / "w.bin")[0] == EXIT_DATA
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not weights")
    assert call("infer", "--weights", bad, "--image", corpus_dir / "images", "--out", tmp_path)[0] == EXIT_DATA


def test_divergence_is_numeric_failure(corpus_dir, tmp_path):
    with np.errstate(all="ignore"):
        code, _ = call("train", "--corpus", corpus_dir, "--iterations", 30, "--lr", 1e6, "--out-weights", tmp_path / "w.bin")
    assert code == EXIT_NUMERIC


def test_train_is_deterministic(corpus_dir, tmp_path):
    digests = []
    for k in range(2):
        path = tmp_path / f"w{k}.bin"
        assert call("--threads", 1, "train", "--corpus", corpus_dir, "--iterations", 5, "--out-weights", path)[0] == EXIT_OK
        digests.append(path.read_bytes())
    assert digests[0] == digests[1]
