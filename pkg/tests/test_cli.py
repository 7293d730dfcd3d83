import json

import numpy as np
import pytest

from vinecam.cli import main
from vinecam.imageprep import save_png

TINY = ["--set", "train.max_epochs=2", "--set", "train.batch_size=16"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "raw"), "--per-class", "20", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    root = corpus
    assert main(["prep", "--in", str(root / "raw"), "--out", str(root / "prep")]) == 0
    assert main(["split", "--data", str(root / "prep"), "--out", str(root / "split")]) == 0
    assert main(["train", "--manifest", str(root / "split" / "split.json"), "--out", str(root / "run"), *TINY]) == 0
    return root


def test_synth_layout(corpus):
    dirs = sorted(p.name for p in (corpus / "raw").iterdir())
    assert dirs == ["Bacterial Rot", "Downey Mildew", "Healthy Leaves", "Powdery Mildew"]
    assert all(len(list((corpus / "raw" / d).glob("*.png"))) == 20 for d in dirs)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["split", "--out", str(tmp_path)]) == 1  # no data root anywhere
    assert main(["split", "--data", ".", "--out", str(tmp_path), "--set", "oops"]) == 1
    assert main(["train", "--manifest", "m.json", "--out", str(tmp_path), "--set", "train.optimizer=sgd"]) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path):
    assert main(["prep", "--in", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["split", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "s")]) == 2


def test_prep_writes_manifest_and_reruns_identically(trained, tmp_path):
    prep = trained / "prep"
    doc = json.loads((prep / "prep.json").read_text())
    assert len(doc["files"]) == 80 and doc["failed"] == []
    before = {p.relative_to(prep): p.read_bytes() for p in prep.rglob("*") if p.is_file()}
    assert main(["prep", "--in", str(trained / "raw"), "--out", str(prep)]) == 0
    after = {p.relative_to(prep): p.read_bytes() for p in prep.rglob("*") if p.is_file()}
    assert before == after


def test_prep_refuses_other_config_without_force(trained, tmp_path):
    out = tmp_path / "p"
    assert main(["prep", "--in", str(trained / "raw"), "--out", str(out)]) == 0
    other = ["--set", "prep.median_kernel=5"]
    assert main(["prep", "--in", str(trained / "raw"), "--out", str(out), *other]) == 2
    assert main(["prep", "--in", str(trained / "raw"), "--out", str(out), *other, "--force"]) == 0


def test_prep_skips_unreadable_file(trained, tmp_path):
    src = tmp_path / "src"
    save_png(np.zeros((70, 70, 3), np.uint8), src / "a" / "ok.png")
    (src / "a" / "bad.png").write_bytes(b"not an image")
    assert main(["prep", "--in", str(src), "--out", str(tmp_path / "o")]) == 2
    doc = json.loads((tmp_path / "o" / "prep.json").read_text())
    assert doc["failed"] == ["a/bad.png"] and len(doc["files"]) == 1


def test_split_outputs(trained):
    doc = json.loads((trained / "split" / "split.json").read_text())
    assert len(doc["entries"]) == 80 and doc["fractions"] == [0.8, 0.05, 0.15]
    meta = json.loads((trained / "split" / "split.meta.json").read_text())
    assert meta["command"] == "split" and len(meta["config_hash"]) == 16


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("best.ckpt", "last.ckpt", "history.csv", "timing.csv", "curves.png", "config.ini", "train.meta.json"):
        assert (run / name).is_file(), name
    assert len((run / "history.csv").read_text().splitlines()) == 3


def test_resume_continues_history(trained, tmp_path):
    run = trained / "run"
    manifest = str(trained / "split" / "split.json")
    out = tmp_path / "resumed"
    more = ["--set", "train.max_epochs=3", "--set", "train.batch_size=16"]
    assert main(["train", "--manifest", manifest, "--out", str(out), "--resume", str(run / "last.ckpt"), *more]) == 0
    rows = (out / "history.csv").read_text().splitlines()
    assert len(rows) == 4
    assert rows[1:3] == (run / "history.csv").read_text().splitlines()[1:3]


def test_eval_outputs(trained, capsys):
    out = trained / "eval"
    args = ["eval", "--checkpoint", str(trained / "run" / "best.ckpt"),
            "--manifest", str(trained / "split" / "split.json"), "--out", str(out)]
    assert main(args) == 0
    assert "accuracy=" in capsys.readouterr().out
    rep = json.loads((out / "metrics.json").read_text())
    assert 0 <= rep["accuracy"] <= 1
    assert (out / "confusion.csv").is_file() and (out / "confusion.png").is_file()
    assert len(list((out / "pr_curves").glob("*.csv"))) == 4
    assert main(args + ["--average", "weighted"]) == 0
    assert (out / "metrics_weighted.json").is_file()
    assert main(args[:-2] + ["--out", str(trained / "e2"), "--split", "nope"]) == 2


def test_eval_missing_checkpoint_exit_2(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"),
                 "--manifest", str(trained / "split" / "split.json"), "--out", str(tmp_path)]) == 2


def test_gradcam_outputs(trained, tmp_path, capsys):
    img = next((trained / "raw" / "Powdery Mildew").glob("*.png"))
    ck = str(trained / "run" / "best.ckpt")
    assert main(["gradcam", "--checkpoint", ck, "--image", str(img), "--out", str(tmp_path)]) == 0
    assert "predicted" in capsys.readouterr().out
    assert (tmp_path / f"{img.stem}.heatmap.png").is_file() and (tmp_path / f"{img.stem}.overlay.png").is_file()
    assert main(["gradcam", "--checkpoint", ck, "--image", str(img), "--out", str(tmp_path),
                 "--target", "Healthy Leaves", "--layer", "block3"]) == 0
    assert main(["gradcam", "--checkpoint", ck, "--image", str(img), "--out", str(tmp_path), "--layer", "fc"]) == 1
    assert main(["gradcam", "--checkpoint", ck, "--image", str(tmp_path / "none.png"), "--out", str(tmp_path)]) == 2


def test_report(trained, tmp_path):
    assert main(["report", "--run", str(trained), "--out", str(tmp_path)]) == 0
    md = (tmp_path / "report.md").read_text()
    assert "Training history" in md and "Missing artifacts" in md  # no cv run here
    doc = json.loads((tmp_path / "report.json").read_text())
    assert "cv" in doc["missing"]
    assert main(["report", "--run", str(tmp_path / "nothing"), "--out", str(tmp_path / "r2")]) == 0


def test_cv_small(corpus, tmp_path):
    out = tmp_path / "cv"
    assert main(["cv", "--data", str(corpus / "raw"), "--out", str(out), "--k", "3",
                 "--set", "train.max_epochs=1", "--set", "train.batch_size=16"]) == 0
    summary = json.loads((out / "cv_summary.json").read_text())
    assert len(summary["fold_accuracies"]) == 3
    assert all((out / f"fold{i}" / "metrics.json").is_file() for i in (1, 2, 3))
    assert main(["cv", "--data", str(corpus / "raw"), "--out", str(out), "--k", "1"]) == 1
