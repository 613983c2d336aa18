import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tafmnet.cli import main
from tafmnet.data import write_pgm

TINY = {
    "model": {"input_size": 16, "stage_widths": [4, 8], "heads": 2},
    "train": {"max_epochs": 2, "batch_size": 4, "loss": {"kind": "L4"}},
    "data": {"n_train": 6, "n_val": 2, "n_test": 2},
}


def tree_bytes(root: Path, skip=("timing.json",)):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--count", "4", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "manifest.json" in a
    assert main(["synth", "--count", "4", "--seed", "3", "--threads", "3", "--out", str(tmp_path / "c")]) == 0
    assert tree_bytes(tmp_path / "c") == a


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"widths": [1]}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"model": {"input_size": 20}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2
    assert "error" in capsys.readouterr().err


def test_edt_csv(tmp_path):
    m = np.zeros((3, 3), dtype=np.uint8)
    m[1, 1] = 255
    write_pgm(tmp_path / "m.pgm", m)
    assert main(["edt", str(tmp_path / "m.pgm"), "--out", str(tmp_path / "d.csv")]) == 0
    rows = [[float(v) for v in line.split(",")] for line in (tmp_path / "d.csv").read_text().splitlines()]
    np.testing.assert_array_equal(rows, [[2**0.5, 1, 2**0.5], [1, 0, 1], [2**0.5, 1, 2**0.5]])
    write_pgm(tmp_path / "e.pgm", np.zeros((2, 2), np.uint8))
    assert main(["edt", str(tmp_path / "e.pgm"), "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text() == "inf,inf\ninf,inf\n"


def test_train_and_eval_end_to_end(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--seed", "1", "--out", str(run)]) == 0
    for name in ("report.json", "curves.csv", "timing.json", "best.ckpt", "metrics.csv",
                 "metrics.json", "per_image.csv", "config.json"):
        assert (run / name).is_file(), name
    report = json.loads((run / "report.json").read_text())
    assert [e["alpha"] for e in report["epochs"]] == [0.995, 0.99]
    data = tmp_path / "data"
    assert main(["synth", "--count", "3", "--seed", "9", "--config", str(tiny_config), "--out", str(data)]) == 0
    ev = tmp_path / "ev"
    args = ["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(data / "manifest.json"),
            "--out", str(ev), "--threshold-policy", "max_f1"]
    assert main(args) == 0
    assert json.loads((ev / "metrics.json").read_text())["threshold"] in [round(0.01 * i, 2) for i in range(1, 100)]
    assert main(args[:-2] + ["--out", str(tmp_path / "ev4"), "--threads", "4", "--threshold-policy", "max_f1"]) == 0
    assert tree_bytes(ev) == tree_bytes(tmp_path / "ev4")
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--manifest",
                 str(data / "manifest.json"), "--out", str(ev)]) == 2


def test_train_threads_and_repeat_match(tmp_path, tiny_config):
    outs = []
    for name, threads in (("one", "1"), ("two", "1"), ("four", "4")):
        out = tmp_path / name
        assert main(["train", "--config", str(tiny_config), "--out", str(out), "--threads", threads]) == 0
        outs.append(tree_bytes(out, skip=("timing.json", "config.json")))
    assert outs[0] == outs[1] == outs[2]


def test_corrupt_checkpoint_exits_1(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    data = tmp_path / "data"
    main(["synth", "--count", "1", "--out", str(data)])
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--manifest",
                 str(data / "manifest.json"), "--out", str(tmp_path / "ev")]) == 1


def test_console_entry_point_gradcheck():
    proc = subprocess.run([sys.executable, "-m", "tafmnet.cli", "gradcheck", "--skip-model"],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "FAIL" not in proc.stdout
