"""Acceptance criteria, one test each; the summary lists PASS/FAIL per criterion."""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from tafmnet import tensorcore as tc
from tafmnet.attention import AttentionConfig, SelfAwareAttention, gsa_forward, tsa_forward
from tafmnet.cli import main
from tafmnet.distance import squared_edt
from tafmnet.focalmod import FocalModConfig, FocalModulation, focal_modulate
from tafmnet.gradsuite import TOLERANCE, run_suite
from tafmnet.losses import LossSchedule, dice_loss, focal_tversky_loss, fusion_alpha_at, jaccard_loss
from tafmnet.metrics import DEFAULT_GRID, ConfusionCounts, metrics, select_threshold_max_f1
from tafmnet.training import EarlyStopping

from .test_cli import tree_bytes
from .test_distance import brute_force_sq
from .test_metrics import exhaustive_best

SMOKE_SEEDS = (0, 1, 2)
SMOKE_EPOCHS = 20


def test_criterion_01_gradient_suite(criterion):
    start = time.perf_counter()
    results = run_suite(seed=0, include_model=True)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name.split(".")[0].split("[")[0] for r in results}
    ok = all(r.passed for r in results) and elapsed < 300 and "model" in " ".join(names)
    criterion(1, "finite-difference gradient suite", ok,
              f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e} < {TOLERANCE:g}, {elapsed:.0f}s")
    assert ok


def test_criterion_02_distance_oracle(criterion):
    start = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        h, w = (int(v) for v in rng.integers(1, 33, size=2))
        mask = rng.random((h, w)) < rng.uniform(0.01, 0.6)
        mask.flat[rng.integers(mask.size)] = True
        mismatches += not np.array_equal(squared_edt(mask), brute_force_sq(mask))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    criterion(2, "exact distance transform vs brute force", ok, f"{mismatches} mismatches, {elapsed:.2f}s")
    assert ok


def test_criterion_03_loss_algebra(criterion):
    worst_dj = worst_ft = 0.0
    half = LossSchedule(kind="FT", tversky_alpha=0.5, tversky_beta=0.5, ft_gamma=1.0, epsilon=1e-12)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p, g = rng.random((8, 8)), rng.random((8, 8))
        d = 1 - float(dice_loss(p, g, 1e-12).data)
        j = 1 - float(jaccard_loss(p, g, 1e-12).data)
        worst_dj = max(worst_dj, abs(d - 2 * j / (1 + j)))
        worst_ft = max(worst_ft, abs(float(focal_tversky_loss(p, g, half).data) - (1 - d)))
    example = float(focal_tversky_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0]),
                                       LossSchedule(kind="FT", tversky_alpha=0.3, tversky_beta=0.7,
                                                    ft_gamma=1.0)).data)
    ok = worst_dj < 1e-9 and worst_ft < 1e-9 and abs(example - 0.2308) < 1e-4
    criterion(3, "loss identities and worked example", ok,
              f"D/J {worst_dj:.1e}, FT=Dice {worst_ft:.1e}, example {example:.6f}")
    assert ok


def test_criterion_04_fusion_schedule(criterion):
    def oracle(e):
        return float(min(Fraction(1), max(Fraction(1, 100), 1 - Fraction(5, 1000) * e)))

    bad = [e for e in range(1001) if fusion_alpha_at(e) != oracle(e)]
    onset = fusion_alpha_at(197) > 0.01 and fusion_alpha_at(198) == 0.01
    ok = not bad and onset
    criterion(4, "fusion weight schedule", ok, f"{len(bad)} mismatches in 0..1000, clamp at 198: {onset}")
    assert ok


def test_criterion_05_metrics(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 10_000, size=4))
        if tp + fp + fn:
            m = metrics(ConfusionCounts(tp, tn, fp, fn))
            worst = max(worst, abs(m["D"] - 2 * m["J"] / (1 + m["J"])))
    hand = metrics(ConfusionCounts(tp=2, tn=4, fp=1, fn=1)) == {"A": 0.75, "Sn": 2 / 3, "Sp": 0.8,
                                                               "J": 0.5, "D": 2 / 3}
    agree = 0
    for seed in range(20):
        r = np.random.default_rng(500 + seed)
        gts = [(r.random((6, 7)) < 0.4).astype(int) for _ in range(int(r.integers(1, 4)))]
        probs = [np.round(np.clip(g * 0.6 + r.random(g.shape) * 0.5, 0, 1), 2) for g in gts]
        agree += select_threshold_max_f1(probs, gts) == exhaustive_best(probs, gts, DEFAULT_GRID)
    ok = worst < 1e-12 and hand and agree == 20
    criterion(5, "metric identities, hand example, threshold oracle", ok,
              f"D/J {worst:.1e}, hand {hand}, threshold {agree}/20")
    assert ok


def test_criterion_06_attention(criterion):
    worst_row, shapes_ok = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        heads = int(rng.choice([1, 2, 4]))
        cfg = AttentionConfig(int(rng.integers(1, 6)), int(rng.integers(1, 6)),
                              heads * 2 * int(rng.integers(1, 5)), heads)
        block = SelfAwareAttention(cfg, rng)
        x = rng.normal(size=(2, cfg.h, cfg.w, cfg.c))
        shapes_ok &= block(x).shape == x.shape
        _, e1 = tsa_forward(x, block.w_q, block.w_k, block.w_v, heads, return_attention=True)
        _, e2 = gsa_forward(x, block.w_c, block.w_c1, block.w_c2, return_attention=True)
        worst_row = max(worst_row, np.abs(e1.data.sum(-1) - 1).max(), np.abs(e2.data.sum(-1) - 1).max())
    rng = np.random.default_rng(66)
    block = SelfAwareAttention(AttentionConfig(4, 4, 8, heads=2), rng)
    x = rng.normal(size=(4, 4, 8))
    perm = rng.permutation(16)
    out = tsa_forward(x, block.w_q, block.w_k, block.w_v, 2).data.reshape(16, 8)
    out_p = tsa_forward(x.reshape(16, 8)[perm].reshape(4, 4, 8), block.w_q, block.w_k, block.w_v, 2)
    equi = np.abs(out[perm] - out_p.data.reshape(16, 8)).max()
    ok = worst_row <= 1e-6 and equi < 1e-10 and shapes_ok
    criterion(6, "attention row sums, permutation equivariance, shapes", ok,
              f"row error {worst_row:.1e}, equivariance {equi:.1e}, shapes {shapes_ok}")
    assert ok


def test_criterion_07_focal_modulation(criterion):
    rng = np.random.default_rng(7)
    b = FocalModulation(FocalModConfig(4, 2, (3, 5)), rng)
    x = rng.normal(size=(2, 16, 16, 4))
    identity = np.array_equal(focal_modulate(tc.as_tensor(x), b).data, x)
    b.out.weight.data = rng.normal(size=(4, 4))
    x = rng.normal(size=(16, 16, 4))
    shift, radius = 2, 3
    y = b(tc.as_tensor(x), include_global=False).data
    ys = b(tc.as_tensor(np.roll(x, (shift, shift), axis=(0, 1))), include_global=False).data
    # compare only pixels whose receptive field avoids the padding and the wrap
    lo, hi = radius + shift, 16 - radius
    err = np.abs(ys[lo:hi, lo:hi] - y[lo - shift:hi - shift, lo - shift:hi - shift]).max()
    ok = identity and err < 1e-8
    criterion(7, "focal modulation identity and translation equivariance", ok,
              f"identity {identity}, interior error {err:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_08_synthetic_training_smoke(criterion, tmp_path):
    config = tmp_path / "smoke.json"
    config.write_text(json.dumps({
        "model": {"input_size": 64},
        "train": {"max_epochs": SMOKE_EPOCHS},
        "data": {"n_train": 200, "n_val": 50, "n_test": 50, "precision": "float32"},
    }))
    scores, times = {"L4": [], "BCE": []}, []
    for seed in SMOKE_SEEDS:
        for loss in ("L4", "BCE"):
            out = tmp_path / f"{loss}-{seed}"
            start = time.perf_counter()
            code = main(["train", "--config", str(config), "--seed", str(seed), "--loss", loss,
                         "--out", str(out)])
            elapsed = time.perf_counter() - start
            assert code == 0
            if loss == "L4":
                times.append(elapsed)
            j = json.loads((out / "metrics.json").read_text())["metrics"]["J"]
            scores[loss].append(float("nan") if j is None else j)
    l4, bce = np.array(scores["L4"]), np.array(scores["BCE"])
    ok = bool((l4 >= 0.80).all() and max(times) < 1800 and l4.mean() >= bce.mean() - 0.01)
    criterion(8, "synthetic training smoke", ok,
              "J(L4) " + "/".join(f"{v:.4f}" for v in l4) + ", J(BCE) " + "/".join(f"{v:.4f}" for v in bce)
              + f", slowest L4 run {max(times) / 60:.1f} min")
    assert ok


def test_criterion_09_determinism(criterion, tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({
        "model": {"input_size": 16, "stage_widths": [4, 8], "heads": 2},
        "train": {"max_epochs": 2, "batch_size": 4},
        "data": {"n_train": 8, "n_val": 4, "n_test": 4},
    }))
    trees = {}
    for run, threads in (("a", "1"), ("b", "1"), ("t4", "4")):
        root = tmp_path / run
        common = ["--seed", "5", "--threads", threads, "--config", str(config)]
        assert main(["synth", "--count", "6", *common, "--out", str(root / "synth")]) == 0
        assert main(["train", *common, "--out", str(root / "train")]) == 0
        assert main(["eval", "--checkpoint", str(root / "train" / "best.ckpt"),
                     "--manifest", str(root / "synth" / "manifest.json"), "--threads", threads,
                     "--out", str(root / "eval")]) == 0
        # timing.json holds wall-clock seconds; the resolved config differs only by the thread count
        trees[run] = {k: v for part in ("synth", "train", "eval")
                      for k, v in tree_bytes(root / part, ("timing.json",)).items()
                      if not k.endswith("config.json") or part == "synth"}
    same = trees["a"] == trees["b"]
    threads_same = trees["a"] == trees["t4"]
    ok = same and threads_same
    criterion(9, "byte-identical reruns and thread-count invariance", ok,
              f"{len(trees['a'])} files, rerun {same}, threads {threads_same}")
    assert ok


def test_criterion_10_early_stopping(criterion):
    def stop_epoch(scores):
        es = EarlyStopping(start_epoch=10, patience=9, min_delta=1e-6)
        for epoch, s in enumerate(scores, 1):
            if es.update(epoch, s)[1]:
                return epoch
        return None

    cases = {
        "best at 1": ([0.9] + [0.1] * 30, 10),
        "best at 4": ([0.1, 0.2, 0.3, 0.95] + [0.5] * 30, 13),
        "late gain": ([0.1] * 8 + [0.5] + [0.4] * 8 + [0.6] + [0.3] * 20, 27),
        "steady gains": (list(np.linspace(0.1, 0.9, 25)), None),
    }
    got = {name: stop_epoch(seq) for name, (seq, _) in cases.items()}
    ok = all(got[name] == want for name, (_, want) in cases.items())
    criterion(10, "early stopping on scripted validation scores", ok,
              ", ".join(f"{k}: {v}" for k, v in got.items()))
    assert ok
