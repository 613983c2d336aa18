import json
import math

import numpy as np
import pytest

from tafmnet.exceptions import EmptyInput, ShapeMismatch
from tafmnet.metrics import (
    DEFAULT_GRID,
    ConfusionCounts,
    NonBinaryInput,
    confusion,
    metrics,
    metrics_csv,
    metrics_json,
    pooled_confusion,
    select_threshold_max_f1,
    sweep_dice,
)


def exhaustive_best(probs, gts, grid=DEFAULT_GRID):
    """Oracle: recount the confusion at every threshold with plain loops."""
    best_t, best_d = None, -1.0
    for t in grid:
        tp = fp = fn = 0
        for p, g in zip(probs, gts):
            pred = p >= t
            tp += int(np.sum(pred & (g == 1)))
            fp += int(np.sum(pred & (g == 0)))
            fn += int(np.sum(~pred & (g == 1)))
        den = 2 * tp + fp + fn
        d = 2 * tp / den if den else -math.inf
        closer = best_t is not None and d == best_d and round(abs(t - 0.5), 12) < round(abs(best_t - 0.5), 12)
        if d > best_d or closer:
            best_t, best_d = t, d
    return best_t


def test_hand_example():
    m = metrics(ConfusionCounts(tp=2, tn=4, fp=1, fn=1))
    assert m == {"A": 0.75, "Sn": 2 / 3, "Sp": 0.8, "J": 0.5, "D": 2 / 3}


def test_dice_jaccard_identity_on_random_counts():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 10_000, size=4))
        if tp + fp + fn == 0:
            continue
        m = metrics(ConfusionCounts(tp, tn, fp, fn))
        assert abs(m["D"] - 2 * m["J"] / (1 + m["J"])) < 1e-12


def test_undefined_metrics_are_nan():
    m = metrics(ConfusionCounts(tn=5))
    assert math.isnan(m["Sn"]) and math.isnan(m["J"]) and math.isnan(m["D"])
    assert m["A"] == 1.0 and m["Sp"] == 1.0
    body = json.loads(metrics_json(m))
    assert body["undefined"] == ["Sn", "J", "D"]
    assert body["J"] is None


def test_confusion_and_pooling():
    p = np.array([[1, 0], [1, 1]])
    g = np.array([[1, 1], [0, 1]])
    c = confusion(p, g)
    assert c == ConfusionCounts(tp=2, tn=0, fp=1, fn=1)
    assert pooled_confusion([p, p], [g, g]) == c + c
    with pytest.raises(NonBinaryInput):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ShapeMismatch):
        confusion(np.zeros(3), np.zeros(4))


def test_gt_as_prediction_is_perfect():
    g = (np.random.default_rng(1).random((10, 10)) < 0.3).astype(int)
    assert all(v == 1.0 for v in metrics(confusion(g, g)).values())


@pytest.mark.parametrize("seed", range(20))
def test_threshold_selection_matches_exhaustive_sweep(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    gts = [(rng.random((6, 7)) < 0.4).astype(int) for _ in range(n)]
    # coarse probabilities so exact ties occur
    probs = [np.round(np.clip(g * 0.6 + rng.random(g.shape) * 0.5, 0, 1), 2) for g in gts]
    assert select_threshold_max_f1(probs, gts) == exhaustive_best(probs, gts)


def test_ties_prefer_half():
    # every threshold in (0.2, 0.8] gives the same perfect split
    probs = [np.array([0.2, 0.2, 0.8, 0.8])]
    gts = [np.array([0, 0, 1, 1])]
    assert select_threshold_max_f1(probs, gts) == 0.5
    # 0.49 and 0.51 are equally near 0.5; the lower one wins
    probs = [np.array([0.48, 0.52])]
    gts = [np.array([0, 1])]
    assert select_threshold_max_f1(probs, gts, grid=(0.49, 0.51)) == 0.49


def test_max_f1_never_below_fixed_half():
    rng = np.random.default_rng(7)
    probs = [rng.random((8, 8)) for _ in range(3)]
    gts = [(rng.random((8, 8)) < 0.5).astype(int) for _ in range(3)]
    scores = sweep_dice(probs, gts)
    t = select_threshold_max_f1(probs, gts)
    assert scores[DEFAULT_GRID.index(t)] >= scores[DEFAULT_GRID.index(0.5)]


def test_sweep_errors():
    with pytest.raises(EmptyInput):
        sweep_dice([], [])


def test_csv_order():
    text = metrics_csv(metrics(ConfusionCounts(2, 4, 1, 1)))
    assert [line.split(",")[0] for line in text.splitlines()] == ["metric", "A", "Sn", "Sp", "J", "D"]
