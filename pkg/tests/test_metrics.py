import numpy as np
import pytest

from fedrisk.errors import MetricUndefined
from fedrisk.metrics import compute_accuracy, compute_auc, systemic_detection_score
from fedrisk.numeric import SeededRng


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_example():
    assert compute_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_and_inverted():
    s = [0.1, 0.2, 0.7, 0.9, 0.3]
    y = np.array([0, 0, 1, 1, 0])
    assert compute_auc(s, y) == 1.0
    rng = SeededRng(1)
    s = rng.random(50)
    y = (rng.random(50) > 0.5).astype(int)
    assert compute_auc(s, 1 - y) == pytest.approx(1 - compute_auc(s, y), abs=1e-12)


def test_auc_single_class():
    with pytest.raises(MetricUndefined):
        compute_auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force():
    rng = SeededRng(7)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        # Coarse scores force plenty of ties.
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = (rng.random(n) < 0.4).astype(int)
        y[0], y[1] = 0, 1
        assert abs(compute_auc(s, y) - brute_auc(s, y)) <= 1e-12


def test_systemic_score_cases():
    flags = np.array([0, 1, 0, 1, 0])
    assert systemic_detection_score([0.1, 0.9, 0.2, 0.8, 0.3], flags) == 1.0
    assert systemic_detection_score(np.full(5, 0.4), flags) == 0.5
    vals = []
    for seed in range(10):
        rng = SeededRng(seed)
        f = (rng.random(4000) < 0.05).astype(int)
        vals.append(systemic_detection_score(rng.random(4000), f))
    assert abs(np.mean(vals) - 0.5) <= 0.05
    assert all(abs(v - 0.5) <= 0.1 for v in vals)


def test_accuracy():
    assert compute_accuracy([0.9, 0.1], [1, 0]) == 1.0
    assert compute_accuracy([0.1, 0.9], [1, 0]) == 0.0
    assert compute_accuracy([0.9, 0.1, 0.5, 0.4], [1, 0, 1, 1]) == 0.75
