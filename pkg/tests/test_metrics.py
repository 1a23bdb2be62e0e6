import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homographyad.errors import SingleClass
from homographyad.eval.metrics import auroc, pixel_auroc


def pair_count(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_trivial_cases():
    assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auroc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 1
    assert pixel_auroc([m], [m > 0]) == 1.0
    assert pixel_auroc([-m], [m > 0]) == 0.0
    with pytest.raises(SingleClass):
        auroc([1, 2], [1, 1])


def test_pair_count_oracle_exact():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        scores = rng.integers(0, 10, n).astype(float) if seed % 2 else rng.random(n)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) == pair_count(scores, labels)
        maps = [rng.integers(0, 5, (8, 8)).astype(float) for _ in range(2)]
        masks = [rng.random((8, 8)) < 0.3 for _ in range(2)]
        masks[0][0, 0], masks[0][0, 1] = True, False
        flat_s = np.concatenate([m.ravel() for m in maps])
        flat_y = np.concatenate([m.ravel() for m in masks])
        assert pixel_auroc(maps, masks) == pair_count(flat_s, flat_y)


def test_single_image_pixel_equals_auroc():
    rng = np.random.default_rng(0)
    m, k = rng.random((8, 8)), rng.random((8, 8)) < 0.5
    assert pixel_auroc([m], [k]) == auroc(m.ravel(), k.ravel())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=30)
    y = np.r_[np.zeros(15), np.ones(15)]
    assert auroc(s, y) == auroc(np.exp(s) * 3 + 1, y)
