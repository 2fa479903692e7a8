import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cad.metrics import UndefinedMetricError, accuracy, ap_rank_walk, auc, auc_pairwise, average_precision


@st.composite
def scored(draw, min_size=2):
    n = draw(st.integers(min_size, 40))
    labels = draw(st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)))
    # a coarse grid forces plenty of ties
    scores = draw(st.lists(st.integers(0, 6).map(lambda k: k / 6), min_size=n, max_size=n))
    return np.array(scores), np.array(labels)


@settings(max_examples=200, deadline=None)
@given(scored())
def test_auc_equals_pairwise_oracle(case):
    s, y = case
    assert auc(s, y) == auc_pairwise(s, y)


@settings(max_examples=200, deadline=None)
@given(scored())
def test_ap_equals_rank_walk_oracle(case):
    s, y = case
    assert average_precision(s, y) == ap_rank_walk(s, y)


@settings(max_examples=100, deadline=None)
@given(scored())
def test_metric_ranges(case):
    s, y = case
    assert 0.0 <= auc(s, y) <= 100.0
    assert 0.0 < average_precision(s, y) <= 100.0


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 100.0
    assert auc([0.9, 0.3, 0.1, 0.4], [1, 1, 0, 0]) == 75.0
    assert auc([0.5] * 6, [1, 0, 1, 0, 1, 1]) == 50.0


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 100.0
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(83.3333333, abs=1e-6)
    assert average_precision([0.9, 0.8, 0.7], [0, 0, 1]) == pytest.approx(33.3333333, abs=1e-6)


def test_auc_is_rank_invariant(rng):
    s = rng.normal(size=50)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    assert auc(s, y) == auc(np.exp(s) * 3 + 1, y)


def test_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auc([0.1, float("nan")], [0, 1])
    with pytest.raises(ValueError):
        auc([0.1], [0, 1])


def test_accuracy():
    assert accuracy([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 0]) == 75.0
    assert accuracy([0.5], [1]) == 100.0
