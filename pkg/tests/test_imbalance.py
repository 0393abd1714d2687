import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbaseg.errors import DomainError, EmptyDatasetError
from imbaseg.geom import ClassCatalog
from imbaseg.imbalance import (
    KITTI_REFERENCE_WEIGHTS,
    ClassWeights,
    class_frequencies,
    class_weights,
    format_weight_table,
    implied_frequency,
    parse_weight_table,
    weight_bounds,
)
from imbaseg.ingest import DatasetStats


def stats(*counts):
    return DatasetStats(counts, (0,) * len(counts))


def test_frequencies_examples():
    assert class_frequencies(stats(50, 50)).tolist() == [0.5, 0.5]
    assert class_frequencies(stats(100, 0)).tolist() == [1.0, 0.0]
    with pytest.raises(EmptyDatasetError):
        class_frequencies(stats(0, 0))


@settings(max_examples=100)
@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=8).filter(lambda c: sum(c) > 0))
def test_frequencies_match_rational_oracle(counts):
    f = class_frequencies(stats(*counts))
    total = sum(counts)
    for got, c in zip(f, counts):
        assert got == pytest.approx(float(Fraction(c, total)), abs=1e-15)
    assert abs(f.sum() - 1.0) <= 1e-12


def test_weight_no_object_near_table_value():
    w = class_weights([0.975], epsilon=1e-15).weights[0]
    assert w == pytest.approx(1.46936, abs=1e-5)
    assert abs(w - KITTI_REFERENCE_WEIGHTS["NoObject"]) < 1e-3


def test_weight_zero_frequency_closed_form():
    # 1 / ln(1.0001), evaluated with 40-digit arithmetic
    assert class_weights([0.0], epsilon=1e-4).weights[0] == pytest.approx(10000.499991667083, rel=1e-12)


def test_equal_frequencies_equal_weights():
    w = class_weights([0.25] * 4).weights
    assert np.all(w == w[0])


def test_weights_domain_errors():
    with pytest.raises(DomainError):
        class_weights([-0.1, 1.1])
    with pytest.raises(DomainError):
        class_weights([0.5], epsilon=0.0)
    with pytest.raises(DomainError):
        implied_frequency(0.0)


def test_implied_frequency_examples():
    assert implied_frequency(1.469) == pytest.approx(0.9753294, abs=1e-6)
    assert implied_frequency(48.749) == pytest.approx(0.0207251, abs=1e-6)


freq = st.floats(0.0, 1.0)
eps = st.floats(1e-12, 1e-2)


@settings(max_examples=200)
@given(f=freq, epsilon=eps)
def test_round_trip_and_bounds(f, epsilon):
    w = class_weights([f], epsilon).weights[0]
    assert abs(implied_frequency(w, epsilon) - f) <= 1e-10
    lo, hi = weight_bounds(epsilon)
    assert lo * (1 - 1e-12) <= w <= hi * (1 + 1e-12)


@settings(max_examples=200)
@given(a=freq, b=freq, epsilon=eps)
def test_rarer_class_gets_larger_weight(a, b, epsilon):
    wa, wb = class_weights([a, b], epsilon).weights
    if a > b:
        assert wa <= wb
    if a - b > 1e-12:  # strict once the difference survives float rounding
        assert wa < wb


def test_weight_table_round_trip():
    cat = ClassCatalog()
    w = ClassWeights.from_table(KITTI_REFERENCE_WEIGHTS, cat)
    text = format_weight_table(w, cat)
    assert text.splitlines()[1].split() == ["NoObject", "1.469"]
    assert parse_weight_table(text) == KITTI_REFERENCE_WEIGHTS
    computed = class_weights([0.9, 0.05, 0.02, 0.02, 0.005, 0.005])
    parsed = parse_weight_table(format_weight_table(computed, cat))
    for name, value in zip(cat, computed.weights):
        assert parsed[name] == float(f"{value:.6g}")


def test_weight_table_must_cover_catalog():
    with pytest.raises(DomainError):
        ClassWeights.from_table({"NoObject": 1.0}, ClassCatalog())


def test_natural_log_lower_bound():
    lo, _ = weight_bounds(0.0 + 1e-15)
    assert lo == pytest.approx(1 / math.log(2))
    assert KITTI_REFERENCE_WEIGHTS["NoObject"] > lo
