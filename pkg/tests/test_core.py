import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridivf.core import Metric, UsageError, batch_distances, distance, normalize, normalize_rows


def test_distance_euclidean_345():
    assert distance([0, 0], [3, 4], Metric.EUCLIDEAN) == 5.0


def test_distance_cosine_identity_and_orthogonal():
    v = normalize([0.3, -1.2, 2.0])
    assert abs(distance(v, v, Metric.COSINE)) <= 1e-6
    assert distance([1, 0], [0, 1], Metric.COSINE) == 1.0


def test_distance_dimension_mismatch():
    with pytest.raises(UsageError):
        distance([1, 2], [1, 2, 3])
    with pytest.raises(UsageError):
        batch_distances([1, 2], np.zeros((3, 3)))


def test_metric_parse():
    assert Metric.parse("COSINE") is Metric.COSINE
    with pytest.raises(UsageError):
        Metric.parse("manhattan")


def test_batch_distances_small():
    out = batch_distances([1, 0], [[1, 0], [0, 1]], Metric.COSINE)
    np.testing.assert_array_equal(out, [0.0, 1.0])
    assert out.dtype == np.float32


def test_batch_distances_empty_block():
    assert batch_distances([1.0, 2.0], np.empty((0, 2))).shape == (0,)


@pytest.mark.parametrize("metric", list(Metric))
def test_batch_matches_scalar_loop(metric):
    rng = np.random.default_rng(0)
    block = normalize_rows(rng.standard_normal((100, 32)))
    q = normalize(rng.standard_normal(32))
    expected = np.array([distance(q, row, metric) for row in block])
    np.testing.assert_allclose(batch_distances(q, block, metric), expected, rtol=1e-5, atol=1e-7)


def test_batch_result_independent_of_block_composition():
    rng = np.random.default_rng(1)
    block = rng.standard_normal((50, 16)).astype(np.float32)
    q = rng.standard_normal(16)
    full = batch_distances(q, block)
    sub = batch_distances(q, block[[3, 17, 42]])
    np.testing.assert_array_equal(full[[3, 17, 42]], sub)


def test_normalize():
    np.testing.assert_allclose(normalize([3, 4]), [0.6, 0.8], atol=1e-7)
    u = normalize([0.6, 0.8])
    np.testing.assert_allclose(normalize(u), u, atol=1e-6)
    with pytest.raises(UsageError):
        normalize([0, 0])
    with pytest.raises(UsageError):
        normalize_rows([[1, 0], [0, 0]])


finite = st.floats(-100, 100, allow_nan=False, width=32)
vec8 = arrays(np.float32, 8, elements=finite)


@settings(max_examples=200, deadline=None)
@given(vec8, vec8)
def test_euclidean_axioms(a, b):
    assert distance(a, a) <= 1e-6
    assert abs(distance(a, b) - distance(b, a)) <= 1e-6


unit_vec8 = arrays(np.float32, 8, elements=st.floats(-1, 1, allow_nan=False, width=32))


@settings(max_examples=300, deadline=None)
@given(unit_vec8, unit_vec8, unit_vec8)
def test_euclidean_triangle_inequality(a, b, c):
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-5


@settings(max_examples=200, deadline=None)
@given(vec8, vec8)
def test_cosine_axioms_and_range(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    a, b = normalize(a), normalize(b)
    assert abs(np.linalg.norm(a) - 1) <= 1e-6
    assert distance(a, a, Metric.COSINE) <= 1e-6
    assert abs(distance(a, b, Metric.COSINE) - distance(b, a, Metric.COSINE)) <= 1e-6
    assert -1e-6 <= distance(a, b, Metric.COSINE) <= 2 + 1e-6
