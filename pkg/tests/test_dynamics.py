import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bora.dynamics import (
    DynamicsSeries,
    SeriesPoint,
    WeightSnapshot,
    aggregate_layers,
    consecutive_series,
    delta_direction,
    delta_magnitude,
    direction_terms,
    run_series,
    symmetry_ratio,
    total_change,
    total_series,
)
from bora.errors import AlignmentError, DegenerateNormError, InsufficientDataError, ShapeError

import oracles

I2 = np.eye(2)
SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def snaps_of(mats, layer="0", label="W", steps=None):
    steps = steps if steps is not None else range(len(mats))
    return [WeightSnapshot(t, layer, label, np.asarray(m, dtype=float)) for t, m in zip(steps, mats)]


def series(dim, values, mode="consecutive", label="W", steps=None):
    steps = steps or list(range(1, len(values) + 1))
    return DynamicsSeries(dim, mode, [SeriesPoint(t, m, d) for t, (m, d) in zip(steps, values)], None, label)


# pairwise metrics

def test_identical_is_zero():
    W = np.random.default_rng(0).normal(size=(3, 4))
    for dim in ("row", "col"):
        assert delta_magnitude(W, W, dim) == 0.0
        assert delta_direction(W, W, dim) == pytest.approx(0.0, abs=1e-15)


def test_identity_doubling():
    assert delta_magnitude(I2, 2 * I2, "col") == 1.0


def test_orthogonal_columns():
    assert delta_direction(I2, SWAP, "col") == 1.0


def test_antiparallel():
    W = np.random.default_rng(1).normal(size=(3, 3))
    assert delta_direction(W, -W, "row") == pytest.approx(2.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("dim", ["row", "col"])
def test_matches_loop_oracle(seed, dim):
    rng = np.random.default_rng(seed)
    W1, W2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    L1, L2 = oracles.to_lists(W1), oracles.to_lists(W2)
    assert delta_magnitude(W1, W2, dim) == pytest.approx(oracles.delta_m(L1, L2, dim), abs=1e-12)
    assert delta_direction(W1, W2, dim) == pytest.approx(oracles.delta_d(L1, L2, dim), abs=1e-12)


def test_non_square_counts_vectors_along_dim():
    W1 = np.zeros((2, 3))
    W1[:, :] = 1.0
    W2 = 2 * W1
    # rows have norm sqrt(3), columns sqrt(2)
    assert delta_magnitude(W1, W2, "row") == pytest.approx(np.sqrt(3))
    assert delta_magnitude(W1, W2, "col") == pytest.approx(np.sqrt(2))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        delta_magnitude(np.ones((2, 3)), np.ones((3, 2)), "row")
    with pytest.raises(ShapeError):
        delta_direction(np.ones((2, 3)), np.ones((2, 2)), "col")


def test_bad_dim():
    with pytest.raises(ValueError, match="dim"):
        delta_magnitude(I2, I2, "diag")


def test_zero_vector_strict_and_lenient():
    W1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    W2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateNormError):
        delta_direction(W1, W2, "row")
    value, excluded = direction_terms(W1, W2, "row", strict=False)
    assert (value, excluded) == (0.0, 1)
    with pytest.raises(DegenerateNormError, match="every"):
        direction_terms(np.zeros((2, 2)), W2, "row", strict=False)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
mats = st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: st.tuples(arrays(np.float64, s, elements=finite), arrays(np.float64, s, elements=finite))
)


def nondegenerate(W):
    return np.linalg.norm(W, axis=0).min() > 1e-6 and np.linalg.norm(W, axis=1).min() > 1e-6


@settings(max_examples=100, deadline=None)
@given(mats)
def test_symmetry_range_and_duality(pair):
    W1, W2 = pair
    for dim in ("row", "col"):
        assert delta_magnitude(W1, W2, dim) == delta_magnitude(W2, W1, dim)
        assert delta_magnitude(W1, W2, dim) >= 0
    assert delta_magnitude(W1, W2, "row") == delta_magnitude(W1.T, W2.T, "col")
    if nondegenerate(W1) and nondegenerate(W2):
        for dim in ("row", "col"):
            d = delta_direction(W1, W2, dim)
            assert d == delta_direction(W2, W1, dim)
            assert 0.0 <= d <= 2.0
        assert delta_direction(W1, W2, "col") == delta_direction(W1.T, W2.T, "row")


@settings(max_examples=100, deadline=None)
@given(mats, st.floats(1e-3, 1e3))
def test_direction_is_scale_blind(pair, c):
    W, _ = pair
    if nondegenerate(W):
        for dim in ("row", "col"):
            assert delta_direction(W, c * W, dim) == pytest.approx(0.0, abs=1e-12)


# series

def test_constant_sequence_is_zero():
    s = consecutive_series(snaps_of([I2] * 4), "row")
    assert [(p.delta_m, p.delta_d) for p in s.points] == [(0.0, 0.0)] * 3


def test_two_snapshots_one_point():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    s = consecutive_series(snaps_of([A, B], steps=[0, 7]), "col")
    assert len(s.points) == 1
    p = s.points[0]
    assert p.timestep == 7
    assert (p.delta_m, p.delta_d) == (delta_magnitude(A, B, "col"), delta_direction(A, B, "col"))


def test_geometric_sequence():
    W0 = np.random.default_rng(3).normal(size=(4, 3))
    mats = [2.0**t * W0 for t in range(6)]
    for dim in ("row", "col"):
        s = consecutive_series(snaps_of(mats), dim)
        np.testing.assert_allclose(s.delta_d, 0.0, atol=1e-12)
        base = np.mean(np.linalg.norm(W0 if dim == "row" else W0.T, axis=1))
        # step t grows each norm from 2^(t-1) to 2^t times its base
        np.testing.assert_allclose(s.delta_m, [base * 2.0 ** (t - 1) for t in range(1, 6)], rtol=1e-12)
        np.testing.assert_allclose(s.delta_m[1:] / s.delta_m[:-1], 2.0, rtol=1e-12)


@pytest.mark.parametrize("k", [2, 3, 7])
def test_series_length(k):
    rng = np.random.default_rng(k)
    s = consecutive_series(snaps_of([rng.normal(size=(2, 2)) for _ in range(k)]), "row")
    assert len(s.points) == k - 1
    assert all(a < b for a, b in zip(s.timesteps, s.timesteps[1:]))


def test_insufficient_snapshots():
    with pytest.raises(InsufficientDataError):
        consecutive_series(snaps_of([I2]), "row")
    with pytest.raises(InsufficientDataError):
        total_change(snaps_of([I2]), "row")


def test_unordered_or_mixed_snapshots():
    with pytest.raises(ValueError, match="increase"):
        consecutive_series(snaps_of([I2, I2], steps=[3, 3]), "row")
    mixed = snaps_of([I2], label="A") + snaps_of([I2], label="B", steps=[1])
    with pytest.raises(ValueError, match="mix"):
        consecutive_series(mixed, "row")


def test_total_change_examples():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(3, 3))
    assert total_change(snaps_of([W, rng.normal(size=(3, 3)), W]), "row") == (0.0, pytest.approx(0.0, abs=1e-15))
    dm, dd = total_change(snaps_of([W, 5 * W, -W]), "col")
    assert dm == 0.0
    assert dd == pytest.approx(2.0, abs=1e-15)


def test_total_change_uses_endpoints():
    rng = np.random.default_rng(5)
    A, B, C = (rng.normal(size=(3, 5)) for _ in range(3))
    for dim in ("row", "col"):
        assert total_change(snaps_of([A, B, C]), dim) == (delta_magnitude(A, C, dim), delta_direction(A, C, dim))
        ts = total_series(snaps_of([A, B, C], steps=[0, 4, 9]), dim)
        assert ts.mode == "total" and ts.timesteps == [9]


def test_run_series_groups():
    snaps = snaps_of([I2, 2 * I2], layer="0") + snaps_of([I2, I2], layer="1")
    out = run_series(snaps)
    assert [(s.layer_id, s.dim) for s in out] == [("0", "row"), ("0", "col"), ("1", "row"), ("1", "col")]
    with pytest.raises(ValueError, match="mode"):
        run_series(snaps, mode="cumulative")


# aggregation

def test_aggregate_single_and_identical():
    s = series("row", [(0.3, 0.1), (0.2, 0.05)])
    assert aggregate_layers([s]).points == s.points
    assert aggregate_layers([s, s]).points == s.points


def test_aggregate_mean():
    rng = np.random.default_rng(6)
    a, b = rng.random((5, 2)), rng.random((5, 2))
    out = aggregate_layers([series("col", a.tolist()), series("col", b.tolist())])
    np.testing.assert_allclose(out.delta_m, (a[:, 0] + b[:, 0]) / 2, atol=1e-15, rtol=0)
    np.testing.assert_allclose(out.delta_d, (a[:, 1] + b[:, 1]) / 2, atol=1e-15, rtol=0)
    assert out.matrix_label == "W"


def test_aggregate_misaligned():
    with pytest.raises(AlignmentError):
        aggregate_layers([series("row", [(1, 0)]), series("row", [(1, 0), (2, 0)])])
    with pytest.raises(AlignmentError):
        aggregate_layers([series("row", [(1, 0)]), series("col", [(1, 0)])])
    with pytest.raises(InsufficientDataError):
        aggregate_layers([])


# symmetry ratio

def test_ratio_identical_is_one():
    vals = [(0.4, 0.0), (0.1, 0.0)]
    assert symmetry_ratio([series("row", vals), series("col", vals)]) == 1.0


def test_ratio_double():
    vals = [(0.4, 0.0), (0.1, 0.0)]
    col = [(2 * m, d) for m, d in vals]
    assert symmetry_ratio([series("row", vals), series("col", col)]) == 2.0


def test_ratio_errors():
    with pytest.raises(ZeroDivisionError):
        symmetry_ratio([series("row", [(0.0, 0.0)]), series("col", [(1.0, 0.0)])])
    with pytest.raises(InsufficientDataError):
        symmetry_ratio([series("row", [(1.0, 0.0)])])
    # total-mode series are not pooled
    with pytest.raises(InsufficientDataError):
        symmetry_ratio([series("row", [(1.0, 0.0)]), series("col", [(1.0, 0.0)], mode="total")])
