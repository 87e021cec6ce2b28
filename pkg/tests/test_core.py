import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spcit.core import (
    DataValidationError,
    ObservationSeries,
    PredictionInterval,
    QuantileGrid,
    SignificanceLevel,
    StructuralError,
    compute_residuals,
    interval_contains,
    rearrange_monotone,
)

finite_floats = st.floats(min_value=-1e9, max_value=1e9, allow_nan=False, allow_infinity=False)


def make_series(outcomes, d=1):
    outcomes = np.asarray(outcomes, dtype=float)
    return ObservationSeries(np.zeros((len(outcomes), d)), outcomes)


class TestObservationSeries:
    def test_basic_shape(self):
        s = ObservationSeries([[1.0, 2.0], [3.0, 4.0]], [1.0, 2.0])
        assert s.length == 2 and s.dim == 2

    def test_rejects_length_mismatch(self):
        with pytest.raises(StructuralError):
            ObservationSeries([[1.0], [2.0]], [1.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(DataValidationError):
            ObservationSeries([[np.nan]], [1.0])
        with pytest.raises(DataValidationError):
            ObservationSeries([[1.0]], [np.inf])

    def test_rejects_empty(self):
        with pytest.raises((DataValidationError, StructuralError)):
            ObservationSeries(np.zeros((0, 1)), [])

    def test_immutable_arrays(self):
        s = make_series([1.0, 2.0])
        with pytest.raises(ValueError):
            s.outcomes[0] = 5.0

    def test_slice_keeps_time_origin(self):
        s = ObservationSeries(np.arange(10).reshape(10, 1), np.arange(10.0), t0=1)
        part = s.slice(3, 7)
        assert part.t0 == 4
        assert np.array_equal(part.outcomes, [3.0, 4.0, 5.0, 6.0])


class TestComputeResiduals:
    def test_direct_subtraction(self):
        r = compute_residuals(make_series([3.0, 5.0]), [2.0, 7.0])
        assert np.array_equal(r.residuals, [1.0, -2.0])

    def test_identity_case(self):
        r = compute_residuals(make_series([4.0, -1.0]), [4.0, -1.0])
        assert np.array_equal(r.residuals, [0.0, 0.0])

    def test_single_point(self):
        r = compute_residuals(make_series([0.5]), [-0.5])
        assert np.array_equal(r.residuals, [1.0])

    def test_length_mismatch_is_structural(self):
        with pytest.raises(StructuralError):
            compute_residuals(make_series([1.0, 2.0]), [1.0])

    def test_nonfinite_prediction_rejected(self):
        with pytest.raises(DataValidationError):
            compute_residuals(make_series([1.0]), [np.nan])

    @given(st.lists(finite_floats, min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_reconstruction_bound(self, ys):
        ys = np.asarray(ys)
        preds = ys * 0.5 + 1.0
        r = compute_residuals(make_series(ys), preds)
        rebuilt = r.residuals + r.point_predictions
        tol = 1e-12 * np.maximum(1.0, np.abs(ys))
        assert np.all(np.abs(rebuilt - ys) <= tol)


class TestIntervalContains:
    def test_interior(self):
        iv = PredictionInterval(0, 1.0, 3.0, SignificanceLevel(0.1))
        assert interval_contains(iv, 2.0)

    def test_closed_boundary(self):
        iv = PredictionInterval(0, 1.0, 3.0, SignificanceLevel(0.1))
        assert interval_contains(iv, 3.0)
        assert interval_contains(iv, 1.0)

    def test_just_outside(self):
        iv = PredictionInterval(0, 1.0, 3.0, SignificanceLevel(0.1))
        assert not interval_contains(iv, 3.0001)

    def test_infinite_interval_contains_everything_finite(self):
        iv = PredictionInterval(0, -np.inf, np.inf, SignificanceLevel(0.1))
        assert not iv.is_finite
        assert interval_contains(iv, 1e300)

    def test_rejects_nan_and_inverted(self):
        with pytest.raises(DataValidationError):
            PredictionInterval(0, np.nan, 1.0, SignificanceLevel(0.1))
        with pytest.raises(DataValidationError):
            PredictionInterval(0, 2.0, 1.0, SignificanceLevel(0.1))

    @given(
        finite_floats,
        st.floats(min_value=0, max_value=1e6, allow_nan=False),
        st.floats(min_value=0, max_value=100, allow_nan=False),
        st.floats(min_value=0, max_value=100, allow_nan=False),
        finite_floats,
    )
    @settings(max_examples=200, deadline=None)
    def test_widening_is_monotone(self, lo, width, grow_lo, grow_hi, y):
        alpha = SignificanceLevel(0.1)
        narrow = PredictionInterval(0, lo, lo + width, alpha)
        wide = PredictionInterval(0, lo - grow_lo, lo + width + grow_hi, alpha)
        if interval_contains(narrow, y):
            assert interval_contains(wide, y)


class TestRearrangeMonotone:
    def test_sorts_values(self):
        g = rearrange_monotone(QuantileGrid([0.1, 0.5, 0.9], [2.0, 1.0, 3.0]))
        assert np.array_equal(g.values, [1.0, 2.0, 3.0])
        assert np.array_equal(g.levels, [0.1, 0.5, 0.9])

    def test_sorted_input_unchanged(self):
        g = rearrange_monotone(QuantileGrid([0.1, 0.9], [1.0, 2.0]))
        assert np.array_equal(g.values, [1.0, 2.0])

    def test_constant_values(self):
        g = rearrange_monotone(QuantileGrid([0.1, 0.5, 0.9], [5.0, 5.0, 5.0]))
        assert np.array_equal(g.values, [5.0, 5.0, 5.0])

    @given(st.lists(finite_floats, min_size=1, max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_multiset_preserving(self, values):
        levels = np.linspace(0.0, 1.0, len(values))
        once = rearrange_monotone(QuantileGrid(levels, values))
        twice = rearrange_monotone(once)
        assert np.array_equal(once.values, twice.values)
        assert sorted(values) == once.values.tolist()
        assert np.all(np.diff(once.values) >= 0)


class TestGridAndAlpha:
    def test_levels_must_increase(self):
        with pytest.raises(DataValidationError):
            QuantileGrid([0.5, 0.5], [1.0, 2.0])

    def test_levels_allow_closed_endpoints(self):
        g = QuantileGrid([0.0, 0.5, 1.0], [1.0, 2.0, 3.0])
        assert g.levels[0] == 0.0 and g.levels[-1] == 1.0

    def test_alpha_bounds(self):
        with pytest.raises(DataValidationError):
            SignificanceLevel(0.0)
        with pytest.raises(DataValidationError):
            SignificanceLevel(1.0)
        assert SignificanceLevel(0.1).alpha == 0.1
