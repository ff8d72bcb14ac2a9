import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkcl.errors import ParameterError, UndefinedMetricError
from gkcl.metrics import AccuracyMatrix, average_accuracy, average_forgetting, mean_and_std

from oracles import average_accuracy_loop, average_forgetting_loop, mean_std_loop


def random_rows(T, seed):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1, t).tolist() for t in range(1, T + 1)]


def test_single_task_accuracy():
    assert average_accuracy(AccuracyMatrix.from_rows([[0.9]]), 1) == 0.9


def test_two_task_accuracy():
    assert abs(average_accuracy(AccuracyMatrix.from_rows([[0.5], [0.6, 0.9]]), 2) - 0.75) < 1e-15


def test_worked_forgetting():
    m = AccuracyMatrix.from_rows([[0.8], [0.6, 0.9]])
    assert abs(average_forgetting(m) - 0.2) < 1e-15


def test_constant_accuracies_do_not_forget():
    m = AccuracyMatrix.from_rows([[0.7] * t for t in range(1, 5)])
    assert average_forgetting(m) == 0.0


def test_improving_accuracies_give_non_positive_forgetting():
    m = AccuracyMatrix.from_rows([[0.5], [0.6, 0.5], [0.7, 0.6, 0.5]])
    assert average_forgetting(m) <= 0.0


def test_forgetting_undefined_for_one_task():
    with pytest.raises(UndefinedMetricError):
        average_forgetting(AccuracyMatrix.from_rows([[0.9]]))


def test_accuracy_index_out_of_range():
    m = AccuracyMatrix.from_rows([[0.9], [0.8, 0.7]])
    for t in (0, 3):
        with pytest.raises(ParameterError):
            average_accuracy(m, t)


@pytest.mark.parametrize("row", [[1.2], [-0.1]])
def test_entries_outside_unit_interval_rejected(row):
    with pytest.raises(ParameterError):
        AccuracyMatrix.from_rows([row])


def test_rows_must_be_lower_triangular():
    with pytest.raises(ParameterError):
        AccuracyMatrix.from_rows([[0.5, 0.5]])
    m = AccuracyMatrix(2)
    m.append_row([0.4])
    with pytest.raises(ParameterError):
        m.append_row([0.4])
    m.append_row([0.4, 0.5])
    assert m.complete
    with pytest.raises(ParameterError):
        m.append_row([0.1, 0.2, 0.3])


def test_dense_view_has_nan_above_diagonal():
    arr = AccuracyMatrix.from_rows(random_rows(3, 0)).to_array()
    assert np.isnan(arr[np.triu_indices(3, 1)]).all()
    assert not np.isnan(arr[np.tril_indices(3)]).any()


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_loop_oracles(seed):
    T = 2 + seed % 6
    rows = random_rows(T, seed)
    m = AccuracyMatrix.from_rows(rows)
    for t in range(1, T + 1):
        assert abs(average_accuracy(m, t) - average_accuracy_loop(rows, t)) < 1e-15
    assert abs(average_forgetting(m) - average_forgetting_loop(rows)) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_aggregation_matches_loop_oracle(values):
    mean, std = mean_and_std(values)
    ref_mean, ref_std = mean_std_loop(values)
    assert abs(mean - ref_mean) < 1e-12
    assert abs(std - ref_std) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(2, 8))
def test_metrics_are_pure(seed, T):
    rows = random_rows(T, seed)
    m = AccuracyMatrix.from_rows(rows)
    first = (average_accuracy(m), average_forgetting(m))
    assert (average_accuracy(m), average_forgetting(m)) == first
    assert m.rows == rows


def test_single_value_aggregation():
    assert mean_and_std([0.3]) == (0.3, 0.0)
    with pytest.raises(ParameterError):
        mean_and_std([])
    assert math.isclose(mean_and_std([1.0, 3.0])[1], math.sqrt(2.0))
