import numpy as np
import pytest

from peftcl.metrics import (AccuracyMatrix, MetricError, average_accuracy, backward_transfer,
                            conditional_accuracy, forgetting)


def test_average_accuracy_examples():
    assert average_accuracy([np.array([1, 2])], [np.array([1, 2])]) == 1.0
    # sizes 1 and 3 with accuracies 1 and 0
    assert average_accuracy([np.array([5]), np.array([0, 0, 0])], [np.array([5]), np.array([1, 1, 1])]) == 0.25
    preds = [np.array([1, 0]), np.array([1, 1])]
    labels = [np.array([1, 1]), np.array([1, 1])]
    assert average_accuracy(preds, labels) == np.mean([0.5, 1.0])
    with pytest.raises(MetricError):
        average_accuracy([np.array([])], [np.array([])])


def test_forgetting_and_bwt_hand_case():
    R = [[0.9, np.nan], [0.8, 0.7]]
    assert abs(forgetting(R) - 0.1) < 1e-15
    assert abs(backward_transfer(R) - (-0.1)) < 1e-15


def test_monotone_columns_have_no_forgetting():
    R = np.tril(np.array([[0.5, 0, 0], [0.6, 0.4, 0], [0.7, 0.4, 0.9]]))
    assert forgetting(R) == 0.0
    assert backward_transfer(R) == pytest.approx((0.2 + 0.0) / 2, abs=1e-15)


def test_single_task_is_undefined():
    with pytest.raises(MetricError):
        forgetting([[1.0]])
    with pytest.raises(MetricError):
        backward_transfer([[1.0]])
    with pytest.raises(MetricError):
        forgetting([[1.0, 0.5]])


def test_accuracy_matrix_records_lower_triangle():
    m = AccuracyMatrix.empty([4, 2])
    m.record(0, 0, 3)
    m.record(1, 0, 2)
    m.record(1, 1, 2)
    assert m.R[0, 0] == 0.75 and np.isnan(m.R[0, 1])
    assert m.row_average(1) == 4 / 6
    with pytest.raises(MetricError):
        m.record(0, 1, 1)


def test_conditional_accuracy():
    preds = np.array([0, 1, 2, 3])
    labels = np.array([0, 1, 0, 3])
    res = conditional_accuracy(preds, labels, [0, 0, 1, 1], [0, 0, 0, 0])
    assert (res.right_expert, res.wrong_expert, res.n_right, res.n_wrong) == (1.0, 0.5, 2, 2)
    assert res.overall == 0.75
    perfect = conditional_accuracy(preds, labels, [0, 1, 1, 0], [0, 1, 1, 0])
    assert perfect.wrong_expert is None and perfect.n_wrong == 0
