import pytest
import os
import sys
import numpy as np
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.analysis import (RedundancyReport, classification_metrics, column_pairs, error_metrics,
                                     mutual_information, pair_mutual_information, pca_proportion, pearson_abs,
                                     redundancy_report, spearman_abs, stack_final_features)
from scalefusion_ts.errors import DataError, ShapeError
from scalefusion_ts.model import encode


def test_error_metrics():
    mse, mae = error_metrics([1.0, 2.0, 3.0], [1.0, 4.0, 2.0])
    assert mse == pytest.approx(5.0 / 3.0)
    assert mae == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        error_metrics([1.0], [1.0, 2.0])


def test_classification_metrics_constant_prediction():
    accuracy, macro_f1 = classification_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert accuracy == 0.5
    assert macro_f1 == pytest.approx(1.0 / 3.0)


def test_classification_metrics_perfect_and_absent_class():
    accuracy, macro_f1 = classification_metrics([0, 1, 1], [0, 1, 1], 3)
    assert accuracy == 1.0
    assert macro_f1 == 1.0
    with pytest.raises(ValueError):
        classification_metrics([0, 3], [0, 1], 3)


def test_column_pairs_small_dim_uses_all():
    left, right, total = column_pairs(4)
    assert total == 6
    assert list(zip(left, right)) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_column_pairs_large_dim_samples():
    left, right, total = column_pairs(512, max_pairs=1000, seed=3)
    assert total == 512 * 511 // 2
    assert left.size == 1000
    assert np.all(left < right)
    again = column_pairs(512, max_pairs=1000, seed=3)
    np.testing.assert_array_equal(left, again[0])


def test_pearson_and_spearman_duplicated_columns():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(200, 1))
    rep = np.hstack([base, 2.0 * base + 1.0, -base])
    assert pearson_abs(rep) == pytest.approx(1.0)
    assert spearman_abs(rep) == pytest.approx(1.0)


def test_spearman_monotone_nonlinear():
    x = np.linspace(0.1, 3.0, 100)
    rep = np.column_stack([x, np.exp(x)])
    assert spearman_abs(rep) == pytest.approx(1.0)
    assert pearson_abs(rep) < 1.0


def test_correlation_drops_constant_columns():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(50, 1))
    rep = np.hstack([base, base, np.ones((50, 1))])
    assert pearson_abs(rep) == pytest.approx(1.0)
    with pytest.raises(DataError):
        pearson_abs(np.hstack([base, np.ones((50, 1))]))


def test_mutual_information_identical_columns():
    x = np.linspace(0.0, 1.0, 16_000, endpoint=False)
    assert pair_mutual_information(x, x, bins=16) == pytest.approx(np.log(16.0), abs=1e-9)


def test_mutual_information_independent_columns():
    rng = np.random.default_rng(2)
    rep = rng.uniform(size=(200_000, 2))
    info, settings = mutual_information(rep, bins=16)
    assert info < 0.01
    assert settings['mi_pairs_total'] == 1
    assert settings['mi_log'] == 'natural'


def test_pca_proportion_isotropic():
    rep = np.vstack([np.eye(10), -np.eye(10)])
    assert pca_proportion(rep) == pytest.approx(0.8)


def test_pca_proportion_dominant_direction():
    rng = np.random.default_rng(3)
    direction = rng.normal(size=10)
    rep = np.outer(rng.normal(size=500), direction) + 1e-4 * rng.normal(size=(500, 10))
    assert pca_proportion(rep) == pytest.approx(0.1)


def test_pca_proportion_edge_cases():
    assert pca_proportion(np.array([[1.0], [2.0], [4.0]])) == 1.0
    with pytest.raises(DataError):
        pca_proportion(np.ones((5, 3)))

    with pytest.raises(DataError):
        pca_proportion(np.ones((1, 3)))

    with pytest.raises(ValueError):
        pca_proportion(np.eye(3), variance_target=0.0)


def test_redundancy_report_record():
    rng = np.random.default_rng(4)
    report = redundancy_report(rng.normal(size=(100, 4)), bins=4, seed=5)
    assert report.metadata['d'] == 4
    assert report.metadata['mi_bins'] == 4
    lines = report.to_record().splitlines()
    assert lines == sorted(lines)
    assert lines[0].startswith('meta.')
    assert any(line.startswith('pca_proportion=') for line in lines)


def test_redundancy_record_format():
    report = RedundancyReport(pearson_abs=0.5, spearman_abs=0.25, mutual_info=1.0, pca_proportion=0.75,
                              metadata={'n': 8})
    assert report.to_record() == ('meta.n=8\nmutual_info=1.0\npca_proportion=0.75\npearson_abs=0.5\n'
                                  'spearman_abs=0.25\n')


def test_stack_final_features(toy_model, toy_series):
    encodings = [encode(toy_series[:length], toy_model) for length in (36, 40, 52, 80, 6)]
    rep = stack_final_features(encodings)
    assert rep.shape == (3, 64)
    assert stack_final_features(encodings[:4] + encodings[3:4], layer=5).shape == (2, 128)
    with pytest.raises(DataError):
        stack_final_features(encodings, layer=5)
