"""
Holds the task metrics and the feature-redundancy suite: mean absolute Pearson and Spearman
correlation, histogram mutual information and the PCA proportion at a variance target
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from scalefusion_ts.common import derive_rng
from scalefusion_ts.errors import DataError, ShapeError

LOGGER = logging.getLogger('scalefusion_ts')

ALL_PAIRS_MAX_DIM = 256
MAX_SAMPLED_PAIRS = 10_000
MI_BINS = 16
VARIANCE_TARGET = 0.80
VARIANCE_TOLERANCE = 1e-12


def error_metrics(pred, truth) -> Tuple[float, float]:
    """
    Function for the mean squared and mean absolute error

    :type pred: array-like
    :param pred: Predictions
    :type truth: array-like
    :param truth: Ground truth of the same shape

    :rtype: Tuple
    :returns: (MSE, MAE)

    :raises ShapeError: if the shapes differ
    :raises ValueError: if there is nothing to compare

    """
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f'prediction shape {pred.shape} does not match truth shape {truth.shape}')

    if pred.size == 0:
        raise ValueError('error metrics need at least one value')

    diff = pred - truth
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def classification_metrics(pred, truth, num_classes: int) -> Tuple[float, float]:
    """
    Function for accuracy and macro-F1

    Classes that appear in neither pred nor truth are left out of the macro average.

    :type pred: array-like
    :param pred: Predicted labels
    :type truth: array-like
    :param truth: True labels
    :type num_classes: Integer
    :param num_classes: C

    :rtype: Tuple
    :returns: (accuracy, macro-F1)

    :raises ValueError: if a label is outside [0, C) or the inputs are empty

    """
    pred, truth = np.asarray(pred, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError(f'prediction shape {pred.shape} does not match truth shape {truth.shape}')

    if pred.size == 0:
        raise ValueError('classification metrics need at least one label')

    for labels in (pred, truth):
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError(f'labels must lie in [0, {num_classes}) but range over [{labels.min()}, {labels.max()}]')

    scores = []
    for label in range(num_classes):
        true_pos = int(np.sum((pred == label) & (truth == label)))
        false_pos = int(np.sum((pred == label) & (truth != label)))
        false_neg = int(np.sum((pred != label) & (truth == label)))
        if true_pos + false_pos + false_neg == 0:
            continue

        scores.append(2.0 * true_pos / (2.0 * true_pos + false_pos + false_neg))

    return float(np.mean(pred == truth)), float(np.mean(scores))


def _representation(rep) -> np.ndarray:
    matrix = np.asarray(rep, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f'a representation matrix must be 2-d but the shape is {matrix.shape}')

    if matrix.shape[0] < 2:
        raise DataError(f'a representation matrix needs at least 2 samples but has {matrix.shape[0]}')

    if not np.all(np.isfinite(matrix)):
        raise DataError('the representation matrix holds non-finite values')

    return matrix


def _drop_constant(matrix: np.ndarray, metric: str) -> np.ndarray:
    keep = np.ptp(matrix, axis=0) > 0
    if not np.all(keep):
        LOGGER.warning('%s: dropping %d constant column(s) of %d', metric, int(np.sum(~keep)), matrix.shape[1])

    matrix = matrix[:, keep]
    if matrix.shape[1] < 2:
        raise DataError(f'{metric} needs at least 2 non-constant columns but {matrix.shape[1]} remain')

    return matrix


def column_pairs(dim: int, max_pairs: int = MAX_SAMPLED_PAIRS, seed: int = 0,
                 all_pairs_max_dim: int = ALL_PAIRS_MAX_DIM) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Function to choose the unordered column pairs a redundancy metric runs over

    :type dim: Integer
    :param dim: d
    :type max_pairs: Integer
    :param max_pairs: Pairs drawn when d is above all_pairs_max_dim Default: 10000
    :type seed: Integer
    :param seed: Seed of the draw
    :type all_pairs_max_dim: Integer
    :param all_pairs_max_dim: Largest d that uses every pair Default: 256

    :rtype: Tuple
    :returns: (left indices, right indices, total pair count), sorted by pair index

    """
    left, right = np.triu_indices(dim, k=1)
    total = left.size
    if dim > all_pairs_max_dim and total > max_pairs:
        chosen = np.sort(derive_rng(seed, 'pairs').choice(total, size=max_pairs, replace=False))
        left, right = left[chosen], right[chosen]

    return left, right, total


def _mean_abs_correlation(matrix: np.ndarray, max_pairs: int, seed: int) -> float:
    left, right, _ = column_pairs(matrix.shape[1], max_pairs, seed)
    corr = np.corrcoef(matrix, rowvar=False)
    return float(np.mean(np.abs(corr[left, right])))


def pearson_abs(rep, max_pairs: int = MAX_SAMPLED_PAIRS, seed: int = 0) -> float:
    """
    Function for the mean |Pearson r| over unordered column pairs, constant columns dropped
    """
    return _mean_abs_correlation(_drop_constant(_representation(rep), 'pearson_abs'), max_pairs, seed)


def spearman_abs(rep, max_pairs: int = MAX_SAMPLED_PAIRS, seed: int = 0) -> float:
    """
    Function for the mean |Spearman rho|, Pearson on column ranks with ties averaged
    """
    matrix = _drop_constant(_representation(rep), 'spearman_abs')
    return _mean_abs_correlation(np.apply_along_axis(rankdata, 0, matrix), max_pairs, seed)


def pair_mutual_information(x, y, bins: int = MI_BINS) -> float:
    """
    Function for the histogram estimate of I(x; y) in nats, equal-width bins over each range

    :type x: array-like
    :param x: First column
    :type y: array-like
    :param y: Second column
    :type bins: Integer
    :param bins: Bins per axis Default: 16

    :rtype: Float
    :returns: The estimate, >= 0

    """
    joint = np.histogram2d(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), bins)[0]
    joint /= joint.sum()
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nonzero = joint > 0
    return max(float(np.sum(joint[nonzero] * np.log(joint[nonzero] / outer[nonzero]))), 0.0)


def mutual_information(rep, bins: int = MI_BINS, max_pairs: int = MAX_SAMPLED_PAIRS,
                       seed: int = 0) -> Tuple[float, Dict[str, object]]:
    """
    Function for the pairwise mutual information of a representation matrix

    The estimates over the chosen pairs are summed and scaled up to the full pair count.

    :type rep: array-like
    :param rep: Representation matrix (n x d)
    :type bins: Integer
    :param bins: Bins per axis Default: 16
    :type max_pairs: Integer
    :param max_pairs: Pairs drawn for large d Default: 10000
    :type seed: Integer
    :param seed: Seed of the pair draw

    :rtype: Tuple
    :returns: (scaled sum in nats, estimator settings)

    """
    matrix = _drop_constant(_representation(rep), 'mutual_information')
    if matrix.shape[0] < 4 * bins:
        LOGGER.warning('mutual_information: %d samples is few for %d bins, the estimate is biased upward',
                       matrix.shape[0], bins)

    left, right, total = column_pairs(matrix.shape[1], max_pairs, seed)
    estimates = [pair_mutual_information(matrix[:, i], matrix[:, j], bins) for i, j in zip(left, right)]
    settings = {'mi_estimator': 'histogram', 'mi_bins': bins, 'mi_log': 'natural', 'mi_pairs_used': int(left.size),
                'mi_pairs_total': int(total), 'pair_seed': seed}
    return float(np.sum(estimates)) * total / left.size, settings


def pca_proportion(rep, variance_target: float = VARIANCE_TARGET) -> float:
    """
    Function for the fraction of principal components needed to explain a share of variance

    :type rep: array-like
    :param rep: Representation matrix (n x d), centered internally
    :type variance_target: Float
    :param variance_target: Share of the total variance Default: 0.80

    :rtype: Float
    :returns: k / d for the smallest k reaching the target

    :raises DataError: if the matrix has no variance

    """
    matrix = _representation(rep)
    if not 0 < variance_target <= 1:
        raise ValueError(f'variance_target must lie in (0, 1] but received {variance_target}')

    dim = matrix.shape[1]
    if dim == 1:
        if np.ptp(matrix) == 0:
            raise DataError('pca_proportion of a rank-0 matrix is undefined')

        return 1.0

    eigenvalues = np.clip(np.linalg.eigh(np.cov(matrix, rowvar=False))[0][::-1], 0.0, None)
    total = eigenvalues.sum()
    if total <= 0:
        raise DataError('pca_proportion of a rank-0 matrix is undefined')

    ratios = np.cumsum(eigenvalues) / total
    components = int(np.argmax(ratios >= variance_target - VARIANCE_TOLERANCE)) + 1
    return components / dim


@dataclass
class RedundancyReport:
    """
    Redundancy statistics of one representation matrix with the settings that produced them
    """
    pearson_abs: float
    spearman_abs: float
    mutual_info: float
    pca_proportion: float
    metadata: Dict[str, object] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {'pearson_abs': self.pearson_abs, 'spearman_abs': self.spearman_abs, 'mutual_info': self.mutual_info,
                'pca_proportion': self.pca_proportion, 'metadata': dict(self.metadata)}

    def to_record(self) -> str:
        """
        Method to render the report as sorted key=value lines

        :rtype: String
        :returns: The record, metadata keys prefixed with 'meta.'

        """
        fields = {'pearson_abs': self.pearson_abs, 'spearman_abs': self.spearman_abs,
                  'mutual_info': self.mutual_info, 'pca_proportion': self.pca_proportion}
        fields.update({f'meta.{key}': value for key, value in self.metadata.items()})
        return ''.join(f'{key}={fields[key]}\n' for key in sorted(fields))


def redundancy_report(rep, bins: int = MI_BINS, max_pairs: int = MAX_SAMPLED_PAIRS, seed: int = 0,
                      variance_target: float = VARIANCE_TARGET) -> RedundancyReport:
    """
    Function to run the whole redundancy suite

    :type rep: array-like
    :param rep: Representation matrix (n x d)
    :type bins: Integer
    :param bins: Mutual-information bins Default: 16
    :type max_pairs: Integer
    :param max_pairs: Pairs drawn for large d Default: 10000
    :type seed: Integer
    :param seed: Seed of the pair draw
    :type variance_target: Float
    :param variance_target: PCA variance share Default: 0.80

    :rtype: RedundancyReport
    :returns: The report

    """
    matrix = _representation(rep)
    info, settings = mutual_information(matrix, bins=bins, max_pairs=max_pairs, seed=seed)
    metadata = {'n': matrix.shape[0], 'd': matrix.shape[1], 'variance_target': variance_target}
    metadata.update(settings)
    report = RedundancyReport(pearson_abs=pearson_abs(matrix, max_pairs, seed),
                              spearman_abs=spearman_abs(matrix, max_pairs, seed), mutual_info=info,
                              pca_proportion=pca_proportion(matrix, variance_target), metadata=metadata)
    LOGGER.info('redundancy n=%d d=%d pearson_abs=%.4f spearman_abs=%.4f mutual_info=%.4f pca_proportion=%.4f',
                matrix.shape[0], matrix.shape[1], report.pearson_abs, report.spearman_abs, report.mutual_info,
                report.pca_proportion)
    return report


def stack_final_features(encodings: Sequence, layer: Optional[int] = None) -> np.ndarray:
    """
    Function to stack the single-patch final features of many encodings into a representation
    matrix

    Only encodings of one depth share a dimension. By default the most common depth is kept,
    ties going to the deeper layer.

    :type encodings: Sequence
    :param encodings: model.Encoding objects
    :type layer: Integer
    :param layer: Keep this depth instead of the most common one

    :rtype: numpy.ndarray
    :returns: Representation matrix (n x d^L)

    :raises DataError: if fewer than two encodings remain

    """
    groups: Dict[int, list] = {}
    for encoding in encodings:
        if encoding.maps:
            groups.setdefault(encoding.final.layer, []).append(encoding.final.values.numpy()[:, 0])

    if not groups:
        raise DataError('no encoding activated a CTL layer')

    if layer is None:
        layer = max(groups, key=lambda depth: (len(groups[depth]), depth))

    rows = groups.get(layer, [])
    dropped = len(encodings) - len(rows)
    if dropped:
        LOGGER.warning('stack_final_features: kept %d samples at layer %d, dropped %d at other depths',
                       len(rows), layer, dropped)

    if len(rows) < 2:
        raise DataError(f'need at least 2 samples at layer {layer} but found {len(rows)}')

    return np.vstack(rows)
