"""
Holds the length and shape combinatorics of the pyramid: patching, re-patching with end padding,
the activated-layer count, log-space length intervals and the patch to segment correspondence
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scalefusion_ts.errors import ConfigError, LengthError, SegmentIndexError, ShapeError
from scalefusion_ts.numerics import Tensor, fold_columns, pad_columns


def _check_count(name: str, value, minimum: int) -> None:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise TypeError(f'param {name} must be of type integer but received {type(value)}')

    if value < minimum:
        raise ConfigError(f'{name} must be >= {minimum} but received {value}')


@dataclass(frozen=True)
class PatchConfig:
    """
    Patching geometry of the model

    :type patch_len: Integer
    :param patch_len: l_p, raw points per patch Default: 16
    :type stride: Integer
    :param stride: s_p, step between patch starts Default: 16
    :type repatch_len: Integer
    :param repatch_len: l_rp, patches merged per CTL Default: 2
    :type base_dim: Integer
    :param base_dim: d^0, channels after the initial embedding Default: 16
    :type max_len: Integer
    :param max_len: T_max, longest accepted series Default: 2048

    :raises TypeError: if a field is not an integer
    :raises ConfigError: if a field breaks its bound

    """
    patch_len: int = 16
    stride: int = 16
    repatch_len: int = 2
    base_dim: int = 16
    max_len: int = 2048

    def __post_init__(self):
        _check_count('patch_len', self.patch_len, 1)
        _check_count('stride', self.stride, 1)
        _check_count('repatch_len', self.repatch_len, 2)
        _check_count('base_dim', self.base_dim, 1)
        _check_count('max_len', self.max_len, self.patch_len)

    def patch_count(self, length: int) -> int:
        """
        Method to get P^0 for a series length, floor((T - l_p) / s_p) + 1
        """
        return (length - self.patch_len) // self.stride + 1

    @property
    def max_patches(self) -> int:
        return self.patch_count(self.max_len)

    @property
    def max_layers(self) -> int:
        """
        L_max, the CTL count that brings T_max down to one patch
        """
        return activated_layer_count(self.max_patches, self.repatch_len)

    def channel_dim(self, layer: int) -> int:
        return self.base_dim * self.repatch_len ** layer


def activated_layer_count(patch_count: int, repatch_len: int) -> int:
    """
    Function to count ceil-divisions by repatch_len until one patch is left, which is
    ceil(log_{l_rp}(P^0)) computed without floating point

    :type patch_count: Integer
    :param patch_count: P^0 >= 1
    :type repatch_len: Integer
    :param repatch_len: l_rp >= 2

    :rtype: Integer
    :returns: The activated layer count L

    """
    if patch_count < 1:
        raise LengthError(f'patch count must be >= 1 but received {patch_count}')

    layers = 0
    while patch_count > 1:
        patch_count = -(-patch_count // repatch_len)
        layers += 1

    return layers


@dataclass(frozen=True)
class LayerShape:
    """
    Shape of one pyramid level; pad_patches is how many zero patches were appended to the
    previous level before re-patching into this one
    """
    layer: int
    patch_count: int
    channel_dim: int
    pad_patches: int


@dataclass(frozen=True)
class PyramidSchedule:
    """
    Per-layer shapes for one input length, layers[0] is the initial embedding and layers[L]
    the single-patch root
    """
    input_len: int
    patch_count: int
    activated_layers: int
    repatch_len: int
    layers: Tuple[LayerShape, ...]

    def layer(self, index: int) -> LayerShape:
        if not 0 <= index <= self.activated_layers:
            raise SegmentIndexError(f'layer {index} is outside [0, {self.activated_layers}]')

        return self.layers[index]

    @property
    def final_dim(self) -> int:
        return self.layers[-1].channel_dim

    def as_dict(self) -> dict:
        return {
            'input_len': self.input_len,
            'patch_count': self.patch_count,
            'activated_layers': self.activated_layers,
            'layers': [{'layer': shape.layer, 'patch_count': shape.patch_count,
                        'channel_dim': shape.channel_dim, 'pad_patches': shape.pad_patches}
                       for shape in self.layers],
        }


@dataclass(frozen=True)
class SegmentMap:
    """
    Original-patch range [start, end) whose flattened values a layer patch reconstructs
    """
    layer: int
    patch: int
    start: int
    end: int


@dataclass
class FeatureMap:
    """
    Temporal features of one layer: values (d^l x P^l) and a pad mask with True for padded patches
    """
    layer: int
    values: Tensor
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(self.values.cols, dtype=bool)

        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.values.cols,):
            raise ShapeError(f'mask of length {self.mask.size} does not match {self.values.cols} patches')

    @property
    def channels(self) -> int:
        return self.values.rows

    @property
    def patches(self) -> int:
        return self.values.cols


AttentionMask = np.ndarray


def patch_series(x, cfg: PatchConfig) -> np.ndarray:
    """
    Function to cut a univariate series into patches

    :type x: array-like
    :param x: Series of length T
    :type cfg: PatchConfig
    :param cfg: Patch geometry

    :rtype: numpy.ndarray
    :returns: Patch matrix (l_p x P^0), column p holds x[p*s_p : p*s_p + l_p]

    :raises LengthError: if T < l_p
    :raises ShapeError: if x is not one-dimensional

    """
    series = np.asarray(x, dtype=np.float64)
    if series.ndim != 1:
        raise ShapeError(f'a series must be one-dimensional but received shape {series.shape}')

    if series.size < cfg.patch_len:
        raise LengthError(f'series length {series.size} is shorter than patch_len {cfg.patch_len}')

    windows = sliding_window_view(series, cfg.patch_len)[::cfg.stride]
    return np.ascontiguousarray(windows[:cfg.patch_count(series.size)].T)


def schedule(length: int, cfg: PatchConfig) -> PyramidSchedule:
    """
    Function to precompute the pyramid shapes for a series length

    :type length: Integer
    :param length: T, must lie in [l_p, T_max]
    :type cfg: PatchConfig
    :param cfg: Patch geometry

    :rtype: PyramidSchedule
    :returns: Shapes of layers 0..L

    :raises LengthError: if T is outside [l_p, T_max]

    """
    if not cfg.patch_len <= length <= cfg.max_len:
        raise LengthError(f'series length {length} is outside [{cfg.patch_len}, {cfg.max_len}]')

    patches = cfg.patch_count(length)
    shapes = [LayerShape(0, patches, cfg.base_dim, 0)]
    dim = cfg.base_dim
    while patches > 1:
        pad = (-patches) % cfg.repatch_len
        patches = (patches + pad) // cfg.repatch_len
        dim *= cfg.repatch_len
        shapes.append(LayerShape(len(shapes), patches, dim, pad))

    return PyramidSchedule(input_len=length, patch_count=shapes[0].patch_count, activated_layers=len(shapes) - 1,
                           repatch_len=cfg.repatch_len, layers=tuple(shapes))


def repatch(h: FeatureMap, repatch_len: int) -> FeatureMap:
    """
    Function to pad a feature map at the end to a multiple of repatch_len patches and stack each
    group of consecutive patch vectors into one column

    :type h: FeatureMap
    :param h: Layer l-1 features (d x P)
    :type repatch_len: Integer
    :param repatch_len: l_rp

    :rtype: FeatureMap
    :returns: Layer l input (l_rp*d x ceil(P/l_rp)); a group is masked only when all its patches are

    """
    pad = (-h.patches) % repatch_len
    values = pad_columns(h.values, pad) if pad else h.values
    mask = np.concatenate([h.mask, np.ones(pad, dtype=bool)])
    return FeatureMap(layer=h.layer + 1, values=fold_columns(values, repatch_len),
                      mask=mask.reshape(-1, repatch_len).all(axis=1))


def length_interval(layers: int, cfg: PatchConfig) -> Tuple[int, int]:
    """
    Function to get the closed range of series lengths that activate exactly `layers` CTLs,
    [l_rp^(L-1) s_p + l_p, l_rp^L s_p + l_p - 1] clipped to T_max

    :type layers: Integer
    :param layers: L >= 1
    :type cfg: PatchConfig
    :param cfg: Patch geometry

    :rtype: Tuple
    :returns: (T_lo, T_hi)

    :raises ValueError: if layers < 1
    :raises LengthError: if no accepted length activates that many layers

    """
    if layers < 1:
        raise ValueError(f'param layers must be >= 1 but received {layers}')

    low = cfg.repatch_len ** (layers - 1) * cfg.stride + cfg.patch_len
    high = min(cfg.repatch_len ** layers * cfg.stride + cfg.patch_len - 1, cfg.max_len)
    if low > cfg.max_len:
        raise LengthError(f'no length up to {cfg.max_len} activates {layers} layers')

    return low, high


def segment_of(layer: int, patch: int, sched: PyramidSchedule) -> SegmentMap:
    """
    Function to map a 1-based patch of a layer to the original patches it reconstructs

    :type layer: Integer
    :param layer: l in [1, L]
    :type patch: Integer
    :param patch: p in [1, P^l]
    :type sched: PyramidSchedule
    :param sched: The input's schedule

    :rtype: SegmentMap
    :returns: [l_rp^l (p-1), l_rp^l p) over the zero-padded patch sequence

    :raises SegmentIndexError: if layer or patch is out of range

    """
    if not 1 <= layer <= sched.activated_layers:
        raise SegmentIndexError(f'layer {layer} is outside [1, {sched.activated_layers}]')

    patches = sched.layers[layer].patch_count
    if not 1 <= patch <= patches:
        raise SegmentIndexError(f'patch {patch} is outside [1, {patches}] at layer {layer}')

    span = sched.repatch_len ** layer
    return SegmentMap(layer=layer, patch=patch, start=span * (patch - 1), end=span * patch)


def pad_patch_matrix(patches: np.ndarray, total: int) -> np.ndarray:
    """
    Function to zero-pad a patch matrix at the end to `total` patches
    """
    if total < patches.shape[1]:
        raise ShapeError(f'cannot pad {patches.shape[1]} patches down to {total}')

    return np.hstack([patches, np.zeros((patches.shape[0], total - patches.shape[1]))])
