import pytest
import os
import sys
import numpy as np
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.errors import ConfigError, LengthError, SegmentIndexError, ShapeError
from scalefusion_ts.numerics import Tensor
from scalefusion_ts.patching import (FeatureMap, PatchConfig, activated_layer_count, length_interval,
                                     pad_patch_matrix, patch_series, repatch, schedule, segment_of)


def test_patch_config_bad_data():
    with pytest.raises(TypeError):
        PatchConfig(patch_len='16')

    with pytest.raises(ConfigError):
        PatchConfig(repatch_len=1)

    with pytest.raises(ConfigError):
        PatchConfig(patch_len=16, max_len=8)


def test_patch_config_defaults(default_patch_config):
    assert default_patch_config.max_patches == 128
    assert default_patch_config.max_layers == 7
    assert default_patch_config.channel_dim(7) == 2048


@pytest.mark.parametrize('length, patches', [(16, 1), (512, 32), (2048, 128)])
def test_patch_series_counts(default_patch_config, length, patches):
    assert patch_series(np.arange(length, dtype=float), default_patch_config).shape == (16, patches)


def test_patch_series_single_window(default_patch_config):
    series = np.arange(16, dtype=float)
    np.testing.assert_array_equal(patch_series(series, default_patch_config)[:, 0], series)


def test_patch_series_columns():
    cfg = PatchConfig(patch_len=4, stride=2, base_dim=4, max_len=64)
    patches = patch_series(np.arange(10, dtype=float), cfg)
    assert patches.shape == (4, 4)
    np.testing.assert_array_equal(patches[:, 1], [2, 3, 4, 5])


def test_patch_series_errors(default_patch_config):
    with pytest.raises(LengthError):
        patch_series(np.zeros(15), default_patch_config)

    with pytest.raises(ShapeError):
        patch_series(np.zeros((16, 2)), default_patch_config)


@pytest.mark.parametrize('length, patches, layers', [(2048, 128, 7), (16, 1, 0), (527, 32, 5), (528, 33, 6)])
def test_schedule_layers(default_patch_config, length, patches, layers):
    sched = schedule(length, default_patch_config)
    assert sched.patch_count == patches
    assert sched.activated_layers == layers
    assert sched.layer(layers).patch_count == 1


def test_schedule_full_pyramid(default_patch_config):
    sched = schedule(2048, default_patch_config)
    assert sched.final_dim == 2048
    assert [shape.patch_count for shape in sched.layers] == [128, 64, 32, 16, 8, 4, 2, 1]
    assert [shape.channel_dim for shape in sched.layers] == [16 * 2 ** layer for layer in range(8)]


def test_schedule_padding(default_patch_config):
    sched = schedule(528, default_patch_config)
    assert [shape.patch_count for shape in sched.layers] == [33, 17, 9, 5, 3, 2, 1]
    assert sched.layer(1).pad_patches == 1


def test_schedule_errors(default_patch_config):
    with pytest.raises(LengthError):
        schedule(15, default_patch_config)

    with pytest.raises(LengthError):
        schedule(2049, default_patch_config)

    with pytest.raises(SegmentIndexError):
        schedule(512, default_patch_config).layer(6)


def test_activated_layer_count_matches_log():
    for patches in range(1, 300):
        assert activated_layer_count(patches, 2) == int(np.ceil(np.log2(patches)))

    with pytest.raises(LengthError):
        activated_layer_count(0, 2)


def test_repatch_exact_division():
    values = np.arange(12, dtype=float).reshape(3, 4)
    out = repatch(FeatureMap(0, Tensor(values)), 2)
    assert out.values.shape == (6, 2)
    np.testing.assert_array_equal(out.values.numpy()[:, 0], np.concatenate([values[:, 0], values[:, 1]]))
    assert out.layer == 1


def test_repatch_pads_at_end():
    values = np.arange(1.0, 16.0).reshape(3, 5)
    out = repatch(FeatureMap(0, Tensor(values)), 2)
    assert out.values.shape == (6, 3)
    np.testing.assert_array_equal(out.values.numpy()[3:, 2], np.zeros(3))
    assert not out.mask.any()
    assert sorted(out.values.numpy().ravel())[-15:] == sorted(values.ravel())


def test_repatch_single_patch():
    out = repatch(FeatureMap(0, Tensor(np.ones((3, 1)))), 2)
    assert out.values.shape == (6, 1)


def test_repatch_mask_groups():
    feature_map = FeatureMap(0, Tensor(np.ones((2, 4))), mask=np.array([False, False, True, True]))
    np.testing.assert_array_equal(repatch(feature_map, 2).mask, [False, True])


@pytest.mark.parametrize('layers, interval', [(5, (272, 527)), (7, (1040, 2048)), (1, (32, 47))])
def test_length_interval(default_patch_config, layers, interval):
    assert length_interval(layers, default_patch_config) == interval


def test_length_interval_matches_schedule(default_patch_config):
    for layers in range(1, 8):
        low, high = length_interval(layers, default_patch_config)
        assert schedule(low, default_patch_config).activated_layers == layers
        assert schedule(high, default_patch_config).activated_layers == layers
        assert schedule(low - 1, default_patch_config).activated_layers == layers - 1


def test_length_interval_errors(default_patch_config):
    with pytest.raises(ValueError):
        length_interval(0, default_patch_config)

    with pytest.raises(LengthError):
        length_interval(8, default_patch_config)


def test_segment_of(default_patch_config):
    sched = schedule(2048, default_patch_config)
    first = segment_of(1, 1, sched)
    assert (first.start, first.end) == (0, 2)
    third = segment_of(3, 2, sched)
    assert (third.start, third.end) == (8, 16)
    root = segment_of(7, 1, sched)
    assert (root.start, root.end) == (0, 128)


def test_segment_of_errors(default_patch_config):
    sched = schedule(512, default_patch_config)
    with pytest.raises(SegmentIndexError):
        segment_of(0, 1, sched)

    with pytest.raises(SegmentIndexError):
        segment_of(1, 17, sched)


def test_pad_patch_matrix():
    padded = pad_patch_matrix(np.ones((2, 3)), 4)
    np.testing.assert_array_equal(padded[:, 3], [0.0, 0.0])
    with pytest.raises(ShapeError):
        pad_patch_matrix(np.ones((2, 3)), 2)


def test_length_interval_covers_every_length(default_patch_config):
    intervals = {layers: length_interval(layers, default_patch_config) for layers in range(1, 8)}
    for length in range(32, 2049):
        layers = schedule(length, default_patch_config).activated_layers
        low, high = intervals[layers]
        assert low <= length <= high
