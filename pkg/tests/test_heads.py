import pytest
import os
import sys
import numpy as np
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.data import Sample, SynthSpec, sliding_window_varlen, synth_generate
from scalefusion_ts.errors import ConfigError, DataError, ShapeError, UnsupportedLengthError
from scalefusion_ts.heads import (ClassifyHead, FinetuneConfig, ForecastHead, HeadBank, classify,
                                  evaluate_classification, evaluate_forecast,
                                  finetune, finetune_sample, forecast, l1_loss, predict, repeat_last_baseline,
                                  select_head)
from scalefusion_ts.model import ModelParams
from scalefusion_ts.numerics import Parameter, Tensor, grad_check, softmax_cross_entropy
from scalefusion_ts.common import RecordWriter
from scalefusion_ts.patching import FeatureMap, length_interval, schedule


def make_forecast_head(layer, horizon, dim, rng=None):
    weight = np.zeros((horizon, dim)) if rng is None else rng.normal(size=(horizon, dim))
    return ForecastHead(layer, horizon, Parameter(f'f.{layer}.w', weight), Parameter(f'f.{layer}.b', np.zeros(horizon)))


def forecast_sample(series, length, horizon):
    return Sample.build(series[:length], target=series[length:length + horizon], source='toy')


@pytest.fixture
def default_heads(default_patch_config):
    return [make_forecast_head(layer, 96, default_patch_config.channel_dim(layer))
            for layer in range(1, default_patch_config.max_layers + 1)]


@pytest.fixture
def long_series():
    steps = np.arange(200, dtype=np.float64)
    return np.sin(2.0 * np.pi * steps / 16.0) + 0.3 * np.sin(2.0 * np.pi * steps / 5.0)


@pytest.mark.parametrize('length, layer, dim', [(2048, 7, 2048), (512, 5, 512), (47, 1, 32)])
def test_select_head_deepest_layer(default_patch_config, default_heads, length, layer, dim):
    head = select_head(schedule(length, default_patch_config), default_heads)
    assert head.layer == layer
    assert head.weight.cols == dim


def test_select_head_unsupported_length(default_patch_config, default_heads):
    with pytest.raises(UnsupportedLengthError):
        select_head(schedule(16, default_patch_config), default_heads)


def test_forecast_zero_head():
    head = make_forecast_head(7, 96, 2048)
    out = forecast(FeatureMap(7, Tensor(np.ones((2048, 1)))), head)
    assert out.shape == (96, 1)
    np.testing.assert_array_equal(out.numpy(), np.zeros((96, 1)))


def test_forecast_layer_mismatch():
    head = make_forecast_head(2, 4, 8)
    with pytest.raises(ShapeError):
        forecast(FeatureMap(3, Tensor(np.ones((8, 1)))), head)

    with pytest.raises(ShapeError):
        forecast(FeatureMap(2, Tensor(np.ones((8, 2)))), head)


def test_l1_gradients():
    rng = np.random.default_rng(4)
    head = make_forecast_head(1, 5, 6, rng)
    features = FeatureMap(1, Tensor(rng.normal(size=(6, 1))))
    # offset keeps every residual away from the kink of |x|
    target = forecast(features, head).numpy() + rng.choice([-1.0, 1.0], size=(5, 1)) * rng.uniform(0.5, 1.0, (5, 1))
    report = grad_check(lambda: l1_loss(forecast(features, head), target), [head.weight, head.bias], eps=1e-6)
    assert report.passed(1e-6), report.per_parameter


def test_classify_uniform_and_cross_entropy():
    head = ClassifyHead(1, 4, Parameter('c.w', np.zeros((4, 8))), Parameter('c.b', np.zeros(4)))
    features = FeatureMap(1, Tensor(np.ones((8, 1))))
    np.testing.assert_allclose(classify(features, head).numpy()[:, 0], [0.25] * 4, atol=1e-15)
    loss = softmax_cross_entropy(head.weight @ features.values + head.bias, 1)
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_classify_gradients():
    rng = np.random.default_rng(5)
    head = ClassifyHead(1, 3, Parameter('c.w', rng.normal(size=(3, 8))), Parameter('c.b', rng.normal(size=3)))
    features = FeatureMap(1, Tensor(rng.normal(size=(8, 1))))
    probs = classify(features, head).numpy()
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    report = grad_check(lambda: softmax_cross_entropy(head.weight @ features.values + head.bias, 2),
                        [head.weight, head.bias], eps=1e-6)
    assert report.passed(1e-6), report.per_parameter


def test_head_bank_layout(toy_model_config):
    bank = HeadBank.create(toy_model_config, 'forecast', (8, 16), rng=np.random.default_rng(0))
    heads = bank.layer_heads(16)
    assert [head.layer for head in heads] == [1, 2, 3, 4, 5]
    assert heads[2].weight.shape == (16, 32)
    with pytest.raises(ConfigError):
        bank.layer_heads(96)

    with pytest.raises(ConfigError):
        HeadBank.create(toy_model_config, 'classify', num_classes=1)


def test_only_deepest_head_gets_gradient(toy_model, long_series):
    bank = HeadBank.create(toy_model.config, 'forecast', (8,), rng=np.random.default_rng(0)).attach(toy_model)
    grads = finetune_sample(toy_model, bank, forecast_sample(long_series, 40, 8)).grads
    touched = {name for name in grads.nonzero_names() if name.startswith('heads.')}
    assert touched == {'heads.forecast.4.8.weight', 'heads.forecast.4.8.bias'}
    assert not any('.recon.' in name for name in grads)


def test_same_interval_routes_to_same_head(toy_model, long_series):
    bank = HeadBank.create(toy_model.config, 'forecast', (8,), rng=np.random.default_rng(0)).attach(toy_model)
    for length in (36, 52, 67):
        grads = finetune_sample(toy_model, bank, forecast_sample(long_series, length, 8)).grads
        assert 'heads.forecast.4.8.weight' in grads


def test_finetune_freeze_backbone(toy_model, long_series):
    backbone = {param.name: param.numpy() for param in toy_model.backbone_parameters()}
    samples = [forecast_sample(long_series, length, 8) for length in (40, 60, 80)]
    cfg = FinetuneConfig(task='forecast', horizons=(8,), step_size=1e-2, epochs=2, batch_size=2,
                         freeze_backbone=True)
    result = finetune(toy_model, samples, cfg)
    for param in toy_model.backbone_parameters():
        np.testing.assert_array_equal(param.numpy(), backbone[param.name])

    assert [row['split'] for row in result.trace] == ['train', 'val', 'train', 'val']
    assert result.heads is toy_model.heads


def test_finetune_unused_heads_stay_at_init(toy_model, long_series):
    samples = [forecast_sample(long_series, 40, 8)]
    cfg = FinetuneConfig(task='forecast', horizons=(8,), step_size=1e-2, epochs=1)
    bank = HeadBank.create(toy_model.config, 'forecast', (8,), rng=np.random.default_rng(1))
    untouched = bank.forecast_heads[(5, 8)].weight.numpy()
    finetune(toy_model, samples, cfg, heads=bank)
    np.testing.assert_array_equal(bank.forecast_heads[(5, 8)].weight.numpy(), untouched)


def test_finetune_errors(toy_model, long_series):
    cfg = FinetuneConfig(task='forecast', horizons=(8,))
    with pytest.raises(DataError):
        finetune(toy_model, [], cfg)

    with pytest.raises(UnsupportedLengthError):
        finetune(toy_model, [forecast_sample(long_series, 6, 8)], cfg)

    with pytest.raises(ConfigError):
        finetune(toy_model, [forecast_sample(long_series, 40, 4)], cfg)

    with pytest.raises(ConfigError):
        FinetuneConfig(task='forecast', horizons=(8,), epochs=0)

    with pytest.raises(ConfigError):
        FinetuneConfig(task='classify')


def test_predict_and_evaluate(toy_model, long_series):
    samples = [forecast_sample(long_series, length, 8) for length in (40, 80)]
    finetune(toy_model, samples, FinetuneConfig(task='forecast', horizons=(8,), epochs=1))
    assert predict(toy_model, samples[0]).shape == (8,)
    metrics = evaluate_forecast(toy_model, samples)
    assert set(metrics) == {'loss', 'mse', 'mae'}


def test_repeat_last_baseline():
    sample = Sample.build([1.0, 2.0, 3.0], target=[3.0, 5.0])
    assert repeat_last_baseline([sample]) == {'mse': 2.0, 'mae': 1.0}


@pytest.mark.slow
def test_finetune_overfits_single_sample(toy_model_config, long_series):
    model = ModelParams(toy_model_config, np.random.default_rng(2))
    sample = forecast_sample(long_series, 80, 8)
    cfg = FinetuneConfig(task='forecast', horizons=(8,), step_size=3e-3, epochs=300, batch_size=1,
                         weight_decay=0.0)
    result = finetune(model, [sample], cfg)
    losses = [row['loss'] for row in result.trace if row['split'] == 'train']
    assert min(losses[-5:]) < 0.05 * losses[0]


@pytest.mark.slow
def test_finetune_classifies_separable_templates(toy_model_config):
    steps = np.arange(80, dtype=np.float64)
    rng = np.random.default_rng(3)
    samples = [Sample.build(np.sin(2.0 * np.pi * steps / (32.0 / (label + 1)) + rng.uniform(0, 2 * np.pi)),
                            label=label) for label in range(2) for _ in range(8)]
    model = ModelParams(toy_model_config, np.random.default_rng(4))
    cfg = FinetuneConfig(task='classify', num_classes=2, step_size=3e-3, epochs=200, batch_size=16, patience=None)
    result = finetune(model, samples, cfg)
    assert max(row.get('accuracy', 0.0) for row in result.trace if row['split'] == 'val') == 1.0


@pytest.mark.slow
def test_head_routing_over_random_lengths(toy_model, long_series):
    bank = HeadBank.create(toy_model.config, 'forecast', (8,), rng=np.random.default_rng(0)).attach(toy_model)
    rng = np.random.default_rng(12)
    for length in rng.integers(8, 81, size=1000):
        layer = schedule(int(length), toy_model.config.patch).activated_layers
        grads = finetune_sample(toy_model, bank, forecast_sample(long_series, int(length), 8)).grads
        touched = {name.rsplit('.', 1)[0] for name in grads.nonzero_names() if name.startswith('heads.')}
        assert touched == {f'heads.forecast.{layer}.8'}


def test_select_head_routes_random_lengths(default_patch_config, default_heads):
    shortest = length_interval(1, default_patch_config)[0]
    rng = np.random.default_rng(13)
    for length in rng.integers(shortest, default_patch_config.max_len + 1, size=1000):
        sched = schedule(int(length), default_patch_config)
        head = select_head(sched, default_heads)
        assert head.layer == sched.activated_layers
        low, high = length_interval(head.layer, default_patch_config)
        assert low <= length <= high


def test_finetune_train_record_carries_task_metrics(toy_model, long_series):
    samples = [forecast_sample(long_series, length, 8) for length in (40, 80)]
    writer = RecordWriter(record_wall_time=True)
    finetune(toy_model, samples, FinetuneConfig(task='forecast', horizons=(8,), epochs=1), writer=writer)
    train, val = writer.records
    assert set(train) == {'epoch', 'split', 'loss', 'steps', 'mse', 'mae', 'wall_time'}
    assert set(val) == {'epoch', 'split', 'loss', 'mse', 'mae', 'wall_time'}
    assert train['split'] == 'train'

    result = finetune(toy_model, samples, FinetuneConfig(task='forecast', horizons=(8,), epochs=1))
    assert 'wall_time' not in result.trace[0]


def test_finetune_train_record_classification_metrics(toy_model_config):
    steps = np.arange(40, dtype=np.float64)
    samples = [Sample.build(np.sin(steps / (label + 2.0)), label=label) for label in range(2)]
    model = ModelParams(toy_model_config, np.random.default_rng(6))
    result = finetune(model, samples, FinetuneConfig(task='classify', num_classes=2, epochs=1))
    assert {'accuracy', 'macro_f1', 'loss', 'steps'} <= set(result.trace[0])


@pytest.mark.slow
def test_finetune_beats_repeat_last_on_ar1(toy_model_config):
    series = synth_generate(SynthSpec(kind='ar1', length=6000, coefficient=0.9, noise=1.0),
                            np.random.default_rng(20)).series[0]
    rng = np.random.default_rng(21)

    def windows(start, stop, stride):
        return list(sliding_window_varlen(series, min_len=80, max_len=80, horizon=96, rng=rng, start=start,
                                          stop=stop, stride=stride, source='ar1'))

    train, val, test = windows(0, 3600, 12), windows(3600, 4800, 24), windows(4800, 6000, 4)
    model = ModelParams(toy_model_config, np.random.default_rng(22))
    cfg = FinetuneConfig(task='forecast', horizons=(96,), step_size=1e-2, epochs=30, batch_size=16,
                         weight_decay=0.0, freeze_backbone=True, patience=None)
    finetune(model, train, cfg, validation=val)
    assert evaluate_forecast(model, test)['mse'] <= 0.8 * repeat_last_baseline(test)['mse']


@pytest.mark.slow
def test_finetune_classifies_three_classes_held_out(toy_model_config):
    generated = synth_generate(SynthSpec(kind='classes', length=80, count=20, num_classes=3, periods=(32.0,)),
                               np.random.default_rng(23))
    samples = [Sample.build(values, label=int(label)) for values, label in zip(generated.series, generated.labels)]
    by_class = [[sample for sample in samples if sample.label == label] for label in range(3)]
    train = [sample for group in by_class for sample in group[:14]]
    val = [sample for group in by_class for sample in group[14:16]]
    test = [sample for group in by_class for sample in group[16:]]
    model = ModelParams(toy_model_config, np.random.default_rng(24))
    cfg = FinetuneConfig(task='classify', num_classes=3, step_size=3e-3, epochs=150, batch_size=14, patience=None)
    finetune(model, train, cfg, validation=val)
    assert evaluate_classification(model, test)['accuracy'] == 1.0
