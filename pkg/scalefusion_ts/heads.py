"""
Holds the per-layer task heads and fine-tuning: forecasting heads per (layer, horizon) and
classification heads per layer, the deepest-activated-layer selection rule, the L1 and
cross-entropy objectives and the evaluation helpers
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from scalefusion_ts.analysis import classification_metrics, error_metrics
from scalefusion_ts.common import RecordWriter, derive_rng
from scalefusion_ts.data import TASKS, Sample
from scalefusion_ts.encoder import uniform_init, zeros_init
from scalefusion_ts.errors import ConfigError, DataError, ShapeError, UnsupportedLengthError
from scalefusion_ts.model import ModelConfig, ModelParams, encode
from scalefusion_ts.numerics import (Parameter, Tape, Tensor, absolute, mean_all, no_tape, softmax_columns,
                                     softmax_cross_entropy)
from scalefusion_ts.optim import AdamW, SampleResult, accumulate
from scalefusion_ts.patching import FeatureMap, PyramidSchedule, schedule

LOGGER = logging.getLogger('scalefusion_ts')


@dataclass
class ForecastHead:
    """
    Affine map from the single layer-l feature (d^l) to a horizon (horizon x d^l)
    """
    layer: int
    horizon: int
    weight: Parameter
    bias: Parameter

    def parameters(self) -> Iterator[Parameter]:
        yield from (self.weight, self.bias)


@dataclass
class ClassifyHead:
    """
    Affine map from the single layer-l feature to C class scores (C x d^l)
    """
    layer: int
    num_classes: int
    weight: Parameter
    bias: Parameter

    def parameters(self) -> Iterator[Parameter]:
        yield from (self.weight, self.bias)


Head = Union[ForecastHead, ClassifyHead]


@dataclass
class HeadBank:
    """
    Every task head of a model, one per layer 1..L_max and, for forecasting, per horizon
    """
    task: str
    horizons: Tuple[int, ...] = ()
    num_classes: Optional[int] = None
    forecast_heads: Dict[Tuple[int, int], ForecastHead] = field(default_factory=dict)
    classify_heads: Dict[int, ClassifyHead] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, task: str, horizons: Sequence[int] = (), num_classes: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> 'HeadBank':
        """
        Method to initialize the heads of every layer

        :type config: ModelConfig
        :param config: The model architecture
        :type task: String
        :param task: forecast or classify
        :type horizons: Sequence
        :param horizons: Forecast lengths
        :type num_classes: Integer
        :param num_classes: C >= 2 for classification
        :type rng: numpy.random.Generator
        :param rng: Initialization randomness

        :rtype: HeadBank
        :returns: The bank

        :raises ConfigError: if the task settings are invalid

        """
        check_task(task, horizons, num_classes)
        rng = rng if rng is not None else np.random.default_rng(0)
        bank = cls(task=task, horizons=tuple(int(horizon) for horizon in horizons), num_classes=num_classes)
        for layer in range(1, config.patch.max_layers + 1):
            dim = config.patch.channel_dim(layer)
            if task == 'forecast':
                for horizon in bank.horizons:
                    prefix = f'heads.forecast.{layer}.{horizon}'
                    bank.forecast_heads[(layer, horizon)] = ForecastHead(
                        layer, horizon, uniform_init(f'{prefix}.weight', horizon, dim, rng),
                        zeros_init(f'{prefix}.bias', horizon))

            else:
                prefix = f'heads.classify.{layer}'
                bank.classify_heads[layer] = ClassifyHead(
                    layer, num_classes, uniform_init(f'{prefix}.weight', num_classes, dim, rng),
                    zeros_init(f'{prefix}.bias', num_classes))

        return bank

    def describe(self) -> dict:
        return {'task': self.task, 'horizons': list(self.horizons), 'num_classes': self.num_classes}

    def layer_heads(self, horizon: Optional[int] = None) -> List[Head]:
        """
        Method for the per-layer head list select_head indexes, heads[l - 1] is layer l

        :type horizon: Integer
        :param horizon: Required for forecasting banks

        :rtype: List
        :returns: The heads ordered by layer

        :raises ConfigError: if the horizon is not one of the bank's

        """
        if self.task == 'classify':
            return [self.classify_heads[layer] for layer in sorted(self.classify_heads)]

        if horizon not in self.horizons:
            raise ConfigError(f'horizon {horizon} is not one of the configured horizons {self.horizons}')

        return [head for key, head in sorted(self.forecast_heads.items()) if key[1] == horizon]

    def parameters(self) -> List[Parameter]:
        heads = self.forecast_heads if self.task == 'forecast' else self.classify_heads
        return [param for key in sorted(heads) for param in heads[key].parameters()]

    def attach(self, model: ModelParams) -> 'HeadBank':
        model.heads = self
        return self


def check_task(task: str, horizons: Sequence[int], num_classes: Optional[int]) -> None:
    if task not in TASKS:
        raise ConfigError(f'task must be one of {TASKS} but received {task!r}')

    if task == 'forecast' and (not horizons or any(int(horizon) < 1 for horizon in horizons)):
        raise ConfigError(f'forecasting needs positive horizons but received {tuple(horizons)}')

    if task == 'classify' and (num_classes is None or num_classes < 2):
        raise ConfigError(f'classification needs num_classes >= 2 but received {num_classes}')


def select_head(sched: PyramidSchedule, heads: Sequence[Head]) -> Head:
    """
    Function to pick the head of the deepest activated layer

    :type sched: PyramidSchedule
    :param sched: Schedule of the input
    :type heads: Sequence
    :param heads: Per-layer heads, heads[l - 1] belongs to layer l

    :rtype: ForecastHead or ClassifyHead
    :returns: The head at layer L = sched.activated_layers

    :raises UnsupportedLengthError: if the input activates no layer

    """
    layer = sched.activated_layers
    if layer == 0:
        raise UnsupportedLengthError(f'length {sched.input_len} activates no CTL layer, no head can consume it')

    if layer > len(heads):
        raise UnsupportedLengthError(f'layer {layer} has no head, only {len(heads)} layers are configured')

    head = heads[layer - 1]
    if head.layer != layer:
        raise ShapeError(f'head list is out of order: position {layer} holds a layer {head.layer} head')

    return head


def _head_input(features: FeatureMap, head: Head) -> Tensor:
    if head.layer != features.layer:
        raise ShapeError(f'a layer {head.layer} head cannot consume layer {features.layer} features')

    if features.patches != 1:
        raise ShapeError(f'heads consume a single patch feature but layer {features.layer} has {features.patches}')

    return features.values


def forecast(features: FeatureMap, head: ForecastHead) -> Tensor:
    """
    Function for the normalized forecast W h + b (horizon x 1), de-normalize with the sample
    """
    return head.weight @ _head_input(features, head) + head.bias


def classify_logits(features: FeatureMap, head: ClassifyHead) -> Tensor:
    return head.weight @ _head_input(features, head) + head.bias


def classify(features: FeatureMap, head: ClassifyHead) -> Tensor:
    """
    Function for the class probabilities softmax(W h + b) (C x 1)
    """
    return softmax_columns(classify_logits(features, head))


def l1_loss(pred: Tensor, target) -> Tensor:
    """
    Function for the mean absolute error as a 1x1 Tensor
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError(f'prediction {pred.shape} and target {target.shape} differ')

    return mean_all(absolute(pred - target))


@dataclass(frozen=True)
class FinetuneConfig:
    """
    Fine-tuning settings

    :type task: String
    :param task: forecast or classify
    :type horizons: Tuple
    :param horizons: Forecast lengths Default: (96,)
    :type num_classes: Integer
    :param num_classes: C for classification
    :type step_size: Float
    :param step_size: AdamW step size Default: 1e-4
    :type epochs: Integer
    :param epochs: Passes over the training samples Default: 10
    :type batch_size: Integer
    :param batch_size: Samples per step Default: 8
    :type seed: Integer
    :param seed: Seed of head init and shuffling
    :type freeze_backbone: Boolean
    :param freeze_backbone: Train the heads only Default: False
    :type weight_decay: Float
    :param weight_decay: Decoupled weight decay Default: 0.01
    :type patience: Integer
    :param patience: Stop after this many epochs without a better validation loss, None never stops
    :type workers: Integer
    :param workers: Threads per batch Default: 1
    :type max_steps: Integer
    :param max_steps: Stop after this many optimizer steps
    :type record_wall_time: Boolean
    :param record_wall_time: Add wall_time to metric records Default: False

    """
    task: str = 'forecast'
    horizons: Tuple[int, ...] = (96,)
    num_classes: Optional[int] = None
    step_size: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    freeze_backbone: bool = False
    weight_decay: float = 0.01
    patience: Optional[int] = None
    workers: int = 1
    max_steps: Optional[int] = None
    record_wall_time: bool = False

    def __post_init__(self):
        check_task(self.task, self.horizons, self.num_classes)
        if not self.step_size > 0:
            raise ConfigError(f'train.step_size must be positive but received {self.step_size}')

        for name in ('epochs', 'batch_size', 'workers'):
            if getattr(self, name) < 1:
                raise ConfigError(f'train.{name} must be >= 1 but received {getattr(self, name)}')

        for name in ('patience', 'max_steps'):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ConfigError(f'train.{name} must be >= 1 but received {getattr(self, name)}')

        if self.weight_decay < 0:
            raise ConfigError(f'train.weight_decay must be >= 0 but received {self.weight_decay}')


@dataclass
class FinetuneResult:
    """
    The trained model, its head bank, the metric trace and where the best validation loss was
    """
    model: ModelParams
    heads: HeadBank
    trace: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float('inf')
    steps: int = 0


def _sample_loss(model: ModelParams, bank: HeadBank, sample: Sample) -> Tuple[Tensor, Tensor]:
    encoding = encode(sample.normalized(), model)
    if bank.task == 'forecast':
        head = select_head(encoding.schedule, bank.layer_heads(sample.horizon))
        pred = forecast(encoding.final, head)
        return l1_loss(pred, sample.normalized_target().reshape(-1, 1)), pred

    head = select_head(encoding.schedule, bank.layer_heads())
    logits = classify_logits(encoding.final, head)
    return softmax_cross_entropy(logits, sample.label), logits


def finetune_sample(model: ModelParams, bank: HeadBank, sample: Sample) -> SampleResult:
    """
    Function to run forward and backward for one sample through its deepest activated head
    """
    with Tape() as tape:
        loss, _ = _sample_loss(model, bank, sample)

    return SampleResult(metrics={'loss': loss.item()}, grads=tape.gradients(loss))


def _check_samples(model: ModelParams, samples: Sequence[Sample], cfg: FinetuneConfig, split: str) -> None:
    if not samples:
        raise DataError(f'fine-tuning needs a nonempty {split} set')

    for sample in samples:
        if schedule(sample.length, model.config.patch).activated_layers == 0:
            raise UnsupportedLengthError(f'{split} sample {sample.source} of length {sample.length} '
                                         f'activates no CTL layer')

        if cfg.task == 'forecast' and sample.horizon not in cfg.horizons:
            raise ConfigError(f'{split} sample horizon {sample.horizon} is not one of {cfg.horizons}')

        if cfg.task == 'classify' and sample.label is None:
            raise DataError(f'{split} sample {sample.source} has no class label')


def predict(model: ModelParams, sample: Sample) -> np.ndarray:
    """
    Function to run a trained model on one sample without recording

    :rtype: numpy.ndarray
    :returns: De-normalized forecast (horizon,) or class probabilities (C,)

    """
    if model.heads is None:
        raise ConfigError('the model has no head bank attached')

    with no_tape():
        _, out = _sample_loss(model, model.heads, sample)

    if model.heads.task == 'forecast':
        return sample.denormalize(out.numpy()[:, 0])

    return softmax_columns(out).numpy()[:, 0]


def evaluate_forecast(model: ModelParams, samples: Sequence[Sample]) -> Dict[str, float]:
    """
    Function for the normalized L1 loss and the de-normalized MSE and MAE over samples

    :rtype: Dict
    :returns: loss, mse, mae

    """
    losses, preds, truths = [], [], []
    with no_tape():
        for sample in samples:
            loss, out = _sample_loss(model, model.heads, sample)
            losses.append(loss.item())
            preds.append(sample.denormalize(out.numpy()[:, 0]))
            truths.append(sample.target)

    mse, mae = error_metrics(np.concatenate(preds), np.concatenate(truths))
    return {'loss': float(np.mean(losses)), 'mse': mse, 'mae': mae}


def evaluate_classification(model: ModelParams, samples: Sequence[Sample]) -> Dict[str, float]:
    """
    Function for the cross-entropy, accuracy and macro-F1 over samples

    :rtype: Dict
    :returns: loss, accuracy, macro_f1

    """
    losses, preds, truths = [], [], []
    with no_tape():
        for sample in samples:
            loss, logits = _sample_loss(model, model.heads, sample)
            losses.append(loss.item())
            preds.append(int(np.argmax(logits.numpy()[:, 0])))
            truths.append(sample.label)

    accuracy, macro_f1 = classification_metrics(preds, truths, model.heads.num_classes)
    return {'loss': float(np.mean(losses)), 'accuracy': accuracy, 'macro_f1': macro_f1}


def evaluate(model: ModelParams, samples: Sequence[Sample]) -> Dict[str, float]:
    if model.heads.task == 'forecast':
        return evaluate_forecast(model, samples)

    return evaluate_classification(model, samples)


def repeat_last_baseline(samples: Sequence[Sample]) -> Dict[str, float]:
    """
    Function for the MSE and MAE of repeating each context's last value over its horizon
    """
    if not samples:
        raise DataError('the baseline needs at least one sample')

    preds = np.concatenate([np.full(sample.horizon, sample.values[-1]) for sample in samples])
    mse, mae = error_metrics(preds, np.concatenate([sample.target for sample in samples]))
    return {'mse': mse, 'mae': mae}


def finetune(model: ModelParams, samples: Sequence[Sample], cfg: FinetuneConfig,
             validation: Optional[Sequence[Sample]] = None, heads: Optional[HeadBank] = None,
             writer: Optional[RecordWriter] = None) -> FinetuneResult:
    """
    Function to fine-tune a model with its deepest-activated heads

    The reconstruction decoders take no part. The parameters with the lowest validation loss are
    restored at the end. Each epoch writes two records:

    * split train: epoch, loss (mean over the epoch's batches), steps and the end-of-epoch mse and mae
      (accuracy and macro_f1 when classifying)
    * split val: epoch, loss and the same task metrics

    Both carry wall_time when the writer records it (record_wall_time).

    :type model: ModelParams
    :param model: Pretrained or fresh model, updated in place
    :type samples: Sequence
    :param samples: Training samples
    :type cfg: FinetuneConfig
    :param cfg: The settings
    :type validation: Sequence
    :param validation: Validation samples, the training samples stand in when None
    :type heads: HeadBank
    :param heads: Existing heads, a fresh bank is made when None
    :type writer: RecordWriter
    :param writer: Receives the metric trace

    :rtype: FinetuneResult
    :returns: The model with its heads and the trace

    :raises DataError: if a sample set is empty
    :raises UnsupportedLengthError: if a sample activates no layer
    :raises NumericError: if a loss becomes non-finite

    """
    validation = samples if validation is None else validation
    _check_samples(model, samples, cfg, 'train')
    _check_samples(model, validation, cfg, 'validation')
    if heads is None:
        heads = HeadBank.create(model.config, cfg.task, cfg.horizons, cfg.num_classes, derive_rng(cfg.seed, 'heads'))

    heads.attach(model)
    trainable = list(heads.parameters())
    if not cfg.freeze_backbone:
        trainable = model.backbone_parameters(include_recon=False) + trainable

    names = [param.name for param in trainable]
    optimizer = AdamW(trainable, lr=cfg.step_size, weight_decay=cfg.weight_decay)
    writer = writer if writer is not None else RecordWriter(record_wall_time=cfg.record_wall_time)
    shuffle = derive_rng(cfg.seed, 'shuffle')
    result = FinetuneResult(model=model, heads=heads)
    best_values = model.snapshot(names)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[index] for index in order[start:start + cfg.batch_size]]
            grads, metrics = accumulate(lambda sample: finetune_sample(model, heads, sample), batch, cfg.workers)
            optimizer.step(grads)
            result.steps += 1
            losses.extend(row['loss'] for row in metrics)
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break

        train_metrics = evaluate(model, samples)
        train_metrics.pop('loss')
        result.trace.append(writer.write(epoch=epoch, split='train', loss=float(np.mean(losses)), steps=result.steps,
                                         **train_metrics))
        metrics = evaluate(model, validation)
        result.trace.append(writer.write(epoch=epoch, split='val', **metrics))
        if metrics['loss'] < result.best_loss:
            result.best_loss, result.best_epoch = metrics['loss'], epoch
            best_values = model.snapshot(names)
            stale = 0

        else:
            stale += 1

        if cfg.patience is not None and stale >= cfg.patience:
            LOGGER.info('no validation improvement for %d epochs, stopping at epoch %d', stale, epoch)
            break

        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break

    model.restore(best_values)
    LOGGER.info('restored parameters of epoch %d, validation loss %.6e', result.best_epoch, result.best_loss)
    return result
