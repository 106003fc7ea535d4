"""
Holds the run configuration: YAML sections loaded into frozen dataclasses, validated before any
work starts, with flag and environment overrides
"""
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from scalefusion_ts.data import (SUBSAMPLE_MODES, TASKS, DatasetManifest, SplitSpec, SynthSpec)
from scalefusion_ts.errors import ConfigError
from scalefusion_ts.heads import FinetuneConfig
from scalefusion_ts.model import ModelConfig, PretrainConfig
from scalefusion_ts.patching import PatchConfig

LOGGER = logging.getLogger('scalefusion_ts')

OUTPUT_DIR_ENV = 'SCALEFUSION_OUTPUT_DIR'


@dataclass(frozen=True)
class ModelSection:
    patch_len: int = 16
    stride: int = 16
    repatch_len: int = 2
    base_dim: int = 16
    max_len: int = 2048
    heads: int = 8
    d_ff: int = 2048
    encoder_depth: int = 1
    alpha: float = 1e-4

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(patch=PatchConfig(patch_len=self.patch_len, stride=self.stride,
                                             repatch_len=self.repatch_len, base_dim=self.base_dim,
                                             max_len=self.max_len),
                           heads=self.heads, d_ff=self.d_ff, encoder_depth=self.encoder_depth, alpha=self.alpha)


@dataclass(frozen=True)
class DataSection:
    """
    Dataset, task and sampling settings; kind, length, count, noise, periods, coefficient and
    num_classes describe synthetic data
    """
    format: str = 'synthetic'
    path: Optional[str] = None
    test_path: Optional[str] = None
    columns: Tuple[str, ...] = ()
    expected_length: Optional[int] = None
    task: str = 'forecast'
    min_len: int = 512
    max_len: int = 2048
    horizons: Tuple[int, ...] = (96,)
    num_classes: Optional[int] = None
    split: Tuple[float, ...] = (0.6, 0.2, 0.2)
    stride: Optional[int] = None
    subsample_mode: str = 'index'
    kind: str = 'sine'
    length: int = 4096
    count: int = 1
    noise: float = 0.0
    periods: Tuple[float, ...] = (64.0,)
    coefficient: float = 0.9

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(format=self.format, path=self.path, columns=self.columns,
                               num_classes=self.num_classes, expected_length=self.expected_length,
                               test_path=self.test_path)

    def split_spec(self, seed: int = 0) -> SplitSpec:
        if len(self.split) != 3:
            raise ConfigError(f'data.split needs three fractions but received {self.split}')

        return SplitSpec(train=self.split[0], val=self.split[1], test=self.split[2], seed=seed)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(kind=self.kind, length=self.length, count=self.count, noise=self.noise,
                         periods=self.periods, coefficient=self.coefficient, num_classes=self.num_classes or 3)


@dataclass(frozen=True)
class TrainSection:
    seed: int = 0
    step_size: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    freeze_backbone: bool = False
    weight_decay: float = 0.01
    patience: Optional[int] = None
    workers: int = 1
    max_steps: Optional[int] = None
    record_wall_time: bool = False
    repeats: int = 1
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class AnalysisSection:
    bins: int = 16
    max_pairs: int = 10_000
    variance_target: float = 0.8
    split: str = 'test'


@dataclass(frozen=True)
class RunConfig:
    """
    One validated run configuration

    :type model: ModelSection
    :param model: Architecture
    :type data: DataSection
    :param data: Dataset and task
    :type train: TrainSection
    :param train: Optimization, seed and repeats
    :type analysis: AnalysisSection
    :param analysis: Redundancy suite settings
    :type output_dir: String
    :param output_dir: Where a command writes its outputs

    """
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output_dir: str = 'runs'

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        return self.model.to_model_config()

    def pretrain_config(self) -> PretrainConfig:
        train = self.train
        return PretrainConfig(step_size=train.step_size, epochs=train.epochs, batch_size=train.batch_size,
                              seed=train.seed, weight_decay=train.weight_decay, workers=train.workers,
                              max_steps=train.max_steps)

    def finetune_config(self, num_classes: Optional[int] = None, seed: Optional[int] = None) -> FinetuneConfig:
        train = self.train
        return FinetuneConfig(task=self.data.task, horizons=self.data.horizons,
                              num_classes=num_classes if num_classes is not None else self.data.num_classes,
                              step_size=train.step_size, epochs=train.epochs, batch_size=train.batch_size,
                              seed=train.seed if seed is None else seed, freeze_backbone=train.freeze_backbone,
                              weight_decay=train.weight_decay, patience=train.patience, workers=train.workers,
                              max_steps=train.max_steps, record_wall_time=train.record_wall_time)

    def validate(self) -> 'RunConfig':
        """
        Method to check every invariant the run depends on

        :rtype: RunConfig
        :returns: self

        :raises ConfigError: naming the first offending field

        """
        model = self.model_config()
        data = self.data
        if data.task not in TASKS:
            raise ConfigError(f'data.task must be one of {TASKS} but received {data.task!r}')

        if data.subsample_mode not in SUBSAMPLE_MODES:
            raise ConfigError(f'data.subsample_mode must be one of {SUBSAMPLE_MODES} but received '
                              f'{data.subsample_mode!r}')

        if not model.patch.patch_len <= data.min_len <= data.max_len <= model.patch.max_len:
            raise ConfigError(f'need model.patch_len <= data.min_len <= data.max_len <= model.max_len but received '
                              f'{model.patch.patch_len}, {data.min_len}, {data.max_len}, {model.patch.max_len}')

        if data.stride is not None and data.stride < 1:
            raise ConfigError(f'data.stride must be >= 1 but received {data.stride}')

        data.manifest()
        data.split_spec(self.train.seed)
        if data.format == 'synthetic':
            data.synth_spec()

        self.pretrain_config()
        # a UCR class count is only known after loading, 2 stands in for the check
        self.finetune_config(num_classes=data.num_classes or (2 if data.task == 'classify' else None))
        if self.train.repeats < 1:
            raise ConfigError(f'train.repeats must be >= 1 but received {self.train.repeats}')

        if self.analysis.bins < 2 or self.analysis.max_pairs < 1:
            raise ConfigError(f'analysis.bins must be >= 2 and analysis.max_pairs >= 1 but received '
                              f'{self.analysis.bins}, {self.analysis.max_pairs}')

        if not 0 < self.analysis.variance_target <= 1:
            raise ConfigError(f'analysis.variance_target must lie in (0, 1] but received '
                              f'{self.analysis.variance_target}')

        if self.analysis.split not in ('train', 'val', 'test'):
            raise ConfigError(f'analysis.split must be train, val or test but received {self.analysis.split!r}')

        return self


def _strip_optional(hint: Any) -> Tuple[Any, bool]:
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union and type(None) in args:
        return next(arg for arg in args if arg is not type(None)), True

    return hint, False


def _coerce(section: str, key: str, hint: Any, value: Any) -> Any:
    hint, optional = _strip_optional(hint)
    if value is None:
        if optional:
            return None

        raise ConfigError(f'{section}.{key} must not be empty')

    if typing.get_origin(hint) is tuple:
        item = typing.get_args(hint)[0]
        values = value if isinstance(value, (list, tuple)) else [value]
        return tuple(_coerce(section, key, item, entry) for entry in values)

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f'{section}.{key} must be of type boolean but received {type(value).__name__}')

        return value

    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{section}.{key} must be of type integer but received {type(value).__name__}')

        return value

    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{section}.{key} must be a number but received {type(value).__name__}')

        return float(value)

    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f'{section}.{key} must be of type string but received {type(value).__name__}')

        return value

    return value


def _build_section(cls, section: str, raw: Any):
    if raw is None:
        return cls()

    if not isinstance(raw, dict):
        raise ConfigError(f'section {section} must be a mapping but received {type(raw).__name__}')

    hints = typing.get_type_hints(cls)
    unknown = sorted(set(raw) - set(hints))
    if unknown:
        raise ConfigError(f'unknown key {section}.{unknown[0]}')

    return cls(**{key: _coerce(section, key, hints[key], value) for key, value in raw.items()})


SECTIONS = {'model': ModelSection, 'data': DataSection, 'train': TrainSection, 'analysis': AnalysisSection}


def parse_config(raw: Optional[Dict[str, Any]]) -> RunConfig:
    """
    Function to turn a parsed YAML mapping into a RunConfig without validating it

    :raises ConfigError: on unknown sections or keys and on mistyped values

    """
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f'a config file must hold a mapping but holds {type(raw).__name__}')

    unknown = sorted(set(raw) - set(SECTIONS) - {'output_dir'})
    if unknown:
        raise ConfigError(f'unknown config section {unknown[0]}')

    sections = {name: _build_section(cls, name, raw.get(name)) for name, cls in SECTIONS.items()}
    output_dir = _coerce('config', 'output_dir', str, raw.get('output_dir', RunConfig.output_dir))
    return RunConfig(output_dir=output_dir, **sections)


def load_config(path: Optional[str] = None, seed: Optional[int] = None, output_dir: Optional[str] = None,
                epochs: Optional[int] = None) -> RunConfig:
    """
    Function to load and validate a run configuration

    Precedence from lowest to highest: defaults, the file, the flags, then SCALEFUSION_OUTPUT_DIR
    for the output directory.

    :type path: String
    :param path: YAML file, None uses the defaults
    :type seed: Integer
    :param seed: --seed override
    :type output_dir: String
    :param output_dir: --output-dir override
    :type epochs: Integer
    :param epochs: --epochs override

    :rtype: RunConfig
    :returns: The validated configuration

    :raises ConfigError: if the file is unreadable or any value is invalid

    """
    raw = {}
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                raw = yaml.safe_load(handle)

        except OSError as err:
            raise ConfigError(f'cannot read config file {path}: {err}') from err

        except yaml.YAMLError as err:
            raise ConfigError(f'config file {path} is not valid YAML: {err}') from err

    config = parse_config(raw)
    train_overrides = {key: value for key, value in (('seed', seed), ('epochs', epochs)) if value is not None}
    if train_overrides:
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, **train_overrides))

    if output_dir is not None:
        config = dataclasses.replace(config, output_dir=output_dir)

    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        LOGGER.debug('%s overrides output_dir with %s', OUTPUT_DIR_ENV, env_dir)
        config = dataclasses.replace(config, output_dir=env_dir)

    return config.validate()
