"""
Holds dataset ingestion for scalefusion_ts: ETT-style CSV and UCR readers, chronological splits,
per-sample standardization, the variable-length samplers and the synthetic generators
"""
import logging
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from scalefusion_ts.common import derive_rng
from scalefusion_ts.errors import ConfigError, DataError, LengthError

if TYPE_CHECKING:  # pragma: no cover
    from scalefusion_ts.config import RunConfig

LOGGER = logging.getLogger('scalefusion_ts')

FORMATS = ('ett-csv', 'ucr', 'synthetic')
SYNTH_KINDS = ('sine', 'ar1', 'classes')
SUBSAMPLE_MODES = ('index', 'crop')
TASKS = ('forecast', 'classify')
UCR_SEPARATOR = r'[\t,]'


@dataclass(frozen=True)
class Sample:
    """
    One univariate series with its forecast target or class label and the standardization of
    its context window

    :type values: numpy.ndarray
    :param values: Context of length T
    :type target: numpy.ndarray
    :param target: Forecast target on the raw scale, None for classification
    :type label: Integer
    :param label: Class index, None for forecasting
    :type mean: Float
    :param mean: Context mean
    :type std: Float
    :param std: Context std, 1.0 when the context is constant
    :type constant: Boolean
    :param constant: The context has zero variance
    :type source: String
    :param source: Where the sample came from, like 'ETTh1:OT'
    :type start: Integer
    :param start: Index of the first context value in the source series

    """
    values: np.ndarray
    target: Optional[np.ndarray] = None
    label: Optional[int] = None
    mean: float = 0.0
    std: float = 1.0
    constant: bool = False
    source: str = ''
    start: int = 0

    @classmethod
    def build(cls, values, target=None, label: Optional[int] = None, source: str = '', start: int = 0) -> 'Sample':
        """
        Method to make a sample and record its context standardization

        :rtype: Sample
        :returns: The sample

        :raises DataError: if the context is empty or not finite

        """
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DataError(f'sample context must be a nonempty 1-d series but the shape is {values.shape}')

        if not np.all(np.isfinite(values)):
            raise DataError(f'sample from {source or "unknown source"} holds non-finite values')

        mean = float(values.mean())
        std = float(values.std())
        constant = std == 0.0
        if constant:
            std = 1.0

        if target is not None:
            target = np.array(target, dtype=np.float64)

        values.setflags(write=False)
        return cls(values=values, target=target, label=None if label is None else int(label), mean=mean, std=std,
                   constant=constant, source=source, start=int(start))

    @property
    def length(self) -> int:
        return int(self.values.size)

    @property
    def horizon(self) -> int:
        return 0 if self.target is None else int(self.target.size)

    def normalized(self) -> np.ndarray:
        return (self.values - self.mean) / self.std

    def normalized_target(self) -> np.ndarray:
        if self.target is None:
            raise DataError(f'sample from {self.source} has no forecast target')

        return (self.target - self.mean) / self.std

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class SplitSpec:
    """
    Chronological train/val/test fractions; seed orders the series-level split of
    classification data
    """
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train, self.val, self.test)
        if any(fraction <= 0 for fraction in fractions):
            raise ConfigError(f'data.split fractions must all be positive but received {fractions}')

        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f'data.split fractions must sum to 1 but received {fractions}')


@dataclass(frozen=True)
class DatasetManifest:
    """
    Describes a dataset on disk or a synthetic one

    :type format: String
    :param format: One of ett-csv, ucr, synthetic
    :type path: String
    :param path: Data file; for ucr the training file
    :type columns: Tuple
    :param columns: Feature columns to keep, empty keeps them all (ett-csv)
    :type num_classes: Integer
    :param num_classes: Declared class count (ucr)
    :type expected_length: Integer
    :param expected_length: Declared timesteps, a mismatch is only warned about
    :type test_path: String
    :param test_path: Separate UCR test file

    """
    format: str = 'synthetic'
    path: Optional[str] = None
    columns: Tuple[str, ...] = ()
    num_classes: Optional[int] = None
    expected_length: Optional[int] = None
    test_path: Optional[str] = None

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f'data.format must be one of {FORMATS} but received {self.format!r}')

        if self.format != 'synthetic' and not self.path:
            raise ConfigError(f'data.path is required for format {self.format}')

    @property
    def name(self) -> str:
        if not self.path:
            return self.format

        return os.path.splitext(os.path.basename(self.path))[0]


@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of a synthetic dataset

    :type kind: String
    :param kind: sine (multi-frequency sines), ar1 (AR(1) noise) or classes (one frequency per class)
    :type length: Integer
    :param length: Points per series
    :type count: Integer
    :param count: Series per dataset, per class for kind classes
    :type noise: Float
    :param noise: Std of the additive Gaussian noise, the innovation std for ar1
    :type periods: Tuple
    :param periods: Sine periods in points
    :type coefficient: Float
    :param coefficient: AR(1) coefficient
    :type num_classes: Integer
    :param num_classes: Templates for kind classes

    """
    kind: str = 'sine'
    length: int = 4096
    count: int = 1
    noise: float = 0.0
    periods: Tuple[float, ...] = (64.0,)
    coefficient: float = 0.9
    num_classes: int = 3

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ConfigError(f'data.kind must be one of {SYNTH_KINDS} but received {self.kind!r}')

        if self.length < 1 or self.count < 1:
            raise ConfigError(f'data.length and data.count must be >= 1 but received {self.length}, {self.count}')

        if self.noise < 0:
            raise ConfigError(f'data.noise must be >= 0 but received {self.noise}')

        if not self.periods or any(period <= 0 for period in self.periods):
            raise ConfigError(f'data.periods must be positive but received {self.periods}')

        if self.kind == 'classes' and self.num_classes < 2:
            raise ConfigError(f'data.num_classes must be >= 2 but received {self.num_classes}')


@dataclass
class SyntheticSet:
    series: List[np.ndarray]
    labels: Optional[np.ndarray] = None


@dataclass
class UcrData:
    """
    Series read from a UCR file, labels mapped to 0..C-1 in sorted order of the raw labels
    """
    series: List[np.ndarray]
    labels: np.ndarray
    classes: Tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class DatasetBundle:
    """
    Samples of the three splits plus what the heads and reports need to know about them
    """
    task: str
    train: List[Sample]
    val: List[Sample]
    test: List[Sample]
    horizons: Tuple[int, ...] = ()
    num_classes: Optional[int] = None
    metadata: Dict[str, object] = field(default_factory=dict)


def load_ett_csv(path: str, manifest: DatasetManifest) -> Dict[str, np.ndarray]:
    """
    Function to read an ETT-style CSV into one univariate series per feature column

    :type path: String
    :param path: CSV with a header row, first column the timestamp
    :type manifest: DatasetManifest
    :param manifest: Declared columns and expected length

    :rtype: Dict
    :returns: column name -> series, in file column order

    :raises DataError: if the file is missing, a declared column is absent or a cell is not numeric

    """
    if not os.path.isfile(path):
        raise DataError(f'ETT file {path} does not exist')

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)

    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise DataError(f'cannot parse {path}: {err}') from err

    if frame.shape[1] < 2 or frame.shape[0] == 0:
        raise DataError(f'{path} needs a timestamp column, at least one feature column and one row')

    features = list(frame.columns[1:])
    missing = [column for column in manifest.columns if column not in features]
    if missing:
        raise DataError(f'{path} has no column(s) {missing}, available {features}')

    series = {}
    for column in (manifest.columns or features):
        values = pd.to_numeric(frame[column].str.strip(), errors='coerce').to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            row = int(bad[0])
            # +2: header line and 1-based lines
            raise DataError(f'{path} line {row + 2} column {column!r}: '
                            f'{frame[column].iloc[row]!r} is not a finite number')

        series[column] = values

    if manifest.expected_length is not None and frame.shape[0] != manifest.expected_length:
        LOGGER.warning('%s has %d timesteps, the manifest expects %d', path, frame.shape[0], manifest.expected_length)

    LOGGER.debug('loaded %d series of %d points from %s', len(series), frame.shape[0], path)
    return series


def _canonical_label(raw: str) -> str:
    """Numeric labels compare by value, so '1' and '1.0' are the same class"""
    try:
        value = float(raw)

    except ValueError:
        return raw

    if np.isfinite(value) and value == int(value):
        return str(int(value))

    return repr(value)


def _ucr_label_order(raw: Sequence[str]) -> Tuple[str, ...]:
    unique = set(raw)
    try:
        return tuple(sorted(unique, key=float))

    except ValueError:
        return tuple(sorted(unique))


def load_ucr(path: str, manifest: Optional[DatasetManifest] = None,
             classes: Optional[Sequence[str]] = None) -> UcrData:
    """
    Function to read a UCR file: one record per line, label first, tab or comma separated

    Trailing NaN padding of shorter rows is stripped. A test file is read with the classes of
    its training file so both share one label index.

    :type path: String
    :param path: The file
    :type manifest: DatasetManifest
    :param manifest: Optional declared class count
    :type classes: Sequence
    :param classes: Label order to map onto, None to build it from this file

    :rtype: UcrData
    :returns: The series and 0-based labels

    :raises DataError: if the file is missing, empty, holds a malformed record or a label outside classes

    """
    if not os.path.isfile(path):
        raise DataError(f'UCR file {path} does not exist')

    try:
        frame = pd.read_csv(path, sep=UCR_SEPARATOR, header=None, engine='python', dtype=str,
                            keep_default_na=False, skip_blank_lines=True)

    except pd.errors.EmptyDataError as err:
        raise DataError(f'UCR file {path} holds no records') from err

    except (pd.errors.ParserError, UnicodeDecodeError) as err:
        raise DataError(f'cannot parse {path}: {err}') from err

    frame = frame.fillna('').apply(lambda column: column.str.strip())
    frame = frame[(frame != '').any(axis=1)]
    if frame.shape[0] == 0 or frame.shape[1] < 2:
        raise DataError(f'UCR file {path} holds no records')

    cells = frame.iloc[:, 1:]
    padding = cells.apply(lambda column: column.str.lower().isin(('', 'nan')))
    numbers = cells.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=np.float64)
    bad = np.argwhere(~padding.to_numpy() & ~np.isfinite(numbers))
    if bad.size:
        row, column = (int(item) for item in bad[0])
        raise DataError(f'{path} record {row + 1}: {cells.iat[row, column]!r} is not a finite number')

    raw_labels, series = [], []
    for row in range(frame.shape[0]):
        values = numbers[row]
        finite = np.flatnonzero(np.isfinite(values))
        values = values[:finite[-1] + 1] if finite.size else values[:0]
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise DataError(f'{path} record {row + 1}: a record needs finite values after the label')

        raw_labels.append(_canonical_label(frame.iat[row, 0]))
        series.append(values)

    if classes is None:
        classes = _ucr_label_order(raw_labels)

    classes = tuple(classes)
    index = {label: position for position, label in enumerate(classes)}
    unseen = sorted(set(raw_labels) - set(index))
    if unseen:
        raise DataError(f'{path} holds label(s) {unseen} not among the known classes {list(classes)}')

    if manifest is not None and manifest.num_classes is not None and manifest.num_classes != len(classes):
        LOGGER.warning('%s holds %d classes, the manifest declares %d', path, len(classes), manifest.num_classes)

    return UcrData(series=series, labels=np.array([index[label] for label in raw_labels], dtype=np.int64),
                   classes=classes)


def split_series(length: int, spec: SplitSpec) -> Dict[str, Tuple[int, int]]:
    """
    Function for the chronological [start, stop) ranges of train, val and test

    :type length: Integer
    :param length: Series length
    :type spec: SplitSpec
    :param spec: The fractions

    :rtype: Dict
    :returns: split name -> (start, stop), disjoint and ordered in time

    """
    train_stop = int(round(length * spec.train))
    val_stop = int(round(length * (spec.train + spec.val)))
    return {'train': (0, train_stop), 'val': (train_stop, val_stop), 'test': (val_stop, length)}


def _check_lengths(min_len: int, max_len: int) -> None:
    if min_len < 1 or max_len < min_len:
        raise ConfigError(f'need 1 <= min_len <= max_len but received {min_len}, {max_len}')


def sliding_window_varlen(series, min_len: int = 512, max_len: int = 2048, horizon: int = 96,
                          rng: Optional[np.random.Generator] = None, start: int = 0, stop: Optional[int] = None,
                          stride: Optional[int] = None, source: str = '') -> Iterator[Sample]:
    """
    Function to cut forecasting samples of random length out of one series

    Anchors t run from start + T_eff to stop - horizon every `stride` points, with
    T_eff = min(max_len, stop - start - horizon), so every length in [min_len, T_eff] fits at every
    anchor. Each sample draws T uniformly from that range, context = x[t-T:t] and
    target = x[t:t+horizon]. min_len == max_len gives fixed-length windows.

    :type series: array-like
    :param series: The series
    :type min_len: Integer
    :param min_len: Shortest context Default: 512
    :type max_len: Integer
    :param max_len: Longest context Default: 2048
    :type horizon: Integer
    :param horizon: Target length Default: 96
    :type rng: numpy.random.Generator
    :param rng: Length randomness
    :type start: Integer
    :param start: First index of the split range
    :type stop: Integer
    :param stop: End of the split range Default: series length
    :type stride: Integer
    :param stride: Step between anchors Default: horizon
    :type source: String
    :param source: Source id stamped on each sample

    :rtype: Iterator
    :returns: Samples in anchor order

    :raises DataError: if the range is shorter than min_len + horizon

    """
    _check_lengths(min_len, max_len)
    if horizon < 1:
        raise ConfigError(f'horizon must be >= 1 but received {horizon}')

    values = np.asarray(series, dtype=np.float64)
    stop = values.size if stop is None else stop
    if stop - start < min_len + horizon:
        raise DataError(f'range [{start}, {stop}) of {source or "series"} is shorter than '
                        f'min_len + horizon = {min_len + horizon}')

    rng = rng if rng is not None else np.random.default_rng(0)
    stride = horizon if stride is None else stride
    effective_max = min(max_len, stop - start - horizon)
    for anchor in range(start + effective_max, stop - horizon + 1, stride):
        length = int(rng.integers(min_len, effective_max + 1))
        yield Sample.build(values[anchor - length:anchor], target=values[anchor:anchor + horizon],
                           source=source, start=anchor - length)


def subsample_ucr(series, min_len: int = 512, rng: Optional[np.random.Generator] = None,
                  label: Optional[int] = None, max_len: Optional[int] = None, mode: str = 'index',
                  source: str = '') -> Sample:
    """
    Function for sequential random subsampling of a classification series

    The target length is uniform in [min_len, min(original, max_len)]. In index mode that many
    indices are drawn without replacement and kept in ascending order; crop mode takes a random
    contiguous window instead.

    :type series: array-like
    :param series: The original series
    :type min_len: Integer
    :param min_len: Shortest result Default: 512
    :type rng: numpy.random.Generator
    :param rng: Randomness
    :type label: Integer
    :param label: Class label, carried over unchanged
    :type max_len: Integer
    :param max_len: Longest result Default: the original length
    :type mode: String
    :param mode: index or crop Default: index
    :type source: String
    :param source: Source id stamped on the sample

    :rtype: Sample
    :returns: The subsample

    :raises LengthError: if the original is shorter than min_len

    """
    if mode not in SUBSAMPLE_MODES:
        raise ConfigError(f'subsample mode must be one of {SUBSAMPLE_MODES} but received {mode!r}')

    values = np.asarray(series, dtype=np.float64)
    if values.size < min_len:
        raise LengthError(f'series of length {values.size} is shorter than min_len {min_len}')

    rng = rng if rng is not None else np.random.default_rng(0)
    high = values.size if max_len is None else min(values.size, max_len)
    _check_lengths(min_len, high)
    length = int(rng.integers(min_len, high + 1))
    if mode == 'crop':
        offset = int(rng.integers(0, values.size - length + 1))
        return Sample.build(values[offset:offset + length], label=label, source=source, start=offset)

    indices = np.sort(rng.choice(values.size, size=length, replace=False))
    return Sample.build(values[indices], label=label, source=source, start=int(indices[0]))


def synth_generate(spec: SynthSpec, rng: np.random.Generator) -> SyntheticSet:
    """
    Function to make a reproducible synthetic dataset

    sine sums one unit sine per period with random phases; ar1 filters Gaussian innovations
    through x[t] = a x[t-1] + e[t]; classes gives class k a sine with period periods[0] / (k + 1)
    and a random phase per series.

    :type spec: SynthSpec
    :param spec: The parameters
    :type rng: numpy.random.Generator
    :param rng: Randomness

    :rtype: SyntheticSet
    :returns: The series, with labels for kind classes

    """
    steps = np.arange(spec.length, dtype=np.float64)

    def noise() -> np.ndarray:
        return rng.normal(0.0, spec.noise, size=spec.length) if spec.noise > 0 else np.zeros(spec.length)

    if spec.kind == 'sine':
        series = []
        for _ in range(spec.count):
            phases = rng.uniform(0.0, 2.0 * np.pi, size=len(spec.periods))
            wave = sum(np.sin(2.0 * np.pi * steps / period + phase) for period, phase in zip(spec.periods, phases))
            series.append(wave + noise())

        return SyntheticSet(series=series)

    if spec.kind == 'ar1':
        scale = spec.noise if spec.noise > 0 else 1.0
        return SyntheticSet(series=[lfilter([1.0], [1.0, -spec.coefficient], rng.normal(0.0, scale, size=spec.length))
                                    for _ in range(spec.count)])

    series, labels = [], []
    for label in range(spec.num_classes):
        period = spec.periods[0] / (label + 1)
        for _ in range(spec.count):
            series.append(np.sin(2.0 * np.pi * steps / period + rng.uniform(0.0, 2.0 * np.pi)) + noise())
            labels.append(label)

    return SyntheticSet(series=series, labels=np.array(labels, dtype=np.int64))


def _forecast_samples(channels: Dict[str, np.ndarray], section, split: SplitSpec,
                      rng: np.random.Generator) -> Tuple[Dict[str, List[Sample]], Dict[str, object]]:
    samples = {'train': [], 'val': [], 'test': []}
    ranges = {}
    for name, values in channels.items():
        ranges[name] = split_series(values.size, split)
        for split_name, (start, stop) in ranges[name].items():
            for horizon in section.horizons:
                samples[split_name].extend(sliding_window_varlen(
                    values, min_len=section.min_len, max_len=section.max_len, horizon=horizon, rng=rng,
                    start=start, stop=stop, stride=section.stride, source=name))

    return samples, {'ranges': ranges}


def _permuted_split(count: int, split: SplitSpec) -> Dict[str, np.ndarray]:
    order = derive_rng(split.seed, 'split').permutation(count)
    train_stop = int(round(count * split.train))
    val_stop = int(round(count * (split.train + split.val)))
    return {'train': order[:train_stop], 'val': order[train_stop:val_stop], 'test': order[val_stop:]}


def _classify_samples(series: Sequence[np.ndarray], labels: np.ndarray, section, indices: Dict[str, np.ndarray],
                      rng: np.random.Generator, source: str) -> Dict[str, List[Sample]]:
    samples = {}
    for split_name, chosen in indices.items():
        samples[split_name] = [
            subsample_ucr(series[index], min_len=section.min_len, rng=rng, label=int(labels[index]),
                          max_len=section.max_len, mode=section.subsample_mode, source=f'{source}#{index}')
            for index in chosen]

    return samples


def build_datasets(run_config: 'RunConfig', rng: np.random.Generator) -> DatasetBundle:
    """
    Function to load or generate the configured dataset and cut it into samples

    Forecasting splits every channel chronologically and windows each split on its own.
    Classification splits series with a seeded permutation; a UCR test file, when given, is the
    test split and the training file is split into train and val.

    :type run_config: RunConfig
    :param run_config: The run configuration
    :type rng: numpy.random.Generator
    :param rng: Sampler randomness

    :rtype: DatasetBundle
    :returns: train/val/test samples and metadata

    :raises DataError: if the data cannot be read or a split is too small

    """
    section = run_config.data
    manifest = section.manifest()
    split = section.split_spec(run_config.train.seed)
    metadata = {'format': manifest.format, 'source': manifest.name,
                'split': {'train': split.train, 'val': split.val, 'test': split.test},
                'min_len': section.min_len, 'max_len': section.max_len}

    if section.task == 'forecast':
        if manifest.format == 'ett-csv':
            channels = load_ett_csv(manifest.path, manifest)

        elif manifest.format == 'synthetic':
            generated = synth_generate(section.synth_spec(), derive_rng(run_config.train.seed, 'synthetic'))
            channels = {f'synthetic:{index}': values for index, values in enumerate(generated.series)}

        else:
            raise ConfigError('forecasting needs an ett-csv or synthetic dataset')

        samples, extra = _forecast_samples(channels, section, split, rng)
        metadata.update(extra)
        bundle = DatasetBundle(task='forecast', horizons=tuple(section.horizons), metadata=metadata, **samples)

    else:
        if manifest.format == 'ucr':
            data = load_ucr(manifest.path, manifest)
            series, labels, num_classes = data.series, data.labels, data.num_classes
            if manifest.test_path:
                test = load_ucr(manifest.test_path, manifest, classes=data.classes)
                order = derive_rng(split.seed, 'split').permutation(len(series))
                train_stop = int(round(len(series) * split.train / (split.train + split.val)))
                indices = {'train': order[:train_stop], 'val': order[train_stop:]}
                samples = _classify_samples(series, labels, section, indices, rng, manifest.name)
                samples.update(_classify_samples(test.series, test.labels, section,
                                                 {'test': np.arange(len(test.series))}, rng, f'{manifest.name}.test'))

            else:
                samples = _classify_samples(series, labels, section, _permuted_split(len(series), split), rng,
                                            manifest.name)

        elif manifest.format == 'synthetic':
            generated = synth_generate(section.synth_spec(), derive_rng(run_config.train.seed, 'synthetic'))
            if generated.labels is None:
                raise ConfigError('classification on synthetic data needs data.kind classes')

            num_classes = int(generated.labels.max()) + 1
            samples = _classify_samples(generated.series, generated.labels, section,
                                        _permuted_split(len(generated.series), split), rng, 'synthetic')

        else:
            raise ConfigError('classification needs a ucr or synthetic dataset')

        bundle = DatasetBundle(task='classify', num_classes=num_classes, metadata=metadata, **samples)

    for split_name in ('train', 'val', 'test'):
        if not getattr(bundle, split_name):
            raise DataError(f'the {split_name} split of {manifest.name} holds no samples')

    bundle.metadata['counts'] = {name: len(getattr(bundle, name)) for name in ('train', 'val', 'test')}
    LOGGER.info('dataset %s: %d train, %d val, %d test samples', manifest.name, len(bundle.train), len(bundle.val),
                len(bundle.test))
    return bundle
