"""
Holds the command line: pretrain, finetune, analyze and schedule subcommands that wire the
configuration, datasets, training and reports together and write their outputs to output_dir
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from scalefusion_ts.analysis import redundancy_report, stack_final_features
from scalefusion_ts.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from scalefusion_ts.common import RecordWriter, derive_rng, dump_yaml, git_blob_hash, print_pretty_yaml
from scalefusion_ts.config import RunConfig, load_config
from scalefusion_ts.data import build_datasets
from scalefusion_ts.errors import EXIT_OK, ConfigError, DataError, ScaleFusionError, exit_code_for
from scalefusion_ts.heads import finetune, evaluate, repeat_last_baseline
from scalefusion_ts.model import ModelParams, encode, pretrain
from scalefusion_ts.numerics import no_tape
from scalefusion_ts.patching import length_interval, schedule
from scalefusion_ts.version import __version__

LOGGER = logging.getLogger('scalefusion_ts')

METRICS_FILE = 'metrics.jsonl'
SUMMARY_FILE = 'summary.yaml'
REPORT_FILE = 'redundancy.txt'


@dataclass
class RunSummary:
    """
    What a command leaves behind in summary.yaml
    """
    command: str
    seed: int
    config: dict
    checkpoint: Optional[str] = None
    checkpoint_hash: Optional[str] = None
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def as_dict(self) -> dict:
        return {'command': self.command, 'seed': self.seed, 'config': self.config, 'checkpoint': self.checkpoint,
                'checkpoint_hash': self.checkpoint_hash, 'metrics': self.metrics,
                'wall_clock': round(self.wall_clock, 3), 'version': __version__}


def _write_summary(config: RunConfig, summary: RunSummary) -> str:
    path = os.path.join(config.output_dir, SUMMARY_FILE)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(dump_yaml(summary.as_dict()))

    LOGGER.info('wrote %s', path)
    return path


def _config_echo(config: RunConfig) -> dict:
    # checkpoint bytes must not depend on output_dir
    echo = config.as_dict()
    echo.pop('output_dir')
    return echo


def _writer(config: RunConfig) -> RecordWriter:
    os.makedirs(config.output_dir, exist_ok=True)
    return RecordWriter(os.path.join(config.output_dir, METRICS_FILE), record_wall_time=config.train.record_wall_time)


def cmd_pretrain(config: RunConfig) -> RunSummary:
    """
    Function to pretrain a fresh model on the configured training split

    :type config: RunConfig
    :param config: Validated configuration

    :rtype: RunSummary
    :returns: The summary, also written to output_dir

    """
    started = time.perf_counter()
    seed = config.train.seed
    model = ModelParams(config.model_config(), derive_rng(seed, 'init'))
    bundle = build_datasets(config, derive_rng(seed, 'sampler'))
    with _writer(config) as writer:
        result = pretrain(model, [sample.normalized() for sample in bundle.train], config.pretrain_config(), writer)

    path = os.path.join(config.output_dir, 'pretrain.ckpt')
    digest = save_checkpoint(path, model, _config_echo(config))
    final = result.history[-1]
    summary = RunSummary(command='pretrain', seed=seed, config=config.as_dict(), checkpoint=path,
                         checkpoint_hash=digest, wall_clock=time.perf_counter() - started,
                         metrics={'steps': result.steps, 'first_step': result.step_losses[0],
                                  'final_epoch': {key: final[key] for key in ('L_recon', 'L_indep', 'L_total')}})
    _write_summary(config, summary)
    return summary


def _load_backbone(config: RunConfig, checkpoint: Optional[str]) -> ModelParams:
    if checkpoint is None or not os.path.isfile(checkpoint):
        LOGGER.warning('checkpoint %s not found, fine-tuning a fresh backbone', checkpoint)
        return ModelParams(config.model_config(), derive_rng(config.train.seed, 'init'))

    model, _ = load_checkpoint(checkpoint)
    if model.config != config.model_config():
        raise ConfigError(f'checkpoint {checkpoint} was built with {model.config.as_dict()} but the run config '
                          f'asks for {config.model_config().as_dict()}')

    model.heads = None
    return model


def _mean_metrics(runs: Sequence[dict]) -> dict:
    return {key: float(np.mean([run[key] for run in runs])) for key in runs[0]}


def cmd_finetune(config: RunConfig, checkpoint: Optional[str] = None) -> RunSummary:
    """
    Function to fine-tune heads (and the backbone unless frozen) and report test metrics

    With train.repeats > 1 every repeat starts from the same backbone with seed + i and the
    mean test metrics are reported; the checkpoint holds the first repeat.

    :type config: RunConfig
    :param config: Validated configuration
    :type checkpoint: String
    :param checkpoint: Pretrained checkpoint, a missing file falls back to a fresh backbone

    :rtype: RunSummary
    :returns: The summary, also written to output_dir

    """
    started = time.perf_counter()
    seed = config.train.seed
    checkpoint = checkpoint if checkpoint is not None else config.train.checkpoint
    model = _load_backbone(config, checkpoint)
    initial = model.snapshot()
    bundle = build_datasets(config, derive_rng(seed, 'sampler'))
    runs, saved = [], None
    with _writer(config) as writer:
        for repeat in range(config.train.repeats):
            model.heads = None
            model.restore(initial)
            cfg = config.finetune_config(num_classes=bundle.num_classes, seed=seed + repeat)
            result = finetune(model, bundle.train, cfg, validation=bundle.val, writer=writer)
            test = evaluate(model, bundle.test)
            runs.append(test)
            writer.write(repeat=repeat, split='test', best_epoch=result.best_epoch, **test)
            if saved is None:
                saved = checkpoint_bytes(model, _config_echo(config))

    path = os.path.join(config.output_dir, 'finetune.ckpt')
    with open(path, 'wb') as handle:
        handle.write(saved)

    metrics = {'test': _mean_metrics(runs), 'repeats': runs}
    if bundle.task == 'forecast':
        metrics['repeat_last_baseline'] = repeat_last_baseline(bundle.test)

    summary = RunSummary(command='finetune', seed=seed, config=config.as_dict(), checkpoint=path,
                         checkpoint_hash=git_blob_hash(saved), metrics=metrics,
                         wall_clock=time.perf_counter() - started)
    _write_summary(config, summary)
    return summary


def cmd_analyze(config: RunConfig, checkpoint: Optional[str] = None) -> RunSummary:
    """
    Function to run the redundancy suite on the deepest-layer features of one split

    :type config: RunConfig
    :param config: Validated configuration
    :type checkpoint: String
    :param checkpoint: Model to extract features with

    :rtype: RunSummary
    :returns: The summary, the report is written to redundancy.txt

    :raises DataError: if the checkpoint is missing or fewer than two samples remain

    """
    started = time.perf_counter()
    checkpoint = checkpoint if checkpoint is not None else config.train.checkpoint
    if checkpoint is None:
        raise DataError('analyze needs a checkpoint')

    model, _ = load_checkpoint(checkpoint)
    bundle = build_datasets(config, derive_rng(config.train.seed, 'sampler'))
    samples = getattr(bundle, config.analysis.split)
    with no_tape():
        encodings = [encode(sample.normalized(), model) for sample in samples]

    report = redundancy_report(stack_final_features(encodings), bins=config.analysis.bins,
                               max_pairs=config.analysis.max_pairs, seed=config.train.seed,
                               variance_target=config.analysis.variance_target)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, REPORT_FILE)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(report.to_record())

    LOGGER.info('wrote %s', path)
    with open(checkpoint, 'rb') as handle:
        digest = git_blob_hash(handle.read())

    summary = RunSummary(command='analyze', seed=config.train.seed, config=config.as_dict(), checkpoint=checkpoint,
                         checkpoint_hash=digest, metrics={'redundancy': report.as_dict()},
                         wall_clock=time.perf_counter() - started)
    _write_summary(config, summary)
    return summary


def cmd_schedule(config: RunConfig, length: int) -> dict:
    """
    Function to print the pyramid schedule of a length and the interval of lengths sharing its depth
    """
    patch = config.model_config().patch
    sched = schedule(length, patch)
    data = sched.as_dict()
    if sched.activated_layers >= 1:
        data['length_interval'] = list(length_interval(sched.activated_layers, patch))

    print_pretty_yaml(data)
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='scalefusion', description='Conv-like ScaleFusion time series transformer')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level Default: INFO')
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument('--config', help='YAML run configuration')
        sub.add_argument('--seed', type=int, help='Override train.seed')
        sub.add_argument('--output-dir', help='Override output_dir')
        sub.add_argument('--epochs', type=int, help='Override train.epochs')

    add_common(subparsers.add_parser('pretrain', help='Pretrain the encoder with the reconstruction loss'))
    for name, text in (('finetune', 'Fine-tune task heads and report test metrics'),
                       ('analyze', 'Write the feature redundancy report')):
        sub = subparsers.add_parser(name, help=text)
        add_common(sub)
        sub.add_argument('--checkpoint', help='Checkpoint to start from')

    sub = subparsers.add_parser('schedule', help='Print the pyramid schedule of a series length')
    sub.add_argument('--config', help='YAML run configuration')
    sub.add_argument('--length', type=int, required=True, help='Series length T')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Function for the console entry point

    :type argv: List
    :param argv: Arguments without the program name Default: sys.argv[1:]

    :rtype: Integer
    :returns: 0 on success, 1 unexpected failure, 2 config error, 3 data error, 4 numeric failure

    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format='%(asctime)s %(levelname)s %(message)s',
                        stream=sys.stderr)
    try:
        if args.command == 'schedule':
            cmd_schedule(load_config(args.config), args.length)
            return EXIT_OK

        config = load_config(args.config, seed=args.seed, output_dir=args.output_dir, epochs=args.epochs)
        if args.command == 'pretrain':
            cmd_pretrain(config)

        elif args.command == 'finetune':
            cmd_finetune(config, args.checkpoint)

        else:
            cmd_analyze(config, args.checkpoint)

    except ScaleFusionError as err:
        LOGGER.error('%s: %s', type(err).__name__, err)
        return exit_code_for(err)

    except Exception as err:  # pylint: disable=broad-except
        LOGGER.exception('%s failed: %s', args.command, err)
        return exit_code_for(err)

    return EXIT_OK
