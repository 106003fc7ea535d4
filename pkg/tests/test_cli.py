import pytest
import os
import sys
import json
import yaml
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.checkpoint import read_header
from scalefusion_ts.cli import build_parser, cmd_schedule, main
from scalefusion_ts.config import load_config


def read_summary(output_dir):
    with open(os.path.join(output_dir, 'summary.yaml'), 'r', encoding='utf-8') as handle:
        return yaml.safe_load(handle)


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_schedule_command(capsys, clean_output_env):
    assert main(['schedule', '--length', '528']) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data['activated_layers'] == 6
    assert data['length_interval'] == [528, 1039]


def test_schedule_toy(toy_config_path, clean_output_env):
    data = cmd_schedule(load_config(toy_config_path), 40)
    assert data['activated_layers'] == 4
    assert data['length_interval'] == [36, 67]


def test_schedule_too_long(clean_output_env):
    assert main(['schedule', '--length', '4096']) == 3


def test_bad_config_exit_code(tmp_path, clean_output_env):
    bad = tmp_path / 'bad.yaml'
    bad.write_text('model:\n    heads: 3\n')
    assert main(['pretrain', '--config', str(bad), '--output-dir', str(tmp_path / 'out')]) == 2


def test_missing_data_exit_code(tmp_path, clean_output_env):
    config = tmp_path / 'ett.yaml'
    config.write_text('model:\n    patch_len: 4\n    stride: 4\n    base_dim: 4\n    max_len: 80\n    heads: 2\n'
                      '    d_ff: 8\n'
                      f'data:\n    format: ett-csv\n    path: {tmp_path / "missing.csv"}\n    min_len: 32\n'
                      '    max_len: 80\n    horizons: [8]\n')
    assert main(['pretrain', '--config', str(config), '--output-dir', str(tmp_path / 'out')]) == 3


def test_pretrain_finetune_analyze(toy_config_path, tmp_path, clean_output_env):
    pretrain_dir = str(tmp_path / 'pretrain')
    assert main(['pretrain', '--config', toy_config_path, '--output-dir', pretrain_dir]) == 0
    checkpoint = os.path.join(pretrain_dir, 'pretrain.ckpt')
    summary = read_summary(pretrain_dir)
    assert summary['command'] == 'pretrain'
    assert summary['metrics']['steps'] == 2
    assert summary['config']['train']['seed'] == 7
    with open(checkpoint, 'rb') as handle:
        header, _ = read_header(handle.read())

    assert header['config']['model']['max_len'] == 80
    assert 'output_dir' not in header['config']
    with open(os.path.join(pretrain_dir, 'metrics.jsonl'), 'r', encoding='utf-8') as handle:
        records = [json.loads(line) for line in handle]

    assert records[0]['epoch'] == 1
    assert 'L_total' in records[0]

    finetune_dir = str(tmp_path / 'finetune')
    assert main(['finetune', '--config', toy_config_path, '--output-dir', finetune_dir,
                 '--checkpoint', checkpoint]) == 0
    summary = read_summary(finetune_dir)
    assert set(summary['metrics']['test']) == {'loss', 'mse', 'mae'}
    assert set(summary['metrics']['repeat_last_baseline']) == {'mse', 'mae'}
    assert os.path.isfile(os.path.join(finetune_dir, 'finetune.ckpt'))

    analyze_dir = str(tmp_path / 'analyze')
    assert main(['analyze', '--config', toy_config_path, '--output-dir', analyze_dir,
                 '--checkpoint', checkpoint]) == 0
    with open(os.path.join(analyze_dir, 'redundancy.txt'), 'r', encoding='utf-8') as handle:
        keys = [line.split('=')[0] for line in handle.read().splitlines()]

    assert keys == sorted(keys)
    assert {'pearson_abs', 'spearman_abs', 'mutual_info', 'pca_proportion', 'meta.mi_bins'} <= set(keys)


def test_pretrain_is_reproducible(toy_config_path, tmp_path, clean_output_env):
    first, second = str(tmp_path / 'a'), str(tmp_path / 'b')
    assert main(['pretrain', '--config', toy_config_path, '--output-dir', first, '--seed', '3']) == 0
    assert main(['pretrain', '--config', toy_config_path, '--output-dir', second, '--seed', '3']) == 0
    assert read_summary(first)['checkpoint_hash'] == read_summary(second)['checkpoint_hash']


def test_finetune_without_checkpoint(toy_config_path, tmp_path, clean_output_env):
    output_dir = str(tmp_path / 'fresh')
    assert main(['finetune', '--config', toy_config_path, '--output-dir', output_dir,
                 '--checkpoint', str(tmp_path / 'missing.ckpt')]) == 0
    assert read_summary(output_dir)['command'] == 'finetune'


def test_analyze_needs_checkpoint(toy_config_path, tmp_path, clean_output_env):
    assert main(['analyze', '--config', toy_config_path, '--output-dir', str(tmp_path)]) == 3


def test_unexpected_failure_exit_code(toy_config_path, tmp_path, clean_output_env, caplog):
    blocker = tmp_path / 'not_a_directory'
    blocker.write_text('')
    assert main(['pretrain', '--config', toy_config_path, '--output-dir', str(blocker)]) == 1
    assert any(record.exc_info for record in caplog.records if 'pretrain failed' in record.getMessage())
