"""
Holds the checkpoint format: a magic line, an 8-byte little-endian header length, a YAML header
and float64 little-endian tensor payloads in name order
"""
import logging
import os
import struct
from typing import Optional, Tuple

import numpy as np
import yaml

from scalefusion_ts.common import git_blob_hash, to_plain
from scalefusion_ts.errors import DataError
from scalefusion_ts.heads import HeadBank
from scalefusion_ts.model import ModelConfig, ModelParams

LOGGER = logging.getLogger('scalefusion_ts')

MAGIC = b'SCALEFUSION-CKPT\n'
FORMAT_VERSION = 1
HEADER_LENGTH = struct.Struct('<Q')


def checkpoint_bytes(params: ModelParams, config_echo: Optional[dict] = None) -> bytes:
    """
    Function to serialize a model, and its heads when attached

    :type params: ModelParams
    :param params: The model
    :type config_echo: Dict
    :param config_echo: Run configuration stored alongside for reference

    :rtype: Bytes
    :returns: The checkpoint, identical for identical parameters and config

    """
    named = params.named_parameters()
    tensors, payloads, offset = [], [], 0
    for name in sorted(named):
        payload = np.ascontiguousarray(named[name].data, dtype='<f8').tobytes()
        tensors.append({'name': name, 'shape': list(named[name].shape), 'offset': offset})
        payloads.append(payload)
        offset += len(payload)

    header = {
        'format_version': FORMAT_VERSION,
        'model': params.config.as_dict(),
        'heads': params.heads.describe() if params.heads is not None else None,
        'config': to_plain(config_echo or {}),
        'tensors': tensors,
    }
    text = yaml.safe_dump(header, default_flow_style=False, sort_keys=True).encode('utf-8')
    return MAGIC + HEADER_LENGTH.pack(len(text)) + text + b''.join(payloads)


def save_checkpoint(path: str, params: ModelParams, config_echo: Optional[dict] = None) -> str:
    """
    Function to write a checkpoint file

    :type path: String
    :param path: Destination
    :type params: ModelParams
    :param params: The model
    :type config_echo: Dict
    :param config_echo: Run configuration stored alongside

    :rtype: String
    :returns: The git-style blob hash of the written bytes

    """
    data = checkpoint_bytes(params, config_echo)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, 'wb') as handle:
        handle.write(data)

    digest = git_blob_hash(data)
    LOGGER.info('wrote checkpoint %s (%d bytes, blob %s)', path, len(data), digest)
    return digest


def read_header(data: bytes) -> Tuple[dict, int]:
    """
    Function to parse the header of checkpoint bytes

    :rtype: Tuple
    :returns: (header, offset of the first payload byte)

    :raises DataError: if the bytes are not a checkpoint of a known version

    """
    if not data.startswith(MAGIC):
        raise DataError('not a scalefusion checkpoint, the magic line is missing')

    start = len(MAGIC) + HEADER_LENGTH.size
    if len(data) < start:
        raise DataError('checkpoint is truncated inside the header length')

    (length,) = HEADER_LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < start + length:
        raise DataError('checkpoint is truncated inside the header')

    header = yaml.safe_load(data[start:start + length].decode('utf-8'))
    if not isinstance(header, dict) or header.get('format_version') != FORMAT_VERSION:
        raise DataError(f'unsupported checkpoint header version {header.get("format_version") if header else None}')

    return header, start + length


def load_checkpoint(path: str) -> Tuple[ModelParams, dict]:
    """
    Function to rebuild a model and its heads from a checkpoint file

    :type path: String
    :param path: The checkpoint

    :rtype: Tuple
    :returns: (model, header)

    :raises DataError: if the file is missing, malformed or does not match its header

    """
    if not os.path.isfile(path):
        raise DataError(f'checkpoint {path} does not exist')

    with open(path, 'rb') as handle:
        data = handle.read()

    header, base = read_header(data)
    params = ModelParams(ModelConfig.from_dict(header['model']), np.random.default_rng(0))
    if header.get('heads'):
        described = header['heads']
        HeadBank.create(params.config, described['task'], described.get('horizons') or (),
                        described.get('num_classes')).attach(params)

    named = params.named_parameters()
    stored = {entry['name'] for entry in header['tensors']}
    if stored != set(named):
        raise DataError(f'checkpoint tensors do not match the model: missing {sorted(set(named) - stored)[:5]}, '
                        f'unexpected {sorted(stored - set(named))[:5]}')

    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape))
        start = base + entry['offset']
        if len(data) < start + 8 * count:
            raise DataError(f'checkpoint is truncated inside tensor {entry["name"]}')

        named[entry['name']].assign(np.frombuffer(data, dtype='<f8', count=count, offset=start).reshape(shape))

    LOGGER.info('loaded checkpoint %s with %d tensors', path, len(named))
    return params, header
