"""
Holds the common needs for scalefusion_ts: the package logger, structured records, pretty
printing, seed splitting and content hashing
"""
import hashlib
import json
import logging
import os
import time
from typing import Any, Dict, IO, Optional

import numpy as np
import yaml

LOGGER = logging.getLogger('scalefusion_ts')


def derive_rng(seed: int, consumer: str) -> np.random.Generator:
    """
    Function to split the root seed deterministically for one consumer of randomness

    :type seed: Integer
    :param seed: The root seed of the run
    :type consumer: String
    :param consumer: A stable consumer name like 'init', 'sampler' or 'pairs'

    :rtype: numpy.random.Generator
    :returns: A generator that only depends on (seed, consumer)

    :raises TypeError: if seed is not an integer or consumer is not a string

    """
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise TypeError(f'param seed must be of type integer but received {type(seed)}')

    if not isinstance(consumer, str):
        raise TypeError(f'param consumer must be of type string but received {type(consumer)}')

    # python's hash() is salted per process, so derive the spawn key from a digest
    key = int.from_bytes(hashlib.sha256(consumer.encode('utf-8')).digest()[:8], 'little')
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def git_blob_hash(data: bytes) -> str:
    """
    Function to hash bytes the way git hashes a blob

    :type data: Bytes
    :param data: The content

    :rtype: String
    :returns: The hex sha1 of 'blob <len>\\0' + content

    """
    digest = hashlib.sha1()
    digest.update(f'blob {len(data)}\0'.encode('ascii'))
    digest.update(data)
    return digest.hexdigest()


def to_plain(value: Any) -> Any:
    """
    Function to turn numpy scalars, tuples and nested containers into plain python values that
    json and yaml can dump

    :type value: Any
    :param value: The value to convert

    :rtype: Any
    :returns: The converted value

    """
    if isinstance(value, dict):
        return {str(key): to_plain(item) for key, item in value.items()}

    if isinstance(value, (list, tuple)):
        return [to_plain(item) for item in value]

    if isinstance(value, np.ndarray):
        return [to_plain(item) for item in value.tolist()]

    if isinstance(value, np.bool_):
        return bool(value)

    if isinstance(value, np.integer):
        return int(value)

    if isinstance(value, np.floating):
        return float(value)

    return value


class RecordWriter:
    """
    This class writes line-delimited JSON records and mirrors each one to the package logger

    :type path: String
    :param path: File to append records to, None keeps records in memory only
    :type record_wall_time: Boolean
    :param record_wall_time: Add a wall_time field (seconds since the writer was made) Default: False

    :rtype: None
    :returns: NA init

    """

    def __init__(self, path: Optional[str] = None, record_wall_time: bool = False) -> None:
        self.path = path
        self.record_wall_time = record_wall_time
        self.records = []
        self._started = time.perf_counter()
        self._handle: Optional[IO[str]] = None
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)

            self._handle = open(path, 'w', encoding='utf-8', newline='\n')  # pylint: disable=consider-using-with

    def __str__(self):  # pragma: no cover
        return f'<RecordWriter {self.path}>'

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def write(self, **fields: Any) -> Dict[str, Any]:
        """
        Method to emit one record

        :type fields: Any
        :param fields: The record fields

        :rtype: Dict
        :returns: The record as written

        """
        record = to_plain(fields)
        if self.record_wall_time:
            record['wall_time'] = round(time.perf_counter() - self._started, 6)

        line = json.dumps(record, sort_keys=True)
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(line + '\n')
            self._handle.flush()

        LOGGER.info(line)
        return record

    def close(self) -> None:
        """
        Method to close the underlying file

        :rtype: None
        :returns: None

        """
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def dump_yaml(data: Any) -> str:
    """
    Function to render data as block-style YAML

    :type data: Any
    :param data: Data built from dicts, lists and scalars

    :rtype: String
    :returns: The YAML text

    """
    return yaml.dump(to_plain(data), default_flow_style=False, indent=4, sort_keys=True)


def print_pretty_yaml(data: Any) -> None:
    """
    Function to print data as YAML

    :type data: Any
    :param data: Data in a dictionary

    :rtype: None
    :return: prints pretty YAML

    """
    text = dump_yaml(data)
    print(text)
    LOGGER.debug(text)
