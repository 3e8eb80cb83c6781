"""
File Input Output Utils
"""
import csv
import json
from pathlib import Path
from typing import IO, Any, Dict, Iterable, List, Sequence, Union

import os


def ensure_path(path: Union[str, Path]) -> Path:
    if isinstance(path, Path):
        return path
    return Path(path)


def ensure_directory(directory: Union[str, Path]) -> bool:
    """
    Ensure that directory exists.

    :param directory:
    :return: True if directory was created
    """
    if not os.path.isdir(directory):
        os.makedirs(directory)
        return True
    return False


def dumps_line(row: Dict[str, Any]) -> str:
    """
    One JSON object per line; keys sorted so equal rows are equal bytes.

    >>> dumps_line({'top1': 0.5, 'epoch': 1, 'split': 'test'})
    '{"epoch": 1, "split": "test", "top1": 0.5}'
    """
    return json.dumps(row, sort_keys=True)


class JsonlWriter:
    """Appends line-delimited JSON records, flushing every row."""
    def __init__(self, path: Union[str, Path], truncate: bool = True) -> None:
        self.path = ensure_path(path)
        ensure_directory(self.path.parent)
        self._fp = open(self.path, 'w' if truncate else 'a', newline='\n')

    def write(self, row: Dict[str, Any]) -> None:
        self._fp.write(dumps_line(row) + '\n')
        self._fp.flush()

    def close(self) -> None:
        self._fp.close()

    def __enter__(self) -> 'JsonlWriter':
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path) as fp:
        return [json.loads(line) for line in fp if line.strip()]


def dump_csv(fp: IO[str], header: Sequence[str],
             rows: Iterable[Sequence[Any]]) -> None:
    w = csv.writer(fp, lineterminator='\n')
    w.writerow(header)
    w.writerows(rows)


def write_csv(path: Union[str, Path], header: Sequence[str],
              rows: Iterable[Sequence[Any]]) -> Path:
    path = ensure_path(path)
    ensure_directory(path.parent)
    with open(path, 'w', newline='') as fp:
        dump_csv(fp, header, rows)
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline='') as fp:
        return list(csv.DictReader(fp))

