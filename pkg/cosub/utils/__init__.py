import enum
import sys
from typing import Any, Callable, Iterable, List, Optional, Sequence


def format_pad(data: Sequence[Any], columns: Sequence[Any],
               get: Optional[Callable[[Any, Any], Any]] = None) -> List[str]:
    '''
    Left aligned columns separated by two spaces. ``None`` renders as
    an empty cell, floats with 4 significant digits.

    >>> for line in format_pad([{'k': 1, 'n': 8}, {'k': 12, 'n': None}],
    ...                        ['k', 'n']):
    ...     print(repr(line))
    '  1   8'
    '  12  '
    >>> format_pad([(0.123456, 'x')], [0, 1])
    ['  0.1235  x']
    '''
    if get is None:
        get = lambda r, c: r[c]
    if len(data) == 0:
        return []
    sdata = [[_cell(get(r, c)) for r in data] for c in columns]
    max_lens = [max(len(cell) for cell in col) for col in sdata]
    lines = []
    for irow in range(len(data)):
        pad = 2
        srow = ''
        for icol in range(len(columns)):
            s = sdata[icol][irow]
            srow += ' ' * pad + s
            pad = max_lens[icol] - len(s) + 2
        lines.append(srow)
    return lines


def _cell(v: Any) -> str:
    if v is None:
        return ''
    if isinstance(v, float):
        return f'{v:.4g}'
    return str(v)


def print_pad(data: Sequence[Any], columns: Sequence[Any],
              get: Optional[Callable[[Any, Any], Any]] = None,
              file=None) -> None:
    for line in format_pad(data, columns, get):
        print(line, file=sys.stdout if file is None else file)


class KeyMapper:
    '''
    Mapper that extracts keys out of sequence of values
    and creates mapping from these keys to values.

    >>> class Kind(enum.Enum):
    ...     a = 'alpha'
    ...     b = 'beta'

    >>> m = KeyMapper(Kind)
    >>> list(m.keys())
    ['alpha', 'beta']
    >>> m.to_value('beta')
    <Kind.b: 'beta'>
    >>> m.to_key(Kind.a)
    'alpha'
    >>> m.to_value(None)
    >>> m.to_key(None)

    With custom `extract_key` lambda:
    >>> m2 = KeyMapper(Kind, extract_key=lambda v: v.name)
    >>> m2.to_value('b')
    <Kind.b: 'beta'>
    '''
    def __init__(self, values: Iterable[Any],
                 extract_key: Optional[Callable[[Any], Any]] = None) -> None:
        if extract_key is None:
            extract_key = lambda v: v.value
        self._extract_key = extract_key
        self._altkey_dict = {self._extract_key(v): v for v in values}

    def to_key(self, val: Any) -> Any:
        if val is None:
            return val
        return self._extract_key(val)

    def to_value(self, key: Any) -> Any:
        if key is None:
            return None
        return self._altkey_dict[key]

    def keys(self):
        return self._altkey_dict.keys()


def parse_range(s: str) -> List[int]:
    '''
    Inclusive integer range ``a..b`` or a comma separated list.

    >>> parse_range('0..3')
    [0, 1, 2, 3]
    >>> parse_range('5')
    [5]
    >>> parse_range('1,4')
    [1, 4]
    '''
    if '..' in s:
        a, b = s.split('..', 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f'empty range: {s!r}')
        return list(range(lo, hi + 1))
    return [int(v) for v in s.split(',') if v.strip()]
