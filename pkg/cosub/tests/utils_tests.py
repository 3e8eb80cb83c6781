import enum
import io

import pytest

from cosub.tests import TestSetup
import cosub.utils.fio as fio
from cosub.utils import KeyMapper, format_pad, parse_range
from cosub.utils.args import CommandArgs, Repeat, Switch


test = TestSetup(__name__, ensure_empty=True)
log = test.log
fio.ensure_directory(test.dir)


def test_docs():
    import doctest
    import cosub.utils as utils

    for t in (utils, fio):
        r = doctest.testmod(t)
        assert r.attempted > 0, f'There is no doctests in module {t}'
        assert r.failed == 0


def test_parse_range():
    assert parse_range('3..3') == [3]
    assert parse_range('0, 2,7') == [0, 2, 7]
    with pytest.raises(ValueError):
        parse_range('4..1')
    with pytest.raises(ValueError):
        parse_range('a..b')


def test_format_pad_empty():
    assert format_pad([], ['a']) == []


def test_key_mapper():
    class Kind(enum.Enum):
        a = 'alpha'
        b = 'beta'

    m = KeyMapper(Kind)
    assert m.to_key(Kind.b) == 'beta'
    assert m.to_value('alpha') is Kind.a
    assert m.to_key(None) is None


def test_jsonl_and_csv():
    path = test.file_path('rows.jsonl')
    with fio.JsonlWriter(path) as w:
        w.write({'b': 2, 'a': 1.5})
        w.write({'a': None})
    with open(path) as fp:
        assert fp.read() == '{"a": 1.5, "b": 2}\n{"a": null}\n'
    assert fio.read_jsonl(path) == [{'a': 1.5, 'b': 2}, {'a': None}]
    csv_path = fio.write_csv(test.file_path('sub/t.csv'), ['k', 'v'],
                             [(0, 1), (1, 0.25)])
    assert fio.read_csv(csv_path) == [{'k': '0', 'v': '1'},
                                      {'k': '1', 'v': '0.25'}]
    assert not fio.ensure_directory(test.dir)


def test_csv_to_a_stream_quotes_fields():
    out = io.StringIO()
    fio.dump_csv(out, ['name', 'v'], [('a,b', 0.5), ('c', 2)])
    assert out.getvalue() == 'name,v\n"a,b",0.5\nc,2\n'


def test_args():
    ca = CommandArgs()

    @ca.app('test app')
    class App:
        @ca.command(debug=('debug', Switch))
        def __init__(self, debug=False):
            self.debug = debug

        @ca.command('first', n=('count', int), tag=('tags', Repeat),
                    mode=('mode', str, ('x', 'y')))
        def first(self, path, n=3, tag=(), mode='x'):
            return self.debug, path, n, list(tag), mode

    assert ca.main(['first', '--path', 'p']) == (False, 'p', 3, [], 'x')
    assert ca.main(['--debug', 'first', '--path', 'p', '--n', '5',
                    '--tag', 'a', '--tag', 'b', '--mode', 'y']) == \
        (True, 'p', 5, ['a', 'b'], 'y')
    with pytest.raises(SystemExit):
        ca.main(['first', '--path', 'p', '--mode', 'z'])
    with pytest.raises(SystemExit):
        ca.main(['first'])
