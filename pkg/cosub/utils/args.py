"""
Declarative argparse front end: an application class whose ``__init__``
takes the global options and whose decorated methods are subcommands.
Option help comes from keyword arguments of the decorator, either a
string or a ``(help, type[, choices])`` tuple; ``type`` may be
:class:`Switch` for flags or :class:`Repeat` for options that may be
given several times.
"""
from collections import namedtuple
import argparse
from inspect import getfullargspec
from typing import Any, Callable, List, Optional, Sequence


_Opt = namedtuple("_Opt", ['name', 'help', 'has_default', 'default',
                           'type', 'choices'])

Cmd = namedtuple("Cmd", ['name', 'help', 'options'])


class Opt(_Opt):
    def __new__(cls, name, help='', has_default=False, default=None,
                type=None, choices=None):
        if has_default and default is not None:
            help += 'Default is: %r. ' % (default,)
        if choices is not None:
            help += 'Choices are: %r. ' % ([str(s) for s in choices],)
        return _Opt.__new__(cls, name, help, has_default, default, type,
                            choices)

    def add_itself(self, parser):
        parser.add_argument('--%s' % self.name,
                            metavar=self.name, help=self.help,
                            dest=self.name, type=self.type,
                            required=not self.has_default,
                            default=self.default,
                            choices=self.choices)


class Switch(_Opt):
    def __new__(cls, name, help='', default=False):
        return _Opt.__new__(cls, name, help, True, default, bool, None)

    def add_itself(self, parser):
        parser.set_defaults(**{self.name: self.default})
        action = 'store_false' if self.default else 'store_true'
        parser.add_argument('--%s' % self.name,
                            dest=self.name,
                            action=action,
                            help=self.help)


class Repeat(_Opt):
    def __new__(cls, name, help=''):
        return _Opt.__new__(cls, name, help + 'May be repeated. ', True,
                            None, str, None)

    def add_itself(self, parser):
        parser.add_argument('--%s' % self.name, metavar=self.name,
                            dest=self.name, action='append', default=[],
                            help=self.help)


class CommandArgs:
    def __init__(self) -> None:
        self.app_help = ''
        self.app_cls: Optional[Callable[..., Any]] = None
        self.commands: List[Cmd] = []
        self.global_opts: List[_Opt] = []

    def app(self, app_help: str):
        self.app_help = app_help

        def decorate(fn):
            self.app_cls = fn
            return fn
        return decorate

    def command(self, command_help: str = '', **opthelp_kw):
        def decorate(fn):
            options = []
            opt_names, _, _, opt_defaults = getfullargspec(fn)[:4]
            if opt_defaults is None:
                opt_defaults = ()
            def_offset = len(opt_names) - len(opt_defaults)
            for i, n in enumerate(opt_names):
                if i == 0:
                    continue
                opt_type = None
                opt_help = opthelp_kw.get(n, '')
                opt_choices = None
                if isinstance(opt_help, tuple):
                    if len(opt_help) > 2:
                        opt_choices = opt_help[2]
                    opt_type = opt_help[1]
                    opt_help = opt_help[0]
                has_default = i >= def_offset
                default = opt_defaults[i - def_offset] if has_default \
                    else None
                if opt_type is Switch:
                    options.append(Switch(n, opt_help, bool(default)))
                elif opt_type is Repeat:
                    options.append(Repeat(n, opt_help))
                else:
                    options.append(Opt(n, opt_help, has_default, default,
                                       opt_type, opt_choices))
            self.commands.append(Cmd(fn.__name__, command_help, options))
            return fn
        return decorate

    def get_parser(self) -> argparse.ArgumentParser:
        self.parser = argparse.ArgumentParser(description=self.app_help)
        global_cmd = [c for c in self.commands if c.name == '__init__']
        self.parser.set_defaults(command='')
        if len(global_cmd) == 1:
            self.global_opts = global_cmd[0].options
        for opt in self.global_opts:
            opt.add_itself(self.parser)
        subparsers = self.parser.add_subparsers()
        for c in self.commands:
            if c.name == '__init__':
                continue
            subparser = subparsers.add_parser(c.name, help=c.help)
            subparser.description = c.help
            subparser.set_defaults(command=c.name)
            for opt in c.options:
                opt.add_itself(subparser)
        return self.parser

    def parse_args(self, args: Optional[Sequence[str]] = None,
                   namespace=None) -> argparse.Namespace:
        return self.get_parser().parse_args(args, namespace)

    def main(self, args: Optional[Sequence[str]] = None) -> Any:
        return self.run(self.parse_args(args))

    def run(self, args: argparse.Namespace) -> Any:
        def extract_values(opts):
            return {o.name: getattr(args, o.name) for o in opts}

        instance = self.app_cls(**extract_values(self.global_opts))
        for c in self.commands:
            if args.command == c.name:
                return getattr(instance, c.name)(**extract_values(c.options))
        self.parser.print_help()
        return None
