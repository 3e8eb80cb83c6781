from logging import getLogger
import os
import shutil
import sys
import time

import numpy as np


pyenv = 'py%d' % sys.version_info.minor


class TestSetup:
    '''
    Per test module scratch directory ``test-out/<pyenv>/<module>`` and
    a logger named after the module.

    >>> t = TestSetup('cosub.tests.doc', root='test-out')
    >>> t.dir.endswith(os.path.join('cosub.tests.doc'))
    True
    '''
    def __init__(self, name, log_name=None, root=None,
                 ensure_empty=False):
        self.log = getLogger(name if log_name is None else log_name)
        if root is None:
            root = os.path.abspath("test-out")
        self.dir = os.path.join(root, pyenv, name)
        if ensure_empty:
            self.ensure_empty()

    def ensure_empty(self):
        ensure_no_dir(self.dir)
        ensure_dir(self.dir)

    def file_path(self, file):
        return os.path.join(self.dir, file)

    def subdir(self, name, ensure_empty=True):
        d = self.file_path(name)
        if ensure_empty:
            ensure_no_dir(d)
        ensure_dir(d)
        return d


def seeded(seed=0):
    return np.random.default_rng(seed)


def ensure_dir(d):
    if not os.path.isdir(d):
        os.makedirs(d)


def ensure_no_dir(dir):
    if os.path.isdir(dir):
        shutil.rmtree(dir)
        for _ in range(30):
            time.sleep(.01)
            if os.path.isdir(dir):
                shutil.rmtree(dir)
            else:
                break
