"""
JSON-lines run logs: the first record echoes the configuration, every later
record is one iteration or epoch, each tagged with a ``kind``.
"""

import json

from .exceptions import IoError


class RunLog(object):
    """
    Append-only JSON-lines writer. With no *path* the records are only kept
    in :attr:`records`, which is what tests and in-process callers read.
    """

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = None
        if path is not None:
            try:
                self._fh = open(path, 'w', encoding='utf-8')
            except OSError as exc:
                raise IoError('cannot open run log {}: {}'.format(path, exc))

    def write(self, kind, **fields):
        record = dict(kind=kind, **fields)
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + '\n')
            self._fh.flush()
        return record

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def read_run_log(path):
    """
    Returns the records of a run log as a list of dicts.
    """
    try:
        with open(path, encoding='utf-8') as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError('cannot read run log {}: {}'.format(path, exc))
