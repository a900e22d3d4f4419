# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Logging setup of the semalignvc package.

The root logger of the package (``logging.getLogger('semalignvc')``) gets a console handler
and a file handler when the package is imported. Sub-module loggers inherit both.
While a pipeline stage runs (see :func:`log_stage`) every line carries the stage name::

    [semenc-train] step 200: loss 3.412 (ctc 2.871, sem 0.412, fs 0.129)
"""

from __future__ import absolute_import

import contextlib
import logging
import os
import sys
import threading

__all__ = ['DefaultFormatter', 'RunFileFormatter', 'init_logging', 'change_log_file', 'log_stage']

default_log_dir = os.environ.get('SEMALIGNVC_LOG_DIR', os.path.join(os.path.expanduser('~'), 'tmp'))

_log_state = threading.local()


def _stage_prefix():
    stage = getattr(_log_state, 'stage', None)
    return '[{}] '.format(stage) if stage else ''


@contextlib.contextmanager
def log_stage(stage):
    """Prefix the log lines of the current thread with ``[stage]``.

    Examples
    --------
    >>> with log_stage('lm-train'):
    ...     logger.info("step 10: loss 4.1")  # -> "[lm-train] step 10: loss 4.1"
    """
    previous = getattr(_log_state, 'stage', None)
    _log_state.stage = stage
    try:
        yield
    finally:
        _log_state.stage = previous


class DefaultFormatter(logging.Formatter):
    """Console formatter: one format per message level, stage prefix after the level tag."""

    formats = {
        logging.DEBUG: "DEBUG: %(stage)s%(module)s: %(lineno)d: %(msg)s",
        logging.INFO: "%(stage)s%(msg)s",
        logging.WARNING: "WARNING: %(stage)s%(msg)s",
        logging.ERROR: "ERROR: %(stage)s%(msg)s",
    }

    def __init__(self):
        super(DefaultFormatter, self).__init__(fmt="%(levelno)d: %(msg)s", datefmt=None, style='%')

    def format(self, record):
        record.stage = _stage_prefix()
        format_orig = self._style._fmt
        level = min(record.levelno, logging.ERROR)
        self._style._fmt = self.formats.get(level, format_orig)
        try:
            return logging.Formatter.format(self, record)
        finally:
            self._style._fmt = format_orig


class RunFileFormatter(logging.Formatter):
    """Timestamped formatter of the log files."""

    def __init__(self):
        super(RunFileFormatter, self).__init__('%(asctime)s [%(levelname)s]: %(stage)s%(message)s',
                                               datefmt='%d/%m/%Y %H:%M:%S')

    def format(self, record):
        record.stage = _stage_prefix()
        return super(RunFileFormatter, self).format(record)


def create_file_handler(log_fname):
    """Create a WARNING-level file handler writing to `log_fname`.

    Parameters
    ----------
    log_fname : str
        The file name of the logging file handler.

    Returns
    -------
    file_handler : logging.FileHandler
    """
    file_handler = logging.FileHandler(log_fname)
    file_handler.setFormatter(RunFileFormatter())
    file_handler.setLevel(logging.WARNING)
    return file_handler


def init_logging(log_dir=None):
    """Create the root logger of the semalignvc package.

    The logger has one stream handler (stdout, level DEBUG) and one file handler
    (``<log_dir>/semalignvc.log``, level WARNING). The logger itself is set to INFO,
    so DEBUG messages only show after ``logger.setLevel(logging.DEBUG)``.

    Parameters
    ----------
    log_dir : str, optional
        Folder of the log file. Defaults to ``$SEMALIGNVC_LOG_DIR`` or ``~/tmp``.
    """
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(DefaultFormatter())
    console_handler.setLevel(logging.DEBUG)

    log_dir = log_dir or default_log_dir
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    logger = logging.getLogger('semalignvc')
    logger.handlers = [console_handler, create_file_handler(os.path.join(log_dir, 'semalignvc.log'))]
    logger.setLevel(logging.INFO)
    logger.propagate = False


def change_log_file(logger, fname):
    """Replace the file handler of `logger` by one writing to `fname`.

    Examples
    --------
    >>> import logging
    >>> from semalignvc.logging import change_log_file
    >>> logger = logging.getLogger('semalignvc')
    >>> change_log_file(logger, "/path/of/run_dir/semalignvc.log")
    """
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler):
            handler.close()
    logger.handlers = [h for h in logger.handlers if not isinstance(h, logging.FileHandler)]
    logger.addHandler(create_file_handler(fname))


init_logging()
