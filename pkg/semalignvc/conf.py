# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

import os
import logging
from copy import deepcopy
from configparser import ConfigParser

__all__ = ['ConfigLoader']

logger = logging.getLogger(__name__)

# the default configuration file should be in the directory of the package
curdir = os.path.abspath(os.path.dirname(__file__))
default_conf = os.path.join(curdir, 'config.ini')


def boolean(raw):
    """INI truth value (yes/no, true/false, on/off, 1/0)."""
    try:
        return ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
    except KeyError:
        raise ValueError("not a truth value: '{}'".format(raw))


# option types per section; anything not listed stays a string
option_types = {
    'pipeline': {'seed': int, 'workers': int},
    'corpus': {'speakers': int, 'utts-per-speaker': int, 'min-symbols': int, 'max-symbols': int,
               'test-fraction': float},
    'features': {'sample-rate': int, 'n-fft': int, 'win-length': int, 'hop-length': int, 'n-mels': int,
                 'fmin': float, 'fmax': float, 'f0-min': float, 'f0-max': float,
                 'voicing-threshold': float},
    'quantizer': {'stack': int, 'code-dim': int, 'codebook-size': int, 'encoder-steps': int},
    'text': {'d-text': int},
    'align': {'omega': float, 'dump-alignments': int},
    'semenc': {'layers': int, 'd': int, 'heads': int, 'conv-kernel': int, 'dropout': float,
               'lambda-ctc': float, 'lambda-sem': float, 'lambda-fs': float, 'lr': float,
               'warmup': int, 'steps': int, 'batch-size': int, 'log-every': int},
    'lm': {'layers': int, 'd': int, 'heads': int, 'dropout': float, 'max-len': int, 'lr': float,
           'warmup': int, 'steps': int, 'batch-size': int, 'top-k': int, 'temperature': float,
           'log-every': int},
    'acoustic': {'layers': int, 'd': int, 'heads': int, 'dropout': float, 'sigma-min': float,
                 'ode-steps': int, 'full-mask-prob': float, 'min-mask-ratio': float,
                 'max-mask-ratio': float, 'lr': float, 'warmup': int, 'steps': int,
                 'batch-size': int, 'log-every': int},
    'probe': {'epochs': int, 'lr': float, 'd': int, 'batch-size': int, 'test-fraction': float,
              'ctc-only-ablation': boolean},
    'eval': {'n-pairs': int, 'n-identity': int, 'speaker-probe-epochs': int},
    'vocoder': {'griffin-lim-iters': int},
}


class ConfigLoader(object):
    """
    Examples
    --------
    >>> from semalignvc.conf import ConfigLoader
    >>> conf = ConfigLoader()  # will read default settings
    >>> conf.settings['semenc']['layers']
    4

    >>> new_config_fname = "/path/of/new/config/file"
    >>> settings = conf.update_config(new_config_fname)  # -> new settings based on your config file and default settings
    """

    def __init__(self, filename=None):
        """Initialize the ConfigLoader object.

        Parameters
        ----------
        filename : str
            If provided, ConfigLoader reads settings in this file instead of the default 'config.ini' file.
        """
        if filename is None:
            filename = default_conf
        self._settings = self.load_config(filename)

    @property
    def settings(self):
        return deepcopy(self._settings)

    @classmethod
    def read_params(cls, config, opt, sect, sett):
        """Read option `opt` of section `sect` into `sett`, converted to its declared type."""
        raw = config.get(sect, opt)
        key = sect.lower()
        types = option_types.get(key, {})
        if opt not in types:
            if key in option_types and opt not in cls._string_options(key):
                logger.warning("unknown option '{}' in section [{}]".format(opt, sect))
            sett[opt] = raw
            return
        try:
            sett[opt] = types[opt](raw)
        except ValueError as err:
            raise ValueError("Option '{}' in section [{}] should be {}: {}".format(
                opt, sect, types[opt].__name__, err))

    @staticmethod
    def _string_options(section):
        return {
            'pipeline': {'run-dir', 'stages', 'device'},
            'corpus': {'manifest', 'alphabet'},
            'quantizer': {'token-source'},
            'text': {'text-provider', 'model-dir'},
            'lm': {'sampler'},
            'eval': {'providers', 'dnsmos-command'},
            'vocoder': {'mode', 'command'},
        }.get(section, set())

    @classmethod
    def load_config(cls, config_file):
        """Read settings in a config file into a dict of section dicts."""
        if not os.path.isfile(config_file):
            raise IOError("Cannot find config file: {}".format(config_file))
        sett = dict()
        config = ConfigParser()
        # ConfigParser lower-cases option names by default; keep them as written
        config.optionxform = str
        config.read(config_file)
        for sect in config.sections():
            section = sett.setdefault(sect.lower(), dict())
            for option in config.options(sect):
                cls.read_params(config, option, sect, section)
        return sett

    def update_config(self, config_file):
        """Update settings based on a config file."""
        sett = self.load_config(config_file)
        settings = self.settings  # copy of the default settings
        for sect, options in sett.items():
            settings.setdefault(sect, dict()).update(options)
        return settings


def get_setting(settings, section, option, default=None):
    """Return ``settings[section][option]`` or `default` if missing."""
    return settings.get(section, {}).get(option, default)
