#!/usr/bin/env python
# -*- encoding: utf-8 -*-

"""Common utilities used in the automated tests of semalignvc.

Attributes
----------
module_path : str
    Full path to this module directory.

Examples
--------
Small toy corpora are rendered on the fly:

>>> from semalignvc.tests.utils import toy_features
>>> feats, q = toy_features(n_speakers=2, utts_per_speaker=3)
>>> len(feats)
6

If you don't need to keep temporary objects on disk use :func:`temporary_file`:

>>> from semalignvc.core.corpus import build_toy_corpus, write_manifest
>>> from semalignvc.tests.utils import temporary_file
>>> records, _ = build_toy_corpus(2, 3, seed=0)
>>> with temporary_file("manifest.jsonl") as tf:
...     write_manifest(records, tf)
"""

import contextlib
import os
import shutil
import tempfile

from semalignvc.conf import ConfigLoader
from semalignvc.core.corpus import build_toy_corpus, load_audio
from semalignvc.core.features import FeatureConfig, UtteranceFeatures, compute_mel, extract_prosody
from semalignvc.core.quantizer import build_quantizer, quantize

module_path = os.path.dirname(__file__)  # needed because sample data files are located in the same folder

TINY_N_MELS = 20
TINY_V = 32
TINY_STACK = 2


def datapath(fname):
    """Full path of `fname` in the test data directory."""
    return os.path.join(module_path, 'data', fname)


def get_tmpfile(suffix):
    """Get full path to file `suffix` in temporary folder.
    This function doesn't create the file (only generates the name).
    """
    return os.path.join(tempfile.gettempdir(), suffix)


@contextlib.contextmanager
def temporary_file(name=""):
    """This context manager creates file `name` in temporary directory and returns its full path.
    Temporary directory with included files will deleted at the end of context. Note, it won't create file.

    Parameters
    ----------
    name : str
        Filename.

    Yields
    ------
    str
        Path to file `name` in temporary directory.
    """
    tmp = tempfile.mkdtemp()
    try:
        yield os.path.join(tmp, name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def tiny_feature_config():
    return FeatureConfig(n_mels=TINY_N_MELS)


def tiny_quantizer(seed=0, config=None, V=TINY_V):
    config = config or tiny_feature_config()
    return build_quantizer(seed, config.n_mels * TINY_STACK, 8, V, stack=TINY_STACK)


def toy_features(n_speakers=2, utts_per_speaker=3, seed=0, config=None, q=None, min_symbols=6, max_symbols=8):
    """Rendered toy utterances with mel, raw prosody and quantizer tokens.

    Returns
    -------
    features : list of UtteranceFeatures
    q : RandomQuantizer
    """
    config = config or tiny_feature_config()
    q = q or tiny_quantizer(seed, config)
    records, _ = build_toy_corpus(n_speakers, utts_per_speaker, seed, min_symbols=min_symbols,
                                  max_symbols=max_symbols)
    features = []
    for rec in records:
        wav = load_audio(rec, sample_rate=config.sample_rate)
        mel = compute_mel(wav, config)
        feats = UtteranceFeatures(rec.id, rec.speaker_id, rec.text, mel, extract_prosody(wav, config))
        feats.tokens = quantize(mel, q)
        features.append(feats)
    return features, q


def tiny_settings(run_dir=None):
    """Default settings shrunk to a pipeline that runs in a few minutes on a laptop."""
    settings = ConfigLoader().update_config(datapath('config_test.ini'))
    if run_dir is not None:
        settings['pipeline']['run-dir'] = run_dir
    return settings
