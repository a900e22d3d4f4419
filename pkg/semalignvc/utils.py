# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Utility functions"""

import codecs
import hashlib
import json
import logging
import os
import tempfile
import time
import zlib
from functools import wraps

import numpy as np
import soundfile as sf
import torch

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000


def timeit(fn):
    @wraps(fn)
    def timer(*args, **kwargs):
        ts = time.time()
        result = fn(*args, **kwargs)
        te = time.time()
        info = "\n************************************" + \
               "\nfunction    = {0}".format(fn.__name__) + \
               "\n  time      = {:.4} sec".format(te - ts) + \
               "\n************************************\n"
        logger.info(info)
        return result

    return timer


def make_dir(dirname):
    """Create directory if not exist."""
    if dirname and not os.path.exists(dirname):
        os.makedirs(dirname)


def fingerprint(obj):
    """Stable sha1 hex digest of a JSON-serializable object (keys sorted)."""
    text = json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha1(text.encode('utf-8')).hexdigest()


def derive_seed(root_seed, name):
    """Seed of the named substream `name` of `root_seed`.

    All randomness of a run flows from one root seed; each module draws its own
    substream so that adding a module does not shift the others.
    """
    seq = np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode('utf-8'))])
    return int(seq.generate_state(1)[0])


def save_json(obj, filename, encoding='utf-8'):
    """Save a JSON-serializable object to file."""
    with codecs.open(filename, 'w', encoding) as fout:
        json.dump(obj, fout, ensure_ascii=False, indent=4, sort_keys=True)


def load_json(filename, encoding='utf-8'):
    """Load an object from a JSON file."""
    with codecs.open(filename, 'r', encoding) as fin:
        return json.load(fin)


def atomic_save(obj, filename):
    """Save `obj` with ``torch.save`` through a temporary file and a rename.

    An interrupted save leaves the previous file (or nothing) in place,
    never a truncated checkpoint.
    """
    dirname = os.path.dirname(os.path.abspath(filename))
    make_dir(dirname)
    fd, tmp_fname = tempfile.mkstemp(prefix='.tmp-', suffix='.pt', dir=dirname)
    try:
        with os.fdopen(fd, 'wb') as fout:
            torch.save(obj, fout)
            fout.flush()
            os.fsync(fout.fileno())
        os.replace(tmp_fname, filename)
    except BaseException:
        if os.path.exists(tmp_fname):
            os.remove(tmp_fname)
        raise
    logger.info("saved %s", filename)


def load_checkpoint(filename):
    """Load a checkpoint written by :func:`atomic_save` onto the CPU."""
    if not os.path.isfile(filename):
        raise IOError("No such checkpoint: {}".format(filename))
    return torch.load(filename, map_location='cpu')


def read_wav(filename, sample_rate=SAMPLE_RATE):
    """Read a mono WAV file as float64 samples in [-1, 1]."""
    wav, sr = sf.read(filename, dtype='float64', always_2d=False)
    if wav.ndim > 1:
        wav = wav.mean(axis=1)
    if sr != sample_rate:
        raise ValueError("Expected {} Hz audio, got {} Hz in {}".format(sample_rate, sr, filename))
    return wav


def write_wav(filename, wav, sample_rate=SAMPLE_RATE):
    """Write float samples as 16-bit PCM, clipping to [-1, 1]."""
    make_dir(os.path.dirname(os.path.abspath(filename)))
    wav = np.clip(np.asarray(wav, dtype=np.float64), -1.0, 1.0)
    sf.write(filename, wav, sample_rate, subtype='PCM_16')


def to_pcm16(wav):
    """Quantize float samples to the 16-bit grid (values stay float)."""
    wav = np.clip(np.asarray(wav, dtype=np.float64), -1.0, 1.0)
    return np.round(wav * 32767.0) / 32767.0
