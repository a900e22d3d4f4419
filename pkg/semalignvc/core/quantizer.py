#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Random-projection quantizer producing the audio tokens.

The projection and the codebook are drawn once from a seed and never trained, so a
quantizer is fully described (and persisted) by its seed and its dimensions.
"""

import logging

import numpy as np
from scipy.spatial.distance import cdist

from semalignvc.utils import fingerprint, load_json, save_json

__all__ = ['RandomQuantizer', 'TokenSequence', 'build_quantizer', 'quantize', 'standardize', 'stack_frames']

logger = logging.getLogger(__name__)


class TokenSequence(object):
    """Audio token ids [T_tok] with their frame rate (tokens per second)."""

    def __init__(self, ids, frame_rate, vocab_size=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("token ids should be a vector, got shape {}".format(ids.shape))
        if ids.size and (ids.min() < 0 or (vocab_size is not None and ids.max() >= vocab_size)):
            raise ValueError("token ids out of range [0, {})".format(vocab_size))
        self.ids = ids
        self.frame_rate = float(frame_rate)

    def __len__(self):
        return self.ids.shape[0]

    def __repr__(self):
        return "TokenSequence(len={}, frame_rate={:.1f})".format(len(self), self.frame_rate)


class RandomQuantizer(object):
    """Frozen projection [stacked_feature_dim x code_dim] and unit-norm codebook [V x code_dim]."""

    def __init__(self, seed, stacked_feature_dim, code_dim, V, stack=2):
        self.seed = int(seed)
        self.stacked_feature_dim = int(stacked_feature_dim)
        self.code_dim = int(code_dim)
        self.V = int(V)
        self.stack = int(stack)
        rng = np.random.default_rng(self.seed)
        # xavier-normal scaling of the projection
        scale = np.sqrt(2.0 / (self.stacked_feature_dim + self.code_dim))
        projection = rng.standard_normal((self.stacked_feature_dim, self.code_dim)) * scale
        codebook = rng.standard_normal((self.V, self.code_dim))
        codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
        projection.setflags(write=False)
        codebook.setflags(write=False)
        self._projection = projection
        self._codebook = codebook

    @property
    def projection(self):
        return self._projection

    @property
    def codebook(self):
        return self._codebook

    def to_dict(self):
        return {'seed': self.seed, 'stacked_feature_dim': self.stacked_feature_dim,
                'code_dim': self.code_dim, 'V': self.V, 'stack': self.stack}

    @classmethod
    def from_dict(cls, item):
        return cls(item['seed'], item['stacked_feature_dim'], item['code_dim'], item['V'],
                   stack=item.get('stack', 2))

    def fingerprint(self):
        return fingerprint(self.to_dict())

    def save(self, filename):
        save_json(self.to_dict(), filename)

    @classmethod
    def load(cls, filename):
        return cls.from_dict(load_json(filename))

    def __repr__(self):
        return "RandomQuantizer(seed={}, dims={}x{}, V={}, stack={})".format(
            self.seed, self.stacked_feature_dim, self.code_dim, self.V, self.stack)


def build_quantizer(seed, stacked_feature_dim, code_dim, V, stack=2):
    """Build a quantizer deterministically from `seed`.

    Raises
    ------
    ValueError
        Non-positive dimensions or ``V < 2``.
    """
    if stacked_feature_dim <= 0 or code_dim <= 0 or stack <= 0:
        raise ValueError("quantizer dimensions should be positive, got feature_dim={}, code_dim={}, "
                         "stack={}".format(stacked_feature_dim, code_dim, stack))
    if V < 2:
        raise ValueError("codebook size V should be at least 2, got {}".format(V))
    return RandomQuantizer(seed, stacked_feature_dim, code_dim, V, stack=stack)


def standardize(frames):
    """Per-utterance, per-channel zero mean and unit variance."""
    frames = np.asarray(frames, dtype=np.float64)
    return (frames - frames.mean(axis=0)) / (frames.std(axis=0) + 1e-5)


def stack_frames(frames, stack):
    """Group non-overlapping runs of `stack` frames: [T x D] -> [T // stack x stack * D]."""
    n = frames.shape[0] // stack
    return frames[:n * stack].reshape(n, stack * frames.shape[1])


def quantize(mel, q, stack=None):
    """Token ids of a mel spectrogram.

    Parameters
    ----------
    mel : MelSpectrogram
    q : RandomQuantizer
    stack : int, optional
        Frames per token, defaults to ``q.stack``.

    Returns
    -------
    TokenSequence
        ``floor(T_audio / stack)`` ids.
    """
    stack = q.stack if stack is None else int(stack)
    if len(mel) < stack:
        raise ValueError("cannot quantize {} frames with stack {}".format(len(mel), stack))
    stacked = stack_frames(standardize(mel.frames), stack)
    if stacked.shape[1] != q.stacked_feature_dim:
        raise ValueError("stacked feature dim {} does not match the quantizer ({})".format(
            stacked.shape[1], q.stacked_feature_dim))
    proj = np.dot(stacked, q.projection)
    proj /= np.linalg.norm(proj, axis=1, keepdims=True) + 1e-12
    ids = cdist(proj, q.codebook, metric='sqeuclidean').argmin(axis=1)
    return TokenSequence(ids, mel.frame_rate / stack, vocab_size=q.V)
