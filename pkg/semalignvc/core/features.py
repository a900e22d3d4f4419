#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Log-mel spectrograms, pitch and energy, and utterance-level prosody normalization.

All feature streams share one frame grid: frame `j` is centered on sample ``j * hop``
and an utterance of `n` samples has ``ceil(n / hop)`` frames.
"""

import hashlib
import logging
import math
import os
import re

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from semalignvc.core.corpus import load_audio
from semalignvc.core.handler import Paralleler
from semalignvc.core.quantizer import TokenSequence
from semalignvc.utils import SAMPLE_RATE, fingerprint, make_dir

__all__ = ['FeatureConfig', 'MelSpectrogram', 'ProsodyTrack', 'UtteranceFeatures',
           'compute_mel', 'extract_prosody', 'normalize_prosody', 'pool_prosody',
           'extract_features', 'FeatureCache', 'FeatureHandler']

logger = logging.getLogger(__name__)

MEL_EPS = 1e-5
ENERGY_EPS = 1e-8
# mean power below which a frame is never voiced
VOICING_MIN_POWER = 1e-4
_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


class FeatureConfig(object):
    """Analysis parameters shared by mel, pitch and energy extraction."""

    def __init__(self, sample_rate=SAMPLE_RATE, n_fft=512, win_length=400, hop_length=160, n_mels=80,
                 fmin=0.0, fmax=8000.0, f0_min=60.0, f0_max=400.0, voicing_threshold=0.5):
        if win_length > n_fft:
            raise ValueError("win_length ({}) should not exceed n_fft ({})".format(win_length, n_fft))
        if hop_length <= 0 or n_mels <= 0:
            raise ValueError("hop_length and n_mels should be positive")
        if not 0 < f0_min < f0_max < sample_rate / 2:
            raise ValueError("invalid f0 range [{}, {}]".format(f0_min, f0_max))
        self.sample_rate = int(sample_rate)
        self.n_fft = int(n_fft)
        self.win_length = int(win_length)
        self.hop_length = int(hop_length)
        self.n_mels = int(n_mels)
        self.fmin = float(fmin)
        self.fmax = float(fmax)
        self.f0_min = float(f0_min)
        self.f0_max = float(f0_max)
        self.voicing_threshold = float(voicing_threshold)
        self._mel_basis = None

    @classmethod
    def from_settings(cls, settings):
        sect = settings.get('features', {})
        kwargs = {
            'sample_rate': sect.get('sample-rate', SAMPLE_RATE),
            'n_fft': sect.get('n-fft', 512),
            'win_length': sect.get('win-length', 400),
            'hop_length': sect.get('hop-length', 160),
            'n_mels': sect.get('n-mels', 80),
            'fmin': sect.get('fmin', 0.0),
            'fmax': sect.get('fmax', 8000.0),
            'f0_min': sect.get('f0-min', 60.0),
            'f0_max': sect.get('f0-max', 400.0),
            'voicing_threshold': sect.get('voicing-threshold', 0.5),
        }
        return cls(**kwargs)

    @property
    def frame_rate(self):
        return self.sample_rate / float(self.hop_length)

    @property
    def mel_basis(self):
        """Mel filterbank [n_mels x (n_fft // 2 + 1)]."""
        if self._mel_basis is None:
            self._mel_basis = librosa.filters.mel(sr=self.sample_rate, n_fft=self.n_fft, n_mels=self.n_mels,
                                                  fmin=self.fmin, fmax=self.fmax)
        return self._mel_basis

    def n_frames(self, n_samples):
        return int(math.ceil(n_samples / float(self.hop_length)))

    def to_dict(self):
        return {
            'sample_rate': self.sample_rate, 'n_fft': self.n_fft, 'win_length': self.win_length,
            'hop_length': self.hop_length, 'n_mels': self.n_mels, 'fmin': self.fmin, 'fmax': self.fmax,
            'f0_min': self.f0_min, 'f0_max': self.f0_max, 'voicing_threshold': self.voicing_threshold,
        }

    def fingerprint(self):
        return fingerprint(self.to_dict())

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_mel_basis'] = None
        return state


class MelSpectrogram(object):
    """Log-mel magnitudes, frames [T x n_mels]."""

    def __init__(self, frames, frame_rate):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("mel frames should be a non-empty [T x n_mels] matrix, got shape {}".format(
                frames.shape))
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain non-finite values")
        self.frames = frames
        self.frame_rate = float(frame_rate)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_mels(self):
        return self.frames.shape[1]

    def slice(self, start, end):
        return MelSpectrogram(self.frames[start:end], self.frame_rate)


class ProsodyTrack(object):
    """Per-frame log-f0 (0 where unvoiced), voicing flags and log-energy."""

    def __init__(self, f0, voicing, energy):
        f0 = np.asarray(f0, dtype=np.float64)
        voicing = np.asarray(voicing, dtype=bool)
        energy = np.asarray(energy, dtype=np.float64)
        if not (f0.shape == voicing.shape == energy.shape) or f0.ndim != 1:
            raise ValueError("f0, voicing and energy should be vectors of one length, got {}, {}, {}".format(
                f0.shape, voicing.shape, energy.shape))
        if np.any(f0[~voicing] != 0.0):
            raise ValueError("f0 should be 0 on unvoiced frames")
        self.f0 = f0
        self.voicing = voicing
        self.energy = energy

    def __len__(self):
        return self.f0.shape[0]

    def slice(self, start, end):
        return ProsodyTrack(self.f0[start:end], self.voicing[start:end], self.energy[start:end])

    def as_matrix(self):
        """[T x 3] matrix with columns f0, voicing, energy."""
        return np.stack([self.f0, self.voicing.astype(np.float64), self.energy], axis=1)


def _check_length(waveform, config):
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ValueError("expected a mono waveform, got shape {}".format(waveform.shape))
    if waveform.shape[0] < config.win_length:
        raise ValueError("waveform of {} samples is shorter than one analysis window ({} samples)".format(
            waveform.shape[0], config.win_length))
    return waveform


def compute_mel(waveform, config):
    """Log-mel spectrogram with ``ceil(samples / hop)`` frames.

    Parameters
    ----------
    waveform : numpy.ndarray
        Mono samples.
    config : FeatureConfig

    Returns
    -------
    MelSpectrogram
    """
    waveform = _check_length(waveform, config)
    spec = np.abs(librosa.stft(waveform, n_fft=config.n_fft, hop_length=config.hop_length,
                               win_length=config.win_length, window='hann', center=True,
                               pad_mode='constant'))
    mel = np.dot(config.mel_basis, spec)[:, :config.n_frames(waveform.shape[0])]
    return MelSpectrogram(np.log(mel + MEL_EPS).T, config.frame_rate)


def _frames(waveform, config, left, length):
    """Frames of `length` samples starting `left` samples before each frame center."""
    n_frames = config.n_frames(waveform.shape[0])
    padded = np.pad(waveform, (left, length + config.hop_length))
    windows = sliding_window_view(padded, length)[::config.hop_length]
    return windows[:n_frames]


def _frame_energy(waveform, config):
    frames = _frames(waveform, config, config.win_length // 2, config.win_length)
    return np.sum(frames ** 2, axis=1)


def _pyin_frame_length(config):
    """Smallest power of two holding two periods of the lowest pitch (pyin analyses half a frame)."""
    return 2 ** int(math.ceil(math.log2(2.0 * (config.sample_rate / config.f0_min + 1))))


def _pitch(waveform, config):
    """Per-frame pitch (Hz, 0 where unvoiced) and pyin voicing on the mel frame grid."""
    n_frames = config.n_frames(waveform.shape[0])
    f0, voiced_flag, voiced_prob = librosa.pyin(waveform, fmin=config.f0_min, fmax=config.f0_max,
                                                sr=config.sample_rate, frame_length=_pyin_frame_length(config),
                                                hop_length=config.hop_length, center=True)
    pitch = np.nan_to_num(f0[:n_frames], nan=0.0)
    voiced = voiced_flag[:n_frames] & (voiced_prob[:n_frames] >= config.voicing_threshold)
    return pitch, voiced


def extract_prosody(waveform, config):
    """Log-f0, voicing and log-energy on the mel frame grid.

    Pitch comes from probabilistic YIN. A frame is voiced when pyin marks it voiced with
    a probability of at least ``config.voicing_threshold``, the frame is not near-silent
    and the pitch falls in ``[f0_min, f0_max]``.

    Returns
    -------
    ProsodyTrack
    """
    waveform = _check_length(waveform, config)
    power = _frame_energy(waveform, config)
    energy = np.log(power + ENERGY_EPS)
    pitch, voiced = _pitch(waveform, config)
    voicing = (voiced
               & (power / config.win_length >= VOICING_MIN_POWER)
               & (pitch >= config.f0_min) & (pitch <= config.f0_max))
    f0 = np.where(voicing, np.log(np.maximum(pitch, 1e-12)), 0.0)
    return ProsodyTrack(f0, voicing, energy)


def normalize_prosody(p):
    """Utterance-level mean normalization of log-f0 (voiced frames only) and energy.

    Without voiced frames, f0 stays all zeros.
    """
    f0 = np.zeros_like(p.f0)
    if p.voicing.any():
        voiced = p.f0[p.voicing]
        f0[p.voicing] = voiced - voiced.mean()
    energy = p.energy - p.energy.mean()
    return ProsodyTrack(f0, p.voicing.copy(), energy)


def pool_prosody(p, stack):
    """Downsample a prosody track by `stack` frames (the token rate).

    Per group: mean log-f0 over voiced frames (0 if none), voiced if at least half of
    the frames are, mean energy. Trailing frames that do not fill a group are dropped.

    Returns
    -------
    numpy.ndarray
        [T // stack x 3] matrix with columns f0, voicing, energy.
    """
    n = len(p) // stack
    if n < 1:
        raise ValueError("cannot pool {} frames by {}".format(len(p), stack))
    f0 = p.f0[:n * stack].reshape(n, stack)
    voiced = p.voicing[:n * stack].reshape(n, stack)
    energy = p.energy[:n * stack].reshape(n, stack)
    counts = voiced.sum(axis=1)
    voicing = counts * 2 >= stack
    pooled_f0 = np.where(counts > 0, f0.sum(axis=1) / np.maximum(counts, 1), 0.0)
    pooled_f0 = np.where(voicing, pooled_f0, 0.0)
    return np.stack([pooled_f0, voicing.astype(np.float64), energy.mean(axis=1)], axis=1)


class UtteranceFeatures(object):
    """Features of one utterance: mel, raw prosody and (once tokenized) audio tokens."""

    def __init__(self, utt_id, speaker_id, text, mel, prosody, tokens=None):
        if len(mel) != len(prosody):
            raise ValueError("mel ({}) and prosody ({}) frame counts differ for '{}'".format(
                len(mel), len(prosody), utt_id))
        self.utt_id = utt_id
        self.speaker_id = speaker_id
        self.text = text
        self.mel = mel
        self.prosody = prosody
        self.tokens = tokens

    def __len__(self):
        return len(self.mel)

    def trim(self, n_frames):
        """Copy restricted to the first `n_frames` frames (tokens are dropped)."""
        return UtteranceFeatures(self.utt_id, self.speaker_id, self.text, self.mel.slice(0, n_frames),
                                 self.prosody.slice(0, n_frames))

    def pool_prosody(self, stack):
        """Normalized prosody at the token rate, [T // stack x 3]."""
        return pool_prosody(normalize_prosody(self.prosody), stack)

    def __repr__(self):
        return "UtteranceFeatures(id={!r}, frames={}, tokens={})".format(
            self.utt_id, len(self), None if self.tokens is None else len(self.tokens))


def extract_features(record, config, root=None):
    """Load the audio of `record` and compute mel and prosody."""
    wav = load_audio(record, root=root, sample_rate=config.sample_rate)
    return UtteranceFeatures(record.id, record.speaker_id, record.text,
                             compute_mel(wav, config), extract_prosody(wav, config))


class FeatureCache(object):
    """One ``.npz`` container per utterance id.

    A container whose feature fingerprint differs from the current config is ignored;
    its tokens are ignored when their fingerprint differs from the requested one.
    """

    def __init__(self, cache_dir, config):
        self.cache_dir = cache_dir
        self.config = config
        self.fingerprint = config.fingerprint()
        make_dir(cache_dir)

    def path(self, utt_id):
        """Container of `utt_id`: a filesystem-safe slug of the id plus a digest of the full id."""
        slug = _UNSAFE.sub('_', utt_id).strip('._')[:64]
        digest = hashlib.sha1(utt_id.encode('utf-8')).hexdigest()[:12]
        return os.path.join(self.cache_dir, '{}-{}.npz'.format(slug, digest))

    def save(self, feats, tokens_fingerprint=''):
        tokens = np.asarray([] if feats.tokens is None else feats.tokens.ids, dtype=np.int64)
        token_rate = 0.0 if feats.tokens is None else feats.tokens.frame_rate
        fname = self.path(feats.utt_id)
        tmp_fname = fname + '.tmp.npz'
        np.savez(tmp_fname, mel=feats.mel.frames, f0=feats.prosody.f0, voicing=feats.prosody.voicing,
                 energy=feats.prosody.energy, tokens=tokens, utt_id=feats.utt_id, speaker_id=feats.speaker_id,
                 text=feats.text, token_rate=token_rate, fingerprint=self.fingerprint,
                 tokens_fingerprint=tokens_fingerprint or '')
        os.replace(tmp_fname, fname)

    def load(self, utt_id, tokens_fingerprint=None):
        """Cached features of `utt_id` or None on a miss."""
        fname = self.path(utt_id)
        if not os.path.isfile(fname):
            return None
        with np.load(fname) as data:
            if str(data['utt_id']) != utt_id:
                return None
            if str(data['fingerprint']) != self.fingerprint:
                logger.info("stale feature cache for '{}', recomputing".format(utt_id))
                return None
            tokens = None
            if tokens_fingerprint is not None and str(data['tokens_fingerprint']) == tokens_fingerprint:
                rate = float(data['token_rate']) if 'token_rate' in data.files else self.config.frame_rate
                tokens = TokenSequence(data['tokens'], rate)
            return UtteranceFeatures(utt_id, str(data['speaker_id']), str(data['text']),
                                     MelSpectrogram(data['mel'], self.config.frame_rate),
                                     ProsodyTrack(data['f0'], data['voicing'], data['energy']),
                                     tokens=tokens)


class FeatureHandler(Paralleler):
    """Extract (or load from the cache) the features of many records in parallel."""

    def __init__(self, config, cache_dir=None, root=None, workers=1, **kwargs):
        super(FeatureHandler, self).__init__(workers=workers, **kwargs)
        self.config = config
        self.cache_dir = cache_dir
        self.root = root

    def process(self, records, desc='  features'):
        return super(FeatureHandler, self).process(records, desc=desc)

    def _do_process_job(self, record):
        cache = FeatureCache(self.cache_dir, self.config) if self.cache_dir else None
        if cache is not None:
            feats = cache.load(record.id)
            if feats is not None:
                return feats
        feats = extract_features(record, self.config, root=self.root)
        if cache is not None:
            cache.save(feats)
        return feats
