#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Mel spectrogram to waveform.

Two modes:

* ``pseudo_inverse_phase_recon``: regularized pseudo-inverse of the mel filterbank
  followed by Griffin-Lim phase reconstruction;
* ``external``: a vocoder command reading a ``.npy`` mel file and writing a WAV file,
  configured as a template with ``{mel}`` and ``{wav}`` placeholders.
"""

import logging
import os
import shlex
import shutil
import subprocess
import tempfile

import librosa
import numpy as np

from semalignvc.core.features import MEL_EPS
from semalignvc.errors import VocoderError
from semalignvc.utils import read_wav

__all__ = ['MODES', 'mel_pseudo_inverse', 'mel_to_audio']

logger = logging.getLogger(__name__)

MODES = ('pseudo_inverse_phase_recon', 'external')
GRIFFIN_LIM_ITERS = 32
PINV_REG = 1e-3


def mel_pseudo_inverse(mel_basis, reg=PINV_REG):
    """``(M^T M + lam I)^-1 M^T`` with ``lam = reg * mean(diag(M^T M))``."""
    gram = np.dot(mel_basis.T, mel_basis)
    lam = reg * np.mean(np.diag(gram))
    return np.linalg.solve(gram + lam * np.eye(gram.shape[0]), mel_basis.T)


def _pseudo_inverse_phase_recon(frames, config, n_iter):
    mel = np.maximum(np.exp(frames.T) - MEL_EPS, 0.0)
    spec = np.maximum(np.dot(mel_pseudo_inverse(config.mel_basis), mel), 0.0)
    wav = librosa.griffinlim(spec, n_iter=n_iter, hop_length=config.hop_length, win_length=config.win_length,
                             n_fft=config.n_fft, window='hann', center=True, random_state=0,
                             length=frames.shape[0] * config.hop_length)
    peak = np.max(np.abs(wav)) if wav.size else 0.0
    if peak > 1.0:
        wav = wav / peak
    return wav


def _external(frames, config, command):
    if not command:
        raise VocoderError("external vocoder mode needs a [Vocoder] command")
    tmpdir = tempfile.mkdtemp(prefix='semalignvc-vocoder-')
    try:
        mel_path = os.path.join(tmpdir, 'mel.npy')
        wav_path = os.path.join(tmpdir, 'out.wav')
        np.save(mel_path, frames)
        args = shlex.split(command.format(mel=mel_path, wav=wav_path))
        try:
            proc = subprocess.run(args, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                  universal_newlines=True, check=False)
        except OSError as err:
            raise VocoderError("cannot run vocoder command '{}': {}".format(command, err))
        if proc.returncode != 0:
            raise VocoderError("vocoder command '{}' exited with status {}: {}".format(
                command, proc.returncode, proc.stdout.strip()))
        if not os.path.exists(wav_path):
            raise VocoderError("vocoder command '{}' wrote no output".format(command))
        return read_wav(wav_path, config.sample_rate)
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)


def mel_to_audio(frames, config, mode='pseudo_inverse_phase_recon', n_iter=GRIFFIN_LIM_ITERS, command=None):
    """Waveform of log-mel frames [T x n_mels].

    Parameters
    ----------
    frames : numpy.ndarray
    config : FeatureConfig
        Analysis settings the mel frames were computed with.
    mode : str
        One of :data:`MODES`.
    command : str, optional
        Vocoder command template for the external mode.

    Raises
    ------
    VocoderError
        When the external command fails.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != config.n_mels:
        raise ValueError("expected [T x {}] mel frames, got shape {}".format(config.n_mels, frames.shape))
    if not np.all(np.isfinite(frames)):
        raise ValueError("mel frames contain non-finite values")
    if mode == 'pseudo_inverse_phase_recon':
        return _pseudo_inverse_phase_recon(frames, config, int(n_iter))
    if mode == 'external':
        return _external(frames, config, command)
    raise ValueError("unknown vocoder mode '{}' ({})".format(mode, ' | '.join(MODES)))
