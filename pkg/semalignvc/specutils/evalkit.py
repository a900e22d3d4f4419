#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Objective evaluation of converted speech and analysis of semantic representations.

* :func:`fpc`: Pearson correlation of two f0 tracks over jointly voiced frames.
* :func:`speaker_similarity`: cosine of speaker embeddings from a provider.
* :func:`pca_compare`: 2-D principal component view of encoder frames against
  projected text embeddings.
"""

import json
import logging
import os
import shlex
import subprocess
from collections import namedtuple

import numpy as np
import pandas as pd
from scipy.stats import pearsonr
from sklearn.decomposition import PCA
from sklearn.metrics.pairwise import cosine_similarity
from tabulate import tabulate

from semalignvc.core.features import compute_mel, extract_prosody
from semalignvc.errors import ProviderError
from semalignvc.models.probe import MelRepresentation, ProbeSpec, train_probe
from semalignvc.models.probe import report as probe_report
from semalignvc.utils import make_dir, read_wav

__all__ = ['EvalReport', 'PCAComparison', 'fpc', 'LTASProvider', 'CallableEmbeddingProvider',
           'get_embedding_providers', 'speaker_similarity', 'DNSMOSCommand', 'pca_compare',
           'ConvertedUtterance', 'conversion_speaker_report', 'evaluate_pairs', 'summarize', 'render_eval_table']

logger = logging.getLogger(__name__)

MIN_VOICED_FRAMES = 8


class EvalReport(object):
    """Aggregated evaluation metrics.

    Attributes
    ----------
    fpc : float or None
        Mean FPC over the pairs where it is defined.
    similarity : dict
        provider name -> mean cosine similarity.
    pca_alignment : float or None
    naturalness : dict
        DNSMOS column -> mean score (empty without a configured command).
    identity_fpc : float or None
        Mean FPC of conversions whose reference is the source itself.
    speaker_accuracy : float or None
        Fraction of conversions a speaker probe recognizes as their reference speaker.
    notes : list of str
    """

    def __init__(self, fpc=None, similarity=None, pca_alignment=None, naturalness=None, notes=None,
                 identity_fpc=None, speaker_accuracy=None):
        self.fpc = fpc
        self.similarity = dict(similarity or {})
        self.pca_alignment = pca_alignment
        self.naturalness = dict(naturalness or {})
        self.identity_fpc = identity_fpc
        self.speaker_accuracy = speaker_accuracy
        self.notes = list(notes or [])

    def to_dict(self):
        return {'fpc': self.fpc, 'similarity': self.similarity, 'pca_alignment': self.pca_alignment,
                'naturalness': self.naturalness, 'identity_fpc': self.identity_fpc,
                'speaker_accuracy': self.speaker_accuracy, 'notes': self.notes}

    def to_text(self):
        lines = ['fpc = {}'.format('undefined' if self.fpc is None else '{:.4f}'.format(self.fpc))]
        for name in sorted(self.similarity):
            lines.append('similarity.{} = {:.4f}'.format(name, self.similarity[name]))
        if self.identity_fpc is not None:
            lines.append('identity_fpc = {:.4f}'.format(self.identity_fpc))
        if self.speaker_accuracy is not None:
            lines.append('speaker_accuracy = {:.4f}'.format(self.speaker_accuracy))
        if self.pca_alignment is not None:
            lines.append('pca_alignment = {:.4f}'.format(self.pca_alignment))
        for name in sorted(self.naturalness):
            lines.append('dnsmos.{} = {:.4f}'.format(name, self.naturalness[name]))
        for note in self.notes:
            lines.append('note = {}'.format(note))
        return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# f0 consistency
# ---------------------------------------------------------------------------

def _resample_track(f0, voicing, n):
    """Linear interpolation of the voiced part of a track onto `n` frames."""
    m = f0.shape[0]
    if m == n:
        return f0, voicing
    pos = np.linspace(0.0, m - 1.0, n)
    nearest = np.clip(np.round(pos).astype(np.int64), 0, m - 1)
    new_voicing = voicing[nearest]
    idx = np.flatnonzero(voicing)
    if idx.size == 0:
        return np.zeros(n), np.zeros(n, dtype=bool)
    new_f0 = np.where(new_voicing, np.interp(pos, idx, f0[idx]), 0.0)
    return new_f0, new_voicing


def fpc(f0_a, f0_b, voicing_a=None, voicing_b=None, min_frames=MIN_VOICED_FRAMES):
    """Pearson correlation of two f0 tracks over their jointly voiced frames.

    The shorter track is resampled to the length of the longer one first. Unvoiced
    frames hold 0 unless explicit voicing vectors are given.

    Returns
    -------
    float or None
        None (undefined, never 0) with fewer than `min_frames` jointly voiced frames or
        a constant track.
    """
    f0_a = np.asarray(f0_a, dtype=np.float64)
    f0_b = np.asarray(f0_b, dtype=np.float64)
    voicing_a = f0_a != 0.0 if voicing_a is None else np.asarray(voicing_a, dtype=bool)
    voicing_b = f0_b != 0.0 if voicing_b is None else np.asarray(voicing_b, dtype=bool)
    n = max(f0_a.shape[0], f0_b.shape[0])
    f0_a, voicing_a = _resample_track(f0_a, voicing_a, n)
    f0_b, voicing_b = _resample_track(f0_b, voicing_b, n)
    joint = voicing_a & voicing_b
    if joint.sum() < min_frames:
        logger.warning("FPC undefined: {} jointly voiced frames (< {})".format(int(joint.sum()), min_frames))
        return None
    a, b = f0_a[joint], f0_b[joint]
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        logger.warning("FPC undefined: constant f0 track")
        return None
    r, _ = pearsonr(a, b)
    return float(r)


# ---------------------------------------------------------------------------
# speaker similarity
# ---------------------------------------------------------------------------

class LTASProvider(object):
    """Long-term average spectrum embedding: mean log-mel, centered over mel bins."""

    name = 'ltas'

    def __init__(self, config):
        self.config = config

    def embed(self, wav):
        frames = compute_mel(wav, self.config).frames
        ltas = frames.mean(axis=0)
        return ltas - ltas.mean()


class CallableEmbeddingProvider(object):
    """Adapter turning any ``fn(wav) -> vector`` (a pretrained verification model) into a provider."""

    def __init__(self, name, fn):
        self.name = name
        self.fn = fn

    def embed(self, wav):
        return np.asarray(self.fn(wav), dtype=np.float64).ravel()


def get_embedding_providers(settings, config):
    """Providers listed in ``settings['eval']['providers']`` (only 'ltas' is built in)."""
    names = [name.strip() for name in settings.get('eval', {}).get('providers', 'ltas').split(',') if name.strip()]
    providers = []
    for name in names:
        if name == 'ltas':
            providers.append(LTASProvider(config))
        else:
            raise ProviderError(name, "no built-in speaker-embedding provider of this name; wrap the "
                                      "model with CallableEmbeddingProvider")
    return providers


def speaker_similarity(wav_a, wav_b, provider):
    """Cosine similarity of the speaker embeddings of two waveforms."""
    try:
        emb_a = provider.embed(wav_a)
        emb_b = provider.embed(wav_b)
    except ProviderError:
        raise
    except Exception as err:
        raise ProviderError(getattr(provider, 'name', repr(provider)), str(err))
    return float(cosine_similarity(emb_a.reshape(1, -1), emb_b.reshape(1, -1))[0, 0])


class DNSMOSCommand(object):
    """Naturalness scores from an external DNSMOS command.

    The command template gets the WAV path as ``{wav}`` and must print a JSON object
    with the keys SIG, BAK and OVRL.
    """

    columns = ('SIG', 'BAK', 'OVRL')

    def __init__(self, command):
        self.command = command

    def score(self, wav_path):
        args = shlex.split(self.command.format(wav=wav_path))
        try:
            proc = subprocess.run(args, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                  universal_newlines=True, check=False)
        except OSError as err:
            raise ProviderError('dnsmos', "cannot run '{}': {}".format(self.command, err))
        if proc.returncode != 0:
            raise ProviderError('dnsmos', "exit status {}: {}".format(proc.returncode, proc.stderr.strip()))
        try:
            scores = json.loads(proc.stdout)
            return dict((col, float(scores[col])) for col in self.columns)
        except (ValueError, KeyError, TypeError) as err:
            raise ProviderError('dnsmos', "unexpected output {!r} ({})".format(proc.stdout.strip(), err))


# ---------------------------------------------------------------------------
# PCA analysis
# ---------------------------------------------------------------------------

class PCAComparison(object):
    """2-D projections of audio and text frames and their mean per-frame cosine."""

    def __init__(self, audio, text, alignment, explained_variance):
        self.audio = audio
        self.text = text
        self.alignment = alignment
        self.explained_variance = explained_variance


def pca_compare(a_s, tau_up, projection=None, plot_path=None, title=None):
    """Principal component comparison of encoder frames and upsampled text embeddings.

    Parameters
    ----------
    a_s : numpy.ndarray
        [T x d] encoder frames.
    tau_up : numpy.ndarray
        [T x d_text] upsampled text embeddings, or [T x d] if already projected.
    projection : callable, optional
        Maps text rows to d (numpy in, numpy out).
    plot_path : str, optional
        Where to render the overlay of both trajectories.

    Returns
    -------
    PCAComparison
        The components are fitted on both sequences together; each component's sign is
        chosen so that its largest-magnitude loading is positive.
    """
    a_s = np.asarray(a_s, dtype=np.float64)
    text = np.asarray(tau_up if projection is None else projection(tau_up), dtype=np.float64)
    if a_s.shape != text.shape:
        raise ValueError("audio {} and text {} frames differ in shape".format(a_s.shape, text.shape))
    if a_s.ndim != 2 or a_s.shape[1] < 2:
        raise ValueError("need [T x d] inputs with d >= 2, got {}".format(a_s.shape))
    both = np.concatenate([a_s, text], axis=0)
    mean = both.mean(axis=0)
    if np.linalg.matrix_rank(both - mean) < 2:
        raise ValueError("inputs have rank < 2, no 2-D principal subspace")
    pca = PCA(n_components=2, svd_solver='full').fit(both)
    comps = pca.components_.copy()
    for k in range(comps.shape[0]):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    audio_2d = np.dot(a_s - pca.mean_, comps.T)
    text_2d = np.dot(text - pca.mean_, comps.T)
    norms = np.linalg.norm(audio_2d, axis=1) * np.linalg.norm(text_2d, axis=1)
    cosines = np.sum(audio_2d * text_2d, axis=1) / np.maximum(norms, 1e-12)
    result = PCAComparison(audio_2d, text_2d, float(cosines.mean()), pca.explained_variance_ratio_.copy())
    if plot_path:
        _plot_pca(result, plot_path, title)
    return result


def _plot_pca(result, plot_path, title=None):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    make_dir(os.path.dirname(os.path.abspath(plot_path)))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(result.audio[:, 0], result.audio[:, 1], '-o', markersize=2, label='encoder (audio)')
    ax.plot(result.text[:, 0], result.text[:, 1], '-s', markersize=2, label='text embedding')
    ax.set_xlabel('PC 1')
    ax.set_ylabel('PC 2')
    ax.set_title(title or 'alignment = {:.3f}'.format(result.alignment))
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# speaker of the converted speech
# ---------------------------------------------------------------------------

ConvertedUtterance = namedtuple('ConvertedUtterance', ['utt_id', 'speaker_id', 'mel'])


def conversion_speaker_report(pairs, real_features, config, epochs=30, lr=1e-2, batch_size=16, seed=0):
    """Probe the converted WAVs of `pairs` for their reference speaker.

    A linear speaker probe on standardized log-mel frames is trained on `real_features`
    (real utterances of every reference speaker), then asked to name the speaker of each
    converted file; the label is the pair's 'reference_speaker'.

    Returns
    -------
    ProbeReport
        Accuracy is the fraction of conversions recognized as their reference speaker.
    """
    if not pairs:
        raise ValueError("no conversions to probe")
    converted = []
    for pair in pairs:
        wav = read_wav(pair['converted'], sample_rate=config.sample_rate)
        converted.append(ConvertedUtterance(os.path.basename(pair['converted']), pair['reference_speaker'],
                                            compute_mel(wav, config)))
    rep = MelRepresentation(config.n_mels).fit(real_features)
    speakers = sorted(set(f.speaker_id for f in real_features))
    probe = train_probe(ProbeSpec.for_representation(rep, len(speakers)), rep, real_features, epochs=epochs, lr=lr,
                        batch_size=batch_size, seed=seed)
    return probe_report(probe, converted)


# ---------------------------------------------------------------------------
# pair evaluation
# ---------------------------------------------------------------------------

def evaluate_pairs(pairs, providers, config, naturalness=None):
    """Evaluate conversions.

    Parameters
    ----------
    pairs : list of dict
        Items with the WAV paths 'source', 'reference' and 'converted'.
    providers : list
        Speaker-embedding providers; similarity is measured between reference and converted.
    config : FeatureConfig
    naturalness : DNSMOSCommand, optional

    Returns
    -------
    pandas.DataFrame
        One row per pair: fpc (source vs converted), ``sim_<provider>`` columns and,
        with a DNSMOS command, SIG/BAK/OVRL.
    """
    rows = []
    for pair in pairs:
        src = read_wav(pair['source'], sample_rate=config.sample_rate)
        ref = read_wav(pair['reference'], sample_rate=config.sample_rate)
        out = read_wav(pair['converted'], sample_rate=config.sample_rate)
        row = {'source': pair['source'], 'reference': pair['reference'], 'converted': pair['converted']}
        p_src = extract_prosody(src, config)
        p_out = extract_prosody(out, config)
        row['fpc'] = fpc(p_src.f0, p_out.f0, p_src.voicing, p_out.voicing)
        for provider in providers:
            row['sim_{}'.format(provider.name)] = speaker_similarity(ref, out, provider)
        if naturalness is not None:
            row.update(naturalness.score(pair['converted']))
        rows.append(row)
    df = pd.DataFrame(rows)
    if 'fpc' in df:
        df['fpc'] = df['fpc'].astype(float)
    return df


def _mean_fpc(df, what, notes):
    if not len(df) or 'fpc' not in df:
        return None
    defined = df['fpc'].dropna()
    if len(defined) < len(df):
        notes.append('{} undefined for {} of {} pairs'.format(what, len(df) - len(defined), len(df)))
    return float(defined.mean()) if len(defined) else None


def summarize(df, pca_alignment=None, identity=None, speaker_report=None):
    """Average a pair table into an :class:`EvalReport`.

    Parameters
    ----------
    df : pandas.DataFrame
        Cross-speaker pairs from :func:`evaluate_pairs`.
    identity : pandas.DataFrame, optional
        Conversions with the source as reference, also from :func:`evaluate_pairs`.
    speaker_report : ProbeReport, optional
        From :func:`conversion_speaker_report`.
    """
    notes = []
    fpc_mean = _mean_fpc(df, 'fpc', notes)
    identity_fpc = _mean_fpc(identity, 'identity fpc', notes) if identity is not None else None
    similarity = dict((col[len('sim_'):], float(df[col].mean())) for col in df.columns if col.startswith('sim_'))
    naturalness = dict((col, float(df[col].mean())) for col in DNSMOSCommand.columns if col in df)
    if not naturalness:
        notes.append('naturalness not computed (no dnsmos-command configured)')
    return EvalReport(fpc_mean, similarity, pca_alignment, naturalness, notes, identity_fpc=identity_fpc,
                      speaker_accuracy=None if speaker_report is None else speaker_report.accuracy)


def render_eval_table(report, name='semalignvc'):
    """Render a report with the column groups Naturalness / Consistency / Similarity."""
    headers = ['Model']
    row = [name]
    for col in DNSMOSCommand.columns:
        if col in report.naturalness:
            headers.append('Naturalness\n{}'.format(col))
            row.append('{:.2f}'.format(report.naturalness[col]))
    headers.append('Consistency\nFPC')
    row.append('n/a' if report.fpc is None else '{:.3f}'.format(report.fpc))
    if report.identity_fpc is not None:
        headers.append('Consistency\nFPC (identity)')
        row.append('{:.3f}'.format(report.identity_fpc))
    for provider in sorted(report.similarity):
        headers.append('Similarity\n{}'.format(provider))
        row.append('{:.3f}'.format(report.similarity[provider]))
    if report.speaker_accuracy is not None:
        headers.append('Similarity\nprobe acc.')
        row.append('{:.3f}'.format(report.speaker_accuracy))
    return tabulate([row], headers=headers, tablefmt='simple')
