#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Utterance manifests and the synthetic toy-speech corpus.

A manifest is a text file with one JSON object per line::

    {"id": "spk00_0000", "audio_path": "wavs/spk00_0000.wav", "text": "abca", "speaker_id": "spk00"}
    {"id": "spk00_0001", "synth": {"base_f0": 120.0, ...}, "text": "dbe", "speaker_id": "spk00"}

Toy utterances are rendered by an additive harmonic synthesizer: the symbols fix the
formant pattern and durations (content), the speaker profile fixes pitch, formant
scaling and spectral tilt (timbre).
"""

import json
import logging
import os
from collections import OrderedDict

import numpy as np
import smart_open

from semalignvc.core.handler import Paralleler
from semalignvc.errors import ManifestError
from semalignvc.utils import SAMPLE_RATE, derive_seed, make_dir, read_wav, write_wav, to_pcm16

__all__ = ['UtteranceRecord', 'ToySpeakerProfile', 'ToySymbol', 'default_symbols',
           'load_manifest', 'write_manifest', 'load_audio', 'synthesize_toy_utterance',
           'build_toy_corpus', 'split_by_speaker', 'SynthHandler']

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = 'abcdefghijklmnop'

# synthesizer constants
_N_HARMONICS = 64
_CONTROL_HOP = 80  # samples between two control points of the harmonic amplitudes
_PAD_SECONDS = 0.05
_FADE_SECONDS = 0.01
_TARGET_RMS = 0.1
_NOISE_RMS = 0.003
_CONTOUR_DEPTH = 0.06  # maximal per-symbol f0 offset in natural-log units
_FORMANT_GAINS = (1.0, 0.5, 0.25)


class UtteranceRecord(object):
    """One manifest entry.

    Exactly one of `audio_path` (a WAV file, relative paths resolved against the manifest
    directory) and `synth` (toy synthesis parameters) is set.
    """

    def __init__(self, id, text, speaker_id, audio_path=None, synth=None):
        if not id:
            raise ManifestError("utterance id is empty")
        if not text or not str(text).strip():
            raise ManifestError("utterance '{}' has an empty transcript".format(id))
        if not speaker_id:
            raise ManifestError("utterance '{}' has no speaker_id".format(id))
        if (audio_path is None) == (synth is None):
            raise ManifestError("utterance '{}' needs exactly one of 'audio_path' and 'synth'".format(id))
        self.id = str(id)
        self.text = str(text)
        self.speaker_id = str(speaker_id)
        self.audio_path = audio_path
        self.synth = synth

    def to_dict(self):
        item = OrderedDict()
        item['id'] = self.id
        if self.audio_path is not None:
            item['audio_path'] = self.audio_path
        else:
            item['synth'] = self.synth
        item['text'] = self.text
        item['speaker_id'] = self.speaker_id
        return item

    @classmethod
    def from_dict(cls, item):
        return cls(item.get('id'), item.get('text'), item.get('speaker_id'),
                   audio_path=item.get('audio_path'), synth=item.get('synth'))

    def __eq__(self, other):
        return isinstance(other, UtteranceRecord) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "UtteranceRecord(id={!r}, speaker_id={!r}, text={!r})".format(self.id, self.speaker_id, self.text)


class ToySpeakerProfile(object):
    """Timbre of a toy speaker.

    Attributes
    ----------
    base_f0 : float
        Median pitch in Hz, within [60, 400].
    formant_shift : float
        Factor applied to every formant frequency, within [0.7, 1.3].
    spectral_tilt : float
        Spectral slope in dB per octave.
    seed : int
        Seed of the speaker's noise floor.
    """

    def __init__(self, base_f0, formant_shift=1.0, spectral_tilt=0.0, seed=0, name=None):
        if not 60.0 <= base_f0 <= 400.0:
            raise ValueError("base_f0 should be within [60, 400] Hz, got {}".format(base_f0))
        if not 0.7 <= formant_shift <= 1.3:
            raise ValueError("formant_shift should be within [0.7, 1.3], got {}".format(formant_shift))
        self.base_f0 = float(base_f0)
        self.formant_shift = float(formant_shift)
        self.spectral_tilt = float(spectral_tilt)
        self.seed = int(seed)
        self.name = name or 'spk{}'.format(self.seed)

    def to_dict(self):
        return OrderedDict([('base_f0', self.base_f0), ('formant_shift', self.formant_shift),
                            ('spectral_tilt', self.spectral_tilt), ('seed', self.seed)])

    @classmethod
    def from_dict(cls, item, name=None):
        return cls(item['base_f0'], item['formant_shift'], item['spectral_tilt'], item['seed'], name=name)

    def __repr__(self):
        return "ToySpeakerProfile(name={!r}, base_f0={:.1f}, formant_shift={:.3f}, spectral_tilt={:.2f})".format(
            self.name, self.base_f0, self.formant_shift, self.spectral_tilt)


class ToySymbol(object):
    """A content unit of the toy language: formant targets and a duration range."""

    def __init__(self, symbol, formant_pattern, duration_range):
        if len(symbol) != 1:
            raise ValueError("a toy symbol is a single character, got {!r}".format(symbol))
        min_ms, max_ms = duration_range
        if min_ms < 40 or max_ms < min_ms:
            raise ValueError("invalid duration range {} for symbol {!r}".format(duration_range, symbol))
        self.symbol = symbol
        self.formant_pattern = tuple(float(f) for f in formant_pattern)
        self.duration_range = (float(min_ms), float(max_ms))

    def __repr__(self):
        return "ToySymbol({!r}, formants={}, duration={})".format(
            self.symbol, self.formant_pattern, self.duration_range)


def default_symbols(alphabet=DEFAULT_ALPHABET):
    """Build the toy symbol table.

    Formant 1 and 2 run over a 4 x 4 grid so that every pair of the first 16
    symbols differs in at least one formant; longer alphabets also move formant 3.
    """
    if len(alphabet) < 16:
        raise ValueError("the toy alphabet needs at least 16 symbols, got {}".format(len(alphabet)))
    if len(set(alphabet)) != len(alphabet):
        raise ValueError("the toy alphabet has duplicated symbols: {!r}".format(alphabet))
    table = OrderedDict()
    for i, ch in enumerate(alphabet):
        f1 = 300.0 + 130.0 * (i % 4)
        f2 = 900.0 + 450.0 * ((i // 4) % 4)
        f3 = 2500.0 + 150.0 * (i // 16)
        duration = (70.0, 140.0) if i % 2 == 0 else (90.0, 180.0)
        table[ch] = ToySymbol(ch, (f1, f2, f3), duration)
    return table


def _lookup_symbols(text, table):
    try:
        return [table[ch] for ch in text]
    except KeyError as err:
        raise ValueError("symbol {} is not in the toy alphabet".format(err))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(path, encoding='utf-8'):
    """Read a manifest file into a list of :class:`UtteranceRecord` in file order.

    `path` is opened with smart_open, so compressed (``.gz``, ``.bz2``) and remote
    manifests are read transparently.

    Raises
    ------
    ManifestError
        On a line that is not a JSON object or misses a field (the error names the
        line number), and on duplicated utterance ids.
    """
    if '://' not in path and not os.path.isfile(path):
        raise IOError("Cannot find manifest: {}".format(path))
    records = []
    seen = dict()
    with smart_open.open(path, 'r', encoding=encoding) as fin:
        for lineno, line in enumerate(fin, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                item = json.loads(line, object_pairs_hook=OrderedDict)
            except ValueError as err:
                raise ManifestError("not a JSON object ({})".format(err), lineno=lineno)
            if not isinstance(item, dict):
                raise ManifestError("not a JSON object", lineno=lineno)
            for key in ('id', 'text', 'speaker_id'):
                if not item.get(key):
                    raise ManifestError("missing field '{}'".format(key), lineno=lineno)
            try:
                rec = UtteranceRecord.from_dict(item)
            except ManifestError as err:
                raise ManifestError(str(err), lineno=lineno)
            if rec.id in seen:
                raise ManifestError("duplicate id '{}' (first seen on line {})".format(rec.id, seen[rec.id]),
                                    lineno=lineno)
            seen[rec.id] = lineno
            records.append(rec)
    logger.info("loaded {} utterances from {}".format(len(records), path))
    return records


def write_manifest(records, path, encoding='utf-8'):
    """Write records, one JSON object per line, keys in the canonical order."""
    make_dir(os.path.dirname(os.path.abspath(path)))
    with smart_open.open(path, 'w', encoding=encoding) as fout:
        for rec in records:
            fout.write(json.dumps(rec.to_dict(), ensure_ascii=False))
            fout.write('\n')


def load_audio(record, root=None, sample_rate=SAMPLE_RATE):
    """Waveform of a record: the referenced WAV file or a fresh toy rendering."""
    if record.audio_path is not None:
        path = record.audio_path
        if root and not os.path.isabs(path):
            path = os.path.join(root, path)
        return read_wav(path, sample_rate=sample_rate)
    synth = record.synth
    profile = ToySpeakerProfile.from_dict(synth, name=record.speaker_id)
    table = default_symbols(synth.get('alphabet', DEFAULT_ALPHABET))
    wav, _ = synthesize_toy_utterance(profile, _lookup_symbols(record.text, table), synth['utt_seed'],
                                      utt_id=record.id, sample_rate=sample_rate)
    return wav


# ---------------------------------------------------------------------------
# toy synthesis
# ---------------------------------------------------------------------------

def _envelope(freqs, formants, tilt):
    """Linear amplitude of the spectral envelope at `freqs` for per-point formants.

    freqs : [P, K] harmonic frequencies, formants : [P, 3]
    """
    amp = np.full(freqs.shape, 0.02)
    for i, gain in enumerate(_FORMANT_GAINS):
        center = formants[:, i:i + 1]
        bandwidth = 60.0 + 0.06 * center
        amp += gain * np.exp(-0.5 * ((freqs - center) / bandwidth) ** 2)
    octaves = np.log2(np.maximum(freqs, 1.0) / 100.0)
    return amp * 10.0 ** (tilt * octaves / 20.0)


def synthesize_toy_utterance(profile, symbols, seed, utt_id=None, sample_rate=SAMPLE_RATE, alphabet=None):
    """Render a toy utterance.

    Parameters
    ----------
    profile : ToySpeakerProfile
    symbols : list of ToySymbol
    seed : int
        Utterance seed. Durations and the pitch contour only depend on `seed` and the symbols,
        so two speakers rendering the same (symbols, seed) say the same thing the same way.
    utt_id : str, optional
        Id of the returned record, defaults to ``<speaker>_<seed>``.

    Returns
    -------
    waveform : numpy.ndarray
        float64 samples on the 16-bit grid.
    record : UtteranceRecord
        Record with a `synth` sub-object that re-renders this waveform.
    """
    symbols = list(symbols)
    if not symbols:
        raise ValueError("cannot synthesize an utterance without symbols")
    rng = np.random.default_rng(int(seed))

    # durations and pitch targets per symbol (content and prosody, speaker independent)
    durations = []
    offsets = []
    for sym in symbols:
        min_ms, max_ms = sym.duration_range
        durations.append(int(round(rng.uniform(min_ms, max_ms) * sample_rate / 1000.0)))
        offsets.append(rng.uniform(-_CONTOUR_DEPTH, _CONTOUR_DEPTH))
    offsets = np.asarray(offsets) - np.median(offsets)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    n_voiced = int(bounds[-1])
    centers = 0.5 * (bounds[:-1] + bounds[1:])

    # control points every _CONTROL_HOP samples
    ctrl = np.arange(0, n_voiced + _CONTROL_HOP, _CONTROL_HOP, dtype=np.float64)
    log_f0 = np.log(profile.base_f0) + np.interp(ctrl, centers, offsets)
    seg = np.clip(np.searchsorted(bounds, ctrl, side='right') - 1, 0, len(symbols) - 1)
    formants = np.asarray([sym.formant_pattern for sym in symbols])[seg] * profile.formant_shift
    # smooth formant transitions over ~20 ms
    width = max(1, int(0.02 * sample_rate / _CONTROL_HOP))
    kernel = np.ones(width) / width
    formants = np.stack([np.convolve(np.pad(formants[:, i], (width // 2, width - 1 - width // 2), mode='edge'),
                                     kernel, mode='valid') for i in range(formants.shape[1])], axis=1)

    f0_ctrl = np.exp(log_f0)
    harmonic_k = np.arange(1, _N_HARMONICS + 1, dtype=np.float64)
    freqs = f0_ctrl[:, None] * harmonic_k[None, :]
    amps = _envelope(freqs, formants, profile.spectral_tilt)
    amps[freqs >= 0.5 * sample_rate - 200.0] = 0.0

    # upsample the control signals to audio rate, accumulate phase
    t = np.arange(n_voiced, dtype=np.float64)
    f0 = np.interp(t, ctrl, f0_ctrl)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    wav = np.zeros(n_voiced)
    for k in range(_N_HARMONICS):
        amp_k = amps[:, k]
        if not amp_k.any():
            continue
        wav += np.interp(t, ctrl, amp_k) * np.sin(harmonic_k[k] * phase)

    fade = int(_FADE_SECONDS * sample_rate)
    ramp = 0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, fade)))
    wav[:fade] *= ramp
    wav[-fade:] *= ramp[::-1]
    wav *= _TARGET_RMS / (np.sqrt(np.mean(wav ** 2)) + 1e-12)

    pad = int(_PAD_SECONDS * sample_rate)
    wav = np.concatenate([np.zeros(pad), wav, np.zeros(pad)])
    noise_rng = np.random.default_rng([int(seed), profile.seed])
    wav = wav + _NOISE_RMS * noise_rng.standard_normal(wav.shape[0])
    wav = to_pcm16(wav)

    synth = profile.to_dict()
    synth['utt_seed'] = int(seed)
    if alphabet is not None and alphabet != DEFAULT_ALPHABET:
        synth['alphabet'] = alphabet
    text = ''.join(sym.symbol for sym in symbols)
    record = UtteranceRecord(utt_id or '{}_{}'.format(profile.name, seed), text, profile.name, synth=synth)
    return wav, record


def build_toy_corpus(n_speakers, utts_per_speaker, seed, min_symbols=6, max_symbols=12,
                     alphabet=DEFAULT_ALPHABET):
    """Draw toy speakers and transcripts, returning `synth` records (no audio is rendered).

    Speaker profiles and transcripts come from separate seed substreams of `seed`.

    Returns
    -------
    records : list of UtteranceRecord
    profiles : dict
        speaker id -> ToySpeakerProfile
    """
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("need at least one speaker and one utterance per speaker")
    if not 1 <= min_symbols <= max_symbols:
        raise ValueError("invalid symbol count range [{}, {}]".format(min_symbols, max_symbols))
    default_symbols(alphabet)  # validates the alphabet
    spk_rng = np.random.default_rng(derive_seed(seed, 'corpus.speakers'))
    txt_rng = np.random.default_rng(derive_seed(seed, 'corpus.texts'))

    profiles = OrderedDict()
    for s in range(n_speakers):
        name = 'spk{:02d}'.format(s)
        profiles[name] = ToySpeakerProfile(
            base_f0=float(np.exp(spk_rng.uniform(np.log(80.0), np.log(300.0)))),
            formant_shift=float(spk_rng.uniform(0.8, 1.2)),
            spectral_tilt=float(spk_rng.uniform(-8.0, -2.0)),
            seed=int(spk_rng.integers(0, 2 ** 31 - 1)),
            name=name)

    records = []
    for name, profile in profiles.items():
        for u in range(utts_per_speaker):
            n_sym = int(txt_rng.integers(min_symbols, max_symbols + 1))
            text = ''.join(alphabet[i] for i in txt_rng.integers(0, len(alphabet), size=n_sym))
            synth = profile.to_dict()
            synth['utt_seed'] = int(txt_rng.integers(0, 2 ** 31 - 1))
            if alphabet != DEFAULT_ALPHABET:
                synth['alphabet'] = alphabet
            records.append(UtteranceRecord('{}_{:04d}'.format(name, u), text, name, synth=synth))
    logger.info("toy corpus: {} speakers, {} utterances".format(len(profiles), len(records)))
    return records, profiles


def split_by_speaker(records, test_fraction, seed, key=None):
    """Utterance-level split stratified per speaker.

    Every speaker with at least two utterances contributes ``max(1, round(test_fraction * n))``
    utterances to the test part. Both parts keep the input order. `key` maps an item to its
    utterance id (default: the ``id`` attribute), so feature containers split the same way.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction should be within (0, 1), got {}".format(test_fraction))
    key = key or (lambda rec: rec.id)
    rng = np.random.default_rng(derive_seed(seed, 'corpus.split'))
    by_speaker = OrderedDict()
    for rec in records:
        by_speaker.setdefault(rec.speaker_id, []).append(key(rec))
    test_ids = set()
    for spk, ids in by_speaker.items():
        if len(ids) < 2:
            continue
        n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
        test_ids.update(rng.permutation(ids)[:n_test].tolist())
    train = [rec for rec in records if key(rec) not in test_ids]
    test = [rec for rec in records if key(rec) in test_ids]
    return train, test


class SynthHandler(Paralleler):
    """Render `synth` records to 16-bit WAV files in parallel.

    Examples
    --------
    >>> records, _ = build_toy_corpus(2, 3, seed=1)
    >>> handler = SynthHandler(out_dir='/tmp/toy', workers=2)
    >>> wav_records = handler.process(records)  # also writes /tmp/toy/manifest.jsonl
    """

    def __init__(self, out_dir, workers=1, sample_rate=SAMPLE_RATE, **kwargs):
        super(SynthHandler, self).__init__(workers=workers, **kwargs)
        self.out_dir = out_dir
        self.sample_rate = sample_rate

    def process(self, records, desc='  synthesis'):
        make_dir(os.path.join(self.out_dir, 'wavs'))
        return super(SynthHandler, self).process(records, desc=desc)

    def _do_process_job(self, record):
        wav = load_audio(record, sample_rate=self.sample_rate)
        rel_path = os.path.join('wavs', '{}.wav'.format(record.id))
        write_wav(os.path.join(self.out_dir, rel_path), wav, sample_rate=self.sample_rate)
        return UtteranceRecord(record.id, record.text, record.speaker_id, audio_path=rel_path)

    def _process_results(self, results):
        write_manifest(results, os.path.join(self.out_dir, 'manifest.jsonl'))
        logger.info("wrote {} utterances to {}".format(len(results), self.out_dir))
        return results
