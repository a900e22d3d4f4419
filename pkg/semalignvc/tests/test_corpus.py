"""
Test manifests and the toy-speech corpus
"""

import os

import numpy as np
import pytest

from semalignvc.core.corpus import (SynthHandler, ToySpeakerProfile, ToySymbol, UtteranceRecord, build_toy_corpus,
                                    default_symbols, load_audio, load_manifest, split_by_speaker,
                                    synthesize_toy_utterance, write_manifest)
from semalignvc.core.features import compute_mel
from semalignvc.errors import ManifestError
from semalignvc.tests.utils import datapath, temporary_file, tiny_feature_config


@pytest.fixture()
def symbols():
    table = default_symbols()
    yield [table[ch] for ch in 'abcdefgh']


@pytest.fixture()
def profile():
    yield ToySpeakerProfile(120.0, formant_shift=1.0, spectral_tilt=0.0, seed=5, name='spkA')


class TestManifest(object):

    def test_empty_file(self):
        with temporary_file('empty.jsonl') as fname:
            open(fname, 'w').close()
            assert load_manifest(fname) == []

    def test_one_line(self):
        with temporary_file('one.jsonl') as fname:
            with open(fname, 'w') as fout:
                fout.write('{"id": "u1", "audio_path": "wavs/u1.wav", "text": "abc", "speaker_id": "s1"}\n')
            records = load_manifest(fname)
        assert len(records) == 1
        rec = records[0]
        assert (rec.id, rec.audio_path, rec.text, rec.speaker_id) == ('u1', 'wavs/u1.wav', 'abc', 's1')
        assert rec.synth is None

    def test_round_trip(self):
        records = load_manifest(datapath('toy_manifest.jsonl'))
        assert [rec.id for rec in records] == ['spk00_0000', 'spk00_0001', 'spk01_0000', 'spk01_0001']
        with temporary_file('copy.jsonl') as fname:
            write_manifest(records, fname)
            with open(fname) as fin:
                written = fin.read()
        with open(datapath('toy_manifest.jsonl')) as fin:
            original = fin.read()
        assert written.rstrip() == original.rstrip()

    def test_missing_speaker_names_line(self):
        with pytest.raises(ManifestError) as excinfo:
            load_manifest(datapath('bad_manifest.jsonl'))
        assert excinfo.value.lineno == 2
        assert 'line 2' in str(excinfo.value)
        assert 'speaker_id' in str(excinfo.value)

    def test_duplicate_id(self):
        line = '{"id": "u1", "audio_path": "a.wav", "text": "abc", "speaker_id": "s1"}\n'
        with temporary_file('dup.jsonl') as fname:
            with open(fname, 'w') as fout:
                fout.write(line + '\n' + line)
            with pytest.raises(ManifestError, match='duplicate'):
                load_manifest(fname)

    def test_not_json(self):
        with temporary_file('bad.jsonl') as fname:
            with open(fname, 'w') as fout:
                fout.write('id=u1 text=abc\n')
            with pytest.raises(ManifestError) as excinfo:
                load_manifest(fname)
        assert excinfo.value.lineno == 1

    def test_missing_file(self):
        with pytest.raises(IOError):
            load_manifest('/nonexistent/manifest.jsonl')

    def test_record_needs_one_audio_source(self):
        with pytest.raises(ManifestError):
            UtteranceRecord('u1', 'abc', 's1')
        with pytest.raises(ManifestError):
            UtteranceRecord('u1', 'abc', 's1', audio_path='a.wav', synth={'base_f0': 100.0})
        with pytest.raises(ManifestError):
            UtteranceRecord('u1', '  ', 's1', audio_path='a.wav')


class TestToySynthesis(object):

    def test_profile_ranges(self):
        with pytest.raises(ValueError):
            ToySpeakerProfile(50.0)
        with pytest.raises(ValueError):
            ToySpeakerProfile(100.0, formant_shift=1.5)
        with pytest.raises(ValueError):
            ToySymbol('a', (300.0, 900.0), (30.0, 80.0))

    def test_alphabet(self):
        table = default_symbols()
        assert len(table) == 16
        patterns = [sym.formant_pattern for sym in table.values()]
        assert len(set(patterns)) == 16
        with pytest.raises(ValueError):
            default_symbols('abc')

    def test_deterministic(self, profile, symbols):
        wav1, rec1 = synthesize_toy_utterance(profile, symbols, seed=3)
        wav2, rec2 = synthesize_toy_utterance(profile, symbols, seed=3)
        assert np.array_equal(wav1, wav2)
        assert rec1 == rec2
        assert rec1.text == 'abcdefgh'
        assert rec1.speaker_id == 'spkA'

    def test_empty_symbols(self, profile):
        with pytest.raises(ValueError):
            synthesize_toy_utterance(profile, [], seed=0)

    def test_profiles_differ_in_spectrum(self, profile, symbols):
        other = ToySpeakerProfile(200.0, formant_shift=1.2, spectral_tilt=-6.0, seed=9, name='spkB')
        config = tiny_feature_config()
        wav_a, _ = synthesize_toy_utterance(profile, symbols, seed=3)
        wav_b, _ = synthesize_toy_utterance(other, symbols, seed=3)
        ltas_a = compute_mel(wav_a, config).frames.mean(axis=0)
        ltas_b = compute_mel(wav_b, config).frames.mean(axis=0)
        assert np.mean(np.abs(ltas_a - ltas_b)) > 0.1

    def test_same_content_same_length(self, profile, symbols):
        # durations only depend on the symbols and the utterance seed
        other = ToySpeakerProfile(200.0, formant_shift=1.2, spectral_tilt=-6.0, seed=9, name='spkB')
        wav_a, _ = synthesize_toy_utterance(profile, symbols, seed=3)
        wav_b, _ = synthesize_toy_utterance(other, symbols, seed=3)
        assert wav_a.shape == wav_b.shape

    def test_samples_on_pcm16_grid(self, profile, symbols):
        wav, _ = synthesize_toy_utterance(profile, symbols, seed=3)
        assert np.abs(wav).max() <= 1.0
        assert np.allclose(wav * 32767.0, np.round(wav * 32767.0))

    def test_load_audio_rerenders_synth(self, profile, symbols):
        wav, rec = synthesize_toy_utterance(profile, symbols, seed=3)
        assert np.array_equal(load_audio(rec), wav)


class TestToyCorpus(object):

    def test_build(self):
        records, profiles = build_toy_corpus(3, 4, seed=1)
        assert len(records) == 12
        assert list(profiles) == ['spk00', 'spk01', 'spk02']
        assert len(set(rec.id for rec in records)) == 12
        for rec in records:
            assert 6 <= len(rec.text) <= 12
            assert rec.synth is not None
        again, _ = build_toy_corpus(3, 4, seed=1)
        assert again == records

    def test_split_by_speaker(self):
        records, _ = build_toy_corpus(3, 5, seed=1)
        train, test = split_by_speaker(records, 0.2, seed=0)
        assert len(train) + len(test) == len(records)
        assert not set(r.id for r in train) & set(r.id for r in test)
        for spk in ('spk00', 'spk01', 'spk02'):
            assert sum(r.speaker_id == spk for r in test) == 1
            assert sum(r.speaker_id == spk for r in train) == 4
        # input order is kept
        assert train == [r for r in records if r in train]
        assert split_by_speaker(records, 0.2, seed=0) == (train, test)

    def test_split_bad_fraction(self):
        records, _ = build_toy_corpus(2, 2, seed=1)
        with pytest.raises(ValueError):
            split_by_speaker(records, 1.0, seed=0)

    def test_synth_handler(self):
        records, _ = build_toy_corpus(2, 2, seed=1, min_symbols=3, max_symbols=4)
        with temporary_file('corpus') as out_dir:
            wav_records = SynthHandler(out_dir).process(records)
            assert [r.id for r in wav_records] == [r.id for r in records]
            for rec in wav_records:
                assert rec.audio_path == os.path.join('wavs', '{}.wav'.format(rec.id))
                assert os.path.isfile(os.path.join(out_dir, rec.audio_path))
            manifest = load_manifest(os.path.join(out_dir, 'manifest.jsonl'))
            assert manifest == wav_records
            wav = load_audio(manifest[0], root=out_dir)
            assert np.allclose(wav, load_audio(records[0]), atol=1e-4)
