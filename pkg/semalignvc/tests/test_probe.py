"""
Test the speaker-identity probes
"""

import numpy as np
import pytest
import torch

from semalignvc.core.corpus import split_by_speaker
from semalignvc.core.textref import ToyTextProvider
from semalignvc.errors import ProviderError
from semalignvc.models.probe import (CallableRepresentation, ProbeClassifier, ProbeReport, ProbeSpec,
                                     SemanticRepresentation, TokenRepresentation, render_table, report, represent,
                                     train_probe)
from semalignvc.models.semenc import EncoderConfig, SemEncModel
from semalignvc.tests.utils import toy_features


class Utterance(object):

    def __init__(self, utt_id, speaker_id, payload):
        self.utt_id = utt_id
        self.speaker_id = speaker_id
        self.payload = payload


def synthetic(kind, n_speakers=4, per_speaker=12, seed=0, informative=True):
    """Utterances whose representation carries (or not) the speaker identity."""
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(n_speakers):
        for k in range(per_speaker):
            T = int(rng.integers(5, 15))
            label = s if informative else int(rng.integers(n_speakers))
            if kind == 'continuous':
                payload = rng.standard_normal((T, 6)) * 0.3
                payload[:, label] += 3.0
            else:
                payload = rng.integers(0, 4, T) + 4 * label
            utts.append(Utterance('s{}_{:02d}'.format(s, k), 's{}'.format(s), payload))
    return utts


def payload(utt):
    return utt.payload


@pytest.fixture()
def continuous():
    yield CallableRepresentation('synthetic', payload, 'continuous', dim=6)


@pytest.fixture()
def discrete():
    yield CallableRepresentation('synthetic-ids', payload, 'discrete', vocab_size=16)


class TestSpecAndReport(object):

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ProbeSpec('symbolic', 'x', 4)
        with pytest.raises(ValueError):
            ProbeSpec('discrete', 'x', 4, pooling='max')
        with pytest.raises(ValueError):
            ProbeSpec('discrete', 'x', 1)

    def test_report(self):
        rep = ProbeReport(0.5, 4, [('s0', 1.0), ('s1', 0.0)], 'tokenizer', 'discrete', 8)
        assert rep.chance == 0.25
        text = rep.to_text()
        assert 'accuracy = 0.5000' in text
        assert 'accuracy.s1 = 0.0000' in text
        assert rep.to_dict()['n_test'] == 8
        with pytest.raises(ValueError):
            ProbeReport(1.5, 4, [], 'x', 'discrete', 1)

    def test_callable_validation(self):
        with pytest.raises(ValueError):
            CallableRepresentation('x', payload, 'discrete')
        with pytest.raises(ValueError):
            CallableRepresentation('x', payload, 'continuous', vocab_size=3)

    def test_render_table(self):
        reports = [ProbeReport(0.9, 4, [], 'tokenizer', 'discrete', 8),
                   ProbeReport(0.3, 4, [], 'qphi', 'continuous', 8)]
        table = render_table(reports, models=['Quantizer', 'Semantic encoder'])
        assert 'Accuracy (%)' in table
        assert '90.00' in table and '30.00' in table
        assert 'Continuous' in table
        assert '(chance: 25.00%)' in table


class TestRepresent(object):

    def test_tensors(self, continuous, discrete):
        utts = synthetic('continuous', n_speakers=2, per_speaker=2)
        reps = represent(continuous, utts)
        assert reps[0].dtype == torch.float32
        ids = represent(discrete, synthetic('discrete', n_speakers=2, per_speaker=2))
        assert ids[0].dtype == torch.long

    def test_failure_names_provider(self):
        def broken(utt):
            raise RuntimeError('model offline')

        rep = CallableRepresentation('ext', broken, 'continuous', dim=3)
        with pytest.raises(ProviderError, match="'ext'"):
            represent(rep, synthetic('continuous', n_speakers=2, per_speaker=1))

    def test_token_representation(self):
        feats, q = toy_features(n_speakers=2, utts_per_speaker=1)
        rep = TokenRepresentation(q)
        assert rep.name == 'tokenizer' and rep.vocab_size == q.V
        ids = rep(feats)
        assert [len(i) for i in ids] == [len(f.tokens) for f in feats]

    def test_semantic_representation(self):
        feats, q = toy_features(n_speakers=2, utts_per_speaker=1)
        provider = ToyTextProvider(d_text=8)
        model = SemEncModel(EncoderConfig(q.V, provider.vocab_size, 8, layers=1, d=16, heads=2))
        frames = SemanticRepresentation(model)(feats)
        assert frames[0].shape == (len(feats[0].tokens), 16)
        requantized = SemanticRepresentation(model, tokenizer=q)(feats)
        assert np.allclose(requantized[0], frames[0])
        feats[0].tokens = None
        with pytest.raises(ValueError):
            SemanticRepresentation(model)(feats)


class TestProbe(object):

    def test_padding_is_ignored(self):
        for pooling in ('mean', 'frame'):
            classifier = ProbeClassifier(ProbeSpec('continuous', 'x', 3, pooling=pooling), dim=4)
            x = torch.randn(2, 6, 4)
            mask = torch.tensor([[True] * 6, [True] * 3 + [False] * 3])
            other = x.clone()
            other[1, 3:] = 50.0
            assert torch.allclose(classifier(x, mask), classifier(other, mask))

    @pytest.mark.parametrize('kind', ['continuous', 'discrete'])
    def test_separable_speakers(self, kind, continuous, discrete):
        representation = continuous if kind == 'continuous' else discrete
        utts = synthetic(kind)
        train, test = split_by_speaker(utts, 0.25, seed=0, key=lambda u: u.utt_id)
        spec = ProbeSpec.for_representation(representation, 4, d=16)
        probe = train_probe(spec, representation, train, epochs=40, lr=0.05, batch_size=8)
        rep = report(probe, test)
        assert rep.accuracy >= 0.9
        assert rep.n_test == len(test)
        assert set(rep.per_speaker_accuracy) == {'s0', 's1', 's2', 's3'}

    def test_shuffled_labels_null_control(self, continuous):
        utts = synthetic('continuous')
        train, test = split_by_speaker(utts, 0.25, seed=0, key=lambda u: u.utt_id)
        spec = ProbeSpec.for_representation(continuous, 4)
        probe = train_probe(spec, continuous, train, epochs=40, lr=0.05, batch_size=8, shuffle_labels=True)
        assert report(probe, test).accuracy < 0.9

    def test_speaker_mismatch(self, continuous):
        utts = synthetic('continuous', n_speakers=3, per_speaker=2)
        with pytest.raises(ValueError):
            train_probe(ProbeSpec('continuous', 'x', 4), continuous, utts)
        with pytest.raises(ValueError):
            train_probe(ProbeSpec('continuous', 'x', 2), continuous, utts[:2])

    def test_report_errors(self, continuous):
        utts = synthetic('continuous', n_speakers=2, per_speaker=3)
        probe = train_probe(ProbeSpec('continuous', 'x', 2), continuous, utts, epochs=1)
        with pytest.raises(ValueError):
            report(probe, [])
        with pytest.raises(ValueError):
            report(probe, [Utterance('u', 'stranger', np.zeros((3, 6)))])

    @pytest.mark.slow
    def test_quantizer_tokens_reveal_speaker(self):
        feats, q = toy_features(n_speakers=4, utts_per_speaker=12, seed=4)
        train, test = split_by_speaker(feats, 0.25, seed=0, key=lambda f: f.utt_id)
        representation = TokenRepresentation(q)
        probe = train_probe(ProbeSpec.for_representation(representation, 4), representation, train, epochs=20)
        assert report(probe, test).accuracy > 0.25
