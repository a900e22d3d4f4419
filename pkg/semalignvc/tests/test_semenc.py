"""
Test the semantic encoder, its losses and its checkpoints
"""

import math
import os

import numpy as np
import pytest
import torch

from semalignvc.core.quantizer import TokenSequence
from semalignvc.core.textref import ToyTextProvider
from semalignvc.errors import AlignmentError, CheckpointError
from semalignvc.models.semenc import (EncoderConfig, SemanticSequence, SemEncModel, SemEncTrainConfig,
                                      SemEncTrainer, align_to_text, build_examples, collate, ctc_loss,
                                      ctc_min_length, dump_alignments, encode, encode_batch, load_semenc,
                                      save_semenc, training_step)
from semalignvc.tests.utils import temporary_file, tiny_settings, toy_features


@pytest.fixture(scope='module')
def toy():
    feats, q = toy_features(n_speakers=2, utts_per_speaker=2, seed=1)
    provider = ToyTextProvider(d_text=16, seed=0)
    yield feats, q, provider


@pytest.fixture()
def model(toy):
    _, q, provider = toy
    torch.manual_seed(0)
    config = EncoderConfig(q.V, provider.vocab_size, provider.d_text, layers=1, d=32, heads=2, dropout=0.0)
    yield SemEncModel(config)


class TestConfig(object):

    def test_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(32, 17, 16, d=30, heads=4)
        with pytest.raises(ValueError):
            EncoderConfig(32, 17, 16, layers=0)

    def test_from_settings(self):
        config = EncoderConfig.from_settings(tiny_settings(), 32, 17, 16)
        assert (config.layers, config.d, config.heads) == (1, 32, 2)
        assert EncoderConfig.from_dict(config.to_dict()).fingerprint() == config.fingerprint()

    def test_train_config(self):
        config = SemEncTrainConfig.from_settings(tiny_settings(), seed=4)
        assert config.steps == 6
        assert config.seed == 4
        assert config.lambda_ctc == pytest.approx(0.5)


class TestEncode(object):

    def test_one_frame_per_token(self, model, toy):
        feats = toy[0][0]
        frames = encode(model, feats.tokens)
        assert isinstance(frames, SemanticSequence)
        assert frames.frames.shape == (len(feats.tokens), 32)
        assert frames.source == 'encoder_output'

    def test_bad_tokens(self, model):
        with pytest.raises(ValueError):
            encode(model, np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            encode(model, np.array([0, 32]))

    def test_batch_matches_single(self, model, toy):
        token_lists = [f.tokens.ids for f in toy[0]]
        batch = encode_batch(model, token_lists, batch_size=3)
        assert len(batch) == len(token_lists)
        for ids, frames in zip(token_lists, batch):
            assert np.allclose(frames, encode(model, ids).frames, atol=1e-4)

    def test_keeps_training_mode(self, model, toy):
        model.train()
        encode(model, toy[0][0].tokens)
        assert model.training

    def test_semantic_sequence_validation(self):
        with pytest.raises(ValueError):
            SemanticSequence(np.zeros((3, 2)), source='mel')
        with pytest.raises(ValueError):
            SemanticSequence(np.array([[np.inf, 0.0]]))


class TestCTC(object):

    def test_min_length(self):
        assert ctc_min_length([1, 2, 3]) == 3
        assert ctc_min_length([1, 1, 2, 2]) == 6

    def test_brute_force(self):
        logits = torch.tensor([[0.3, 1.2, -0.5], [0.8, 0.1, 0.4]], dtype=torch.float64)
        p = torch.softmax(logits, dim=-1).numpy()
        # frame paths collapsing to [1]: 1 1, 1 blank, blank 1
        prob = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
        assert float(ctc_loss(logits, [1])) == pytest.approx(-math.log(prob))

    def test_too_short(self):
        with pytest.raises(AlignmentError):
            ctc_loss(torch.zeros(2, 3), [1, 1])

    def test_with_head(self, model):
        a_s = torch.randn(10, 32)
        loss = ctc_loss(a_s, [1, 2, 3], head=model.ctc_head)
        assert torch.isfinite(loss)
        loss.backward()
        assert model.ctc_head.weight.grad is not None


class TestTraining(object):

    def test_build_examples_skips_short(self, toy):
        feats, _, provider = toy
        short = feats[0].trim(2)
        short.tokens = TokenSequence(feats[0].tokens.ids[:1], feats[0].tokens.frame_rate)
        examples = build_examples([short] + feats[1:], provider)
        assert [ex.utt_id for ex in examples] == [f.utt_id for f in feats[1:]]
        ex = examples[0]
        assert ex.text_emb.shape == (len(ex.text_ids), provider.d_text)

    def test_build_examples_needs_tokens(self, toy):
        feats, _, provider = toy
        untokenized = feats[0].trim(len(feats[0]))
        untokenized.tokens = None
        with pytest.raises(ValueError):
            build_examples([untokenized], provider)

    def test_training_step(self, model, toy):
        examples = build_examples(toy[0], toy[2])
        batch = collate(examples)
        assert batch['tokens'].shape[0] == len(examples)
        losses = training_step(model, batch)
        for name in ('ctc', 'sem', 'forward_sum', 'total'):
            assert torch.isfinite(losses[name])
        total = 0.5 * losses['ctc'] + 1.0 * losses['sem'] + 0.1 * losses['forward_sum']
        assert float(losses['total']) == pytest.approx(float(total), rel=1e-5)
        losses['total'].backward()
        assert model.text_proj.weight.grad is not None

    def test_disabled_components(self, model, toy):
        batch = collate(build_examples(toy[0], toy[2]))
        losses = training_step(model, batch, lambda_ctc=0.0, lambda_sem=0.0, lambda_fs=0.0)
        assert float(losses['total']) == 0.0

    def test_ctc_only(self, model, toy):
        batch = collate(build_examples(toy[0], toy[2]))
        losses = training_step(model, batch, lambda_sem=0.0, lambda_fs=0.0)
        assert float(losses['sem']) == 0.0
        assert float(losses['forward_sum']) == 0.0
        assert float(losses['total']) == pytest.approx(0.5 * float(losses['ctc']), rel=1e-6)
        losses['total'].backward()
        # the text projection only serves the alignment losses
        assert model.text_proj.weight.grad is None

    def test_trainer_and_checkpoint(self, model, toy):
        feats, _, provider = toy
        examples = build_examples(feats, provider)
        trainer = SemEncTrainer(model, SemEncTrainConfig(steps=3, batch_size=2, warmup=1, log_every=0))
        history = trainer.train(examples)
        assert len(history) == 3
        assert trainer.step == 3
        assert all(np.isfinite(h['total']) for h in history)
        with temporary_file('semenc.pt') as fname:
            save_semenc(model, fname, provider.provider_id, step=trainer.step)
            loaded = load_semenc(fname, provider_id=provider.provider_id)
            assert np.allclose(encode(loaded, feats[0].tokens).frames, encode(model, feats[0].tokens).frames)
            with pytest.raises(CheckpointError):
                load_semenc(fname, provider_id='toy:99:abc')

    def test_no_examples(self, model):
        with pytest.raises(ValueError):
            SemEncTrainer(model, SemEncTrainConfig(steps=1)).train([])

    def test_align_to_text(self, model, toy):
        feats, _, provider = toy
        a_s, tau_up, path = align_to_text(model, feats[0].tokens, provider.embed(feats[0].text).embeddings)
        assert a_s.shape == tau_up.shape == (len(feats[0].tokens), 32)
        assert path.n_text == len(feats[0].text)
        assert path.durations.sum() == len(feats[0].tokens)

    def test_dump_alignments(self, model, toy):
        pytest.importorskip('matplotlib')
        examples = build_examples(toy[0][:2], toy[2])
        with temporary_file('alignments') as out_dir:
            dump_alignments(model, examples, out_dir)
            for ex in examples:
                assert os.path.isfile(os.path.join(out_dir, ex.utt_id + '.png'))

    @pytest.mark.slow
    def test_losses_decrease(self):
        feats, q = toy_features(n_speakers=3, utts_per_speaker=6, seed=5)
        provider = ToyTextProvider(d_text=16, seed=0)
        examples = build_examples(feats, provider)
        torch.manual_seed(0)
        model = SemEncModel(EncoderConfig(q.V, provider.vocab_size, 16, layers=2, d=64, heads=4))
        history = SemEncTrainer(model, SemEncTrainConfig(steps=150, batch_size=8, warmup=10,
                                                         log_every=0)).train(examples)
        first = np.mean([h['total'] for h in history[:10]])
        last = np.mean([h['total'] for h in history[-10:]])
        assert last < 0.7 * first
