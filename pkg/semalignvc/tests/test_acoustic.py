"""
Test span masks, the flow-matching loss, infilling and end-to-end conversion
"""

import os

import numpy as np
import pytest
import torch

from semalignvc.core.corpus import ToySpeakerProfile, default_symbols, synthesize_toy_utterance
from semalignvc.core.features import compute_mel
from semalignvc.core.textref import ToyTextProvider
from semalignvc.errors import StageError
from semalignvc.models.acoustic import (AcousticConfig, AcousticExample, AcousticModel, AcousticTrainConfig,
                                        AcousticTrainer, FlowBatch, SpanMask, VCModels, cfm_loss, convert_files,
                                        flow_path, infill, load_acoustic, make_flow_batch, masked_mse,
                                        mel_statistics, predict_tokens, sample_span_mask, save_acoustic,
                                        span_mask_from_ratio, upsample_tokens, vc_infer)
from semalignvc.models.semenc import EncoderConfig, SemEncModel
from semalignvc.models.semlm import LMConfig, SemanticLM
from semalignvc.tests.utils import (TINY_N_MELS, TINY_STACK, temporary_file, tiny_feature_config, tiny_quantizer,
                                    toy_features)
from semalignvc.utils import read_wav, write_wav

V = 8
N_MELS = 3


@pytest.fixture()
def model():
    torch.manual_seed(0)
    yield AcousticModel(AcousticConfig(V, N_MELS, stack=2, layers=1, d=8, heads=2, dropout=0.0))


def fixed_batch(T=6, dtype=torch.float32):
    generator = torch.Generator().manual_seed(0)
    x1 = torch.randn(1, T, N_MELS, generator=generator, dtype=dtype)
    x0 = torch.randn(1, T, N_MELS, generator=generator, dtype=dtype)
    mask = torch.zeros(1, T, dtype=torch.bool)
    mask[0, 2:5] = True
    ctx = x1.masked_fill(mask.unsqueeze(-1), 0.0)
    tokens = torch.arange(T).unsqueeze(0) % V
    return FlowBatch(x1, x0, torch.tensor([0.3], dtype=dtype), ctx, tokens, mask, torch.ones(1, T, dtype=torch.bool))


class TestSpanMask(object):

    def test_spans(self):
        m = SpanMask(10, [(6, 8), (1, 3)])
        assert m.spans == [(1, 3), (6, 8)]
        assert np.flatnonzero(m.mask).tolist() == [1, 2, 6, 7]
        assert m.fraction == pytest.approx(0.4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SpanMask(10, [(1, 5), (4, 6)])
        with pytest.raises(ValueError):
            SpanMask(10, [(8, 12)])
        with pytest.raises(ValueError):
            SpanMask(10, [(3, 3)])

    def test_from_ratio(self):
        m = span_mask_from_ratio(10, 0.7, offset=8)
        assert m.spans == [(3, 10)]
        assert span_mask_from_ratio(10, 0.0).spans == [(0, 1)]

    def test_sampled_ratios(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = sample_span_mask(50, rng)
            assert len(m.spans) == 1
            assert 0.69 <= m.fraction <= 1.0

    def test_full_mask(self):
        m = sample_span_mask(20, np.random.default_rng(0), full_prob=1.0)
        assert m.mask.all()

    def test_too_short(self):
        with pytest.raises(ValueError):
            sample_span_mask(3, np.random.default_rng(0))

    def test_upsample_tokens(self):
        assert upsample_tokens([4, 1], 3).tolist() == [4, 4, 4, 1, 1, 1]


class TestFlowMatching(object):

    def test_path_ends(self):
        x0, x1 = torch.randn(2, 4, 3), torch.randn(2, 4, 3)
        x_t, u = flow_path(x0, x1, torch.zeros(2), sigma_min=1e-4)
        assert torch.allclose(x_t, x0)
        x_t, _ = flow_path(x0, x1, torch.ones(2), sigma_min=1e-4)
        assert torch.allclose(x_t, x1 + 1e-4 * x0)
        # the target field is the time derivative of the path
        t = torch.tensor([0.2, 0.6])
        step = 1e-3
        ahead, _ = flow_path(x0, x1, t + step)
        here, _ = flow_path(x0, x1, t)
        assert torch.allclose((ahead - here) / step, u, atol=1e-2)

    def test_zero_loss_on_target_field(self):
        batch = fixed_batch()
        _, u = flow_path(batch.x0, batch.x1, batch.t)
        noisy = u.clone()
        noisy[0, :2] += 10.0

        def oracle(x_t, t, ctx, tokens, mask, valid):
            return noisy

        assert float(cfm_loss(oracle, batch)) == pytest.approx(0.0, abs=1e-10)

    def test_masked_mse_needs_frames(self):
        with pytest.raises(ValueError):
            masked_mse(torch.zeros(1, 3, 2), torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))

    def test_gradient(self, model):
        model.double()
        batch = fixed_batch(dtype=torch.float64)
        x1 = batch.x1.clone().requires_grad_(True)

        def loss(x):
            return cfm_loss(model, FlowBatch(x, batch.x0, batch.t, batch.ctx, batch.tokens, batch.mask,
                                             batch.valid))

        assert torch.autograd.gradcheck(loss, (x1,), eps=1e-6, atol=1e-4)

    def test_batch_validation(self):
        batch = fixed_batch()
        with pytest.raises(ValueError):
            FlowBatch(batch.x1, batch.x0, torch.tensor([1.5]), batch.ctx, batch.tokens, batch.mask, batch.valid)
        with pytest.raises(ValueError):
            FlowBatch(batch.x1, batch.x0[:, :4], batch.t, batch.ctx, batch.tokens, batch.mask, batch.valid)


class TestInfill(object):

    def test_unmasked_frames_untouched(self, model):
        rng = np.random.default_rng(0)
        ctx = rng.standard_normal((10, N_MELS))
        mask = span_mask_from_ratio(10, 0.4, offset=6)
        out = infill(model, ctx, mask, np.arange(10) % V, steps=2, seed=1)
        assert np.array_equal(out[:6], ctx[:6])
        assert not np.allclose(out[6:], ctx[6:])
        assert np.all(np.isfinite(out))
        assert np.array_equal(out, infill(model, ctx, mask, np.arange(10) % V, steps=2, seed=1))

    def test_masked_context_is_ignored(self, model):
        rng = np.random.default_rng(0)
        ctx = rng.standard_normal((10, N_MELS))
        mask = np.arange(10) >= 6
        other = ctx.copy()
        other[6:] = 100.0
        tokens = np.arange(10) % V
        assert np.allclose(infill(model, ctx, mask, tokens, steps=2)[6:], infill(model, other, mask, tokens,
                                                                                  steps=2)[6:])

    def test_nothing_masked(self, model):
        ctx = np.ones((5, N_MELS))
        assert np.array_equal(infill(model, ctx, np.zeros(5, dtype=bool), np.zeros(5)), ctx)

    def test_lengths(self, model):
        with pytest.raises(ValueError):
            infill(model, np.zeros((5, N_MELS)), np.ones(4, dtype=bool), np.zeros(5))


class TestTraining(object):

    @pytest.fixture()
    def examples(self):
        feats, q = toy_features(n_speakers=2, utts_per_speaker=2, seed=3)
        yield [AcousticExample(f.utt_id, f.speaker_id, f.mel.frames, f.tokens, TINY_STACK) for f in feats], q

    def test_example(self, examples):
        ex = examples[0][0]
        assert len(ex) == len(ex.tokens)
        assert len(ex) % TINY_STACK == 0
        with pytest.raises(ValueError):
            AcousticExample('u', 's', np.zeros((3, 2)), [1, 2], 2)

    def test_make_flow_batch(self, examples):
        examples, q = examples
        torch.manual_seed(0)
        model = AcousticModel(AcousticConfig(q.V, TINY_N_MELS, stack=TINY_STACK, layers=1, d=16, heads=2))
        batch = make_flow_batch(model, examples[:3], np.random.default_rng(0), torch.Generator().manual_seed(0))
        T = max(len(ex) for ex in examples[:3])
        assert batch.x1.shape == (3, T, TINY_N_MELS)
        assert batch.valid.sum(dim=1).tolist() == [len(ex) for ex in examples[:3]]
        hidden = batch.mask | ~batch.valid
        assert float(batch.ctx[hidden].abs().sum()) == 0.0
        assert not (batch.mask & ~batch.valid).any()

    def test_trainer_and_checkpoint(self, examples):
        examples, q = examples
        torch.manual_seed(0)
        model = AcousticModel(AcousticConfig(q.V, TINY_N_MELS, stack=TINY_STACK, layers=1, d=16, heads=2))
        trainer = AcousticTrainer(model, AcousticTrainConfig(steps=3, batch_size=2, warmup=1, log_every=0))
        history = trainer.train(examples)
        assert len(history) == 3
        assert all(np.isfinite(history))
        mean, std = mel_statistics(examples)
        assert np.allclose(model.mel_mean.numpy(), mean, atol=1e-4)
        assert np.all(std >= 1e-3)
        with temporary_file('acoustic.pt') as fname:
            save_acoustic(model, fname, step=3)
            loaded = load_acoustic(fname)
        assert torch.allclose(loaded.mel_std, model.mel_std)
        assert loaded.config.fingerprint() == model.config.fingerprint()


class TestConversion(object):

    @pytest.fixture()
    def models(self):
        config = tiny_feature_config()
        q = tiny_quantizer(0, config)
        provider = ToyTextProvider(d_text=16, seed=0)
        torch.manual_seed(0)
        semenc = SemEncModel(EncoderConfig(q.V, provider.vocab_size, 16, layers=1, d=16, heads=2))
        lm = SemanticLM(LMConfig(q.V, config.n_mels, 16, layers=1, d=16, heads=2, dropout=0.0))
        with torch.no_grad():
            lm.head.bias[lm.config.eos_id] = -100.0
        acoustic = AcousticModel(AcousticConfig(q.V, config.n_mels, stack=q.stack, layers=1, d=16, heads=2))
        yield VCModels(config, q, semenc, lm, acoustic, ode_steps=2)

    @pytest.fixture()
    def wavs(self):
        table = default_symbols()
        src, _ = synthesize_toy_utterance(ToySpeakerProfile(110.0, seed=1, name='a'),
                                          [table[ch] for ch in 'abcdef'], seed=1)
        ref, _ = synthesize_toy_utterance(ToySpeakerProfile(220.0, formant_shift=1.2, seed=2, name='b'),
                                          [table[ch] for ch in 'ghij'], seed=2)
        yield src, ref

    def test_predict_tokens(self, models, wavs):
        result, z_ref, mu_ref = predict_tokens(wavs[0], wavs[1], models)
        n_src = len(models.tokenize(compute_mel(wavs[0], models.feature_config)))
        assert len(result.tokens) == n_src + 16
        assert result.truncated
        assert mu_ref.shape == (len(z_ref) * models.stack, models.feature_config.n_mels)

    def test_vc_infer(self, models, wavs):
        result = vc_infer(wavs[0], wavs[1], models, seed=0)
        assert len(result.mel) == len(result.tokens) * models.stack
        assert result.mel.n_mels == models.feature_config.n_mels
        assert np.all(np.isfinite(result.mel.frames))
        again = vc_infer(wavs[0], wavs[1], models, seed=0)
        assert np.array_equal(again.mel.frames, result.mel.frames)

    def test_failing_stage_is_named(self, models, wavs):
        with pytest.raises(StageError) as excinfo:
            vc_infer(wavs[0], np.zeros(100), models)
        assert excinfo.value.stage == 'reference'

    def test_no_tokens(self, models, wavs):
        with torch.no_grad():
            models.lm.head.bias[models.lm.config.eos_id] = 100.0
        with pytest.raises(StageError) as excinfo:
            vc_infer(wavs[0], wavs[1], models)
        assert excinfo.value.stage == 'lm'

    def test_convert_files(self, models, wavs):
        with temporary_file('vc') as dirname:
            src_path = os.path.join(dirname, 'src.wav')
            ref_path = os.path.join(dirname, 'ref.wav')
            out_path = os.path.join(dirname, 'out.wav')
            write_wav(src_path, wavs[0])
            write_wav(ref_path, wavs[1])
            result = convert_files(src_path, ref_path, out_path, models, {'griffin-lim-iters': 2})
            out = read_wav(out_path)
        hop = models.feature_config.hop_length
        assert len(out) == len(result.mel) * hop
        assert np.abs(out).max() <= 1.0

    def test_load_missing(self):
        with pytest.raises(StageError):
            VCModels.load({'tokenizer': 'q.json'}, {})
