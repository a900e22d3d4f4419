#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Flow-matching acoustic model and the conversion pipeline built on it.

The acoustic model fills a masked region of a mel spectrogram given the unmasked
context and the audio tokens of the whole sequence. It is trained with conditional
flow matching on random spans and sampled with the midpoint ODE solver.

For conversion the reference utterance is the context and the region to fill has the
length of the tokens generated by the language model.
"""

import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from semalignvc import trange
from semalignvc.core.features import (FeatureConfig, MelSpectrogram, compute_mel, extract_prosody,
                                      normalize_prosody, pool_prosody)
from semalignvc.core.quantizer import RandomQuantizer, quantize
from semalignvc.errors import StageError
from semalignvc.models.encoder import load_masked_encoder
from semalignvc.models.layers import (SinusoidalPositionalEncoding, TransformerStack, check_finite,
                                      lengths_to_mask, sample_batch, timestep_embedding, warmup_cosine_schedule)
from semalignvc.models.semenc import encode, load_semenc
from semalignvc.models.semlm import generate, load_semlm
from semalignvc.models.vocoder import mel_to_audio
from semalignvc.specutils.ode import midpoint_solve
from semalignvc.utils import atomic_save, fingerprint, load_checkpoint, read_wav, write_wav

__all__ = ['SpanMask', 'FlowBatch', 'AcousticConfig', 'AcousticModel', 'AcousticExample', 'AcousticTrainConfig',
           'AcousticTrainer', 'VCModels', 'VCResult', 'sample_span_mask', 'span_mask_from_ratio', 'flow_path',
           'cfm_loss', 'masked_mse', 'make_flow_batch', 'mel_statistics', 'upsample_tokens', 'infill',
           'predict_tokens', 'vc_infer', 'convert_files', 'save_acoustic', 'load_acoustic']

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
MIN_MASK_RATIO = 0.7
MAX_MASK_RATIO = 1.0
FULL_MASK_PROB = 0.1
ODE_STEPS = 12


class SpanMask(object):
    """Frames to generate (``mask`` True) as a vector and as ``[start, end)`` spans."""

    def __init__(self, T, spans):
        self.T = int(T)
        spans = sorted((int(s), int(e)) for s, e in spans)
        mask = np.zeros(self.T, dtype=bool)
        prev_end = 0
        for start, end in spans:
            if start < prev_end or start >= end or end > self.T:
                raise ValueError("invalid span [{}, {}) in a sequence of {} frames".format(start, end, self.T))
            mask[start:end] = True
            prev_end = end
        self.spans = spans
        self.mask = mask

    def __len__(self):
        return self.T

    @property
    def fraction(self):
        return self.mask.mean()


def span_mask_from_ratio(T, ratio, offset=0):
    """One span of ``round(ratio * T)`` frames (at least one) starting at `offset`."""
    length = min(T, max(1, int(round(ratio * T))))
    offset = min(int(offset), T - length)
    return SpanMask(T, [(offset, offset + length)])


def sample_span_mask(T, rng, min_ratio=MIN_MASK_RATIO, max_ratio=MAX_MASK_RATIO, full_prob=FULL_MASK_PROB):
    """Random training mask: the whole sequence with probability `full_prob`, else one span.

    The span length ratio is uniform in ``[min_ratio, max_ratio]`` and its offset uniform.
    """
    if T < 4:
        raise ValueError("need at least 4 frames to sample a span mask, got {}".format(T))
    if rng.random() < full_prob:
        return SpanMask(T, [(0, T)])
    ratio = rng.uniform(min_ratio, max_ratio)
    length = min(T, max(1, int(round(ratio * T))))
    return span_mask_from_ratio(T, ratio, int(rng.integers(0, T - length + 1)))


def upsample_tokens(ids, stack):
    """Repeat every token `stack` times (token rate to mel frame rate)."""
    return np.repeat(np.asarray(getattr(ids, 'ids', ids), dtype=np.int64), stack)


class FlowBatch(object):
    """Padded training batch: target, noise, times, masked context, frame tokens and masks."""

    def __init__(self, x1, x0, t, ctx, tokens, mask, valid):
        if not (x1.shape == x0.shape == ctx.shape) or tokens.shape != x1.shape[:2] or mask.shape != tokens.shape:
            raise ValueError("flow batch shapes disagree")
        if t.min() < 0 or t.max() > 1:
            raise ValueError("flow times should lie in [0, 1]")
        self.x1 = x1
        self.x0 = x0
        self.t = t
        self.ctx = ctx
        self.tokens = tokens
        self.mask = mask
        self.valid = valid


def flow_path(x0, x1, t, sigma_min=SIGMA_MIN):
    """Point ``x_t`` on the conditional path and its target field ``u``."""
    t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    x_t = (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1
    u = x1 - (1.0 - sigma_min) * x0
    return x_t, u


def masked_mse(pred, target, mask):
    """Mean squared error over the frames where `mask` is True."""
    if not mask.any():
        raise ValueError("the flow-matching loss needs at least one masked frame")
    return ((pred - target) ** 2)[mask].mean()


def cfm_loss(model, batch, sigma_min=SIGMA_MIN):
    """Conditional flow-matching loss over the masked (valid) frames of `batch`."""
    x_t, u = flow_path(batch.x0, batch.x1, batch.t, sigma_min)
    pred = model(x_t, batch.t, batch.ctx, batch.tokens, batch.mask, batch.valid)
    return masked_mse(pred, u, batch.mask & batch.valid)


class AcousticConfig(object):

    def __init__(self, V, n_mels, stack=2, layers=4, d=128, heads=4, dropout=0.1, max_len=4096):
        self.V = int(V)
        self.n_mels = int(n_mels)
        self.stack = int(stack)
        self.layers = int(layers)
        self.d = int(d)
        self.heads = int(heads)
        self.dropout = float(dropout)
        self.max_len = int(max_len)

    @classmethod
    def from_settings(cls, settings, V, n_mels, stack):
        sect = settings.get('acoustic', {})
        return cls(V, n_mels, stack=stack, layers=sect.get('layers', 4), d=sect.get('d', 128),
                   heads=sect.get('heads', 4), dropout=sect.get('dropout', 0.1))

    def to_dict(self):
        return OrderedDict([('V', self.V), ('n_mels', self.n_mels), ('stack', self.stack), ('layers', self.layers),
                            ('d', self.d), ('heads', self.heads), ('dropout', self.dropout),
                            ('max_len', self.max_len)])

    @classmethod
    def from_dict(cls, item):
        return cls(**item)

    def fingerprint(self):
        return fingerprint(self.to_dict())


class AcousticModel(nn.Module):
    """Non-causal transformer predicting the flow field of the masked frames.

    Frame input: ``[x_t, context, mask flag]`` projected to the model width, plus the
    frame token embedding and the time embedding. Mel frames are handled in the space
    normalized by the stored global statistics.
    """

    def __init__(self, config):
        super(AcousticModel, self).__init__()
        self.config = config
        d = config.d
        self.in_proj = nn.Linear(2 * config.n_mels + 1, d)
        self.token_emb = nn.Embedding(config.V, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.pos = SinusoidalPositionalEncoding(d, config.max_len)
        self.dropout = nn.Dropout(config.dropout)
        self.body = TransformerStack(config.layers, d, config.heads, config.dropout, causal=False)
        self.out = nn.Linear(d, config.n_mels)
        self.register_buffer('mel_mean', torch.zeros(config.n_mels))
        self.register_buffer('mel_std', torch.ones(config.n_mels))

    def set_normalization(self, mean, std):
        self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.mel_mean.dtype))
        self.mel_std.copy_(torch.as_tensor(std, dtype=self.mel_std.dtype))

    def normalize(self, frames):
        return (frames - self.mel_mean) / self.mel_std

    def denormalize(self, frames):
        return frames * self.mel_std + self.mel_mean

    def forward(self, x_t, t, ctx, tokens, mask, valid=None):
        """Flow field [B x T x n_mels].

        Parameters
        ----------
        x_t, ctx : torch.Tensor
            [B x T x n_mels], normalized; `ctx` is zero on masked frames.
        t : torch.Tensor
            [B] flow times.
        tokens : torch.Tensor
            [B x T] frame-rate token ids.
        mask : torch.Tensor
            [B x T], True on frames to generate.
        """
        h = self.in_proj(torch.cat([x_t, ctx, mask.unsqueeze(-1).to(x_t.dtype)], dim=-1))
        h = h + self.token_emb(tokens)
        temb = self.time_mlp(timestep_embedding(t, self.config.d).to(h.dtype))
        h = self.dropout(self.pos(h + temb.unsqueeze(1)))
        return self.out(self.body(h, valid))


class AcousticExample(object):
    """Mel frames of one utterance and its tokens; frames are cut to ``len(tokens) * stack``."""

    def __init__(self, utt_id, speaker_id, mel, tokens, stack):
        tokens = np.asarray(getattr(tokens, 'ids', tokens), dtype=np.int64)
        mel = np.asarray(mel, dtype=np.float32)
        if len(mel) < len(tokens) * stack:
            raise ValueError("'{}': {} mel frames cannot cover {} tokens".format(utt_id, len(mel), len(tokens)))
        self.utt_id = utt_id
        self.speaker_id = speaker_id
        self.mel = mel[:len(tokens) * stack]
        self.tokens = upsample_tokens(tokens, stack)

    def __len__(self):
        return len(self.mel)


def mel_statistics(examples):
    """Per-bin mean and standard deviation over all frames of `examples`."""
    frames = np.concatenate([ex.mel for ex in examples], axis=0)
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-3)


def make_flow_batch(model, examples, rng, generator, min_ratio=MIN_MASK_RATIO, max_ratio=MAX_MASK_RATIO,
                    full_prob=FULL_MASK_PROB):
    """Padded :class:`FlowBatch` with a fresh span mask, noise and time per example."""
    device = model.mel_mean.device
    lens = torch.as_tensor([len(ex) for ex in examples])
    x1 = pad_sequence([model.normalize(torch.as_tensor(ex.mel, device=device)) for ex in examples], batch_first=True)
    tokens = pad_sequence([torch.as_tensor(ex.tokens) for ex in examples], batch_first=True).to(device)
    masks = [torch.as_tensor(sample_span_mask(len(ex), rng, min_ratio, max_ratio, full_prob).mask) for ex in examples]
    mask = pad_sequence(masks, batch_first=True).to(device)
    valid = lengths_to_mask(lens, x1.shape[1]).to(device)
    ctx = x1.masked_fill((mask | ~valid).unsqueeze(-1), 0.0)
    x0 = torch.randn(x1.shape, generator=generator).to(device)
    t = torch.rand(len(examples), generator=generator).to(device)
    return FlowBatch(x1, x0, t, ctx, tokens, mask, valid)


def infill(model, ctx, mask, tokens, steps=ODE_STEPS, seed=0):
    """Generate the masked frames of `ctx` by integrating the learned flow from noise.

    Parameters
    ----------
    ctx : numpy.ndarray
        Log-mel frames [T x n_mels]; masked frames are ignored.
    mask : numpy.ndarray or SpanMask
        [T] booleans, True on frames to generate.
    tokens : array of ids
        Frame-rate tokens [T].

    Returns
    -------
    numpy.ndarray
        [T x n_mels]; unmasked frames are returned untouched.
    """
    ctx = np.asarray(ctx)
    mask = np.asarray(getattr(mask, 'mask', mask), dtype=bool)
    tokens = np.asarray(tokens, dtype=np.int64)
    if not (len(ctx) == len(mask) == len(tokens)):
        raise ValueError("context ({}), mask ({}) and tokens ({}) lengths differ".format(
            len(ctx), len(mask), len(tokens)))
    if not mask.any():
        return ctx.copy()
    device = model.mel_mean.device
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            m = torch.as_tensor(mask, device=device).unsqueeze(0)
            c = model.normalize(torch.as_tensor(ctx, dtype=model.mel_mean.dtype, device=device)).unsqueeze(0)
            c = c.masked_fill(m.unsqueeze(-1), 0.0)
            z = torch.as_tensor(tokens, device=device).unsqueeze(0)
            generator = torch.Generator().manual_seed(int(seed))
            x0 = torch.randn(c.shape, generator=generator, dtype=c.dtype).to(device)

            def field(t, x):
                return model(x, torch.full((1,), t, dtype=x.dtype, device=device), c, z, m)

            x1 = model.denormalize(midpoint_solve(field, x0, steps))[0].cpu().numpy()
    finally:
        model.train(was_training)
    return np.where(mask[:, None], x1.astype(ctx.dtype), ctx)


class AcousticTrainConfig(object):

    def __init__(self, steps=6000, batch_size=16, lr=5e-4, warmup=200, sigma_min=SIGMA_MIN,
                 min_mask_ratio=MIN_MASK_RATIO, max_mask_ratio=MAX_MASK_RATIO, full_mask_prob=FULL_MASK_PROB,
                 log_every=100, seed=0, grad_clip=1.0, weight_decay=0.01):
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.warmup = int(warmup)
        self.sigma_min = float(sigma_min)
        self.min_mask_ratio = float(min_mask_ratio)
        self.max_mask_ratio = float(max_mask_ratio)
        self.full_mask_prob = float(full_mask_prob)
        self.log_every = int(log_every)
        self.seed = int(seed)
        self.grad_clip = float(grad_clip)
        self.weight_decay = float(weight_decay)

    @classmethod
    def from_settings(cls, settings, seed=0):
        sect = settings.get('acoustic', {})
        return cls(steps=sect.get('steps', 6000), batch_size=sect.get('batch-size', 16), lr=sect.get('lr', 5e-4),
                   warmup=sect.get('warmup', 200), sigma_min=sect.get('sigma-min', SIGMA_MIN),
                   min_mask_ratio=sect.get('min-mask-ratio', MIN_MASK_RATIO),
                   max_mask_ratio=sect.get('max-mask-ratio', MAX_MASK_RATIO),
                   full_mask_prob=sect.get('full-mask-prob', FULL_MASK_PROB),
                   log_every=sect.get('log-every', 100), seed=seed)

    def to_dict(self):
        return dict(self.__dict__)


class AcousticTrainer(object):
    """Sets the mel statistics from the training data, then optimizes the flow-matching loss."""

    def __init__(self, model, config, device='cpu'):
        self.model = model.to(device)
        self.config = config
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.scheduler = warmup_cosine_schedule(self.optimizer, config.warmup, config.steps)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def train(self, examples, steps=None):
        if not examples:
            raise ValueError("no training examples")
        cfg = self.config
        steps = cfg.steps if steps is None else int(steps)
        if self.step == 0:
            self.model.set_normalization(*mel_statistics(examples))
        history = []
        self.model.train()
        for _ in trange(steps, desc='  acoustic', unit='step'):
            idx = sample_batch(len(examples), cfg.batch_size, self.generator)
            batch = make_flow_batch(self.model, [examples[i] for i in idx], self.rng, self.generator,
                                    cfg.min_mask_ratio, cfg.max_mask_ratio, cfg.full_mask_prob)
            loss = cfm_loss(self.model, batch, cfg.sigma_min)
            check_finite({'cfm': loss}, [examples[i].utt_id for i in idx])
            self.optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.optimizer.step()
            self.scheduler.step()
            self.step += 1
            history.append(float(loss))
            if cfg.log_every and self.step % cfg.log_every == 0:
                logger.info("acoustic step {}: loss={:.4f}".format(self.step, np.mean(history[-cfg.log_every:])))
        self.model.eval()
        return history


def save_acoustic(model, filename, step=0):
    atomic_save({'state_dict': model.state_dict(), 'config': model.config.to_dict(), 'step': step,
                 'fingerprint': model.config.fingerprint()}, filename)


def load_acoustic(filename):
    state = load_checkpoint(filename)
    model = AcousticModel(AcousticConfig.from_dict(state['config']))
    model.load_state_dict(state['state_dict'])
    model.eval()
    return model


class VCModels(object):
    """Everything conversion needs: feature settings, token source, encoder, LM and acoustic model.

    Parameters
    ----------
    tokenizer : RandomQuantizer or MaskedEncoder
        Token source; both map a :class:`MelSpectrogram` to a :class:`TokenSequence`.
    """

    def __init__(self, feature_config, tokenizer, semenc, lm, acoustic, sampler='greedy', top_k=10,
                 temperature=0.8, ode_steps=ODE_STEPS):
        self.feature_config = feature_config
        self.tokenizer = tokenizer
        self.semenc = semenc
        self.lm = lm
        self.acoustic = acoustic
        self.sampler = sampler
        self.top_k = int(top_k)
        self.temperature = float(temperature)
        self.ode_steps = int(ode_steps)

    @property
    def stack(self):
        return self.acoustic.config.stack

    def tokenize(self, mel):
        if isinstance(self.tokenizer, RandomQuantizer):
            return quantize(mel, self.tokenizer)
        return self.tokenizer.tokenize(mel)

    @classmethod
    def load(cls, paths, settings):
        """Load from checkpoint `paths` (keys: tokenizer, semenc, semlm, acoustic).

        A tokenizer path ending in ``.json`` is a quantizer, anything else a masked encoder.
        """
        missing = [key for key in ('tokenizer', 'semenc', 'semlm', 'acoustic') if not paths.get(key)]
        if missing:
            raise StageError('convert', "missing checkpoints: {}".format(', '.join(missing)))
        tokenizer_path = paths['tokenizer']
        tokenizer = RandomQuantizer.load(tokenizer_path) if tokenizer_path.endswith('.json') \
            else load_masked_encoder(tokenizer_path)
        lm_sect = settings.get('lm', {})
        return cls(FeatureConfig.from_settings(settings), tokenizer, load_semenc(paths['semenc']),
                   load_semlm(paths['semlm']), load_acoustic(paths['acoustic']),
                   sampler=lm_sect.get('sampler', 'greedy'), top_k=lm_sect.get('top-k', 10),
                   temperature=lm_sect.get('temperature', 0.8),
                   ode_steps=settings.get('acoustic', {}).get('ode-steps', ODE_STEPS))


class VCResult(object):
    """Converted mel frames and the generated tokens."""

    def __init__(self, mel, tokens, truncated=False):
        self.mel = mel
        self.tokens = tokens
        self.truncated = truncated


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, "{}: {}".format(type(err).__name__, err))


def _source_inputs(models, wav):
    cfg = models.feature_config
    mel = compute_mel(wav, cfg)
    z_a = models.tokenize(mel)
    prosody = pool_prosody(normalize_prosody(extract_prosody(wav, cfg)), models.stack)[:len(z_a)]
    return z_a, prosody


def _reference_inputs(models, wav):
    mel = compute_mel(wav, models.feature_config)
    z_ref = models.tokenize(mel)
    if len(z_ref) == 0:
        raise ValueError("reference too short to tokenize")
    return z_ref, mel.frames[:len(z_ref) * models.stack]


def predict_tokens(src_wav, ref_wav, models, seed=0):
    """Audio tokens of `src_wav` in the voice of `ref_wav`, before the acoustic model.

    Returns
    -------
    (GenerationResult, TokenSequence, numpy.ndarray)
        Generated tokens, reference tokens and the reference mel frames they cover.
    """
    z_a, prosody = _stage('source', _source_inputs, models, src_wav)
    z_ref, mu_ref = _stage('reference', _reference_inputs, models, ref_wav)
    a_s = _stage('semenc', encode, models.semenc, z_a).frames
    result = _stage('lm', generate, models.lm, a_s, prosody, mu_ref, sampler=models.sampler, top_k=models.top_k,
                    temperature=models.temperature, seed=seed, frame_rate=z_a.frame_rate)
    if len(result.tokens) == 0:
        raise StageError('lm', "no audio tokens generated")
    return result, z_ref, mu_ref


def vc_infer(src_wav, ref_wav, models, seed=0):
    """Convert `src_wav` to the voice of `ref_wav`.

    The source gives the tokens, semantic frames and normalized prosody; the reference
    gives the mel prompt of the LM and the context of the acoustic model, with its own
    tokens in front of the generated ones.

    Returns
    -------
    VCResult
        ``len(tokens) * stack`` mel frames.

    Raises
    ------
    StageError
        Naming the failing stage (source, reference, semenc, lm, acoustic).
    """
    result, z_ref, mu_ref = predict_tokens(src_wav, ref_wav, models, seed=seed)
    z_hat = result.tokens
    stack = models.stack
    n_ref = len(mu_ref)
    ctx = np.concatenate([mu_ref, np.zeros((len(z_hat) * stack, mu_ref.shape[1]))], axis=0)
    mask = np.arange(len(ctx)) >= n_ref
    tokens = upsample_tokens(np.concatenate([z_ref.ids, z_hat.ids]), stack)
    out = _stage('acoustic', infill, models.acoustic, ctx, mask, tokens, steps=models.ode_steps, seed=seed)
    mel = MelSpectrogram(out[n_ref:], models.feature_config.frame_rate)
    return VCResult(mel, z_hat, truncated=result.truncated)


def convert_files(src_path, ref_path, out_path, models, vocoder_settings=None, seed=0):
    """Convert one WAV file with a reference WAV file and write the result (16-bit PCM)."""
    cfg = models.feature_config
    result = vc_infer(read_wav(src_path, cfg.sample_rate), read_wav(ref_path, cfg.sample_rate), models, seed=seed)
    vocoder_settings = vocoder_settings or {}
    wav = _stage('vocoder', mel_to_audio, result.mel.frames, cfg,
                 mode=vocoder_settings.get('mode', 'pseudo_inverse_phase_recon'),
                 n_iter=vocoder_settings.get('griffin-lim-iters', 32), command=vocoder_settings.get('command'))
    write_wav(out_path, wav, cfg.sample_rate)
    logger.info("converted {} with reference {} -> {} ({} tokens{})".format(
        src_path, ref_path, out_path, len(result.tokens), ', truncated' if result.truncated else ''))
    return result
