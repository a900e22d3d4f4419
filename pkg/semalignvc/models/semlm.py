#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Decoder-only language model over audio tokens.

A training prompt is laid out as::

    [SOS] semantic frames [SEP] reference mel frames [SEP] audio tokens [EOS]

where the semantic frames are the semantic encoder output concatenated with the
normalized prosody (log-f0, voicing, energy) of the same utterance, and the reference
mel frames come from another excerpt of the same speaker. The cross-entropy only
covers the audio tokens and the final EOS. At inference the prompt stops after the
second SEP and the model writes the tokens of the converted utterance.

The semantic frames enter the model detached, so the LM never trains the semantic
encoder.
"""

import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from semalignvc import trange
from semalignvc.core.quantizer import TokenSequence
from semalignvc.errors import CheckpointError
from semalignvc.models.layers import (SinusoidalPositionalEncoding, TransformerStack, check_finite,
                                      lengths_to_mask, sample_batch, warmup_cosine_schedule)
from semalignvc.models.semenc import encode_batch
from semalignvc.utils import atomic_save, fingerprint, load_checkpoint

__all__ = ['SOS', 'SEMANTIC', 'SEP', 'REF_MEL', 'TOKENS', 'EOS', 'LMConfig', 'PromptSequence', 'ReferenceSplit',
           'GenerationResult', 'SemanticLM', 'LMExample', 'LMTrainConfig', 'LMTrainer', 'segment_reference',
           'build_prompt', 'lm_loss', 'lm_loss_from_logits', 'generate', 'token_accuracy', 'build_lm_examples',
           'save_semlm', 'load_semlm']

logger = logging.getLogger(__name__)

SOS, SEMANTIC, SEP, REF_MEL, TOKENS, EOS = 'SOS', 'SEMANTIC', 'SEP', 'REF_MEL', 'TOKENS', 'EOS'
ROLES = (SOS, SEMANTIC, SEP, REF_MEL, TOKENS, EOS)
ROLE_INDEX = dict((role, i) for i, role in enumerate(ROLES))
TRAIN_LAYOUT = (SOS, SEMANTIC, SEP, REF_MEL, SEP, TOKENS, EOS)

IGNORE_INDEX = -100
REF_FRACTION = 0.25
MIN_TOKENS = 16
EXTRA_TOKENS = 16
DEFAULT_TOKEN_RATE = 50.0
PROSODY_DIM = 3


class LMConfig(object):
    """Architecture of the language model.

    The vocabulary holds the `V` audio tokens followed by SOS, SEP and EOS.
    """

    def __init__(self, V, n_mels, d_sem, layers=4, d=128, heads=4, dropout=0.1, max_len=1024):
        if V < 1:
            raise ValueError("the audio vocabulary must not be empty")
        self.V = int(V)
        self.n_mels = int(n_mels)
        self.d_sem = int(d_sem)
        self.layers = int(layers)
        self.d = int(d)
        self.heads = int(heads)
        self.dropout = float(dropout)
        self.max_len = int(max_len)

    @property
    def vocab(self):
        return self.V + 3

    @property
    def sos_id(self):
        return self.V

    @property
    def sep_id(self):
        return self.V + 1

    @property
    def eos_id(self):
        return self.V + 2

    @classmethod
    def from_settings(cls, settings, V, n_mels, d_sem):
        sect = settings.get('lm', {})
        return cls(V, n_mels, d_sem, layers=sect.get('layers', 4), d=sect.get('d', 128),
                   heads=sect.get('heads', 4), dropout=sect.get('dropout', 0.1), max_len=sect.get('max-len', 1024))

    def to_dict(self):
        return OrderedDict([('V', self.V), ('n_mels', self.n_mels), ('d_sem', self.d_sem), ('layers', self.layers),
                            ('d', self.d), ('heads', self.heads), ('dropout', self.dropout),
                            ('max_len', self.max_len)])

    @classmethod
    def from_dict(cls, item):
        return cls(**item)

    def fingerprint(self):
        return fingerprint(self.to_dict())


class PromptSequence(object):
    """Ordered (role, payload) segments of one prompt.

    Payloads: None for SOS/SEP/EOS, ``(a_s, prosody)`` for SEMANTIC, ``[R x n_mels]`` frames
    for REF_MEL and an id array for TOKENS. Generation prompts end after the second SEP.
    """

    def __init__(self, segments):
        self.segments = list(segments)
        layout = tuple(role for role, _ in self.segments)
        if layout != TRAIN_LAYOUT and layout != TRAIN_LAYOUT[:5]:
            raise ValueError("invalid prompt layout {}".format(layout))

    @property
    def training(self):
        return len(self.segments) == len(TRAIN_LAYOUT)

    @staticmethod
    def _segment_length(role, payload):
        if payload is None:
            return 1
        if role == SEMANTIC:
            return len(payload[0])
        return len(payload)

    def __len__(self):
        return sum(self._segment_length(role, payload) for role, payload in self.segments)

    @property
    def roles(self):
        """Role index per position."""
        out = []
        for role, payload in self.segments:
            out.extend([ROLE_INDEX[role]] * self._segment_length(role, payload))
        return np.asarray(out, dtype=np.int64)

    @property
    def loss_mask(self):
        roles = self.roles
        return (roles == ROLE_INDEX[TOKENS]) | (roles == ROLE_INDEX[EOS])

    def targets(self, eos_id):
        """Target id per position: the token (or EOS) where the loss applies, IGNORE_INDEX elsewhere."""
        out = np.full(len(self), IGNORE_INDEX, dtype=np.int64)
        if not self.training:
            return out
        tokens = np.asarray(self.segments[5][1], dtype=np.int64)
        start = len(self) - len(tokens) - 1
        out[start:start + len(tokens)] = tokens
        out[-1] = eos_id
        return out


class ReferenceSplit(object):
    """Contiguous reference excerpt ``[offset, offset + length)`` of an utterance of `n` tokens.

    The rest of the utterance, in order, is the main part.
    """

    def __init__(self, n, offset, length):
        if not 0 <= offset <= n - length or length < 1:
            raise ValueError("invalid reference excerpt [{}, {}) of {} tokens".format(offset, offset + length, n))
        self.n = int(n)
        self.offset = int(offset)
        self.length = int(length)

    @property
    def ref_index(self):
        return np.arange(self.offset, self.offset + self.length)

    @property
    def main_index(self):
        return np.concatenate([np.arange(self.offset), np.arange(self.offset + self.length, self.n)])

    def ref(self, x):
        return x[self.offset:self.offset + self.length]

    def main(self, x):
        if isinstance(x, torch.Tensor):
            return torch.cat([x[:self.offset], x[self.offset + self.length:]], dim=0)
        return np.concatenate([x[:self.offset], x[self.offset + self.length:]], axis=0)

    def ref_frames(self, frames, stack):
        """Mel frames under the reference tokens."""
        return frames[self.offset * stack:(self.offset + self.length) * stack]

    def __repr__(self):
        return "ReferenceSplit(n={}, ref=[{}, {}))".format(self.n, self.offset, self.offset + self.length)


class GenerationResult(object):

    def __init__(self, tokens, truncated=False):
        self.tokens = tokens
        self.truncated = bool(truncated)

    def __len__(self):
        return len(self.tokens)


def segment_reference(n_tokens, rng=None, fraction=REF_FRACTION):
    """Choose the reference excerpt of an utterance of `n_tokens` tokens.

    The excerpt spans ``round(fraction * n_tokens)`` tokens (halves round up). With an
    `rng` (training) its offset is uniform; without (evaluation) it is the tail.

    Raises
    ------
    ValueError
        For utterances shorter than 16 tokens.
    """
    n_tokens = int(n_tokens)
    if n_tokens < MIN_TOKENS:
        raise ValueError("utterance of {} tokens is too short for a reference split (minimum {})".format(
            n_tokens, MIN_TOKENS))
    length = int(np.floor(fraction * n_tokens + 0.5))
    if rng is None:
        offset = n_tokens - length
    else:
        offset = int(rng.integers(0, n_tokens - length + 1))
    return ReferenceSplit(n_tokens, offset, length)


def build_prompt(a_s, prosody, mu_ref, z_a=None):
    """Lay out a prompt; with `z_a` it is a training prompt, without a generation prompt.

    Parameters
    ----------
    a_s : numpy.ndarray or torch.Tensor
        Semantic frames [T x d_sem].
    prosody : numpy.ndarray
        Normalized prosody at the token rate [T x 3].
    mu_ref : numpy.ndarray
        Reference mel frames [R x n_mels].
    z_a : array of ids, optional
        Audio tokens to predict.
    """
    prosody = np.asarray(prosody, dtype=np.float32)
    if len(a_s) != len(prosody):
        raise ValueError("semantic frames ({}) and prosody ({}) lengths differ".format(len(a_s), len(prosody)))
    if prosody.ndim != 2 or prosody.shape[1] != PROSODY_DIM:
        raise ValueError("prosody should be [T x {}], got {}".format(PROSODY_DIM, prosody.shape))
    if len(a_s) == 0 or len(mu_ref) == 0:
        raise ValueError("empty semantic or reference segment")
    segments = [(SOS, None), (SEMANTIC, (a_s, prosody)), (SEP, None), (REF_MEL, mu_ref), (SEP, None)]
    if z_a is not None:
        ids = np.asarray(getattr(z_a, 'ids', z_a), dtype=np.int64)
        segments.extend([(TOKENS, ids), (EOS, None)])
    return PromptSequence(segments)


class SemanticLM(nn.Module):
    """Causal transformer with separate input projections per prompt segment."""

    def __init__(self, config):
        super(SemanticLM, self).__init__()
        self.config = config
        d = config.d
        self.sem_proj = nn.Linear(config.d_sem + PROSODY_DIM, d)
        self.mel_proj = nn.Linear(config.n_mels, d)
        self.token_emb = nn.Embedding(config.V, d)
        self.special_emb = nn.Embedding(3, d)
        self.role_emb = nn.Embedding(len(ROLES), d)
        self.pos = SinusoidalPositionalEncoding(d, config.max_len)
        self.dropout = nn.Dropout(config.dropout)
        self.decoder = TransformerStack(config.layers, d, config.heads, config.dropout, causal=True)
        self.head = nn.Linear(d, config.vocab)

    @property
    def device(self):
        return next(self.parameters()).device

    def _special(self, role):
        idx = {SOS: 0, SEP: 1, EOS: 2}[role]
        return self.special_emb.weight[idx:idx + 1]

    def embed_tokens(self, ids):
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long, device=self.device)
        if len(ids) and (int(ids.min()) < 0 or int(ids.max()) >= self.config.V):
            raise ValueError("audio token ids out of range [0, {})".format(self.config.V))
        return self.token_emb(ids) + self.role_emb.weight[ROLE_INDEX[TOKENS]]

    def embed(self, prompt):
        """Input embeddings [P x d] of a prompt (without position features)."""
        device = self.device
        parts = []
        for role, payload in prompt.segments:
            if payload is None:
                parts.append(self._special(role))
            elif role == SEMANTIC:
                a_s, prosody = payload
                # gradient barrier into the semantic encoder
                a_s = torch.as_tensor(a_s).detach().to(device=device, dtype=torch.float32)
                if a_s.shape[-1] != self.config.d_sem:
                    raise ValueError("semantic frames of width {}, expected {}".format(
                        a_s.shape[-1], self.config.d_sem))
                prosody = torch.as_tensor(prosody, dtype=torch.float32, device=device)
                parts.append(self.sem_proj(torch.cat([a_s, prosody], dim=-1)))
            elif role == REF_MEL:
                parts.append(self.mel_proj(torch.as_tensor(np.asarray(payload), dtype=torch.float32, device=device)))
            else:
                parts.append(self.token_emb(torch.as_tensor(payload, dtype=torch.long, device=device)))
        roles = torch.as_tensor(prompt.roles, device=device)
        return torch.cat(parts, dim=0) + self.role_emb(roles)

    def decode(self, x, mask=None):
        """Logits [B x P x vocab] of input embeddings [B x P x d]."""
        if x.shape[1] > self.config.max_len:
            raise ValueError("prompt of {} positions exceeds max_len {}".format(x.shape[1], self.config.max_len))
        x = self.dropout(self.pos(x))
        return self.head(self.decoder(x, mask))

    def decode_step(self, x, caches):
        """Logits of new input embeddings [B x n x d] that follow the positions held in `caches`.

        Start with ``[{} for _ in range(config.layers)]`` and the whole prompt, then feed one position at a time.
        """
        offset = caches[0]['k'].shape[2] if caches[0] else 0
        end = offset + x.shape[1]
        if end > self.config.max_len:
            raise ValueError("prompt of {} positions exceeds max_len {}".format(end, self.config.max_len))
        x = self.dropout(self.pos(x, offset=offset))
        return self.head(self.decoder.step(x, caches))

    def forward(self, prompts):
        """Padded logits of a list of prompts and their valid-position mask."""
        embeds = [self.embed(prompt) for prompt in prompts]
        lens = torch.as_tensor([len(e) for e in embeds])
        mask = lengths_to_mask(lens).to(self.device)
        return self.decode(pad_sequence(embeds, batch_first=True), mask), mask


def lm_loss_from_logits(logits, targets):
    """Next-token cross-entropy: logits at position p predict the target at p + 1.

    Parameters
    ----------
    logits : torch.Tensor
        [B x P x vocab] (or [P x vocab]).
    targets : torch.Tensor
        [B x P] (or [P]) target ids, IGNORE_INDEX where the loss does not apply.
    """
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    shifted = targets[:, 1:].reshape(-1)
    if not (shifted != IGNORE_INDEX).any():
        raise ValueError("the loss needs a training prompt")
    return F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), shifted, ignore_index=IGNORE_INDEX)


def _targets(model, prompts):
    targets = [torch.as_tensor(p.targets(model.config.eos_id)) for p in prompts]
    return pad_sequence(targets, batch_first=True, padding_value=IGNORE_INDEX).to(model.device)


def lm_loss(model, prompts):
    """Mean cross-entropy over the audio-token and EOS positions of training prompts."""
    if isinstance(prompts, PromptSequence):
        prompts = [prompts]
    if not all(p.training for p in prompts):
        raise ValueError("the loss needs training prompts (with audio tokens)")
    logits, _ = model(prompts)
    return lm_loss_from_logits(logits, _targets(model, prompts))


def generate(model, a_s, prosody, mu_ref, sampler='greedy', top_k=10, temperature=0.8, seed=0, max_tokens=None,
             frame_rate=DEFAULT_TOKEN_RATE):
    """Autoregressive decoding of audio tokens until EOS.

    Keys and values of earlier positions are cached, so every step runs the decoder on one new position.

    Parameters
    ----------
    sampler : str
        'greedy' or 'top-k'.
    max_tokens : int, optional
        Cap on generated tokens, default ``T + 16`` with T the semantic length.

    Returns
    -------
    GenerationResult
        Audio token ids (specials stripped) and whether the cap was hit before EOS.
    """
    if sampler not in ('greedy', 'top-k'):
        raise ValueError("unknown sampler '{}' (greedy | top-k)".format(sampler))
    cfg = model.config
    prompt = build_prompt(a_s, prosody, mu_ref)
    cap = len(a_s) + EXTRA_TOKENS if max_tokens is None else int(max_tokens)
    if len(prompt) + cap > cfg.max_len:
        cap = cfg.max_len - len(prompt)
        if cap < 1:
            raise ValueError("prompt of {} positions leaves no room to generate (max_len {})".format(
                len(prompt), cfg.max_len))
    generator = torch.Generator().manual_seed(int(seed))
    # only audio tokens and EOS may be emitted
    banned = torch.zeros(cfg.vocab, dtype=torch.bool)
    banned[[cfg.sos_id, cfg.sep_id]] = True
    banned = banned.to(model.device)
    was_training = model.training
    model.eval()
    ids = []
    truncated = True
    try:
        with torch.no_grad():
            caches = [{} for _ in range(cfg.layers)]
            x = model.embed(prompt).unsqueeze(0)
            for _ in range(cap):
                logits = model.decode_step(x, caches)[0, -1].masked_fill(banned, float('-inf'))
                if sampler == 'greedy':
                    nxt = int(logits.argmax())
                else:
                    values, indices = torch.topk(logits / temperature, min(top_k, cfg.V + 1))
                    probs = F.softmax(values, dim=-1).cpu()
                    nxt = int(indices[int(torch.multinomial(probs, 1, generator=generator))])
                if nxt == cfg.eos_id:
                    truncated = False
                    break
                ids.append(nxt)
                x = model.embed_tokens([nxt]).unsqueeze(0)
    finally:
        model.train(was_training)
    if truncated:
        logger.warning("generation hit the cap of {} tokens without EOS".format(cap))
    return GenerationResult(TokenSequence(np.asarray(ids, dtype=np.int64), frame_rate, vocab_size=cfg.V), truncated)


def token_accuracy(pred, ref):
    """Fraction of positions where two token sequences agree, over the longer length."""
    pred = np.asarray(getattr(pred, 'ids', pred))
    ref = np.asarray(getattr(ref, 'ids', ref))
    n = max(len(pred), len(ref))
    if n == 0:
        return 1.0
    k = min(len(pred), len(ref))
    return float(np.sum(pred[:k] == ref[:k])) / n


class LMExample(object):
    """Token-rate training material of one utterance: tokens, semantic frames, prosody, mel."""

    def __init__(self, utt_id, speaker_id, tokens, a_s, prosody, mel, stack):
        n = len(tokens)
        if len(a_s) != n or len(prosody) != n:
            raise ValueError("'{}': tokens ({}), semantic frames ({}) and prosody ({}) differ in length".format(
                utt_id, n, len(a_s), len(prosody)))
        self.utt_id = utt_id
        self.speaker_id = speaker_id
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.a_s = np.asarray(a_s, dtype=np.float32)
        self.prosody = np.asarray(prosody, dtype=np.float32)
        self.mel = np.asarray(mel, dtype=np.float32)[:n * stack]
        self.stack = int(stack)

    def __len__(self):
        return len(self.tokens)

    def prompt(self, rng=None):
        """Training prompt with the reference excerpt chosen by :func:`segment_reference`."""
        split = segment_reference(len(self), rng)
        return build_prompt(split.main(self.a_s), split.main(self.prosody),
                            split.ref_frames(self.mel, self.stack), z_a=split.main(self.tokens))


def build_lm_examples(features, semenc_model, stack):
    """Examples of tokenized utterances long enough for a reference split.

    The semantic frames are computed once on the whole utterance with the frozen encoder.
    """
    usable = [f for f in features if f.tokens is not None and len(f.tokens) >= MIN_TOKENS]
    if len(usable) < len(features):
        logger.info("{} utterances shorter than {} tokens left out of LM training".format(
            len(features) - len(usable), MIN_TOKENS))
    frames = encode_batch(semenc_model, [f.tokens.ids for f in usable])
    examples = []
    for feats, a_s in zip(usable, frames):
        n = len(feats.tokens)
        examples.append(LMExample(feats.utt_id, feats.speaker_id, feats.tokens.ids, a_s,
                                  feats.pool_prosody(stack)[:n], feats.mel.frames, stack))
    return examples


class LMTrainConfig(object):

    def __init__(self, steps=6000, batch_size=16, lr=1e-4, warmup=200, log_every=100, seed=0, grad_clip=1.0,
                 weight_decay=0.01):
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.warmup = int(warmup)
        self.log_every = int(log_every)
        self.seed = int(seed)
        self.grad_clip = float(grad_clip)
        self.weight_decay = float(weight_decay)

    @classmethod
    def from_settings(cls, settings, seed=0):
        sect = settings.get('lm', {})
        return cls(steps=sect.get('steps', 6000), batch_size=sect.get('batch-size', 16), lr=sect.get('lr', 1e-4),
                   warmup=sect.get('warmup', 200), log_every=sect.get('log-every', 100), seed=seed)

    def to_dict(self):
        return dict(self.__dict__)


class LMTrainer(object):
    """AdamW with warmup and cosine decay; a fresh reference excerpt per example and step."""

    def __init__(self, model, config, device='cpu'):
        self.model = model.to(device)
        self.config = config
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.scheduler = warmup_cosine_schedule(self.optimizer, config.warmup, config.steps)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def train(self, examples, steps=None):
        """Optimize for `steps` steps; returns the loss per step."""
        if not examples:
            raise ValueError("no training examples")
        steps = self.config.steps if steps is None else int(steps)
        cfg = self.config
        history = []
        self.model.train()
        for _ in trange(steps, desc='  lm', unit='step'):
            idx = sample_batch(len(examples), cfg.batch_size, self.generator)
            prompts = [examples[i].prompt(self.rng) for i in idx]
            loss = lm_loss(self.model, prompts)
            check_finite({'lm': loss}, [examples[i].utt_id for i in idx])
            self.optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.optimizer.step()
            self.scheduler.step()
            self.step += 1
            history.append(float(loss))
            if cfg.log_every and self.step % cfg.log_every == 0:
                logger.info("lm step {}: loss={:.4f}".format(self.step, np.mean(history[-cfg.log_every:])))
        self.model.eval()
        return history


def save_semlm(model, filename, semenc_fingerprint, step=0):
    atomic_save({'state_dict': model.state_dict(), 'config': model.config.to_dict(),
                 'semenc': semenc_fingerprint, 'step': step, 'fingerprint': model.config.fingerprint()}, filename)


def load_semlm(filename, semenc_fingerprint=None):
    """Rebuild a :class:`SemanticLM` (eval mode).

    Raises
    ------
    CheckpointError
        When the LM was trained on another semantic encoder.
    """
    state = load_checkpoint(filename)
    if semenc_fingerprint is not None and state.get('semenc') != semenc_fingerprint:
        raise CheckpointError("LM checkpoint {} was trained on another semantic encoder".format(filename))
    model = SemanticLM(LMConfig.from_dict(state['config']))
    model.load_state_dict(state['state_dict'])
    model.eval()
    return model
