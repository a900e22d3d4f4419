#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Semantic encoder: audio tokens to speaker-free semantic frames.

The encoder is trained with three losses only:

* CTC from a linear head on its output to the transcript ids;
* forward-sum over all monotonic alignments between its output and the text embeddings;
* the alignment MSE: its output must match the text embeddings (projected to the
  encoder width) repeated along the best monotonic path.

The text side carries no speaker information, which is what pulls the timbre out of
the encoder output.

Examples
--------
>>> from semalignvc.models.semenc import EncoderConfig, SemEncModel, encode
>>> model = SemEncModel(EncoderConfig(vocab_size=512, text_vocab_size=17, d_text=64))
>>> frames = encode(model, tokens)  # tokens: TokenSequence
"""

import logging
import os
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from semalignvc import trange
from semalignvc.errors import AlignmentError, CheckpointError
from semalignvc.models.layers import (ConformerEncoder, check_finite, lengths_to_mask, sample_batch,
                                      warmup_cosine_schedule)
from semalignvc.specutils.align import (dump_alignment, forward_sum_loss_batch, mas, semalign_loss, similarity_logits,
                                        similarity_logits_batch, upsample_by_durations)
from semalignvc.utils import atomic_save, fingerprint, load_checkpoint

__all__ = ['EncoderConfig', 'SemanticSequence', 'SemanticEncoder', 'SemEncModel', 'SemEncExample',
           'SemEncTrainConfig', 'SemEncTrainer', 'encode', 'encode_batch', 'ctc_loss', 'ctc_min_length',
           'collate', 'training_step', 'build_examples', 'dump_alignments', 'align_to_text', 'save_semenc',
           'load_semenc']

logger = logging.getLogger(__name__)


class EncoderConfig(object):
    """Architecture of the semantic encoder and its training heads."""

    def __init__(self, vocab_size, text_vocab_size, d_text, layers=4, d=128, heads=4, conv_kernel=7,
                 dropout=0.1, blank_id=0):
        if layers < 1:
            raise ValueError("layers should be at least 1, got {}".format(layers))
        if d % heads:
            raise ValueError("d ({}) should be divisible by heads ({})".format(d, heads))
        self.vocab_size = int(vocab_size)
        self.text_vocab_size = int(text_vocab_size)
        self.d_text = int(d_text)
        self.layers = int(layers)
        self.d = int(d)
        self.heads = int(heads)
        self.conv_kernel = int(conv_kernel)
        self.dropout = float(dropout)
        self.blank_id = int(blank_id)

    @classmethod
    def from_settings(cls, settings, vocab_size, text_vocab_size, d_text):
        sect = settings.get('semenc', {})
        return cls(vocab_size, text_vocab_size, d_text, layers=sect.get('layers', 4), d=sect.get('d', 128),
                   heads=sect.get('heads', 4), conv_kernel=sect.get('conv-kernel', 7),
                   dropout=sect.get('dropout', 0.1))

    def to_dict(self):
        return OrderedDict([('vocab_size', self.vocab_size), ('text_vocab_size', self.text_vocab_size),
                            ('d_text', self.d_text), ('layers', self.layers), ('d', self.d),
                            ('heads', self.heads), ('conv_kernel', self.conv_kernel),
                            ('dropout', self.dropout), ('blank_id', self.blank_id)])

    @classmethod
    def from_dict(cls, item):
        return cls(**item)

    def fingerprint(self):
        return fingerprint(self.to_dict())


class SemanticSequence(object):
    """Semantic frames [T x d].

    `source` is 'encoder_output' for encoder frames and 'upsampled_text' for text
    embeddings repeated along an alignment.
    """

    sources = ('encoder_output', 'upsampled_text')

    def __init__(self, frames, source='encoder_output'):
        frames = np.asarray(frames, dtype=np.float64)
        if source not in self.sources:
            raise ValueError("unknown source '{}'".format(source))
        if not np.all(np.isfinite(frames)):
            raise ValueError("semantic frames contain non-finite values")
        self.frames = frames
        self.source = source

    def __len__(self):
        return self.frames.shape[0]


class SemanticEncoder(nn.Module):
    """Token embedding, conformer blocks and a parameter-free layer norm."""

    def __init__(self, config):
        super(SemanticEncoder, self).__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d)
        self.conformer = ConformerEncoder(config.layers, config.d, config.heads, config.conv_kernel,
                                          config.dropout)
        # fixed output scale, so the alignment MSE cannot shrink both sides towards zero
        self.out_norm = nn.LayerNorm(config.d, elementwise_affine=False)

    def forward(self, tokens, mask=None):
        return self.out_norm(self.conformer(self.embedding(tokens), mask))


class SemEncModel(nn.Module):
    """Semantic encoder with its CTC head and text projection."""

    def __init__(self, config):
        super(SemEncModel, self).__init__()
        self.config = config
        self.encoder = SemanticEncoder(config)
        self.ctc_head = nn.Linear(config.d, config.text_vocab_size)
        self.text_proj = nn.Linear(config.d_text, config.d)

    def forward(self, tokens, mask=None):
        return self.encoder(tokens, mask)


def _check_tokens(ids, vocab_size):
    if len(ids) == 0:
        raise ValueError("cannot encode an empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token ids out of range [0, {})".format(vocab_size))


def encode(model, z_a):
    """Semantic frames of one token sequence (eval mode, no gradient).

    Parameters
    ----------
    model : SemEncModel
    z_a : TokenSequence or array of ids

    Returns
    -------
    SemanticSequence
        One frame per token.
    """
    ids = np.asarray(getattr(z_a, 'ids', z_a), dtype=np.int64)
    _check_tokens(ids, model.config.vocab_size)
    return SemanticSequence(encode_batch(model, [ids])[0])


def encode_batch(model, token_lists, batch_size=32):
    """Semantic frames of many token sequences, a list of [T_i x d] numpy arrays."""
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, len(token_lists), batch_size):
                chunk = [torch.as_tensor(np.asarray(ids), dtype=torch.long)
                         for ids in token_lists[start:start + batch_size]]
                for ids in chunk:
                    _check_tokens(ids, model.config.vocab_size)
                lens = torch.as_tensor([len(ids) for ids in chunk])
                tokens = pad_sequence(chunk, batch_first=True).to(device)
                mask = lengths_to_mask(lens).to(device)
                frames = model(tokens, mask).double().cpu().numpy()
                outputs.extend(frames[i, :int(n)] for i, n in enumerate(lens))
    finally:
        model.train(was_training)
    return outputs


def ctc_min_length(ids):
    """Fewest frames able to emit `ids` under CTC: one per label plus one blank per repeat."""
    ids = np.asarray(ids)
    return int(len(ids) + np.sum(ids[1:] == ids[:-1]))


def ctc_loss(a_s, targets, head=None, blank=0):
    """CTC negative log-likelihood of one utterance.

    Parameters
    ----------
    a_s : torch.Tensor
        [T x d] encoder frames, or [T x C] logits when `head` is None.
    targets : TextTokenIds or sequence of ints
    head : callable, optional
        Linear head from d to the text vocabulary.

    Raises
    ------
    AlignmentError
        When the target needs more frames than available.
    """
    ids = np.asarray(getattr(targets, 'ids', targets), dtype=np.int64)
    T = a_s.shape[0]
    if ctc_min_length(ids) > T:
        raise AlignmentError("CTC target of {} labels needs {} frames, got {}".format(
            len(ids), ctc_min_length(ids), T))
    logits = a_s if head is None else head(a_s)
    log_probs = F.log_softmax(logits, dim=-1).unsqueeze(1)
    target = torch.as_tensor(ids, dtype=torch.long, device=logits.device).unsqueeze(0)
    return F.ctc_loss(log_probs, target, torch.as_tensor([T]), torch.as_tensor([len(ids)]),
                      blank=blank, reduction='sum')


class SemEncExample(object):
    """Training item: audio tokens, transcript ids and text embeddings of one utterance."""

    def __init__(self, utt_id, speaker_id, tokens, text_ids, text_emb):
        self.utt_id = utt_id
        self.speaker_id = speaker_id
        self.tokens = np.asarray(getattr(tokens, 'ids', tokens), dtype=np.int64)
        self.text_ids = np.asarray(text_ids, dtype=np.int64)
        self.text_emb = np.asarray(text_emb, dtype=np.float32)
        if self.text_ids.shape[0] != self.text_emb.shape[0]:
            raise ValueError("'{}': {} text ids but {} text embeddings".format(
                utt_id, self.text_ids.shape[0], self.text_emb.shape[0]))


def build_examples(features, provider):
    """Training examples from tokenized utterances; utterances too short for CTC are skipped."""
    examples = []
    skipped = []
    for feats in features:
        if feats.tokens is None:
            raise ValueError("utterance '{}' is not tokenized".format(feats.utt_id))
        text_ids = provider.tokenize(feats.text).ids
        if ctc_min_length(text_ids) > len(feats.tokens):
            skipped.append(feats.utt_id)
            continue
        examples.append(SemEncExample(feats.utt_id, feats.speaker_id, feats.tokens, text_ids,
                                      provider.embed(feats.text).embeddings))
    if skipped:
        logger.warning("skipped {} utterances too short for their transcript: {}".format(
            len(skipped), ', '.join(skipped[:10])))
    return examples


def collate(examples, device='cpu'):
    """Pad a list of examples into batch tensors."""
    tokens = pad_sequence([torch.as_tensor(ex.tokens) for ex in examples], batch_first=True)
    text_ids = pad_sequence([torch.as_tensor(ex.text_ids) for ex in examples], batch_first=True)
    text_emb = pad_sequence([torch.as_tensor(ex.text_emb) for ex in examples], batch_first=True)
    return {
        'utt_ids': [ex.utt_id for ex in examples],
        'tokens': tokens.to(device),
        'token_lens': torch.as_tensor([len(ex.tokens) for ex in examples], device=device),
        'text_ids': text_ids.to(device),
        'text_lens': torch.as_tensor([len(ex.text_ids) for ex in examples], device=device),
        'text_emb': text_emb.to(device),
    }


def training_step(model, batch, lambda_ctc=0.5, lambda_sem=1.0, lambda_fs=0.1, omega=1.0):
    """Loss components of one batch.

    Returns
    -------
    dict
        'ctc', 'sem', 'forward_sum' and the weighted 'total' (tensors).

    Raises
    ------
    TrainingDivergedError
        When a component is not finite.
    """
    tokens, token_lens = batch['tokens'], batch['token_lens']
    text_lens = batch['text_lens']
    mask = lengths_to_mask(token_lens, tokens.shape[1])
    a_s = model(tokens, mask)
    zero = a_s.new_zeros(())
    losses = OrderedDict()

    if lambda_ctc > 0:
        log_probs = F.log_softmax(model.ctc_head(a_s), dim=-1).transpose(0, 1)
        targets = torch.cat([batch['text_ids'][b, :int(n)] for b, n in enumerate(text_lens)])
        losses['ctc'] = F.ctc_loss(log_probs, targets, token_lens, text_lens, blank=model.config.blank_id,
                                   reduction='mean')
    else:
        losses['ctc'] = zero

    if lambda_sem > 0 or lambda_fs > 0:
        tau_proj = model.text_proj(batch['text_emb'])
        logp = similarity_logits_batch(a_s, tau_proj, text_lens, token_lens, omega=omega)
        if lambda_fs > 0:
            losses['forward_sum'] = (forward_sum_loss_batch(logp, text_lens, token_lens)
                                     / token_lens.to(logp.dtype)).mean()
        else:
            losses['forward_sum'] = zero
        if lambda_sem > 0:
            logp_np = logp.detach().cpu().double().numpy()
            upsampled = []
            for b in range(len(batch['utt_ids'])):
                l_b, t_b = int(text_lens[b]), int(token_lens[b])
                path = mas(logp_np[b, :l_b, :t_b])
                upsampled.append(upsample_by_durations(batch['text_emb'][b, :l_b], path))
            tau_up = pad_sequence(upsampled, batch_first=True)
            if tau_up.shape[1] < a_s.shape[1]:
                tau_up = F.pad(tau_up, (0, 0, 0, a_s.shape[1] - tau_up.shape[1]))
            losses['sem'] = semalign_loss(a_s, tau_up, model.text_proj, mask=mask)
        else:
            losses['sem'] = zero
    else:
        losses['forward_sum'] = zero
        losses['sem'] = zero

    check_finite(losses, batch['utt_ids'])
    losses['total'] = lambda_ctc * losses['ctc'] + lambda_sem * losses['sem'] + lambda_fs * losses['forward_sum']
    return losses


class SemEncTrainConfig(object):
    """Optimization settings of the semantic encoder."""

    def __init__(self, steps=3000, batch_size=16, lr=1e-3, warmup=200, lambda_ctc=0.5, lambda_sem=1.0,
                 lambda_fs=0.1, omega=1.0, log_every=100, seed=0, grad_clip=1.0, weight_decay=0.01):
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.warmup = int(warmup)
        self.lambda_ctc = float(lambda_ctc)
        self.lambda_sem = float(lambda_sem)
        self.lambda_fs = float(lambda_fs)
        self.omega = float(omega)
        self.log_every = int(log_every)
        self.seed = int(seed)
        self.grad_clip = float(grad_clip)
        self.weight_decay = float(weight_decay)

    @classmethod
    def from_settings(cls, settings, seed=0):
        sect = settings.get('semenc', {})
        return cls(steps=sect.get('steps', 3000), batch_size=sect.get('batch-size', 16), lr=sect.get('lr', 1e-3),
                   warmup=sect.get('warmup', 200), lambda_ctc=sect.get('lambda-ctc', 0.5),
                   lambda_sem=sect.get('lambda-sem', 1.0), lambda_fs=sect.get('lambda-fs', 0.1),
                   omega=settings.get('align', {}).get('omega', 1.0), log_every=sect.get('log-every', 100),
                   seed=seed)

    def to_dict(self):
        return dict(self.__dict__)


class SemEncTrainer(object):
    """AdamW with warmup and cosine decay, gradient clipping, loss logging.

    Examples
    --------
    >>> trainer = SemEncTrainer(model, SemEncTrainConfig(steps=500))
    >>> history = trainer.train(examples)
    """

    def __init__(self, model, config, device='cpu'):
        self.model = model.to(device)
        self.config = config
        self.device = device
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.scheduler = warmup_cosine_schedule(self.optimizer, config.warmup, config.steps)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step = 0

    def train(self, examples, steps=None):
        """Run `steps` optimization steps (default: the configured number) on random batches.

        Returns
        -------
        list of dict
            Float loss components per step.
        """
        if not examples:
            raise ValueError("no training examples")
        steps = self.config.steps if steps is None else int(steps)
        cfg = self.config
        history = []
        self.model.train()
        for _ in trange(steps, desc='  semenc', unit='step'):
            idx = sample_batch(len(examples), cfg.batch_size, self.generator)
            batch = collate([examples[i] for i in idx], device=self.device)
            losses = training_step(self.model, batch, cfg.lambda_ctc, cfg.lambda_sem, cfg.lambda_fs, cfg.omega)
            self.optimizer.zero_grad()
            losses['total'].backward()
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.optimizer.step()
            self.scheduler.step()
            self.step += 1
            history.append(dict((k, float(v)) for k, v in losses.items()))
            if cfg.log_every and self.step % cfg.log_every == 0:
                recent = history[-cfg.log_every:]
                logger.info("semenc step {}: {}".format(self.step, ', '.join(
                    '{}={:.4f}'.format(k, np.mean([h[k] for h in recent])) for k in recent[0])))
        self.model.eval()
        return history


def dump_alignments(model, examples, out_dir, omega=1.0):
    """Write score matrices and MAS paths of `examples` for inspection."""
    model.eval()
    with torch.no_grad():
        for ex in examples:
            batch = collate([ex])
            a_s = model(batch['tokens'])
            logp = similarity_logits_batch(a_s, model.text_proj(batch['text_emb']), batch['text_lens'],
                                           batch['token_lens'], omega=omega)[0]
            dump_alignment(os.path.join(out_dir, ex.utt_id), logp, mas(logp), title=ex.utt_id)


def save_semenc(model, filename, provider_id, step=0, extra=None):
    """Checkpoint: parameters, architecture, text provider id and step (atomic write)."""
    state = {
        'state_dict': model.state_dict(),
        'config': model.config.to_dict(),
        'provider_id': provider_id,
        'step': step,
        'fingerprint': model.config.fingerprint(),
    }
    if extra:
        state.update(extra)
    atomic_save(state, filename)


def load_semenc(filename, provider_id=None):
    """Rebuild a :class:`SemEncModel` from a checkpoint (eval mode).

    Raises
    ------
    CheckpointError
        When the checkpoint was trained with another text provider.
    """
    state = load_checkpoint(filename)
    if provider_id is not None and state.get('provider_id') != provider_id:
        raise CheckpointError("semantic encoder checkpoint {} was trained with text provider '{}', "
                              "not '{}'".format(filename, state.get('provider_id'), provider_id))
    model = SemEncModel(EncoderConfig.from_dict(state['config']))
    model.load_state_dict(state['state_dict'])
    model.eval()
    return model


def align_to_text(model, tokens, text_emb, omega=1.0):
    """Encoder frames of `tokens` and the projected text embeddings repeated along the MAS path.

    Returns
    -------
    a_s : numpy.ndarray
        [T x d]
    tau_up : numpy.ndarray
        [T x d], projected and upsampled text embeddings.
    path : AlignmentPath
    """
    ids = np.asarray(getattr(tokens, 'ids', tokens), dtype=np.int64)
    _check_tokens(ids, model.config.vocab_size)
    device = next(model.parameters()).device
    model.eval()
    with torch.no_grad():
        a_s = model(torch.as_tensor(ids, device=device).unsqueeze(0))[0]
        tau = torch.as_tensor(np.asarray(text_emb), dtype=torch.float32, device=device)
        path = mas(similarity_logits(a_s, tau, model.text_proj, omega=omega))
        tau_up = upsample_by_durations(model.text_proj(tau), path)
    return a_s.double().cpu().numpy(), tau_up.double().cpu().numpy(), path
