#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Masked-prediction audio encoder, an alternative token source.

The encoder sees standardized, stacked mel frames where random spans are replaced
by noise, and learns to predict the frozen quantizer ids of the masked positions.
Its argmax predictions on clean input are a learned token stream.
"""

import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from semalignvc import trange
from semalignvc.core.quantizer import TokenSequence, quantize, stack_frames, standardize
from semalignvc.models.layers import (ConformerEncoder, check_finite, lengths_to_mask, sample_batch,
                                      warmup_cosine_schedule)
from semalignvc.utils import atomic_save, fingerprint, load_checkpoint

__all__ = ['MaskedEncoderConfig', 'MaskedEncoder', 'span_start_mask', 'masked_prediction_loss',
           'train_masked_encoder', 'masked_accuracy', 'save_masked_encoder', 'load_masked_encoder']

logger = logging.getLogger(__name__)

MASK_PROB = 0.15
MASK_SPAN = 2
MASK_NOISE_STD = 0.1


class MaskedEncoderConfig(object):

    def __init__(self, input_dim, V, stack=2, layers=2, d=128, heads=4, conv_kernel=7, dropout=0.1):
        self.input_dim = int(input_dim)
        self.V = int(V)
        self.stack = int(stack)
        self.layers = int(layers)
        self.d = int(d)
        self.heads = int(heads)
        self.conv_kernel = int(conv_kernel)
        self.dropout = float(dropout)

    def to_dict(self):
        return OrderedDict([('input_dim', self.input_dim), ('V', self.V), ('stack', self.stack),
                            ('layers', self.layers), ('d', self.d), ('heads', self.heads),
                            ('conv_kernel', self.conv_kernel), ('dropout', self.dropout)])

    @classmethod
    def from_dict(cls, item):
        return cls(**item)

    def fingerprint(self):
        return fingerprint(self.to_dict())


class MaskedEncoder(nn.Module):

    def __init__(self, config):
        super(MaskedEncoder, self).__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.d)
        self.conformer = ConformerEncoder(config.layers, config.d, config.heads, config.conv_kernel, config.dropout)
        self.head = nn.Linear(config.d, config.V)

    def forward(self, x, mask=None):
        """Logits [B x T x V] of stacked input frames [B x T x input_dim]."""
        return self.head(self.conformer(self.input_proj(x), mask))

    def features(self, mel):
        """Standardized, stacked frames of a mel spectrogram as a float tensor."""
        return torch.as_tensor(stack_frames(standardize(mel.frames), self.config.stack), dtype=torch.float32)

    def tokenize(self, mel):
        """Token ids predicted on clean input (argmax per stacked frame)."""
        was_training = self.training
        self.eval()
        with torch.no_grad():
            device = next(self.parameters()).device
            logits = self(self.features(mel).unsqueeze(0).to(device))[0]
        self.train(was_training)
        return TokenSequence(logits.argmax(dim=-1).cpu().numpy(), mel.frame_rate / self.config.stack,
                             vocab_size=self.config.V)


def span_start_mask(lengths, generator, p=MASK_PROB, span=MASK_SPAN):
    """Boolean [B x T_max] mask: every position starts a masked span of `span` with probability `p`."""
    lengths = torch.as_tensor(lengths)
    T = int(lengths.max())
    starts = torch.rand((len(lengths), T), generator=generator) < p
    mask = starts.clone()
    for k in range(1, span):
        mask[:, k:] |= starts[:, :-k]
    return mask & lengths_to_mask(lengths, T)


def masked_prediction_loss(logits, targets, mask):
    """Cross-entropy over masked positions only; 0 when nothing is masked."""
    if not mask.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], targets[mask])


def _prepare(model, features, q):
    inputs = []
    targets = []
    for feats in features:
        x = model.features(feats.mel)
        y = torch.as_tensor(quantize(feats.mel, q, model.config.stack).ids)
        inputs.append(x)
        targets.append(y)
    return inputs, targets


def train_masked_encoder(features, q, steps=2000, batch_size=16, lr=5e-4, warmup=200, seed=0,
                         log_every=100, device='cpu', **arch):
    """Train a masked-prediction encoder on the quantizer targets of `features`.

    Returns
    -------
    model : MaskedEncoder
    history : list of float
        Loss per step.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss.
    """
    if not features:
        raise ValueError("no utterances to train the masked encoder on")
    config = MaskedEncoderConfig(q.stacked_feature_dim, q.V, stack=q.stack, **arch)
    torch.manual_seed(seed)
    model = MaskedEncoder(config).to(device)
    inputs, targets = _prepare(model, features, q)
    ids = [feats.utt_id for feats in features]
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    scheduler = warmup_cosine_schedule(optimizer, warmup, steps)
    generator = torch.Generator().manual_seed(seed)
    history = []
    model.train()
    for step in trange(steps, desc='  masked encoder', unit='step'):
        idx = sample_batch(len(inputs), batch_size, generator)
        lens = torch.as_tensor([len(targets[i]) for i in idx])
        x = pad_sequence([inputs[i] for i in idx], batch_first=True)
        y = pad_sequence([targets[i] for i in idx], batch_first=True)
        mask = span_start_mask(lens, generator)
        noise = torch.randn(x.shape, generator=generator) * MASK_NOISE_STD
        x = torch.where(mask.unsqueeze(-1), noise, x)
        valid = lengths_to_mask(lens, x.shape[1])
        logits = model(x.to(device), valid.to(device))
        loss = masked_prediction_loss(logits, y.to(device), mask.to(device))
        check_finite({'masked': loss}, [ids[i] for i in idx])
        optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        scheduler.step()
        history.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            logger.info("masked encoder step {}: loss={:.4f}".format(step + 1, np.mean(history[-log_every:])))
    model.eval()
    return model, history


def masked_accuracy(model, features, q, seed=0):
    """Accuracy of the quantizer-id predictions at masked positions of held-out utterances."""
    inputs, targets = _prepare(model, features, q)
    generator = torch.Generator().manual_seed(seed)
    correct = 0
    total = 0
    model.eval()
    with torch.no_grad():
        for x, y in zip(inputs, targets):
            mask = span_start_mask([len(y)], generator)[0]
            if not mask.any():
                continue
            noise = torch.randn(x.shape, generator=generator) * MASK_NOISE_STD
            x = torch.where(mask.unsqueeze(-1), noise, x)
            pred = model(x.unsqueeze(0))[0].argmax(dim=-1)
            correct += int((pred[mask] == y[mask]).sum())
            total += int(mask.sum())
    return correct / float(max(total, 1))


def save_masked_encoder(model, filename, quantizer_fingerprint, step=0):
    atomic_save({'state_dict': model.state_dict(), 'config': model.config.to_dict(),
                 'quantizer': quantizer_fingerprint, 'step': step,
                 'fingerprint': model.config.fingerprint()}, filename)


def load_masked_encoder(filename):
    state = load_checkpoint(filename)
    model = MaskedEncoder(MaskedEncoderConfig.from_dict(state['config']))
    model.load_state_dict(state['state_dict'])
    model.eval()
    return model
