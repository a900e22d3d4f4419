#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Speaker-information probes.

A minimal classifier is trained to recognize the speaker from a frozen representation:
an embedding layer and one linear layer for discrete token streams, a single linear
layer for continuous frames. Frame logits are mean-pooled per utterance. The lower the
accuracy, the less speaker information the representation carries.

Examples
--------
>>> rep = TokenRepresentation(quantizer)
>>> probe = train_probe(ProbeSpec.for_representation(rep, n_speakers=20), rep, train_feats)
>>> print(report(probe, test_feats).to_text())
"""

import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tabulate import tabulate
from torch.nn.utils.rnn import pad_sequence

from semalignvc import progbar
from semalignvc.core.quantizer import RandomQuantizer, quantize
from semalignvc.errors import ProviderError
from semalignvc.models.layers import lengths_to_mask
from semalignvc.models.semenc import encode_batch

__all__ = ['ProbeSpec', 'ProbeReport', 'TrainedProbe', 'ProbeClassifier', 'TokenRepresentation',
           'SemanticRepresentation', 'MelRepresentation', 'CallableRepresentation', 'represent', 'train_probe',
           'report', 'render_table']

logger = logging.getLogger(__name__)

KINDS = ('discrete', 'continuous')


class ProbeSpec(object):
    """What is probed: kind and source of the representation, pooling, number of speakers."""

    def __init__(self, rep_kind, rep_source, n_speakers, pooling='mean', d=128):
        if rep_kind not in KINDS:
            raise ValueError("representation kind should be one of {}, got '{}'".format(KINDS, rep_kind))
        if pooling not in ('mean', 'frame'):
            raise ValueError("pooling should be 'mean' or 'frame', got '{}'".format(pooling))
        if n_speakers < 2:
            raise ValueError("a speaker probe needs at least 2 speakers, got {}".format(n_speakers))
        self.rep_kind = rep_kind
        self.rep_source = rep_source
        self.n_speakers = int(n_speakers)
        self.pooling = pooling
        self.d = int(d)

    @classmethod
    def for_representation(cls, representation, n_speakers, **kwargs):
        return cls(representation.kind, representation.name, n_speakers, **kwargs)


class ProbeReport(object):
    """Test accuracy of a probe with chance level and per-speaker accuracy."""

    def __init__(self, accuracy, n_speakers, per_speaker_accuracy, rep_source, rep_kind, n_test):
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError("accuracy should lie in [0, 1], got {}".format(accuracy))
        self.accuracy = float(accuracy)
        self.chance = 1.0 / n_speakers
        self.n_speakers = int(n_speakers)
        self.per_speaker_accuracy = OrderedDict(per_speaker_accuracy)
        self.rep_source = rep_source
        self.rep_kind = rep_kind
        self.n_test = int(n_test)

    def to_dict(self):
        return OrderedDict([('rep_source', self.rep_source), ('rep_kind', self.rep_kind),
                            ('accuracy', self.accuracy), ('chance', self.chance), ('n_speakers', self.n_speakers),
                            ('n_test', self.n_test), ('per_speaker_accuracy', dict(self.per_speaker_accuracy))])

    def to_text(self):
        lines = ['rep_source = {}'.format(self.rep_source), 'rep_kind = {}'.format(self.rep_kind),
                 'accuracy = {:.4f}'.format(self.accuracy), 'chance = {:.4f}'.format(self.chance),
                 'n_speakers = {}'.format(self.n_speakers), 'n_test = {}'.format(self.n_test)]
        for spk, acc in self.per_speaker_accuracy.items():
            lines.append('accuracy.{} = {:.4f}'.format(spk, acc))
        return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------

class TokenRepresentation(object):
    """Discrete tokens of a quantizer or a masked encoder."""

    kind = 'discrete'

    def __init__(self, tokenizer, name=None):
        self.tokenizer = tokenizer
        if isinstance(tokenizer, RandomQuantizer):
            self.name = name or 'tokenizer'
            self.vocab_size = tokenizer.V
        else:
            self.name = name or 'encoder'
            self.vocab_size = tokenizer.config.V

    def __call__(self, features):
        if isinstance(self.tokenizer, RandomQuantizer):
            return [quantize(f.mel, self.tokenizer).ids for f in features]
        return [self.tokenizer.tokenize(f.mel).ids for f in features]


class SemanticRepresentation(object):
    """Semantic encoder frames of the utterance tokens."""

    kind = 'continuous'

    def __init__(self, model, tokenizer=None, name='qphi'):
        self.model = model
        self.tokens = TokenRepresentation(tokenizer) if tokenizer is not None else None
        self.name = name
        self.dim = model.config.d

    def __call__(self, features):
        if self.tokens is not None:
            token_lists = self.tokens(features)
        else:
            missing = [f.utt_id for f in features if f.tokens is None]
            if missing:
                raise ValueError("utterances without tokens: {}".format(', '.join(missing[:5])))
            token_lists = [f.tokens.ids for f in features]
        return encode_batch(self.model, token_lists)


class MelRepresentation(object):
    """Log-mel frames, standardized per bin with statistics fixed on the training utterances."""

    kind = 'continuous'

    def __init__(self, n_mels, name='mel'):
        self.name = name
        self.dim = int(n_mels)
        self.mean = None
        self.std = None

    def fit(self, features):
        frames = np.concatenate([f.mel.frames for f in features], axis=0)
        self.mean = frames.mean(axis=0)
        self.std = np.maximum(frames.std(axis=0), 1e-3)
        return self

    def __call__(self, features):
        if self.mean is None:
            raise ValueError("call fit() on the training utterances first")
        return [(f.mel.frames - self.mean) / self.std for f in features]


class CallableRepresentation(object):
    """Adapter for an external model: ``fn(features) -> ids [T] or frames [T x dim]``."""

    def __init__(self, name, fn, kind, vocab_size=None, dim=None):
        if kind not in KINDS:
            raise ValueError("representation kind should be one of {}, got '{}'".format(KINDS, kind))
        if (kind == 'discrete' and not vocab_size) or (kind == 'continuous' and not dim):
            raise ValueError("a {} representation needs its {}".format(
                kind, 'vocab_size' if kind == 'discrete' else 'dim'))
        self.name = name
        self.fn = fn
        self.kind = kind
        self.vocab_size = vocab_size
        self.dim = dim

    def __call__(self, features):
        return [self.fn(f) for f in features]


def represent(representation, features):
    """Representations of `features` as tensors, with failures attributed to the provider."""
    try:
        with torch.no_grad():
            reps = representation(features)
    except ProviderError:
        raise
    except Exception as err:
        raise ProviderError(representation.name, "{}: {}".format(type(err).__name__, err))
    if representation.kind == 'discrete':
        return [torch.as_tensor(np.asarray(r), dtype=torch.long) for r in reps]
    return [torch.as_tensor(np.asarray(r), dtype=torch.float32) for r in reps]


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

class ProbeClassifier(nn.Module):
    """Embedding + linear layer (discrete) or a single linear layer (continuous)."""

    def __init__(self, spec, vocab_size=None, dim=None):
        super(ProbeClassifier, self).__init__()
        self.spec = spec
        if spec.rep_kind == 'discrete':
            self.embedding = nn.Embedding(vocab_size, spec.d)
            self.head = nn.Linear(spec.d, spec.n_speakers)
        else:
            self.embedding = None
            self.head = nn.Linear(dim, spec.n_speakers)

    def frame_logits(self, x):
        if self.embedding is not None:
            x = self.embedding(x)
        return self.head(x)

    def forward(self, x, mask):
        """Utterance logits [B x n_speakers] from padded inputs and a validity mask [B x T]."""
        logits = self.frame_logits(x)
        if self.spec.pooling == 'frame':
            # average frame log-probabilities instead of raw logits
            logits = F.log_softmax(logits, dim=-1)
        weights = mask.unsqueeze(-1).to(logits.dtype)
        return (logits * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)


class TrainedProbe(object):

    def __init__(self, classifier, speakers, representation):
        self.classifier = classifier
        self.speakers = list(speakers)
        self.representation = representation

    @property
    def spec(self):
        return self.classifier.spec


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _pad(inputs, idx):
    lens = torch.as_tensor([len(inputs[i]) for i in idx])
    return pad_sequence([inputs[i] for i in idx], batch_first=True), lengths_to_mask(lens)


def train_probe(spec, representation, features, epochs=5, lr=1e-3, batch_size=16, seed=0, shuffle_labels=False):
    """Train a speaker probe on the frozen `representation` of `features`.

    Parameters
    ----------
    shuffle_labels : bool
        Null control: speaker labels permuted across utterances.

    Returns
    -------
    TrainedProbe
    """
    speakers = sorted(set(f.speaker_id for f in features))
    if len(speakers) < 2:
        raise ValueError("a speaker probe needs at least 2 speakers, got {}".format(len(speakers)))
    if len(speakers) != spec.n_speakers:
        raise ValueError("probe spec expects {} speakers, the training split has {}".format(
            spec.n_speakers, len(speakers)))
    index = dict((spk, i) for i, spk in enumerate(speakers))
    labels = np.asarray([index[f.speaker_id] for f in features], dtype=np.int64)
    rng = np.random.default_rng(seed)
    if shuffle_labels:
        labels = rng.permutation(labels)
    inputs = represent(representation, features)
    torch.manual_seed(seed)
    classifier = ProbeClassifier(spec, vocab_size=getattr(representation, 'vocab_size', None),
                                 dim=getattr(representation, 'dim', None))
    optimizer = torch.optim.AdamW(classifier.parameters(), lr=lr)
    targets = torch.as_tensor(labels)
    classifier.train()
    for epoch in progbar(range(epochs), desc='  probe {}'.format(representation.name)):
        total = 0.0
        for idx in _batches(len(inputs), batch_size, rng):
            x, mask = _pad(inputs, idx)
            loss = F.cross_entropy(classifier(x, mask), targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        logger.debug("probe {} epoch {}: loss={:.4f}".format(representation.name, epoch + 1, total / len(inputs)))
    classifier.eval()
    return TrainedProbe(classifier, speakers, representation)


def report(probe, features, batch_size=64):
    """Utterance-level speaker accuracy of `probe` on `features`.

    Raises
    ------
    ValueError
        Empty test split or speakers the probe was not trained on.
    """
    if not features:
        raise ValueError("cannot report on an empty test split")
    index = dict((spk, i) for i, spk in enumerate(probe.speakers))
    unknown = sorted(set(f.speaker_id for f in features) - set(index))
    if unknown:
        raise ValueError("speakers unseen in probe training: {}".format(', '.join(unknown)))
    labels = np.asarray([index[f.speaker_id] for f in features])
    inputs = represent(probe.representation, features)
    preds = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            idx = list(range(start, min(start + batch_size, len(inputs))))
            x, mask = _pad(inputs, idx)
            preds.append(probe.classifier(x, mask).argmax(dim=-1).numpy())
    correct = np.concatenate(preds) == labels
    per_speaker = OrderedDict()
    for spk in probe.speakers:
        sel = labels == index[spk]
        if sel.any():
            per_speaker[spk] = float(correct[sel].mean())
    return ProbeReport(float(correct.mean()), len(probe.speakers), per_speaker, probe.representation.name,
                       probe.spec.rep_kind, len(features))


def render_table(reports, models=None):
    """Plain-text table with one row per report.

    Parameters
    ----------
    reports : list of ProbeReport
    models : list of str, optional
        Row labels, default the representation sources.
    """
    models = models or [r.rep_source for r in reports]
    rows = [[model, r.rep_kind.capitalize(), '{:.2f}'.format(100.0 * r.accuracy)] for model, r in zip(models, reports)]
    table = tabulate(rows, headers=['Model', 'Type of representation', 'Accuracy (%)'])
    if reports:
        table += '\n(chance: {:.2f}%)'.format(100.0 * reports[0].chance)
    return table
