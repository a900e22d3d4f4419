#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Transcript tokenization (CTC targets) and text embeddings (alignment targets).

Two providers are available:

* ``toy``: one id per alphabet character and a frozen random embedding table,
  no network and no model files;
* ``external``: a pretrained subword tokenizer and text encoder loaded with
  ``transformers`` from a local model directory.

Id 0 is the CTC blank for every provider; text ids start at 1.
"""

import logging

import numpy as np

from semalignvc.core.corpus import DEFAULT_ALPHABET
from semalignvc.errors import ProviderError
from semalignvc.utils import derive_seed

__all__ = ['TextTokenIds', 'TextEmbeddingSequence', 'ToyTextProvider', 'ExternalTextProvider',
           'get_text_provider', 'tokenize_text', 'embed_text']

logger = logging.getLogger(__name__)

BLANK_ID = 0
# distinct toy symbols must stay below this cosine similarity
MAX_TOY_COSINE = 0.9
_MAX_RESEEDS = 100


class TextTokenIds(object):
    """Text ids [L] of a transcript, never containing the blank id."""

    def __init__(self, ids, vocab_size, blank_id=BLANK_ID):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.shape[0] < 1:
            raise ValueError("a tokenized transcript needs at least one id")
        if ids.max() >= vocab_size or ids.min() < 0:
            raise ValueError("text ids out of range [0, {})".format(vocab_size))
        if np.any(ids == blank_id):
            raise ValueError("text ids contain the reserved blank id {}".format(blank_id))
        self.ids = ids
        self.vocab_size = int(vocab_size)

    def __len__(self):
        return self.ids.shape[0]


class TextEmbeddingSequence(object):
    """Text embeddings [L x d_text] and the id of the provider that produced them."""

    def __init__(self, embeddings, provider_id):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] < 1:
            raise ValueError("text embeddings should be a non-empty [L x d_text] matrix")
        if not np.all(np.isfinite(embeddings)):
            raise ValueError("text embeddings contain non-finite values")
        self.embeddings = embeddings
        self.provider_id = provider_id

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def d_text(self):
        return self.embeddings.shape[1]


def _clean(transcript):
    text = (transcript or '').strip()
    if not text:
        raise ValueError("transcript is empty")
    return text


class ToyTextProvider(object):
    """Character ids and frozen, context-free random embeddings.

    The embedding table is redrawn from a new seed substream until every pair of
    distinct symbols has cosine similarity below ``MAX_TOY_COSINE``.
    """

    blank_id = BLANK_ID

    def __init__(self, alphabet=DEFAULT_ALPHABET, d_text=64, seed=0):
        if len(set(alphabet)) != len(alphabet) or not alphabet:
            raise ValueError("invalid toy alphabet {!r}".format(alphabet))
        self.alphabet = alphabet
        self.d_text = int(d_text)
        self.seed = int(seed)
        self.vocab_size = len(alphabet) + 1
        self._index = dict((ch, i + 1) for i, ch in enumerate(alphabet))
        self.table = self._draw_table()

    def _draw_table(self):
        for attempt in range(_MAX_RESEEDS):
            rng = np.random.default_rng(derive_seed(self.seed, 'text.toy.{}'.format(attempt)))
            table = rng.standard_normal((self.vocab_size, self.d_text))
            table[self.blank_id] = 0.0
            symbols = table[1:] / np.linalg.norm(table[1:], axis=1, keepdims=True)
            cosine = np.dot(symbols, symbols.T)
            np.fill_diagonal(cosine, -1.0)
            if cosine.max() < MAX_TOY_COSINE:
                if attempt > 0:
                    logger.warning("toy text embeddings reseeded {} time(s)".format(attempt))
                table.setflags(write=False)
                return table
        raise ProviderError(self.provider_id, "no embedding table with distinct symbols after {} draws; "
                                              "increase d-text".format(_MAX_RESEEDS))

    @property
    def provider_id(self):
        return 'toy:{}:{}'.format(self.seed, self.alphabet)

    def tokenize(self, transcript):
        text = _clean(transcript)
        unknown = sorted(set(ch for ch in text if ch not in self._index))
        if unknown:
            raise ValueError("characters outside the toy vocabulary: {}".format(
                ', '.join(repr(ch) for ch in unknown)))
        return TextTokenIds([self._index[ch] for ch in text], self.vocab_size, self.blank_id)

    def embed(self, transcript):
        ids = self.tokenize(transcript).ids
        return TextEmbeddingSequence(self.table[ids], self.provider_id)


class ExternalTextProvider(object):
    """Pretrained subword tokenizer and contextual encoder from a local model directory.

    Subword ids are shifted by one so that id 0 stays the CTC blank. Special tokens
    ([CLS], [SEP]) are not added, so embeddings and ids have the same length.
    """

    blank_id = BLANK_ID

    def __init__(self, model_dir, device='cpu'):
        self.model_dir = model_dir
        self.device = device
        try:
            from transformers import AutoModel, AutoTokenizer
            self.tokenizer = AutoTokenizer.from_pretrained(model_dir, local_files_only=True)
            self.model = AutoModel.from_pretrained(model_dir, local_files_only=True).to(device)
        except Exception as err:
            raise ProviderError('external:{}'.format(model_dir),
                                "cannot load a pretrained text encoder ({}); set 'text-provider = toy' in "
                                "the [Text] section for offline runs".format(err))
        self.model.eval()
        self.vocab_size = int(self.tokenizer.vocab_size) + 1
        self.d_text = int(self.model.config.hidden_size)

    @property
    def provider_id(self):
        return 'external:{}'.format(self.model_dir)

    def _encode(self, transcript):
        ids = self.tokenizer(_clean(transcript), add_special_tokens=False)['input_ids']
        if not ids:
            raise ValueError("transcript {!r} has no subword tokens".format(transcript))
        unknown = self.tokenizer.unk_token_id
        if unknown is not None and unknown in ids:
            raise ValueError("transcript {!r} contains characters outside the tokenizer vocabulary".format(
                transcript))
        return ids

    def tokenize(self, transcript):
        return TextTokenIds(np.asarray(self._encode(transcript)) + 1, self.vocab_size, self.blank_id)

    def embed(self, transcript):
        import torch
        ids = self._encode(transcript)
        with torch.no_grad():
            inputs = torch.tensor([ids], dtype=torch.long, device=self.device)
            hidden = self.model(input_ids=inputs).last_hidden_state[0]
        return TextEmbeddingSequence(hidden.cpu().numpy().astype(np.float64), self.provider_id)


def get_text_provider(settings, seed=None):
    """Build the text provider selected by ``settings['text']['text-provider']``."""
    sect = settings.get('text', {})
    kind = sect.get('text-provider', 'toy')
    if kind == 'toy':
        if seed is None:
            seed = settings.get('pipeline', {}).get('seed', 0)
        alphabet = settings.get('corpus', {}).get('alphabet', DEFAULT_ALPHABET)
        return ToyTextProvider(alphabet=alphabet, d_text=sect.get('d-text', 64), seed=derive_seed(seed, 'text'))
    if kind == 'external':
        model_dir = sect.get('model-dir')
        if not model_dir:
            raise ProviderError('external', "option 'model-dir' of section [Text] is not set")
        return ExternalTextProvider(model_dir)
    raise ValueError("unknown text provider '{}' (expected toy or external)".format(kind))


def tokenize_text(transcript, provider):
    """Text ids of `transcript` (CTC targets)."""
    return provider.tokenize(transcript)


def embed_text(transcript, provider):
    """Text embeddings of `transcript`, one row per text id."""
    return provider.embed(transcript)
