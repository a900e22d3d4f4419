"""
Test text tokenization and the text reference embeddings
"""

import numpy as np
import pytest

from semalignvc.conf import ConfigLoader
from semalignvc.core.textref import (MAX_TOY_COSINE, TextEmbeddingSequence, TextTokenIds, ToyTextProvider,
                                     embed_text, get_text_provider, tokenize_text)
from semalignvc.errors import ProviderError


@pytest.fixture()
def provider():
    yield ToyTextProvider(d_text=16, seed=3)


class TestToyTextProvider(object):

    def test_ids(self, provider):
        ids = tokenize_text("aba", provider)
        assert ids.ids.tolist() == [1, 2, 1]
        assert provider.vocab_size == 17
        assert provider.blank_id == 0

    def test_embeddings_follow_ids(self, provider):
        emb = embed_text("aba", provider)
        assert emb.embeddings.shape == (3, 16)
        assert emb.d_text == 16
        assert np.array_equal(emb.embeddings[0], emb.embeddings[2])
        assert not np.allclose(emb.embeddings[0], emb.embeddings[1])
        assert emb.provider_id == provider.provider_id

    def test_length_agreement(self, provider):
        for transcript in ("a", "hello", "ponmlkjihgfedcba"):
            assert len(tokenize_text(transcript, provider)) == len(embed_text(transcript, provider))

    def test_distinct_symbols(self, provider):
        table = provider.table[1:]
        unit = table / np.linalg.norm(table, axis=1, keepdims=True)
        cosine = np.dot(unit, unit.T)
        np.fill_diagonal(cosine, -1.0)
        assert cosine.max() < MAX_TOY_COSINE

    def test_deterministic(self):
        assert np.array_equal(ToyTextProvider(seed=1).table, ToyTextProvider(seed=1).table)
        assert not np.array_equal(ToyTextProvider(seed=1).table, ToyTextProvider(seed=2).table)
        assert ToyTextProvider(seed=1).provider_id != ToyTextProvider(seed=2).provider_id

    def test_unknown_character(self, provider):
        with pytest.raises(ValueError, match="'z'"):
            tokenize_text("abz", provider)

    def test_empty_transcript(self, provider):
        with pytest.raises(ValueError):
            tokenize_text("   ", provider)
        with pytest.raises(ValueError):
            embed_text("", provider)

    def test_bad_alphabet(self):
        with pytest.raises(ValueError):
            ToyTextProvider(alphabet='abca')


class TestContainers(object):

    def test_blank_is_reserved(self):
        with pytest.raises(ValueError):
            TextTokenIds([1, 0, 2], 5)
        with pytest.raises(ValueError):
            TextTokenIds([], 5)
        with pytest.raises(ValueError):
            TextTokenIds([5], 5)

    def test_embeddings_must_be_finite(self):
        with pytest.raises(ValueError):
            TextEmbeddingSequence(np.array([[0.0, np.nan]]), 'toy')
        with pytest.raises(ValueError):
            TextEmbeddingSequence(np.zeros((0, 4)), 'toy')


class TestGetTextProvider(object):

    def test_toy_from_settings(self):
        settings = ConfigLoader().settings
        settings['text']['d-text'] = 8
        provider = get_text_provider(settings, seed=5)
        assert isinstance(provider, ToyTextProvider)
        assert provider.d_text == 8
        assert provider.vocab_size == len(settings['corpus']['alphabet']) + 1

    def test_external_without_model_dir(self):
        settings = ConfigLoader().settings
        settings['text']['text-provider'] = 'external'
        settings['text'].pop('model-dir', None)
        with pytest.raises(ProviderError, match='model-dir'):
            get_text_provider(settings)

    def test_external_missing_model(self, tmp_path):
        pytest.importorskip('transformers')
        settings = ConfigLoader().settings
        settings['text']['text-provider'] = 'external'
        settings['text']['model-dir'] = str(tmp_path / 'nothing-here')
        with pytest.raises(ProviderError):
            get_text_provider(settings)

    def test_unknown_kind(self):
        settings = ConfigLoader().settings
        settings['text']['text-provider'] = 'magic'
        with pytest.raises(ValueError):
            get_text_provider(settings)
