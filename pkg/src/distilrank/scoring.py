"""Adapters that turn a ranking checkpoint into a reranking scorer."""

from __future__ import annotations

import numpy as np

from .encoder import Checkpoint, score_batch
from .metrics import rerank_at_depth
from .text import Vocabulary, build_pair_input, collate, tokenize


class ModelScorer:
    """``scorer(query_id, doc_ids) -> scores`` backed by a ranking checkpoint.

    Token ids of queries and passages are cached, so repeated reranking of the
    same candidates only pays for the forward passes.
    """

    def __init__(self, model: Checkpoint, vocab: Vocabulary, queries: dict, collection: dict,
                 batch_size: int = 128, max_len: int | None = None):
        self.model = model
        self.vocab = vocab
        self.queries = queries
        self.collection = collection
        self.batch_size = batch_size
        self.max_len = max_len or model.config.max_seq_len
        self._ids: dict = {}

    def _tok(self, kind, key, text):
        k = (kind, key)
        if k not in self._ids:
            self._ids[k] = tokenize(text, self.vocab)
        return self._ids[k]

    def pairs(self, query_id, doc_ids) -> list:
        q = self._tok("q", query_id, self.queries[query_id])
        return [build_pair_input(q, self._tok("d", d, self.collection[d]), self.max_len)
                for d in doc_ids]

    def __call__(self, query_id, doc_ids):
        inputs = self.pairs(query_id, doc_ids)
        out = np.empty(len(inputs))
        for start in range(0, len(inputs), self.batch_size):
            chunk = collate(inputs[start:start + self.batch_size])
            out[start:start + len(chunk.tokens)] = score_batch(self.model, *chunk)
        return out


def rerank_with_model(model: Checkpoint, first_stage: dict, vocab: Vocabulary, queries: dict,
                      collection: dict, depth: int = 1000, batch_size: int = 128) -> dict:
    scorer = ModelScorer(model, vocab, queries, collection, batch_size)
    return rerank_at_depth(first_stage, scorer, depth)
