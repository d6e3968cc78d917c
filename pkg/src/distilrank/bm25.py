"""Inverted-index BM25 first-stage retrieval."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DocumentLookupError, FormatError, ParameterError
from .text import split_words

K1 = 0.9
B = 0.4


@dataclass
class InvertedIndex:
    doc_ids: list
    doc_lengths: np.ndarray
    postings: dict = field(repr=False)
    avgdl: float = 0.0

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    def df(self, term: str) -> int:
        docs, _ = self.postings.get(term, ((), ()))
        return len(docs)

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))

    def doc_index(self, doc_id: str) -> int:
        try:
            return self._positions[doc_id]
        except KeyError:
            raise DocumentLookupError(f"document {doc_id!r} not in index") from None

    def __post_init__(self):
        self._positions = {d: i for i, d in enumerate(self.doc_ids)}

    def tf(self, term: str, doc_id: str) -> int:
        i = self.doc_index(doc_id)
        docs, tfs = self.postings.get(term, (np.empty(0, np.int64), np.empty(0, np.int64)))
        j = np.searchsorted(docs, i)
        return int(tfs[j]) if j < len(docs) and docs[j] == i else 0

    def save(self, path):
        payload = {
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths.tolist(),
            "postings": {t: [d.tolist(), f.tolist()] for t, (d, f) in sorted(self.postings.items())},
        }
        Path(path).write_text(json.dumps(payload, separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            lengths = np.asarray(payload["doc_lengths"], dtype=np.int64)
            postings = {t: (np.asarray(d, dtype=np.int64), np.asarray(f, dtype=np.int64))
                        for t, (d, f) in payload["postings"].items()}
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad index file ({exc})") from None
        return cls(payload["doc_ids"], lengths, postings, float(lengths.mean()))


def build_index(collection) -> InvertedIndex:
    """Index ``collection`` (mapping or iterable of ``(doc_id, text)``).

    Documents are numbered in ascending ``doc_id`` order so that the index
    is independent of input order.
    """
    items = collection.items() if hasattr(collection, "items") else collection
    docs = sorted(items, key=lambda kv: kv[0])
    if not docs:
        raise ParameterError("cannot index an empty collection")
    doc_ids = [d for d, _ in docs]
    if len(set(doc_ids)) != len(doc_ids):
        raise ParameterError("duplicate doc_id in collection")
    lengths = np.zeros(len(docs), dtype=np.int64)
    raw: dict = {}
    for i, (_, text) in enumerate(docs):
        words = split_words(text)
        lengths[i] = len(words)
        for term, tf in Counter(words).items():
            raw.setdefault(term, ([], []))
            raw[term][0].append(i)
            raw[term][1].append(tf)
    postings = {t: (np.asarray(d, dtype=np.int64), np.asarray(f, dtype=np.int64))
                for t, (d, f) in raw.items()}
    return InvertedIndex(doc_ids, lengths, postings, float(lengths.mean()))


def _norm(index, k1, b):
    return k1 * (1.0 - b + b * index.doc_lengths / index.avgdl)


def bm25_score(query_terms, doc_id: str, index: InvertedIndex, k1: float = K1, b: float = B) -> float:
    if isinstance(query_terms, str):
        query_terms = split_words(query_terms)
    i = index.doc_index(doc_id)
    denom_extra = k1 * (1.0 - b + b * index.doc_lengths[i] / index.avgdl)
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, doc_id)
        if tf == 0:
            continue
        score += index.idf(term) * (tf * (k1 + 1.0)) / (tf + denom_extra)
    return float(score)


def score_all(query_terms, index: InvertedIndex, k1: float = K1, b: float = B):
    """Dense score vector over all documents plus a matched-any-term flag."""
    scores = np.zeros(index.num_docs)
    matched = np.zeros(index.num_docs, dtype=bool)
    norm = _norm(index, k1, b)
    for term in query_terms:
        if term not in index.postings:
            continue
        docs, tfs = index.postings[term]
        idf = index.idf(term)
        tf = tfs.astype(np.float64)
        scores[docs] += idf * (tf * (k1 + 1.0)) / (tf + norm[docs])
        matched[docs] = True
    return scores, matched


def retrieve_topk(query, index: InvertedIndex, k: int = 1000, k1: float = K1, b: float = B) -> list:
    """Top-``k`` ``(doc_id, score)`` among documents matching any query term.

    Ordered by descending score, ties by ascending ``doc_id``.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    terms = split_words(query) if isinstance(query, str) else list(query)
    scores, matched = score_all(terms, index, k1, b)
    cand = np.flatnonzero(matched)
    if cand.size == 0:
        return []
    # doc numbering follows ascending doc_id, so a stable sort on -score is the tie rule
    order = cand[np.argsort(-scores[cand], kind="stable")][:k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def retrieve_run(queries: dict, index: InvertedIndex, k: int = 1000, k1: float = K1, b: float = B) -> dict:
    return {qid: retrieve_topk(text, index, k, k1, b) for qid, text in queries.items()}
