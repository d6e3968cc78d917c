"""Seeded synthetic retrieval corpus for desk-scale experiments.

Words are background fillers ``w<i>``, topic words ``t<i>`` and a negation
word ``not``.  A query is 2-4 topic words.  A document is relevant to a query
when it contains query topic words *not* immediately preceded by ``not``;
the grade is the number of such words, capped at 3.  Each query also gets
distractor documents that repeat its topic words in negated form.  BM25
counts those occurrences and ranks the distractors high, while a model that
reads word order can learn to discount them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bm25 import build_index, retrieve_topk
from .errors import ParameterError
from .text import TrainTriple

NEGATION = "not"
MIN_VOCAB = 16


@dataclass
class SyntheticCorpus:
    collection: dict
    queries: dict
    qrels: dict
    triples: list
    train_qids: list = field(default_factory=list)
    heldout_qids: list = field(default_factory=list)

    @property
    def train_triples(self) -> list:
        return self.triples


def unnegated_terms(words) -> set:
    return {w for i, w in enumerate(words) if i == 0 or words[i - 1] != NEGATION}


def _insert_units(rng, words, units):
    """Insert each unit (a list of words) at a random word boundary, keeping units intact."""
    out = [[w] for w in words]
    for unit in units:
        pos = int(rng.integers(0, len(out) + 1))
        out.insert(pos, list(unit))
    return [w for unit in out for w in unit]


def generate_synthetic(seed: int, num_docs: int, num_queries: int, vocab_size: int, *,
                       num_heldout: int = 0, triples_per_query: int = 8,
                       doc_len=(12, 20), rel_per_query=(1, 3), distractors_per_query=(2, 6),
                       filler_topic_prob: float = 0.1, negatives_depth: int = 100) -> SyntheticCorpus:
    if min(num_docs, num_queries, vocab_size) < 1:
        raise ParameterError("sizes must be >= 1")
    if vocab_size < MIN_VOCAB:
        raise ParameterError(f"vocab_size {vocab_size} too small to embed topics (need >= {MIN_VOCAB})")
    if num_docs < num_queries:
        raise ParameterError("need at least one document per query")
    if not 0 <= num_heldout <= num_queries:
        raise ParameterError("num_heldout must lie in [0, num_queries]")
    rng = np.random.default_rng(seed)
    n_topic = vocab_size // 4
    n_bg = vocab_size - n_topic - 1
    topics = [f"t{i}" for i in range(n_topic)]
    background = [f"w{i}" for i in range(n_bg)]

    def filler(extra=0):
        n = int(rng.integers(doc_len[0], doc_len[1] + 1)) - extra
        return [background[i] for i in rng.integers(0, n_bg, size=max(n, 1))]

    def negated_noise(k):
        units = []
        for _ in range(k):
            pool = topics if rng.random() < 0.5 else background
            units.append([NEGATION, pool[int(rng.integers(0, len(pool)))]])
        return units

    query_terms = []
    for _ in range(num_queries):
        k = int(rng.integers(2, 5))
        query_terms.append([topics[i] for i in rng.choice(n_topic, size=min(k, n_topic), replace=False)])

    # per-query relevant docs and distractors, then fillers
    docs = []
    for terms in query_terms:
        docs.append(_insert_units(rng, filler(len(terms)), [[t] for t in terms]
                                  + negated_noise(int(rng.integers(0, 3)))))
    budget = num_docs - len(docs)
    extra_rel = [int(rng.integers(rel_per_query[0], rel_per_query[1] + 1)) - 1 for _ in query_terms]
    n_dist = [int(rng.integers(distractors_per_query[0], distractors_per_query[1] + 1))
              for _ in query_terms]
    for qi, terms in enumerate(query_terms):
        for _ in range(extra_rel[qi]):
            if budget <= 0:
                break
            size = int(rng.integers(1, len(terms) + 1))
            subset = [terms[i] for i in rng.choice(len(terms), size=size, replace=False)]
            docs.append(_insert_units(rng, filler(size), [[t] for t in subset]
                                      + negated_noise(int(rng.integers(0, 3)))))
            budget -= 1
        for _ in range(n_dist[qi]):
            if budget <= 0:
                break
            units = [[NEGATION, t] for t in terms for _ in range(2)]
            docs.append(_insert_units(rng, filler(len(units)), units
                                      + negated_noise(int(rng.integers(0, 2)))))
            budget -= 1
    while budget > 0:
        units = negated_noise(int(rng.integers(0, 3)))
        if rng.random() < filler_topic_prob:
            units.append([topics[int(rng.integers(0, n_topic))]])
        docs.append(_insert_units(rng, filler(), units))
        budget -= 1

    order = rng.permutation(len(docs))
    width = len(str(len(docs)))
    collection = {f"D{rank:0{width}d}": " ".join(docs[i]) for rank, i in enumerate(order)}
    qwidth = len(str(num_queries))
    queries = {f"Q{i:0{qwidth}d}": " ".join(t) for i, t in enumerate(query_terms)}
    qids = list(queries)

    # grades follow the unnegated-overlap rule over the whole collection
    doc_terms = {d: unnegated_terms(text.split()) for d, text in collection.items()}
    postings: dict = {}
    for d, terms in doc_terms.items():
        for t in terms:
            postings.setdefault(t, []).append(d)
    qrels = {}
    for qid, terms in zip(qids, query_terms):
        counts: dict = {}
        for t in terms:
            for d in postings.get(t, ()):
                counts[d] = counts.get(d, 0) + 1
        qrels[qid] = {d: min(c, 3) for d, c in sorted(counts.items())}

    train_qids = qids[: num_queries - num_heldout]
    heldout_qids = qids[num_queries - num_heldout:]
    index = build_index(collection)
    all_docs = sorted(collection)
    triples = []
    for qid in train_qids:
        judged = qrels[qid]
        positives = sorted(d for d, g in judged.items() if g >= 2)
        negatives = [d for d, _ in retrieve_topk(queries[qid], index, negatives_depth)
                     if d not in judged]
        if not negatives:
            negatives = [d for d in all_docs if d not in judged][:negatives_depth]
        if not positives or not negatives:
            continue
        for _ in range(triples_per_query):
            pos = positives[int(rng.integers(0, len(positives)))]
            neg = negatives[int(rng.integers(0, len(negatives)))]
            triples.append(TrainTriple(queries[qid], collection[pos], collection[neg]))
    return SyntheticCorpus(collection, queries, qrels, triples, train_qids, heldout_qids)
