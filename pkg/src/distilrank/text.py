"""Tokenisation, vocabulary, pair packing and MS MARCO / TREC file formats."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import FormatError, ParameterError

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
QUERY_CAP = 64
MALFORMED_LIMIT = 0.01

_WORD = re.compile(r"[^\W_]+")


def split_words(text: str) -> list:
    """Case-fold and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Frequency-ranked word vocabulary with five fixed reserved ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ParameterError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 8192, min_count: int = 1) -> "Vocabulary":
        if max_size < len(RESERVED):
            raise ParameterError(f"vocabulary size must be >= {len(RESERVED)}")
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        ranked = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                        key=lambda w: (-counts[w], w))
        return cls(ranked[: max_size - len(RESERVED)])

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def tokens(self, ids) -> list:
        return [self.itos[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise FormatError(f"{path}: reserved tokens missing or out of order")
        return cls(lines[len(RESERVED):])


def tokenize(text: str, vocab: Vocabulary, max_len: int | None = None) -> list:
    ids = [vocab.id(w) for w in split_words(text)]
    return ids if max_len is None else ids[:max_len]


class PairInput(NamedTuple):
    tokens: np.ndarray
    segments: np.ndarray
    mask: np.ndarray


def build_pair_input(query_ids, passage_ids, max_len: int, query_cap: int = QUERY_CAP) -> PairInput:
    """Pack ``[CLS] q [SEP] p [SEP]`` and pad to ``max_len``.

    The query is capped first (at ``query_cap`` and at what fits), the
    passage takes whatever room is left.
    """
    if max_len < 8:
        raise ParameterError("max_len must be >= 8")
    q = list(query_ids)[: min(query_cap, max_len - 3)]
    p = list(passage_ids)[: max_len - 3 - len(q)]
    seq = [CLS] + q + [SEP] + p + [SEP]
    n = len(seq)
    tokens = np.zeros(max_len, dtype=np.int64)
    segments = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    tokens[:n] = seq
    segments[len(q) + 2:n] = 1
    mask[:n] = True
    return PairInput(tokens, segments, mask)


def build_single_input(ids, max_len: int) -> PairInput:
    """Pack ``[CLS] text [SEP]`` (one segment) for language-model stages."""
    if max_len < 8:
        raise ParameterError("max_len must be >= 8")
    seq = [CLS] + list(ids)[: max_len - 2] + [SEP]
    tokens = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    tokens[: len(seq)] = seq
    mask[: len(seq)] = True
    return PairInput(tokens, np.zeros(max_len, dtype=np.int64), mask)


def collate(inputs) -> PairInput:
    """Stack packed inputs and drop trailing columns that are padding everywhere."""
    tokens = np.stack([x.tokens for x in inputs])
    segments = np.stack([x.segments for x in inputs])
    mask = np.stack([x.mask for x in inputs])
    width = int(mask.any(axis=0).nonzero()[0].max()) + 1 if mask.any() else 1
    return PairInput(tokens[:, :width], segments[:, :width], mask[:, :width])


# -- record types -----------------------------------------------------------

@dataclass(frozen=True)
class TrainTriple:
    query: str
    positive_passage: str
    negative_passage: str

    def __post_init__(self):
        if not (self.query and self.positive_passage and self.negative_passage):
            raise ParameterError("train triple fields must be non-empty")


class QrelEntry(NamedTuple):
    query_id: str
    doc_id: str
    grade: int


class RunEntry(NamedTuple):
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


@dataclass
class IngestStats:
    total: int = 0
    malformed: int = 0


FORMATS = ("collection_tsv", "queries_tsv", "qrels_trec", "triples_tsv", "run_trec")


def _parse(fmt, line):
    if fmt in ("collection_tsv", "queries_tsv"):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            return None
        return parts[0], parts[1]
    if fmt == "triples_tsv":
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            return None
        return TrainTriple(*parts)
    if fmt == "qrels_trec":
        parts = line.split()
        if len(parts) != 4:
            return None
        try:
            grade = int(parts[3])
        except ValueError:
            return None
        if grade < 0:
            return None
        return QrelEntry(parts[0], parts[2], grade)
    if fmt == "run_trec":
        parts = line.split()
        if len(parts) != 6:
            return None
        try:
            rank, score = int(parts[3]), float(parts[4])
        except ValueError:
            return None
        if rank < 1:
            return None
        return RunEntry(parts[0], parts[2], rank, score, parts[5])
    raise ParameterError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def ingest(path, fmt: str, stats: IngestStats | None = None) -> Iterator:
    """Stream typed records from ``path``.

    Malformed lines are skipped and counted in ``stats``.  Once the file is
    exhausted, a malformed share above 1% raises :class:`FormatError`.
    """
    if fmt not in FORMATS:
        raise ParameterError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    stats = stats if stats is not None else IngestStats()
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            stats.total += 1
            rec = _parse(fmt, line)
            if rec is None:
                stats.malformed += 1
                continue
            yield rec
    if stats.malformed:
        log.warning("%s: %d of %d lines malformed", path, stats.malformed, stats.total)
    if stats.total and stats.malformed > MALFORMED_LIMIT * stats.total:
        raise FormatError(f"{path}: {stats.malformed}/{stats.total} malformed lines "
                          f"exceeds {MALFORMED_LIMIT:.0%}")


def load_texts(path, fmt="collection_tsv") -> dict:
    return dict(ingest(path, fmt))


def load_qrels(path) -> dict:
    qrels: dict = {}
    for e in ingest(path, "qrels_trec"):
        qrels.setdefault(e.query_id, {})[e.doc_id] = e.grade
    return qrels


def load_run(path) -> dict:
    rows: dict = {}
    for e in ingest(path, "run_trec"):
        rows.setdefault(e.query_id, []).append(e)
    return {q: [(e.doc_id, e.score) for e in sorted(es, key=lambda e: e.rank)]
            for q, es in rows.items()}


def load_triples(path) -> list:
    return list(ingest(path, "triples_tsv"))


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ")


def write_texts(path, items: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key, text in items.items():
            fh.write(f"{key}\t{_clean(text)}\n")


def write_qrels(path, qrels: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in qrels.items():
            for did, grade in docs.items():
                fh.write(f"{qid} 0 {did} {int(grade)}\n")


def write_triples(path, triples):
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{_clean(t.query)}\t{_clean(t.positive_passage)}\t"
                     f"{_clean(t.negative_passage)}\n")


def write_run(path, run: dict, tag: str = "distilrank"):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in run.items():
            for rank, (did, score) in enumerate(ranked, start=1):
                fh.write(f"{qid} Q0 {did} {rank} {float(score)!r} {tag}\n")
