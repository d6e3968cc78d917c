import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distilrank.bm25 import InvertedIndex, bm25_score, build_index, retrieve_topk
from distilrank.errors import DocumentLookupError, ParameterError

from helpers import oracle_bm25


def test_counts_on_single_doc():
    idx = build_index({"d": "a a b"})
    assert idx.tf("a", "d") == 2 and idx.tf("b", "d") == 1
    assert idx.avgdl == 3


def test_absent_term_has_no_postings():
    idx = build_index({"d": "a a b"})
    assert "zzz" not in idx.postings and idx.df("zzz") == 0


def test_rebuild_is_identical(tmp_path):
    coll = {"d2": "x y", "d1": "y z z"}
    a, b = build_index(coll), build_index(dict(reversed(list(coll.items()))))
    assert a.doc_ids == b.doc_ids and a.avgdl == b.avgdl
    assert {t: (d.tolist(), f.tolist()) for t, (d, f) in a.postings.items()} == \
        {t: (d.tolist(), f.tolist()) for t, (d, f) in b.postings.items()}
    a.save(tmp_path / "i.json")
    c = InvertedIndex.load(tmp_path / "i.json")
    assert retrieve_topk("y z", c) == retrieve_topk("y z", a)


def test_absent_query_term_contributes_zero():
    idx = build_index({"d1": "a b", "d2": "c"})
    assert bm25_score(["a", "c"], "d1", idx) == bm25_score(["a"], "d1", idx)


def test_single_doc_closed_form():
    idx = build_index({"d": "a a b"})
    idf = math.log(1 + 0.5 / 1.5)
    expected = idf * 2 * 1.9 / (2 + 0.9 * 1)
    assert bm25_score(["a"], "d", idx, 0.9, 0.4) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.37696, abs=1e-5)


def test_b_zero_removes_length_normalisation():
    idx = build_index({"d1": "a x", "d2": "a x y z w v"})
    assert bm25_score(["a"], "d1", idx, b=0.0) == bm25_score(["a"], "d2", idx, b=0.0)


def test_k1_returns_argmax():
    idx = build_index({"d1": "a", "d2": "a a b", "d3": "b"})
    top = retrieve_topk("a b", idx, k=1)
    full = retrieve_topk("a b", idx)
    assert top == full[:1] and top[0][1] == max(s for _, s in full)


def test_identical_docs_tie_by_doc_id():
    idx = build_index({"z9": "a b", "a1": "a b", "m5": "a b"})
    assert [d for d, _ in retrieve_topk("a", idx)] == ["a1", "m5", "z9"]


def test_only_matching_docs_are_returned():
    idx = build_index({"d1": "a", "d2": "b"})
    assert [d for d, _ in retrieve_topk("a", idx)] == ["d1"]
    assert retrieve_topk("zzz", idx) == []


def test_errors():
    with pytest.raises(ParameterError):
        build_index({})
    with pytest.raises(ParameterError):
        retrieve_topk("a", build_index({"d": "a"}), k=0)
    with pytest.raises(DocumentLookupError):
        bm25_score(["a"], "nope", build_index({"d": "a"}))


words = st.sampled_from(list("abcdefg"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=12), min_size=1, max_size=40),
       st.lists(words, min_size=1, max_size=4), st.integers(1, 50))
def test_matches_exhaustive_oracle(doc_words, query, k):
    docs = {f"d{i:03d}": " ".join(w) for i, w in enumerate(doc_words)}
    got = retrieve_topk(query, build_index(docs), k)
    oracle = oracle_bm25(query, docs)
    want = sorted(oracle.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    assert [d for d, _ in got] == [d for d, _ in want]
    np.testing.assert_allclose([s for _, s in got], [s for _, s in want], rtol=1e-12)
