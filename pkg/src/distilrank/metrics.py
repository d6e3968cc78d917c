"""Ranking metrics, rerank-at-depth and the paired non-inferiority test."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import PairingError, ParameterError, SampleError, UsageError

log = logging.getLogger(__name__)

METRICS = ("mrr@10", "mrr", "ndcg@10", "map@1000")


def sort_ranked(pairs) -> list:
    """Order ``(doc_id, score)`` by descending score, ties by ascending doc_id."""
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def validate_run(run: dict):
    for qid, ranked in run.items():
        ids = [d for d, _ in ranked]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"query {qid}: duplicate doc_id in ranking")
        for (d1, s1), (d2, s2) in zip(ranked, ranked[1:]):
            if s2 > s1 or (s2 == s1 and d2 < d1):
                raise ParameterError(f"query {qid}: ranking not ordered by score/doc_id")


@dataclass
class MetricReport:
    metric: str
    per_query: dict
    excluded: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return math.fsum(self.per_query.values()) / len(self.per_query)

    def values(self, query_ids=None) -> np.ndarray:
        qids = sorted(self.per_query) if query_ids is None else query_ids
        return np.array([self.per_query[q] for q in qids])


def _query_set(run, qrels, query_ids):
    excluded = sorted(q for q in run if q not in qrels)
    if excluded:
        log.info("%d run queries absent from qrels were excluded", len(excluded))
    qids = sorted(qrels) if query_ids is None else list(query_ids)
    return qids, excluded


def _relevant(judged: dict, min_grade: int) -> set:
    return {d for d, g in judged.items() if g >= min_grade}


def mrr_at_k(run: dict, qrels: dict, k: int = 10, min_grade: int = 1, query_ids=None) -> MetricReport:
    if k < 1:
        raise ParameterError("k must be >= 1")
    if min_grade < 1:
        raise ParameterError("min_grade must be >= 1")
    qids, excluded = _query_set(run, qrels, query_ids)
    per = {}
    for q in qids:
        rel = _relevant(qrels.get(q, {}), min_grade)
        per[q] = 0.0
        for rank, (doc, _) in enumerate(run.get(q, [])[:k], start=1):
            if doc in rel:
                per[q] = 1.0 / rank
                break
    return MetricReport(f"mrr@{k}", per, excluded)


def mrr(run: dict, qrels: dict, min_grade: int = 1, query_ids=None) -> MetricReport:
    qids, excluded = _query_set(run, qrels, query_ids)
    depth = max((len(v) for v in run.values()), default=1) or 1
    rep = mrr_at_k(run, qrels, depth, min_grade, qids)
    return MetricReport("mrr", rep.per_query, excluded)


def ndcg_at_10(run: dict, qrels: dict, query_ids=None, k: int = 10) -> MetricReport:
    qids, excluded = _query_set(run, qrels, query_ids)
    per = {}
    for q in qids:
        judged = qrels.get(q, {})
        ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
        idcg = sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(ideal))
        if idcg == 0.0:
            per[q] = 0.0
            continue
        dcg = sum((2.0 ** judged.get(doc, 0) - 1.0) / math.log2(i + 2)
                  for i, (doc, _) in enumerate(run.get(q, [])[:k]))
        per[q] = dcg / idcg
    return MetricReport(f"ndcg@{k}", per, excluded)


def map_at_1000(run: dict, qrels: dict, min_grade: int = 1, query_ids=None, k: int = 1000) -> MetricReport:
    if min_grade < 1:
        raise ParameterError("min_grade must be >= 1")
    qids, excluded = _query_set(run, qrels, query_ids)
    per = {}
    for q in qids:
        rel = _relevant(qrels.get(q, {}), min_grade)
        if not rel:
            per[q] = 0.0
            continue
        hits = 0
        total = 0.0
        for rank, (doc, _) in enumerate(run.get(q, [])[:k], start=1):
            if doc in rel:
                hits += 1
                total += hits / rank
        per[q] = total / len(rel)
    return MetricReport(f"map@{k}", per, excluded)


def evaluate(run: dict, qrels: dict, metrics=METRICS, min_grade: int = 1, query_ids=None) -> dict:
    out = {}
    for m in metrics:
        if m == "mrr@10":
            out[m] = mrr_at_k(run, qrels, 10, min_grade, query_ids)
        elif m == "mrr":
            out[m] = mrr(run, qrels, min_grade, query_ids)
        elif m == "ndcg@10":
            out[m] = ndcg_at_10(run, qrels, query_ids)
        elif m == "map@1000":
            out[m] = map_at_1000(run, qrels, min_grade, query_ids)
        else:
            raise ParameterError(f"unknown metric {m!r}; expected one of {METRICS}")
    return out


def write_metrics(path, reports: dict):
    """``query_id,metric,value`` rows, then one ``all`` row per metric."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "metric", "value"])
        for name, rep in reports.items():
            for q in sorted(rep.per_query):
                w.writerow([q, name, repr(float(rep.per_query[q]))])
        for name, rep in reports.items():
            w.writerow(["all", name, repr(float(rep.mean))])


def read_metrics(path) -> dict:
    per: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["query_id"] == "all":
                continue
            per.setdefault(row["metric"], {})[row["query_id"]] = float(row["value"])
    return {m: MetricReport(m, v) for m, v in per.items()}


# -- reranking ------------------------------------------------------------------

def rerank_at_depth(first_stage: dict, scorer, depth: int) -> dict:
    """Rescore the top ``depth`` of every query with ``scorer``.

    ``scorer(query_id, doc_ids)`` returns one score per doc.  The rescored
    head is re-sorted; entries past ``depth`` keep first-stage order after
    it.  If their first-stage scores would break the score ordering they are
    shifted down by a constant so the run stays consistent.
    """
    if depth < 1:
        raise ParameterError("depth must be >= 1")
    out = {}
    for qid, ranked in first_stage.items():
        head, tail = ranked[:depth], ranked[depth:]
        try:
            scores = scorer(qid, [d for d, _ in head])
        except Exception as exc:
            raise UsageError(f"scorer failed on query {qid}: {exc}") from exc
        scores = [float(s) for s in scores]
        if len(scores) != len(head):
            raise UsageError(f"scorer returned {len(scores)} scores for {len(head)} docs "
                             f"on query {qid}")
        new_head = sort_ranked(zip((d for d, _ in head), scores))
        if tail and new_head:
            last_doc, last_score = new_head[-1]
            first_doc, first_score = tail[0]
            # tail must sort strictly after the rescored head
            if (-first_score, first_doc) <= (-last_score, last_doc):
                shift = (first_score - last_score) + 1.0
                tail = [(d, s - shift) for d, s in tail]
        out[qid] = new_head + list(tail)
    return out


def score_agreement(run_a: dict, run_b: dict, depth: int = 1000) -> float:
    """Mean per-query Kendall tau between the scores two runs give the same
    candidates (the top ``depth`` of ``run_a``).  Queries where either side
    is constant count as 0."""
    taus = []
    for qid in sorted(run_a):
        if qid not in run_b:
            continue
        b = dict(run_b[qid])
        shared = [(s, b[d]) for d, s in run_a[qid][:depth] if d in b]
        if len(shared) < 2:
            continue
        tau = stats.kendalltau([x for x, _ in shared], [y for _, y in shared]).statistic
        taus.append(0.0 if np.isnan(tau) else float(tau))
    return math.fsum(taus) / len(taus) if taus else 0.0


# -- non-inferiority ----------------------------------------------------------------

@dataclass(frozen=True)
class NonInferiorityResult:
    non_inferior: bool
    ci_lower: float
    statistic: float
    delta: float
    margin_mode: str
    n: int

    def record(self) -> str:
        """One-line ``non_inferior,ci_lower,delta,margin_mode`` record."""
        return f"{str(self.non_inferior).lower()},{self.ci_lower!r},{self.delta!r},{self.margin_mode}"


def non_inferiority_test(per_query_a, per_query_b, margin: float = 0.03, alpha: float = 0.05,
                         margin_mode: str = "relative") -> NonInferiorityResult:
    """One-sided paired t-test that B is not worse than A by more than the margin.

    ``d = B - A``; H0: mean(d) <= -delta with ``delta = margin * mean(A)``
    (relative) or ``delta = margin`` (absolute).  B is declared non-inferior
    when the one-sided (1 - alpha) lower confidence bound of mean(d) exceeds
    -delta.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise PairingError(f"paired vectors must have equal length ({a.shape} vs {b.shape})")
    n = a.size
    if n < 2:
        raise SampleError("need at least 2 paired observations")
    if margin_mode not in ("relative", "absolute"):
        raise ParameterError("margin_mode must be 'relative' or 'absolute'")
    delta = margin * float(a.mean()) if margin_mode == "relative" else float(margin)
    d = b - a
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd <= 1e-12 * max(1.0, abs(mean_d)):
        ok = mean_d > -delta
        stat = math.copysign(math.inf, mean_d + delta) if mean_d + delta else 0.0
        return NonInferiorityResult(bool(ok), mean_d, stat, delta, margin_mode, n)
    se = sd / math.sqrt(n)
    lower = mean_d - stats.t.ppf(1.0 - alpha, n - 1) * se
    return NonInferiorityResult(bool(lower > -delta), float(lower), (mean_d + delta) / se,
                                delta, margin_mode, n)
