"""Efficiency protocol: reranking latency, convergence curves, training cost.

Only scoring plus sorting is timed.  Tokenization, packing, index building
and model loading happen before the clock starts.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import Checkpoint, score_batch
from .errors import ParameterError
from .metrics import mrr_at_k
from .scoring import rerank_with_model
from .text import RESERVED, PairInput, build_pair_input

BATCH_SIZES = (64, 128, 256, 512)
LATENCY_COLUMNS = ("model", "depth", "batch_size", "sec_per_query")
CONVERGENCE_COLUMNS = ("examples_seen", "mrr_at_10", "wall_clock_training_seconds")
COST_COLUMNS = ("pipeline", "reached_mark", "wall_clock_seconds", "sec_per_example")


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu} cpus={os.cpu_count()} numpy={np.__version__}"


@dataclass
class LatencyReport:
    model_id: str
    depth: int
    seq_len: int
    per_batch: dict
    best_batch_size: int
    best_latency: float
    hardware: str
    warmup: int
    repeats: int
    dtype: str
    workers: int = 1
    baseline_id: str | None = None
    baseline_latency: float | None = None
    speedup: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_batch"] = {str(k): v for k, v in self.per_batch.items()}
        return d

    def csv_rows(self) -> list:
        rows = [(self.model_id, self.depth, b, repr(s)) for b, s in sorted(self.per_batch.items())]
        rows.append((self.model_id, self.depth, "best", repr(self.best_latency)))
        return rows


def write_latency(path, reports) -> None:
    """CSV of every measurement plus one summary row per model; a JSON
    sidecar (``<path>.json``) keeps speedups and the hardware descriptor."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENCY_COLUMNS)
        for r in reports:
            w.writerows(r.csv_rows())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)


def synthetic_latency_inputs(num_queries: int, depth: int, seq_len: int, vocab_size: int,
                             seed: int = 0, query_len: int = 8):
    """Random token queries and passages that fill ``seq_len`` exactly."""
    if seq_len < query_len + 4:
        raise ParameterError("seq_len too short for the query length")
    rng = np.random.default_rng(seed)
    lo = len(RESERVED)
    queries = [rng.integers(lo, vocab_size, size=query_len).tolist() for _ in range(num_queries)]
    plen = seq_len - query_len - 3
    candidates = [[rng.integers(lo, vocab_size, size=plen).tolist() for _ in range(depth)]
                  for _ in range(num_queries)]
    return queries, candidates


def _pack(query, passages, seq_len) -> PairInput:
    inputs = [build_pair_input(query, p, seq_len) for p in passages]
    return PairInput(np.stack([x.tokens for x in inputs]), np.stack([x.segments for x in inputs]),
                     np.stack([x.mask for x in inputs]))


def _rank_one(model, packed: PairInput, batch_size: int):
    n = packed.tokens.shape[0]
    scores = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        stop = start + batch_size
        scores[start:stop] = score_batch(model, packed.tokens[start:stop],
                                         packed.segments[start:stop], packed.mask[start:stop])
    return np.argsort(-scores, kind="stable")


def measure_latency(model: Checkpoint, queries, candidates, depth: int,
                    batch_sizes=BATCH_SIZES, *, warmup: int = 3, repeats: int = 20,
                    seq_len: int | None = None, baseline: LatencyReport | None = None,
                    model_id: str = "model", dtype=None) -> LatencyReport:
    """Mean wall-clock seconds per query to score ``depth`` candidates and sort them.

    ``queries`` are token-id lists and ``candidates[i]`` the passage token-id
    lists of query ``i``.  Queries are cycled when fewer than
    ``warmup + repeats`` are given.
    """
    if depth < 1 or repeats < 1 or warmup < 0 or not batch_sizes:
        raise ParameterError("need depth >= 1, repeats >= 1, warmup >= 0 and a batch size")
    usable = [i for i, c in enumerate(candidates) if len(c) >= depth]
    if not queries or not usable:
        raise ParameterError(f"no query has at least {depth} candidates")
    seq_len = seq_len or model.config.max_seq_len
    if dtype is not None:
        model = model.astype(dtype)
    packed = {i: _pack(queries[i], candidates[i][:depth], seq_len) for i in usable}
    schedule = [usable[k % len(usable)] for k in range(warmup + repeats)]
    per_batch = {}
    for b in batch_sizes:
        if b < 1:
            raise ParameterError("batch sizes must be >= 1")
        for i in schedule[:warmup]:
            _rank_one(model, packed[i], b)
        elapsed = []
        for i in schedule[warmup:]:
            t0 = time.perf_counter()
            _rank_one(model, packed[i], b)
            elapsed.append(time.perf_counter() - t0)
        per_batch[int(b)] = math.fsum(elapsed) / len(elapsed)
    best = min(per_batch, key=lambda k: (per_batch[k], k))
    report = LatencyReport(model_id, depth, seq_len, per_batch, best, per_batch[best],
                           hardware_descriptor(), warmup, repeats,
                           str(next(iter(model.params.values())).dtype))
    if baseline is not None:
        report.baseline_id = baseline.model_id
        report.baseline_latency = baseline.best_latency
        report.speedup = baseline.best_latency / report.best_latency
    return report


# -- convergence ---------------------------------------------------------------------------

@dataclass
class ConvergenceCurve:
    label: str
    rows: list = field(default_factory=list)
    gaps: list = field(default_factory=list)

    def mrr_at(self, mark):
        for r in self.rows:
            if r["examples_seen"] == mark:
                return r["mrr_at_10"]
        return None

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CONVERGENCE_COLUMNS)
            for r in self.rows:
                w.writerow([r["examples_seen"], repr(r["mrr_at_10"]),
                            repr(r["wall_clock_training_seconds"])])


def convergence_track(result, first_stage: dict, queries: dict, collection: dict, qrels: dict,
                      vocab, depth: int = 1000, marks=None, offset_seconds: float = 0.0,
                      label: str = "") -> ConvergenceCurve:
    """MRR@10 of each mark snapshot of a training result.

    ``offset_seconds`` adds the wall-clock of earlier pipeline stages so the
    time column is cumulative over the whole pipeline.  Marks without a
    snapshot are recorded in ``gaps``.
    """
    marks = sorted(result.snapshots) if marks is None else sorted(marks)
    curve = ConvergenceCurve(label)
    for mark in marks:
        ck = result.snapshots.get(mark)
        if ck is None:
            curve.gaps.append(mark)
            continue
        run = rerank_with_model(ck, first_stage, vocab, queries, collection, depth)
        curve.rows.append({"examples_seen": mark,
                           "mrr_at_10": mrr_at_k(run, qrels, 10).mean,
                           "wall_clock_training_seconds": offset_seconds + result.mark_seconds[mark]})
    return curve


def random_order_mrr(run: dict, qrels: dict, depth: int, k: int = 10) -> float:
    """Expected MRR@k when the top-``depth`` candidates of each query are shuffled uniformly."""
    values = []
    for qid in sorted(qrels):
        cands = [d for d, _ in run.get(qid, [])[:depth]]
        n = len(cands)
        r = sum(1 for d in cands if qrels[qid].get(d, 0) > 0)
        exp, p_none = 0.0, 1.0
        for i in range(1, min(k, n) + 1):
            remaining = n - i + 1
            p_first = p_none * r / remaining if remaining else 0.0
            exp += p_first / i
            p_none *= (remaining - r) / remaining if remaining else 0.0
        values.append(exp)
    return math.fsum(values) / len(values) if values else 0.0


# -- training cost ---------------------------------------------------------------------------

@dataclass
class CostRow:
    pipeline: str
    reached_mark: int | None
    wall_clock_seconds: float | None
    sec_per_example: float | None


def training_cost_report(curves: dict, teacher_mrr: float | None, tau: float = 0.05,
                         stage_costs: dict | None = None) -> list:
    """First mark whose MRR@10 is within ``tau`` (relative) of the teacher.

    ``curves`` maps pipeline name to a :class:`ConvergenceCurve`;
    ``stage_costs`` optionally maps the same names to measured seconds per
    training example.
    """
    if teacher_mrr is None:
        raise ParameterError("training_cost_report needs a teacher reference MRR@10")
    if not 0 <= tau < 1:
        raise ParameterError("tau must lie in [0, 1)")
    threshold = (1.0 - tau) * teacher_mrr
    stage_costs = stage_costs or {}
    out = []
    for name in sorted(curves):
        hit = next((r for r in curves[name].rows if r["mrr_at_10"] >= threshold), None)
        out.append(CostRow(name, hit["examples_seen"] if hit else None,
                           hit["wall_clock_training_seconds"] if hit else None,
                           stage_costs.get(name)))
    return out


def write_cost_report(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COST_COLUMNS)
        for r in rows:
            w.writerow([r.pipeline,
                        "not reached" if r.reached_mark is None else r.reached_mark,
                        "" if r.wall_clock_seconds is None else repr(r.wall_clock_seconds),
                        "" if r.sec_per_example is None else repr(r.sec_per_example)])
