"""Desk-scale experiment: teacher, three distillation pipelines, evaluation.

One call to :func:`run_desk_seed` generates a synthetic task, trains a
4-layer/128 teacher (MLM pretraining then ranking fine-tuning), distils a
2-layer/64 student through every pipeline and evaluates everything on the
held-out queries by reranking BM25 candidates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from .bench import ConvergenceCurve, convergence_track, training_cost_report
from .bm25 import build_index, retrieve_run
from .distill import lm_distill, ranker_distill
from .encoder import DESK_STUDENT, DESK_TEACHER, Checkpoint, EncoderConfig
from .metrics import NonInferiorityResult, mrr_at_k, non_inferiority_test, score_agreement
from .scoring import rerank_with_model
from .synthetic import generate_synthetic
from .text import Vocabulary
from .training import TrainSchedule, finetune_ranker, pretrain_mlm

log = logging.getLogger(__name__)


@dataclass
class DeskProfile:
    num_docs: int = 2000
    num_queries: int = 250
    num_heldout: int = 50
    vocab_words: int = 256
    triples_per_query: int = 8
    max_seq_len: int = 64
    teacher: EncoderConfig = DESK_TEACHER
    student: EncoderConfig = DESK_STUDENT
    lr: float = 1e-3
    batch_size: int = 32
    pretrain_examples: int = 3000
    finetune_examples: int = 4000
    lm_distill_examples: int = 3000
    student_examples: int = 3000
    marks: tuple = (0, 500, 1000, 2000, 3000)
    depth: int = 1000
    margin: float = 0.03

    def schedule(self, max_examples: int, seed: int, marks=()) -> TrainSchedule:
        return TrainSchedule(lr=self.lr, batch_size=self.batch_size, max_examples=max_examples,
                             checkpoint_marks=tuple(marks), seed=seed)


@dataclass
class SeedOutcome:
    seed: int
    mrr: dict
    per_query: dict
    noninferiority: NonInferiorityResult
    depth_mrr: dict
    curves: dict
    sec_per_example: dict
    cost: list
    seconds: float
    agreement: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict, repr=False)
    qrels: dict = field(default_factory=dict, repr=False)
    models: dict = field(default_factory=dict, repr=False)


def run_desk_seed(seed: int, profile: DeskProfile = DeskProfile(), keep_models: bool = False) -> SeedOutcome:
    t0 = time.perf_counter()
    p = profile
    task = generate_synthetic(seed, p.num_docs, p.num_queries, p.vocab_words,
                              num_heldout=p.num_heldout, triples_per_query=p.triples_per_query)
    texts = list(task.collection.values())
    vocab = Vocabulary.build(texts + list(task.queries.values()))
    teacher_cfg = replace(p.teacher, vocab_size=len(vocab), max_seq_len=p.max_seq_len)
    student_cfg = replace(p.student, vocab_size=len(vocab), max_seq_len=p.max_seq_len)

    heldout = {q: task.queries[q] for q in task.heldout_qids}
    qrels = {q: task.qrels[q] for q in task.heldout_qids}
    run = retrieve_run(heldout, build_index(task.collection), p.depth)

    def rerank(model, depth=p.depth):
        return rerank_with_model(model, run, vocab, task.queries, task.collection, depth)

    pre = pretrain_mlm(texts, teacher_cfg, p.schedule(p.pretrain_examples, seed), vocab).final
    teacher = finetune_ranker(pre, task.triples, p.schedule(p.finetune_examples, seed), vocab).final
    # one LM-distilled student feeds both downstream pipelines
    lmd_result = lm_distill(pre, student_cfg, texts, p.schedule(p.lm_distill_examples, seed), vocab=vocab)
    lmd = lmd_result.final
    lmd_seconds = lmd_result.log[-1]["wall_clock_seconds"] if lmd_result.log else 0.0
    sched = p.schedule(p.student_examples, seed, p.marks)
    arms = {
        "ranker-distill": ranker_distill(teacher, Checkpoint.initialize(student_cfg.with_heads("rank"), seed),
                                         task.triples, sched, vocab=vocab),
        "lm-distill+ranker-distill": ranker_distill(teacher, lmd, task.triples, sched, vocab=vocab),
        "lm-distill+fine-tune": finetune_ranker(lmd, task.triples, sched, vocab),
    }

    runs = {"bm25": run, "teacher": rerank(teacher)}
    for name, res in arms.items():
        runs[name] = rerank(res.final)
    reports = {name: mrr_at_k(r, qrels, 10) for name, r in runs.items()}
    best = arms["lm-distill+ranker-distill"].final
    depth_mrr = {10: mrr_at_k(rerank(best, 10), qrels, 10).mean,
                 p.depth: reports["lm-distill+ranker-distill"].mean}
    # Kendall tau against the teacher's scores on the same candidates
    agreement = {name: score_agreement(runs[name], runs["teacher"], p.depth) for name in arms}
    # time axis is cumulative over the pipeline, so LM-distilled arms start after that stage
    offsets = {name: 0.0 if name == "ranker-distill" else lmd_seconds for name in arms}
    curves = {name: convergence_track(res, run, task.queries, task.collection, qrels, vocab,
                                      p.depth, p.marks, offsets[name], label=name)
              for name, res in arms.items()}
    sec = {name: res.seconds_per_example for name, res in arms.items()}
    cost = training_cost_report(curves, reports["teacher"].mean, stage_costs=sec)
    ni = non_inferiority_test(reports["teacher"].values(),
                              reports["lm-distill+ranker-distill"].values(), margin=p.margin)
    out = SeedOutcome(seed, {k: r.mean for k, r in reports.items()},
                      {k: r.per_query for k, r in reports.items()}, ni, depth_mrr, curves, sec, cost,
                      time.perf_counter() - t0, agreement, runs, qrels)
    if keep_models:
        out.models = {"teacher": teacher, "pretrained": pre, "lm-distilled": lmd,
                      **{k: r.final for k, r in arms.items()}}
    log.info("seed %d done in %.1fs: %s", seed, out.seconds, out.mrr)
    return out


def curve_dominates(a: ConvergenceCurve, b: ConvergenceCurve) -> dict:
    """Per shared mark: is ``a`` at least as good as ``b``?"""
    return {m: a.mrr_at(m) >= b.mrr_at(m) for m in (r["examples_seen"] for r in a.rows)
            if b.mrr_at(m) is not None}
