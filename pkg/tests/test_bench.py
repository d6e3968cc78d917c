import csv
import math

import numpy as np
import pytest

from distilrank.bench import (BATCH_SIZES, ConvergenceCurve, CostRow, LATENCY_COLUMNS,
                              convergence_track, measure_latency, random_order_mrr,
                              synthetic_latency_inputs, training_cost_report, write_cost_report,
                              write_latency)
from distilrank.bm25 import build_index, retrieve_run
from distilrank.distill import ranker_distill
from distilrank.encoder import Checkpoint, EncoderConfig
from distilrank.errors import ParameterError
from distilrank.metrics import mrr_at_k
from distilrank.scoring import rerank_with_model
from distilrank.synthetic import generate_synthetic
from distilrank.text import Vocabulary
from distilrank.training import TrainSchedule, finetune_ranker

MID = EncoderConfig(2, 64, 4, 256, vocab_size=500, max_seq_len=64, heads=("rank",))
SMALL = EncoderConfig(1, 32, 4, 128, vocab_size=500, max_seq_len=64, heads=("rank",))


@pytest.fixture(scope="module")
def inputs():
    return synthetic_latency_inputs(4, 128, 64, 500, seed=0)


def test_self_speedup(inputs):
    model = Checkpoint.initialize(MID, 0)
    q, c = inputs
    base = measure_latency(model, q, c, 128, (128,), warmup=3, repeats=20, model_id="m")
    again = measure_latency(model, q, c, 128, (128,), warmup=3, repeats=20, baseline=base)
    assert 0.8 <= again.speedup <= 1.25
    assert again.best_latency == min(again.per_batch.values())
    assert again.speedup == base.best_latency / again.best_latency
    assert again.baseline_id == "m" and again.seq_len == 64 and again.hardware


def test_smaller_config_is_not_slower(inputs):
    q, c = inputs
    base = measure_latency(Checkpoint.initialize(MID, 0), q, c, 128, (128,), warmup=3, repeats=20)
    small = measure_latency(Checkpoint.initialize(SMALL, 0), q, c, 128, (128,), warmup=3,
                            repeats=20, baseline=base)
    assert small.speedup >= 1.0 - 0.2


def test_depth_scales_work():
    q, c = synthetic_latency_inputs(2, 1000, 32, 500, seed=1)
    model = Checkpoint.initialize(EncoderConfig(1, 32, 4, 64, vocab_size=500, max_seq_len=32,
                                                heads=("rank",)), 0)
    shallow = measure_latency(model, q, c, 100, (128,), warmup=1, repeats=4)
    deep = measure_latency(model, q, c, 1000, (128,), warmup=1, repeats=4)
    assert shallow.best_latency < deep.best_latency


def test_latency_errors(inputs):
    q, c = inputs
    model = Checkpoint.initialize(SMALL, 0)
    with pytest.raises(ParameterError):
        measure_latency(model, q, c, 129, (64,))
    with pytest.raises(ParameterError):
        measure_latency(model, q, c, 64, (64,), repeats=0)
    with pytest.raises(ParameterError):
        measure_latency(model, q, c, 64, (0,), repeats=1, warmup=0)


def test_latency_csv(tmp_path, inputs):
    q, c = inputs
    rep = measure_latency(Checkpoint.initialize(SMALL, 0), q, c, 64, (64, 128), warmup=0,
                          repeats=2, model_id="small", dtype=np.float32)
    assert rep.dtype == "float32"
    write_latency(tmp_path / "lat.csv", [rep])
    rows = list(csv.reader(open(tmp_path / "lat.csv")))
    assert tuple(rows[0]) == LATENCY_COLUMNS
    assert [r[2] for r in rows[1:]] == ["64", "128", "best"]
    assert float(rows[-1][3]) == rep.best_latency
    assert (tmp_path / "lat.csv.json").exists()
    assert BATCH_SIZES == (64, 128, 256, 512)


# -- random ordering ---------------------------------------------------------------

def test_random_order_mrr_matches_simulation():
    rng = np.random.default_rng(4)
    run = {f"q{i}": [(f"d{j}", float(-j)) for j in range(int(rng.integers(1, 40)))]
           for i in range(6)}
    qrels = {q: {d: 1 for d, _ in r if rng.random() < 0.15} for q, r in run.items()}
    want = random_order_mrr(run, qrels, 1000)
    sims = []
    for _ in range(4000):
        shuffled = {q: [r[i] for i in rng.permutation(len(r))] for q, r in run.items()}
        sims.append(mrr_at_k(shuffled, qrels).mean)
    assert abs(np.mean(sims) - want) < 4 * np.std(sims) / math.sqrt(len(sims)) + 1e-3


def test_random_order_mrr_edge_cases():
    assert random_order_mrr({"q": [("a", 1.0)]}, {"q": {"a": 1}}, 10) == 1.0
    assert random_order_mrr({"q": [("a", 1.0)]}, {"q": {"b": 1}}, 10) == 0.0
    assert random_order_mrr({}, {"q": {"b": 1}}, 10) == 0.0


# -- convergence and training cost --------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    task = generate_synthetic(7, 400, 60, 64, num_heldout=20, triples_per_query=4)
    vocab = Vocabulary.build(list(task.collection.values()) + list(task.queries.values()))
    held = {q: task.queries[q] for q in task.heldout_qids}
    qrels = {q: task.qrels[q] for q in task.heldout_qids}
    run = retrieve_run(held, build_index(task.collection), 1000)
    cfg = EncoderConfig(2, 64, 4, 256, vocab_size=len(vocab), max_seq_len=64)
    return dict(task=task, vocab=vocab, qrels=qrels, run=run, cfg=cfg)


def test_random_ranker_near_random_ordering(desk):
    # averaged over inits: a single random head is a fixed, weakly content-dependent ordering
    t = desk["task"]
    expected = random_order_mrr(desk["run"], desk["qrels"], 200)
    scores = []
    for seed in range(8):
        model = Checkpoint.initialize(desk["cfg"].with_heads("rank"), seed)
        run = rerank_with_model(model, desk["run"], desk["vocab"], t.queries, t.collection, 200)
        scores.append(mrr_at_k(run, desk["qrels"]).mean)
    assert expected / 2 <= np.mean(scores) <= 2 * expected


@pytest.fixture(scope="module")
def trained(desk):
    t, vocab, cfg = desk["task"], desk["vocab"], desk["cfg"]
    sched = TrainSchedule(lr=1e-3, batch_size=32, max_examples=192, checkpoint_marks=(0, 64, 192))
    teacher_cfg = EncoderConfig(4, 64, 4, 256, vocab_size=len(vocab), max_seq_len=64)
    teacher = finetune_ranker(Checkpoint.initialize(teacher_cfg, 1).advance("pretrained", 0),
                              t.triples, sched, vocab).final
    student = Checkpoint.initialize(cfg, 2).advance("lm-distilled", 0)
    ft = finetune_ranker(student, t.triples, sched, vocab)
    rd = ranker_distill(teacher, student, t.triples, sched, vocab=vocab)
    return dict(teacher=teacher, ft=ft, rd=rd, sched=sched)


def test_convergence_curve(desk, trained, tmp_path):
    t = desk["task"]
    curve = convergence_track(trained["rd"], desk["run"], t.queries, t.collection, desk["qrels"],
                              desk["vocab"], 1000, marks=(0, 64, 100, 192), label="rd")
    assert [r["examples_seen"] for r in curve.rows] == [0, 64, 192]
    assert curve.gaps == [100]
    clock = [r["wall_clock_training_seconds"] for r in curve.rows]
    assert all(b > a for a, b in zip(clock, clock[1:]))
    curve.write(tmp_path / "c.csv")
    assert open(tmp_path / "c.csv").readline().strip() == \
        "examples_seen,mrr_at_10,wall_clock_training_seconds"
    shifted = convergence_track(trained["rd"], desk["run"], t.queries, t.collection,
                                desk["qrels"], desk["vocab"], 1000, marks=(0,),
                                offset_seconds=10.0)
    assert shifted.rows[0]["wall_clock_training_seconds"] == 10.0


def test_finetune_cheaper_than_ranker_distill(trained):
    assert trained["ft"].seconds_per_example < trained["rd"].seconds_per_example


def test_teacher_reaches_itself_at_mark_zero():
    curve = ConvergenceCurve("teacher", [{"examples_seen": 0, "mrr_at_10": 0.4,
                                          "wall_clock_training_seconds": 0.0}])
    rows = training_cost_report({"teacher": curve}, 0.4)
    assert rows == [CostRow("teacher", 0, 0.0, None)]


def test_cost_report_rows_and_purity(tmp_path):
    rows = [{"examples_seen": m, "mrr_at_10": v, "wall_clock_training_seconds": s}
            for m, v, s in ((0, 0.1, 0.0), (100, 0.5, 1.5), (200, 0.7, 3.0))]
    curves = {"b": ConvergenceCurve("b", rows), "a": ConvergenceCurve("a", rows[:2])}
    report = training_cost_report(curves, 0.7, stage_costs={"a": 0.01})
    assert [(r.pipeline, r.reached_mark) for r in report] == [("a", None), ("b", 200)]
    write_cost_report(tmp_path / "1.csv", report)
    write_cost_report(tmp_path / "2.csv", training_cost_report(curves, 0.7, stage_costs={"a": 0.01}))
    assert (tmp_path / "1.csv").read_bytes() == (tmp_path / "2.csv").read_bytes()
    assert "not reached" in (tmp_path / "1.csv").read_text()
    with pytest.raises(ParameterError):
        training_cost_report(curves, None)
