import math
from dataclasses import replace

import numpy as np
import pytest

from distilrank.bm25 import build_index, retrieve_run
from distilrank.distill import (DistillRecipe, LossWeights, PipelineData, attention_distill_loss,
                                bm25_candidate_pairs, canonical_pipeline, check_layer_map,
                                distill_objective, hidden_distill_loss, lm_distill,
                                output_distill_loss, ranker_distill, run_pipeline,
                                uniform_layer_map)
from distilrank.encoder import Checkpoint, EncoderConfig, EncodeTrace
from distilrank.errors import (ConfigurationError, ParameterError, PipelineOrderError, ShapeError,
                               StageError)
from distilrank.metrics import evaluate, validate_run
from distilrank.scoring import rerank_with_model
from distilrank.synthetic import generate_synthetic
from distilrank.tensor import Tensor
from distilrank.text import Vocabulary
from distilrank.training import TrainSchedule, pack_triples, pretrain_mlm

from grad_cases import TINY, tiny_batch
from helpers import gradcheck


def _trace(att, hidden=None, mask=None):
    att = [Tensor(np.asarray(a, dtype=float)) for a in att]
    b, _, n, _ = att[0].shape
    mask = np.ones((b, n), bool) if mask is None else mask
    hidden = hidden if hidden is not None else [np.zeros((b, n, 2))] * (len(att) + 1)
    return EncodeTrace([Tensor(np.asarray(h, float)) for h in hidden], att, None, mask)


# -- layer maps -------------------------------------------------------------------

@pytest.mark.parametrize("m, n, want", [(6, 12, [2, 4, 6, 8, 10, 12]),
                                        (12, 12, list(range(1, 13))), (4, 12, [3, 6, 9, 12])])
def test_uniform_layer_map(m, n, want):
    assert uniform_layer_map(m, n) == want


@pytest.mark.parametrize("m, n", [(13, 12), (5, 12), (0, 4)])
def test_uniform_layer_map_errors(m, n):
    with pytest.raises(ParameterError):
        uniform_layer_map(m, n)


def test_explicit_layer_map():
    assert check_layer_map([2, 5, 12], 3, 12) == [2, 5, 12]
    for bad in ([2, 5], [5, 2, 12], [1, 2, 11], [0, 3, 12]):
        with pytest.raises(ParameterError):
            check_layer_map(bad, 3, 12)


# -- component losses ---------------------------------------------------------------

def test_attention_hand_example():
    s = _trace([[[[[1, 0], [0, 1]]]]])
    t = _trace([[[[[.5, .5], [.5, .5]]]]])
    assert attention_distill_loss(s, t, [1]).item() == pytest.approx(0.25, abs=1e-15)


def test_attention_symmetric_and_zero(rng):
    a = rng.dirichlet(np.ones(5), size=(2, 3, 5))
    b = rng.dirichlet(np.ones(5), size=(2, 3, 5))
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 0, 0]], bool)
    sa, sb = _trace([a], mask=mask), _trace([b], mask=mask)
    assert attention_distill_loss(sa, sb, [1]).item() == attention_distill_loss(sb, sa, [1]).item()
    assert attention_distill_loss(sa, sa, [1]).item() == 0.0


def test_attention_head_mismatch():
    s = _trace([np.full((1, 2, 2, 2), .5)])
    t = _trace([np.full((1, 4, 2, 2), .5)])
    with pytest.raises(ShapeError):
        attention_distill_loss(s, t, [1])


def test_hidden_losses(rng):
    hs = [rng.normal(size=(2, 4, 3)) for _ in range(2)]
    ht = [rng.normal(size=(2, 4, 5)) for _ in range(2)]
    att = [np.full((2, 1, 4, 4), .25)]
    s, t = _trace(att, hs), _trace(att, ht)
    proj = Tensor(rng.normal(size=(3, 5)))
    base = hidden_distill_loss(s, t, [1], proj).item()
    doubled = hidden_distill_loss(_trace(att, [2 * h for h in hs]), _trace(att, [2 * h for h in ht]),
                                  [1], proj).item()
    assert doubled == pytest.approx(4 * base, rel=1e-12)
    assert hidden_distill_loss(t, t, [1]).item() == 0.0
    with pytest.raises(ConfigurationError):
        hidden_distill_loss(s, t, [1])
    with pytest.raises(ShapeError):
        hidden_distill_loss(s, t, [1], Tensor(np.ones((5, 3))))


def test_projection_gradient(rng):
    hs = [rng.normal(size=(2, 4, 3)) for _ in range(2)]
    ht = [rng.normal(size=(2, 4, 5)) for _ in range(2)]
    att = [np.full((2, 1, 4, 4), .25)]
    proj = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    worst = gradcheck(lambda: hidden_distill_loss(_trace(att, hs), _trace(att, ht), [1], proj),
                      [proj])
    assert worst < 1e-4


def test_output_closed_form():
    got = output_distill_loss(np.array([[0.0, 2.0]]), np.array([[2.0, 0.0]]), 1.0).item()
    # log(p/q) is +2 / -2 elementwise, so KL = 2 (p1 - p2) = 2 tanh(1)
    assert got == pytest.approx(2 * math.tanh(1.0), abs=1e-12)


def test_temperature_flattens_distributions(rng):
    s, t = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    # the KL term itself vanishes as T grows; the T^2 factor keeps the scaled
    # loss at 0.5 * Var(t - s) over classes, averaged over rows
    kl = {temp: output_distill_loss(s, t, temp).item() / temp ** 2 for temp in (1.0, 1000.0)}
    assert kl[1000.0] < kl[1.0]
    limit = np.mean(0.5 * np.var(t - s, axis=-1))
    assert output_distill_loss(s, t, 1000.0).item() == pytest.approx(limit, rel=1e-3)


def test_output_properties(rng):
    s, t = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    assert output_distill_loss(t, t).item() == 0.0
    assert output_distill_loss(s, t).item() >= 0
    # single scores use the [s, 0] two-class form
    one = output_distill_loss(np.array([0.5]), np.array([-1.0])).item()
    two = output_distill_loss(np.array([[0.5, 0]]), np.array([[-1.0, 0]])).item()
    assert one == pytest.approx(two, abs=1e-15)
    for bad in (0.0, -1.0):
        with pytest.raises(ParameterError):
            output_distill_loss(s, t, bad)
    with pytest.raises(ShapeError):
        output_distill_loss(s, t[:, :3])


def test_loss_decomposition(rng):
    teacher = Checkpoint.initialize(replace(TINY, num_layers=2, hidden_dim=16, ff_dim=32)
                                    .with_heads("rank"), 1)
    student = Checkpoint.initialize(TINY.with_heads("rank"), 2)
    proj = Tensor(rng.normal(0, .1, size=(8, 16)))
    w = LossWeights(0.5, 2.0, 3.0)
    parts = distill_objective(student, teacher, tiny_batch(rng), [2], proj, w, 2.0)
    want = 0.5 * parts.attention.item() + 2.0 * parts.hidden.item() + 3.0 * parts.output.item()
    assert abs(parts.total.item() - want) <= 1e-9
    assert min(parts.attention.item(), parts.hidden.item(), parts.output.item()) >= 0


def test_loss_weights_validation():
    for bad in ((0, 0, 0), (-1, 1, 1)):
        with pytest.raises(ParameterError):
            LossWeights(*bad)


def test_canonical_pipeline():
    assert canonical_pipeline("LMDistill+RankerDistill") == "lm-distill+ranker-distill"
    assert canonical_pipeline("RankerDistill") == "ranker-distill"
    assert canonical_pipeline("lm_distill+fine_tune") == "lm-distill+fine-tune"
    with pytest.raises(ParameterError):
        canonical_pipeline("fine-tune")


# -- loops ---------------------------------------------------------------------------

CFG_T = EncoderConfig(2, 16, 2, 32, vocab_size=64, max_seq_len=32)
CFG_S = EncoderConfig(1, 8, 2, 16, vocab_size=64, max_seq_len=32)


@pytest.fixture(scope="module")
def world():
    task = generate_synthetic(11, 200, 30, 64, num_heldout=6, triples_per_query=4)
    vocab = Vocabulary.build(list(task.collection.values()) + list(task.queries.values()))
    t_cfg, s_cfg = replace(CFG_T, vocab_size=len(vocab)), replace(CFG_S, vocab_size=len(vocab))
    corpus = list(task.collection.values())
    sched = TrainSchedule(lr=1e-3, batch_size=16, max_examples=64, checkpoint_marks=(0, 32, 64))
    pre = pretrain_mlm(corpus, t_cfg, sched, vocab).final
    ranker = pre.with_heads(("rank",), 0).advance("finetuned", 64)
    return dict(task=task, vocab=vocab, t_cfg=t_cfg, s_cfg=s_cfg, corpus=corpus, sched=sched,
                pre=pre, ranker=ranker)


def test_lm_self_distillation_is_zero(world):
    pre = world["pre"]
    res = lm_distill(pre, pre.config.with_heads(), world["corpus"], world["sched"],
                     vocab=world["vocab"], init=pre.advance("initialized", 0).clone(),
                     match_mlm_output=True)
    first = res.log[0]
    assert first["attn_loss"] == 0.0 and first["hidden_loss"] == 0.0 and first["output_loss"] == 0.0


def test_ranker_self_distillation_is_zero(world):
    r = world["ranker"]
    student = Checkpoint(r.config, {n: p.data.copy() for n, p in r.params.items()})
    res = ranker_distill(r, student, world["task"].triples, world["sched"], vocab=world["vocab"])
    first = res.log[0]
    assert first["attn_loss"] == first["hidden_loss"] == first["output_loss"] == 0.0


def test_teachers_are_untouched(world):
    pre_bytes, ranker_bytes = world["pre"].to_bytes(), world["ranker"].to_bytes()
    lm = lm_distill(world["pre"], world["s_cfg"], world["corpus"], world["sched"],
                    vocab=world["vocab"], match_mlm_output=True)
    student = Checkpoint.initialize(world["s_cfg"].with_heads("rank"), 3)
    ranker_distill(world["ranker"], student, world["task"].triples, world["sched"],
                   vocab=world["vocab"])
    ranker_distill(world["ranker"], lm.final, world["task"].triples, world["sched"],
                   vocab=world["vocab"])
    assert world["pre"].to_bytes() == pre_bytes
    assert world["ranker"].to_bytes() == ranker_bytes
    assert lm.final.stage == "lm-distilled" and sorted(lm.snapshots) == [0, 32, 64]


def test_ranker_distill_ignores_labels(world):
    triples = world["task"].triples
    flipped = [replace(t, positive_passage=t.negative_passage, negative_passage=t.positive_passage)
               for t in triples]
    student = Checkpoint.initialize(world["s_cfg"].with_heads("rank"), 3)
    # swapping labels only reorders the pair within each triple; the loss sees the same pairs
    packed_a, _ = pack_triples(triples, world["vocab"], 32)
    packed_b, _ = pack_triples(flipped, world["vocab"], 32)
    assert sorted(map(bytes, packed_a.tokens)) == sorted(map(bytes, packed_b.tokens))
    a = ranker_distill(world["ranker"], student, triples, world["sched"], vocab=world["vocab"])
    assert a.final.stage == "ranker-distilled"


def test_bm25_candidate_pairs(world):
    task = world["task"]
    run = retrieve_run({q: task.queries[q] for q in task.train_qids[:3]},
                       build_index(task.collection), 10)
    pairs = bm25_candidate_pairs(task.queries, run, task.collection, 5)
    assert len(pairs) <= 15 and pairs[0][0] == task.queries[task.train_qids[0]]
    student = Checkpoint.initialize(world["s_cfg"].with_heads("rank"), 3)
    sched = TrainSchedule(lr=1e-3, batch_size=4, max_examples=8, checkpoint_marks=())
    res = ranker_distill(world["ranker"], student, [], sched, vocab=world["vocab"], pairs=pairs)
    assert res.final.examples_seen == 8


def test_stage_errors(world):
    s_init = Checkpoint.initialize(world["s_cfg"], 0)
    sched = world["sched"]
    with pytest.raises(PipelineOrderError):
        lm_distill(world["ranker"], world["s_cfg"], world["corpus"], sched, vocab=world["vocab"])
    with pytest.raises(PipelineOrderError):
        ranker_distill(world["pre"], s_init, world["task"].triples, sched, vocab=world["vocab"])
    with pytest.raises(PipelineOrderError):
        ranker_distill(world["ranker"], world["ranker"], world["task"].triples, sched,
                       vocab=world["vocab"])
    deep = replace(world["s_cfg"], num_layers=4)
    with pytest.raises(ParameterError):
        lm_distill(world["pre"], deep, world["corpus"], sched, vocab=world["vocab"])


@pytest.fixture(scope="module")
def desk_lm():
    task = generate_synthetic(2, 300, 40, 64, triples_per_query=2)
    vocab = Vocabulary.build(list(task.collection.values()) + list(task.queries.values()))
    corpus = list(task.collection.values())
    t_cfg = EncoderConfig(4, 128, 4, 512, vocab_size=len(vocab), max_seq_len=32)
    s_cfg = EncoderConfig(2, 64, 4, 256, vocab_size=len(vocab), max_seq_len=32)
    pre = pretrain_mlm(corpus, t_cfg, TrainSchedule(lr=1e-3, batch_size=32, max_examples=3000,
                                                    checkpoint_marks=()), vocab).final

    def distil(weights, examples):
        sched = TrainSchedule(lr=1e-3, batch_size=32, max_examples=examples, checkpoint_marks=())
        log = lm_distill(pre, s_cfg, corpus, sched, weights, vocab=vocab).log
        return log[0]["attn_loss"], log[-1]["attn_loss"]
    return distil


@pytest.mark.xfail(strict=True, reason="with unit weights the attention term is ~1e-4 against a "
                   "hidden term ~1, so the hidden gradients and the L2 decay drive the update")
def test_attention_loss_drops_with_default_weights(desk_lm):
    first, last = desk_lm(LossWeights(), 1500)
    assert last < 0.2 * first, (first, last)


def test_attention_loss_drops_when_balanced(desk_lm):
    first, last = desk_lm(LossWeights(attention=1000.0), 3000)
    assert last < 0.2 * first, (first, last)


# -- pipelines -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipelines(world):
    sched = TrainSchedule(lr=1e-3, batch_size=16, max_examples=48, checkpoint_marks=(0, 48))
    schedules = {"lm-distill": sched, "fine-tune": sched, "ranker-distill": sched}
    data = PipelineData(world["corpus"], world["task"].triples, world["vocab"])
    out = {}
    for name in ("ranker-distill", "lm-distill+fine-tune", "lm-distill+ranker-distill"):
        recipe = DistillRecipe(name, world["s_cfg"], teacher_lm=world["pre"],
                               teacher_ranker=world["ranker"], seed=0)
        out[name] = run_pipeline(recipe, data, schedules)
    return out


def test_pipeline_stages_and_lineage(pipelines):
    ft = pipelines["lm-distill+fine-tune"]
    assert list(ft.stages) == ["lm-distill", "fine-tune"]
    assert ft.final.stage == "finetuned" and "lm-distilled" in ft.final.lineage
    rd = pipelines["lm-distill+ranker-distill"]
    assert list(rd.stages) == ["lm-distill", "ranker-distill"]
    assert rd.final.lineage == ["lm-distilled"]
    assert list(pipelines["ranker-distill"].stages) == ["ranker-distill"]
    assert pipelines["ranker-distill"].final.lineage == []
    assert all(p.final.meta["pipeline"] == name for name, p in pipelines.items())


def test_pipelines_differ(pipelines):
    prints = {p.final.fingerprint() for p in pipelines.values()}
    assert len(prints) == 3


def test_pipeline_outputs_rerank(pipelines, world):
    task = world["task"]
    held = {q: task.queries[q] for q in task.heldout_qids}
    qrels = {q: task.qrels[q] for q in task.heldout_qids}
    first = retrieve_run(held, build_index(task.collection), 50)
    for p in pipelines.values():
        run = rerank_with_model(p.final, first, world["vocab"], task.queries, task.collection, 50)
        validate_run(run)
        reports = evaluate(run, qrels)
        assert all(0.0 <= r.mean <= 1.0 for r in reports.values())


def test_pipeline_stage_error_names_stage(world):
    sched = TrainSchedule(lr=1e-3, batch_size=4, max_examples=4, checkpoint_marks=())
    recipe = DistillRecipe("lm-distill+fine-tune", world["s_cfg"], teacher_lm=world["pre"])
    with pytest.raises(StageError, match="fine-tune"):
        run_pipeline(recipe, PipelineData(world["corpus"], [], world["vocab"]),
                     {"lm-distill": sched, "fine-tune": sched})


def test_recipe_validation(world):
    with pytest.raises(ParameterError):
        DistillRecipe("ranker-distill", world["s_cfg"])
    with pytest.raises(ParameterError):
        DistillRecipe("lm-distill+fine-tune", world["s_cfg"])
    with pytest.raises(ParameterError):
        DistillRecipe("ranker-distill", world["s_cfg"], teacher_ranker=world["ranker"],
                      temperature=0)
