"""Command-line entry point: ``distilrank <subcommand> [flags]``.

Every subcommand reads and writes declared files under ``--out``.  Settings
come from an optional JSON config (``--config``); flags override it and the
effective config is echoed to ``<out>/config.<subcommand>.json``.  Failures
print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (BATCH_SIZES, convergence_track, measure_latency, synthetic_latency_inputs,
                    training_cost_report, write_cost_report, write_latency)
from .bm25 import B, K1, InvertedIndex, build_index, retrieve_run
from .distill import (DISTILL_LOG_COLUMNS, PIPELINES, DistillRecipe, LossWeights, PipelineData,
                      canonical_pipeline, lm_distill, ranker_distill, run_pipeline)
from .encoder import (BERT_BASE, DESK_STUDENT, DESK_TEACHER, FOUR_LAYER, SIX_LAYER, Checkpoint,
                      EncoderConfig)
from .errors import DistilRankError, MissingArtifactError, ParameterError, UsageError
from .metrics import METRICS, evaluate, mrr_at_k, non_inferiority_test, write_metrics
from .scoring import rerank_with_model
from .synthetic import generate_synthetic
from .text import (Vocabulary, load_qrels, load_run, load_texts, load_triples, write_qrels,
                   write_run, write_texts, write_triples)
from .training import (TRAIN_LOG_COLUMNS, TrainResult, TrainSchedule, finetune_ranker,
                       pretrain_mlm, write_log_csv)

log = logging.getLogger("distilrank")

PRESETS = {"bert-base": BERT_BASE, "six-layer": SIX_LAYER, "four-layer": FOUR_LAYER,
           "desk-teacher": DESK_TEACHER, "desk-student": DESK_STUDENT}

DEFAULTS = {
    "seed": 0,
    "synth": {"num_docs": 2000, "num_queries": 250, "num_heldout": 50, "vocab_words": 256,
              "triples_per_query": 8},
    "vocab": {"max_size": 8192, "min_count": 1},
    "bm25": {"k1": K1, "b": B, "depth": 1000},
    "teacher": {"preset": "desk-teacher", "max_seq_len": 64},
    "student": {"preset": "desk-student", "max_seq_len": 64},
    "schedules": {
        "pretrain": {"lr": 1e-3, "weight_decay": 0.01, "batch_size": 32, "max_examples": 3000,
                     "checkpoint_marks": []},
        "finetune": {"lr": 1e-3, "weight_decay": 0.01, "batch_size": 32, "max_examples": 4000,
                     "checkpoint_marks": []},
        "lm-distill": {"lr": 1e-3, "weight_decay": 0.01, "batch_size": 32, "max_examples": 3000,
                       "checkpoint_marks": []},
        "ranker-distill": {"lr": 1e-3, "weight_decay": 0.01, "batch_size": 32,
                           "max_examples": 3000, "checkpoint_marks": [0, 500, 1000, 2000, 3000]},
        "fine-tune": {"lr": 1e-3, "weight_decay": 0.01, "batch_size": 32, "max_examples": 3000,
                      "checkpoint_marks": [0, 500, 1000, 2000, 3000]},
    },
    "distill": {"temperature": 1.0, "loss_weights": {"attention": 1.0, "hidden": 1.0, "output": 1.0},
                "layer_map": None, "match_mlm_output": False},
    "metrics": {"margin": 0.03, "alpha": 0.05, "margin_mode": "relative", "tau": 0.05},
    "bench": {"batch_sizes": list(BATCH_SIZES), "warmup": 3, "repeats": 20, "depth": 1000,
              "seq_len": 128, "num_queries": 4, "dtype": "float64"},
}

# artifact name -> (file under --out, producing subcommand)
ARTIFACTS = {
    "collection": ("collection.tsv", "synth"),
    "queries": ("queries.tsv", "synth"),
    "heldout": ("queries.heldout.tsv", "synth"),
    "qrels": ("qrels.heldout.txt", "synth"),
    "qrels-all": ("qrels.txt", "synth"),
    "triples": ("triples.tsv", "synth"),
    "vocab": ("vocab.txt", "build-vocab"),
    "index": ("index.json", "index"),
    "bm25-run": ("bm25.run", "retrieve"),
    "teacher-lm": ("teacher.pretrained.ckpt", "pretrain"),
    "teacher-ranker": ("teacher.finetuned.ckpt", "finetune"),
    "student-lm": ("student.lm-distilled.ckpt", "lm-distill"),
    "student-ranker": ("student.ranker-distilled.ckpt", "ranker-distill"),
}


# -- config handling ----------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ParameterError(f"config key {dotted!r} crosses a non-table value")
    node[keys[-1]] = value


def _parse_set(item: str):
    if "=" not in item:
        raise ParameterError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifactError(path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ParameterError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in args.set or ():
        _set_path(cfg, *_parse_set(item))
    if args.seed is not None:
        cfg["seed"] = args.seed
    for dest, dotted in getattr(args, "_overrides", {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(cfg, dotted, list(value) if isinstance(value, tuple) else value)
    if not isinstance(cfg.get("seed"), int):
        raise ParameterError("seed must be an explicit integer")
    return cfg


def model_config(section: dict, vocab_size: int) -> EncoderConfig:
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ParameterError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        base = PRESETS[preset].to_dict()
    else:
        base = {}
    base.update(section)
    base["vocab_size"] = vocab_size
    return EncoderConfig.from_dict(base)


def schedule(cfg: dict, name: str) -> TrainSchedule:
    s = dict(cfg["schedules"][name])
    s["checkpoint_marks"] = tuple(s.get("checkpoint_marks", ()))
    s.setdefault("seed", cfg["seed"])
    return TrainSchedule(**s)


# -- context: paths, lock, echo ---------------------------------------------------------

class Context:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)

    def path(self, name: str) -> Path:
        return self.out / ARTIFACTS[name][0]

    def need(self, name: str, override=None) -> Path:
        p = Path(override) if override else self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, ARTIFACTS[name][1] if name in ARTIFACTS else None)
        return p

    def need_file(self, path, producer=None) -> Path:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(p, producer)
        return p

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.need("vocab", self.args_get("vocab")))

    def args_get(self, name):
        return getattr(self.args, name, None)

    def load_ckpt(self, name: str, override=None) -> Checkpoint:
        return Checkpoint.load(self.need(name, override))


class OutputLock:
    """Exclusive lock file so only one subcommand writes an output dir at a time."""

    def __init__(self, out: Path):
        self.path = out / ".distilrank.lock"
        self.held = False

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"output dir is locked by another run ({self.path}); "
                             f"remove the file if that run is gone") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.held = True
        return self

    def __exit__(self, *exc):
        if self.held:
            self.path.unlink(missing_ok=True)


def echo_config(ctx: Context, command: str):
    data = {"subcommand": command, "version": __version__, "config": ctx.cfg,
            "flags": {k: v for k, v in sorted(vars(ctx.args).items())
                      if not k.startswith("_") and k != "func" and v is not None}}
    with open(ctx.out / f"config.{command}.json", "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _save_result(ctx: Context, result: TrainResult, path: Path, columns, log_name: str):
    result.final.save(path)
    for mark, snap in sorted(result.snapshots.items()):
        snap.save(path.with_name(f"{path.stem}.mark-{mark}.ckpt"))
    marks = {str(m): s for m, s in sorted(result.mark_seconds.items())}
    with open(path.with_name(f"{path.stem}.marks.json"), "w", encoding="utf-8") as fh:
        json.dump({"mark_seconds": marks, "seconds_per_example": result.seconds_per_example},
                  fh, indent=2, sort_keys=True)
    (ctx.out / "logs").mkdir(exist_ok=True)
    write_log_csv(ctx.out / "logs" / log_name, result.log, columns)


# -- subcommands -----------------------------------------------------------------------

def cmd_synth(ctx: Context):
    s = ctx.cfg["synth"]
    task = generate_synthetic(ctx.cfg["seed"], s["num_docs"], s["num_queries"], s["vocab_words"],
                              num_heldout=s["num_heldout"], triples_per_query=s["triples_per_query"])
    write_texts(ctx.path("collection"), task.collection)
    write_texts(ctx.path("queries"), task.queries)
    write_texts(ctx.path("heldout"), {q: task.queries[q] for q in task.heldout_qids})
    write_texts(ctx.out / "queries.train.tsv", {q: task.queries[q] for q in task.train_qids})
    write_qrels(ctx.path("qrels-all"), task.qrels)
    write_qrels(ctx.path("qrels"), {q: task.qrels[q] for q in task.heldout_qids})
    write_triples(ctx.path("triples"), task.triples)
    return {"docs": len(task.collection), "queries": len(task.queries), "triples": len(task.triples)}


def cmd_build_vocab(ctx: Context):
    texts = list(load_texts(ctx.need("collection", ctx.args.collection)).values())
    texts += list(load_texts(ctx.need("queries", ctx.args.queries), "queries_tsv").values())
    v = ctx.cfg["vocab"]
    vocab = Vocabulary.build(texts, v["max_size"], v["min_count"])
    vocab.save(ctx.path("vocab"))
    return {"vocab_size": len(vocab)}


def cmd_index(ctx: Context):
    index = build_index(load_texts(ctx.need("collection", ctx.args.collection)))
    index.save(ctx.path("index"))
    return {"docs": len(index.doc_ids), "terms": len(index.postings)}


def cmd_retrieve(ctx: Context):
    index = InvertedIndex.load(ctx.need("index", ctx.args.index))
    queries = load_texts(ctx.need("heldout", ctx.args.queries), "queries_tsv")
    b = ctx.cfg["bm25"]
    run = retrieve_run(queries, index, b["depth"], b["k1"], b["b"])
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("bm25-run")
    write_run(out, run, "bm25")
    return {"queries": len(run), "output": str(out)}


def cmd_pretrain(ctx: Context):
    vocab = ctx.vocab()
    cfg = model_config(ctx.cfg["teacher"], len(vocab)).with_heads("mlm")
    texts = list(load_texts(ctx.need("collection", ctx.args.collection)).values())
    res = pretrain_mlm(texts, cfg, schedule(ctx.cfg, "pretrain"), vocab)
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("teacher-lm")
    _save_result(ctx, res, out, TRAIN_LOG_COLUMNS, "pretrain.csv")
    return {"output": str(out), "examples_seen": res.final.examples_seen}


def cmd_finetune(ctx: Context):
    vocab = ctx.vocab()
    model = ctx.load_ckpt("teacher-lm", ctx.args.model)
    triples = load_triples(ctx.need("triples", ctx.args.triples))
    res = finetune_ranker(model, triples, schedule(ctx.cfg, "finetune"), vocab, ctx.args.loss)
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("teacher-ranker")
    _save_result(ctx, res, out, TRAIN_LOG_COLUMNS, f"{out.stem}.csv")
    return {"output": str(out), "examples_seen": res.final.examples_seen}


def _weights(cfg) -> LossWeights:
    return LossWeights(**cfg["distill"]["loss_weights"])


def cmd_lm_distill(ctx: Context):
    vocab = ctx.vocab()
    teacher = ctx.load_ckpt("teacher-lm", ctx.args.teacher)
    d = ctx.cfg["distill"]
    student_cfg = model_config(ctx.cfg["student"], len(vocab))
    texts = list(load_texts(ctx.need("collection", ctx.args.collection)).values())
    res = lm_distill(teacher, student_cfg, texts, schedule(ctx.cfg, "lm-distill"), _weights(ctx.cfg),
                     vocab=vocab, layer_map=d["layer_map"], temperature=d["temperature"],
                     match_mlm_output=d["match_mlm_output"])
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("student-lm")
    _save_result(ctx, res, out, DISTILL_LOG_COLUMNS, f"{out.stem}.csv")
    return {"output": str(out), "examples_seen": res.final.examples_seen}


def cmd_ranker_distill(ctx: Context):
    vocab = ctx.vocab()
    teacher = ctx.load_ckpt("teacher-ranker", ctx.args.teacher)
    if ctx.args.student:
        student = Checkpoint.load(ctx.need_file(ctx.args.student, "lm-distill"))
    else:
        student = Checkpoint.initialize(model_config(ctx.cfg["student"], len(vocab)).with_heads("rank"),
                                        ctx.cfg["seed"])
    triples = load_triples(ctx.need("triples", ctx.args.triples))
    d = ctx.cfg["distill"]
    res = ranker_distill(teacher, student, triples, schedule(ctx.cfg, "ranker-distill"),
                         _weights(ctx.cfg), vocab=vocab, layer_map=d["layer_map"],
                         temperature=d["temperature"])
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("student-ranker")
    _save_result(ctx, res, out, DISTILL_LOG_COLUMNS, f"{out.stem}.csv")
    return {"output": str(out), "examples_seen": res.final.examples_seen}


def cmd_pipeline(ctx: Context):
    recipe_name = canonical_pipeline(ctx.args.recipe)
    vocab = ctx.vocab()
    d = ctx.cfg["distill"]
    needs_lm = recipe_name != "ranker-distill"
    needs_ranker = recipe_name != "lm-distill+fine-tune"
    recipe = DistillRecipe(
        recipe_name, model_config(ctx.cfg["student"], len(vocab)),
        teacher_lm=ctx.load_ckpt("teacher-lm", ctx.args.teacher_lm) if needs_lm else None,
        teacher_ranker=ctx.load_ckpt("teacher-ranker", ctx.args.teacher_ranker) if needs_ranker else None,
        loss_weights=_weights(ctx.cfg), temperature=d["temperature"], layer_map=d["layer_map"],
        seed=ctx.cfg["seed"], match_mlm_output=d["match_mlm_output"])
    data = PipelineData(list(load_texts(ctx.need("collection", ctx.args.collection)).values()),
                        load_triples(ctx.need("triples", ctx.args.triples)), vocab)
    names = ("lm-distill", "fine-tune", "ranker-distill")
    result = run_pipeline(recipe, data, {n: schedule(ctx.cfg, n) for n in names})
    pdir = ctx.out / "pipelines" / recipe_name
    pdir.mkdir(parents=True, exist_ok=True)
    written = []
    for stage, res in result.stages.items():
        cols = TRAIN_LOG_COLUMNS if stage == "fine-tune" else DISTILL_LOG_COLUMNS
        path = pdir / f"{stage}.ckpt"
        _save_result(ctx, res, path, cols, f"pipeline.{recipe_name}.{stage}.csv")
        written.append(str(path))
    return {"recipe": recipe_name, "checkpoints": written}


def cmd_rerank(ctx: Context):
    model = Checkpoint.load(ctx.need_file(ctx.args.model, "finetune, ranker-distill or pipeline"))
    vocab = ctx.vocab()
    first = load_run(ctx.need("bm25-run", ctx.args.run))
    queries = load_texts(ctx.need("queries", ctx.args.queries), "queries_tsv")
    collection = load_texts(ctx.need("collection", ctx.args.collection))
    depth = ctx.args.depth or ctx.cfg["bm25"]["depth"]
    run = rerank_with_model(model, first, vocab, queries, collection, depth)
    out = Path(ctx.args.output)
    write_run(out, run, Path(ctx.args.model).stem)
    return {"output": str(out), "depth": depth}


def cmd_eval(ctx: Context):
    run = load_run(ctx.need_file(ctx.args.run, "retrieve or rerank"))
    qrels = load_qrels(ctx.need("qrels", ctx.args.qrels))
    reports = evaluate(run, qrels, ctx.args.metrics or METRICS,
                       query_ids=sorted(q for q in qrels if q in run) if ctx.args.run_queries_only else None)
    out = Path(ctx.args.output) if ctx.args.output else Path(ctx.args.run).with_suffix(".metrics.csv")
    write_metrics(out, reports)
    excluded = sorted({q for r in reports.values() for q in r.excluded})
    return {"output": str(out), **{k: r.mean for k, r in reports.items()},
            "excluded_queries": len(excluded)}


def cmd_compare(ctx: Context):
    qrels = load_qrels(ctx.need("qrels", ctx.args.qrels))
    run_a = load_run(ctx.need_file(ctx.args.a, "retrieve or rerank"))
    run_b = load_run(ctx.need_file(ctx.args.b, "retrieve or rerank"))
    metric = ctx.args.metric
    qids = sorted(q for q in qrels if q in run_a or q in run_b)
    ra = evaluate(run_a, qrels, [metric], query_ids=qids)[metric]
    rb = evaluate(run_b, qrels, [metric], query_ids=qids)[metric]
    m = ctx.cfg["metrics"]
    res = non_inferiority_test([ra.per_query[q] for q in qids], [rb.per_query[q] for q in qids],
                               m["margin"], m["alpha"], m["margin_mode"])
    out = Path(ctx.args.output) if ctx.args.output else ctx.out / "compare.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("non_inferior,ci_lower,delta,margin_mode\n" + res.record() + "\n")
    return {"output": str(out), "record": res.record(), "a": ra.mean, "b": rb.mean}


def _bench_model(spec: str, vocab_size: int | None, seq_len: int, seed: int) -> tuple:
    if spec in PRESETS:
        cfg = PRESETS[spec]
        cfg = replace(cfg, max_seq_len=max(cfg.max_seq_len, seq_len),
                      vocab_size=vocab_size or cfg.vocab_size)
        return spec, Checkpoint.initialize(cfg.with_heads("rank"), seed)
    path = Path(spec)
    if not path.exists():
        raise MissingArtifactError(path, "finetune, ranker-distill or pipeline")
    ck = Checkpoint.load(path)
    if "rank" not in ck.config.heads:
        raise ParameterError(f"{spec} has no ranking head")
    return path.stem, ck


def cmd_bench(ctx: Context):
    b = ctx.cfg["bench"]
    models = [_bench_model(s, None, b["seq_len"], ctx.cfg["seed"]) for s in ctx.args.models]
    baseline_spec = ctx.args.baseline or ctx.args.models[0]
    if baseline_spec not in ctx.args.models:
        raise ParameterError("--baseline must be one of --models")
    base_idx = ctx.args.models.index(baseline_spec)
    order = [base_idx] + [i for i in range(len(models)) if i != base_idx]
    dtype = np.dtype(b["dtype"])
    reports = {}
    for i in order:
        name, ck = models[i]
        seq_len = min(b["seq_len"], ck.config.max_seq_len)
        queries, cands = synthetic_latency_inputs(b["num_queries"], b["depth"], seq_len,
                                                  ck.config.vocab_size, ctx.cfg["seed"])
        reports[i] = measure_latency(ck, queries, cands, b["depth"], tuple(b["batch_sizes"]),
                                     warmup=b["warmup"], repeats=b["repeats"], seq_len=seq_len,
                                     baseline=reports.get(base_idx), model_id=name, dtype=dtype)
        if i == base_idx:
            r = reports[i]
            r.baseline_id, r.baseline_latency, r.speedup = r.model_id, r.best_latency, 1.0
    ordered = [reports[i] for i in range(len(models))]
    out = Path(ctx.args.output) if ctx.args.output else ctx.out / "latency.csv"
    write_latency(out, ordered)
    return {"output": str(out), "speedup": {r.model_id: r.speedup for r in ordered}}


def _load_curve(stage_path: Path, label: str, offset: float, first, queries,
                collection, qrels, vocab, depth) -> tuple:
    marks_file = stage_path.with_name(f"{stage_path.stem}.marks.json")
    if not marks_file.exists():
        raise MissingArtifactError(marks_file, "pipeline")
    info = json.loads(marks_file.read_text(encoding="utf-8"))
    mark_seconds = {int(k): v for k, v in info["mark_seconds"].items()}
    snaps = {}
    for m in mark_seconds:
        p = stage_path.with_name(f"{stage_path.stem}.mark-{m}.ckpt")
        if p.exists():
            snaps[m] = Checkpoint.load(p)
    holder = TrainResult(final=None, snapshots=snaps, mark_seconds=mark_seconds)
    return convergence_track(holder, first, queries, collection, qrels, vocab, depth,
                             sorted(mark_seconds), offset, label), info["seconds_per_example"]


def cmd_report(ctx: Context):
    """Convergence curves and the training-cost table for finished pipelines."""
    vocab = ctx.vocab()
    first = load_run(ctx.need("bm25-run", ctx.args.run))
    queries = load_texts(ctx.need("queries"), "queries_tsv")
    collection = load_texts(ctx.need("collection"))
    qrels = load_qrels(ctx.need("qrels"))
    qrels = {q: qrels[q] for q in first if q in qrels}
    depth = ctx.args.depth or ctx.cfg["bm25"]["depth"]
    teacher = ctx.load_ckpt("teacher-ranker", ctx.args.teacher)
    teacher_mrr = mrr_at_k(rerank_with_model(teacher, first, vocab, queries, collection, depth),
                           qrels, 10).mean
    curves, costs = {}, {}
    (ctx.out / "reports").mkdir(exist_ok=True)
    for recipe in ctx.args.pipelines or PIPELINES:
        recipe = canonical_pipeline(recipe)
        pdir = ctx.out / "pipelines" / recipe
        final_stage = "fine-tune" if recipe == "lm-distill+fine-tune" else "ranker-distill"
        stage_path = pdir / f"{final_stage}.ckpt"
        if not stage_path.exists():
            raise MissingArtifactError(stage_path, f"pipeline --recipe {recipe}")
        offset = 0.0
        lm_marks = pdir / "lm-distill.marks.json"
        if recipe != "ranker-distill" and lm_marks.exists():
            offset = json.loads(lm_marks.read_text())["seconds_per_example"] * \
                Checkpoint.load(pdir / "lm-distill.ckpt").examples_seen
        curve, spe = _load_curve(stage_path, recipe, offset, first, queries,
                                 collection, qrels, vocab, depth)
        curve.write(ctx.out / "reports" / f"convergence.{recipe}.csv")
        curves[recipe] = curve
        costs[recipe] = spe
    rows = training_cost_report(curves, teacher_mrr, ctx.cfg["metrics"]["tau"], costs)
    write_cost_report(ctx.out / "reports" / "training_cost.csv", rows)
    return {"teacher_mrr_at_10": teacher_mrr,
            "reached": {r.pipeline: r.reached_mark for r in rows},
            "sec_per_example": costs}


# -- parser ------------------------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    """Argument errors become the same one-line JSON record as runtime errors."""

    def error(self, message):
        command = self.prog.split()[-1] if " " in self.prog else None
        print(json.dumps({"error": "usage", "subcommand": command, "message": message},
                         sort_keys=True), file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", default=".", help="output directory holding every artifact")
    common.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config value by dotted key, e.g. bm25.k1=1.2")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = Parser(prog="distilrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_text, overrides=None):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func, _overrides=overrides or {}, _command=name)
        return p

    p = add("synth", cmd_synth, "generate the seeded synthetic task",
            {"num_docs": "synth.num_docs", "num_queries": "synth.num_queries",
             "num_heldout": "synth.num_heldout", "vocab_words": "synth.vocab_words"})
    p.add_argument("--num-docs", type=int)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--num-heldout", type=int)
    p.add_argument("--vocab-words", type=int)

    p = add("build-vocab", cmd_build_vocab, "build the vocabulary from collection and queries",
            {"max_size": "vocab.max_size", "min_count": "vocab.min_count"})
    p.add_argument("--collection")
    p.add_argument("--queries")
    p.add_argument("--max-size", type=int)
    p.add_argument("--min-count", type=int)

    p = add("index", cmd_index, "build the BM25 inverted index")
    p.add_argument("--collection")

    p = add("retrieve", cmd_retrieve, "BM25 top-k run for held-out queries",
            {"depth": "bm25.depth", "k1": "bm25.k1", "b": "bm25.b"})
    p.add_argument("--index")
    p.add_argument("--queries")
    p.add_argument("--depth", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--output")

    p = add("pretrain", cmd_pretrain, "MLM-pretrain the teacher encoder",
            {"max_examples": "schedules.pretrain.max_examples", "lr": "schedules.pretrain.lr"})
    p.add_argument("--collection")
    p.add_argument("--vocab")
    p.add_argument("--max-examples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--output")

    p = add("finetune", cmd_finetune, "fine-tune a pretrained or LM-distilled encoder for ranking",
            {"max_examples": "schedules.finetune.max_examples", "lr": "schedules.finetune.lr"})
    p.add_argument("--model", help="input checkpoint (default: the pretrained teacher)")
    p.add_argument("--triples")
    p.add_argument("--vocab")
    p.add_argument("--loss", choices=("pointwise", "pairwise"), default="pointwise")
    p.add_argument("--max-examples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--output")

    p = add("lm-distill", cmd_lm_distill, "distil the pretrained teacher LM into a student encoder",
            {"max_examples": "schedules.lm-distill.max_examples", "lr": "schedules.lm-distill.lr",
             "temperature": "distill.temperature"})
    p.add_argument("--teacher")
    p.add_argument("--collection")
    p.add_argument("--vocab")
    p.add_argument("--max-examples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--output")

    p = add("ranker-distill", cmd_ranker_distill, "distil the fine-tuned teacher ranker into a student",
            {"max_examples": "schedules.ranker-distill.max_examples",
             "lr": "schedules.ranker-distill.lr", "temperature": "distill.temperature"})
    p.add_argument("--teacher")
    p.add_argument("--student", help="LM-distilled student (default: random init)")
    p.add_argument("--triples")
    p.add_argument("--vocab")
    p.add_argument("--max-examples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--output")

    p = add("pipeline", cmd_pipeline, "run one full distillation pipeline",
            {"temperature": "distill.temperature"})
    p.add_argument("--recipe", required=True, help=f"one of {', '.join(PIPELINES)}")
    p.add_argument("--teacher-lm")
    p.add_argument("--teacher-ranker")
    p.add_argument("--collection")
    p.add_argument("--triples")
    p.add_argument("--vocab")
    p.add_argument("--temperature", type=float)

    p = add("rerank", cmd_rerank, "rerank a first-stage run with a ranking checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--run")
    p.add_argument("--queries")
    p.add_argument("--collection")
    p.add_argument("--vocab")
    p.add_argument("--depth", type=int)
    p.add_argument("--output", required=True)

    p = add("eval", cmd_eval, "evaluate a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels")
    p.add_argument("--metrics", nargs="+", choices=METRICS)
    p.add_argument("--run-queries-only", action="store_true",
                   help="restrict the query set to judged queries present in the run")
    p.add_argument("--output")

    p = add("compare", cmd_compare, "non-inferiority test of run B against run A",
            {"margin": "metrics.margin", "alpha": "metrics.alpha", "margin_mode": "metrics.margin_mode"})
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--qrels")
    p.add_argument("--metric", default="mrr@10", choices=METRICS)
    p.add_argument("--margin", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--margin-mode", choices=("relative", "absolute"))
    p.add_argument("--output")

    p = add("bench", cmd_bench, "reranking latency across batch sizes",
            {"depth": "bench.depth", "seq_len": "bench.seq_len", "warmup": "bench.warmup",
             "repeats": "bench.repeats", "batch_sizes": "bench.batch_sizes", "dtype": "bench.dtype",
             "num_queries": "bench.num_queries"})
    p.add_argument("--models", nargs="+", required=True,
                   help=f"checkpoint paths or presets ({', '.join(PRESETS)})")
    p.add_argument("--baseline", help="entry of --models used as the speedup baseline")
    p.add_argument("--depth", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch-sizes", type=int, nargs="+")
    p.add_argument("--warmup", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--output")

    p = add("report", cmd_report, "convergence curves and training-cost table",
            {"tau": "metrics.tau"})
    p.add_argument("--pipelines", nargs="+")
    p.add_argument("--teacher")
    p.add_argument("--run")
    p.add_argument("--vocab")
    p.add_argument("--depth", type=int)
    p.add_argument("--tau", type=float)
    return parser


def error_line(command: str | None, exc: BaseException) -> str:
    kind = getattr(exc, "kind", type(exc).__name__)
    data = {"error": kind, "subcommand": command, "message": str(exc)}
    producer = getattr(exc, "producer", None)
    if producer:
        data["producer"] = producer
    return json.dumps(data, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args._command
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(args, cfg)
        with OutputLock(out):
            echo_config(ctx, command)
            summary = args.func(ctx)
    except (DistilRankError, OSError, ValueError, KeyError) as exc:
        print(error_line(command, exc), file=sys.stderr)
        return 2 if isinstance(exc, (UsageError, ParameterError)) else 1
    print(json.dumps({"subcommand": command, "ok": True, **(summary or {})}, sort_keys=True,
                     default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
