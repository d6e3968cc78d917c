"""LM Distill, Ranker Distill and the three pipelines that combine them.

Distillation losses compare an :class:`~distilrank.encoder.EncodeTrace` of
the student with one of a frozen teacher:

* attention: per-row MSE between attention distributions of mapped layers;
* hidden: MSE between (projected) student hidden states and teacher hidden
  states, embedding output included;
* output: temperature-scaled KL between output distributions, times T^2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Checkpoint, EncoderConfig, EncodeTrace, encode, mlm_logits, rank_logits
from .errors import (ConfigurationError, ParameterError, PipelineOrderError, ShapeError,
                     StageError)
from .optim import Optimizer
from .tensor import Tensor
from .training import (Recorder, TrainResult, TrainSchedule, batch_plan, finetune_ranker,
                       pack_corpus, pack_triples, stack_inputs, take_batch)
from .text import Vocabulary, build_pair_input, tokenize

log = logging.getLogger(__name__)

DISTILL_LOG_COLUMNS = ("stage", "examples_seen", "attn_loss", "hidden_loss", "output_loss",
                       "total_loss", "wall_clock_seconds")

PIPELINES = ("ranker-distill", "lm-distill+fine-tune", "lm-distill+ranker-distill")
_ALIASES = {
    "rankerdistill": "ranker-distill",
    "lmdistill+finetune": "lm-distill+fine-tune",
    "lmdistill+rankerdistill": "lm-distill+ranker-distill",
}


def canonical_pipeline(name: str) -> str:
    key = name.lower().replace("_", "-")
    if key in PIPELINES:
        return key
    squashed = key.replace("-", "").replace(" ", "")
    if squashed in _ALIASES:
        return _ALIASES[squashed]
    raise ParameterError(f"unknown pipeline {name!r}; expected one of {PIPELINES}")


@dataclass(frozen=True)
class LossWeights:
    attention: float = 1.0
    hidden: float = 1.0
    output: float = 1.0

    def __post_init__(self):
        vals = (self.attention, self.hidden, self.output)
        if min(vals) < 0 or not any(vals):
            raise ParameterError("loss weights must be >= 0 and not all zero")


# -- layer maps -----------------------------------------------------------------

def uniform_layer_map(num_student: int, num_teacher: int) -> list:
    """Teacher layer (1-based) for each student layer: ``m -> m * N / M``."""
    if num_student < 1:
        raise ParameterError("student needs at least one layer")
    if num_student > num_teacher:
        raise ParameterError(f"student deeper than teacher ({num_student} > {num_teacher})")
    if num_teacher % num_student:
        raise ParameterError(f"{num_teacher} teacher layers do not divide evenly over "
                             f"{num_student} student layers; pass an explicit layer map")
    step = num_teacher // num_student
    return [m * step for m in range(1, num_student + 1)]


def check_layer_map(layer_map, num_student: int, num_teacher: int) -> list:
    layer_map = [int(x) for x in layer_map]
    if len(layer_map) != num_student:
        raise ParameterError(f"layer map has {len(layer_map)} entries for {num_student} student layers")
    if any(b <= a for a, b in zip(layer_map, layer_map[1:])):
        raise ParameterError("layer map must be strictly increasing")
    if layer_map[0] < 1 or layer_map[-1] != num_teacher:
        raise ParameterError("layer map must stay in 1..N and end at the last teacher layer")
    return layer_map


# -- losses ------------------------------------------------------------------------

def _mask_of(student: EncodeTrace, teacher: EncodeTrace):
    if student.mask.shape != teacher.mask.shape:
        raise ShapeError("distill", "traces over the same token sequence",
                         (student.mask.shape, teacher.mask.shape))
    return student.mask


def attention_distill_loss(student: EncodeTrace, teacher: EncodeTrace, layer_map) -> Tensor:
    """Mean over mapped layers, heads and unmasked rows of the per-row MSE
    (over unmasked columns) between attention matrices."""
    mask = _mask_of(student, teacher).astype(np.float64)
    layer_map = list(layer_map)
    if len(layer_map) != student.num_layers:
        raise ParameterError("layer map length differs from student depth")
    n_valid = mask.sum(axis=1)
    # weight[b, i, j] = mask_i * mask_j / n_valid_b
    weight = (mask[:, :, None] * mask[:, None, :]) / n_valid[:, None, None]
    weight = weight[:, None, :, :]
    total = None
    for m, n in enumerate(layer_map):
        s = student.attentions[m]
        t = teacher.attentions[n - 1]
        if s.shape[1] != t.shape[1]:
            raise ShapeError("attention_distill_loss", f"{t.shape[1]} heads", s.shape[1])
        if s.shape != t.shape:
            raise ShapeError("attention_distill_loss", t.shape, s.shape)
        d = s - t
        term = (d * d * weight).sum() * (1.0 / (s.shape[1] * mask.sum()))
        total = term if total is None else total + term
    return total * (1.0 / len(layer_map))


def hidden_distill_loss(student: EncodeTrace, teacher: EncodeTrace, layer_map,
                        projection: Tensor | None = None) -> Tensor:
    """Mean MSE between projected student and teacher hidden states over the
    embedding output and every mapped layer (unmasked positions only)."""
    mask = _mask_of(student, teacher).astype(np.float64)
    hs = student.hidden_states[0].shape[-1]
    ht = teacher.hidden_states[0].shape[-1]
    if projection is None and hs != ht:
        raise ConfigurationError(f"hidden sizes differ ({hs} vs {ht}); a projection is required")
    if projection is not None and projection.shape != (hs, ht):
        raise ShapeError("hidden_distill_loss", (hs, ht), projection.shape)
    pairs = [(0, 0)] + [(m + 1, n) for m, n in enumerate(layer_map)]
    denom = mask.sum() * ht
    weight = mask[:, :, None]
    total = None
    for m, n in pairs:
        s = student.hidden_states[m]
        if projection is not None:
            s = s @ projection
        d = s - teacher.hidden_states[n]
        term = (d * d * weight).sum() * (1.0 / denom)
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def _two_class(logits):
    """Single ranking logit -> ``[relevant, not relevant]`` logits."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    col = logits.reshape(-1, 1)
    return T.concat([col, Tensor(np.zeros(col.shape, dtype=col.dtype))], axis=-1)


def output_distill_loss(student_logits, teacher_logits, temperature: float = 1.0) -> Tensor:
    """``KL(softmax(teacher/T) || softmax(student/T)) * T^2`` averaged over rows.

    1-D inputs are ranking scores and use the two-class relevant/not form.
    """
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = teacher_logits.detach() if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    if s.shape != t.shape:
        raise ShapeError("output_distill_loss", t.shape, s.shape)
    if s.ndim <= 1:
        s, t = _two_class(s), _two_class(t)
    inv = 1.0 / temperature
    log_q = T.log_softmax(s * inv)
    with T.no_grad():
        log_p = T.log_softmax(t * inv).data
    p = np.exp(log_p)
    rows = max(1, s.size // s.shape[-1])
    kl = (Tensor(p) * (Tensor(log_p) - log_q)).sum() * (temperature ** 2 / rows)
    return kl


# -- loops ---------------------------------------------------------------------------

def _projection(student_cfg: EncoderConfig, teacher_cfg: EncoderConfig, seed: int):
    if student_cfg.hidden_dim == teacher_cfg.hidden_dim:
        return None
    rng = np.random.default_rng([seed, 7])
    return Tensor(rng.normal(0.0, 0.02, size=(student_cfg.hidden_dim, teacher_cfg.hidden_dim)),
                  requires_grad=True, name="projection")


def _resolve_map(layer_map, student_cfg, teacher_cfg):
    if layer_map is None:
        return uniform_layer_map(student_cfg.num_layers, teacher_cfg.num_layers)
    return check_layer_map(layer_map, student_cfg.num_layers, teacher_cfg.num_layers)


@dataclass
class StepLosses:
    attention: Tensor
    hidden: Tensor
    output: Tensor | None
    total: Tensor

    def as_log(self) -> dict:
        return {"attn_loss": self.attention.item(), "hidden_loss": self.hidden.item(),
                "output_loss": self.output.item() if self.output is not None else 0.0,
                "total_loss": self.total.item()}


def combine(weights: LossWeights, attention, hidden, output=None) -> StepLosses:
    total = attention * weights.attention + hidden * weights.hidden
    if output is not None:
        total = total + output * weights.output
    return StepLosses(attention, hidden, output, total)


def distill_objective(student: Checkpoint, teacher: Checkpoint, batch, layer_map,
                      projection=None, weights: LossWeights = LossWeights(),
                      temperature: float = 1.0, output: str | None = "rank") -> StepLosses:
    """Weighted attention + hidden (+ output) distillation loss on one batch.

    ``output`` selects the output-matching head: ``"rank"``, ``"mlm"`` or None.
    """
    with T.no_grad():
        t_trace = encode(teacher, batch.tokens, batch.segments, batch.mask)
    s_trace = encode(student, batch.tokens, batch.segments, batch.mask)
    att = attention_distill_loss(s_trace, t_trace, layer_map)
    hid = hidden_distill_loss(s_trace, t_trace, layer_map, projection)
    out = None
    if output == "rank":
        with T.no_grad():
            t_logits = rank_logits(teacher, t_trace)
        out = output_distill_loss(rank_logits(student, s_trace), t_logits, temperature)
    elif output == "mlm":
        rows, cols = np.nonzero(batch.mask)
        with T.no_grad():
            t_logits = mlm_logits(teacher, batch.tokens, (rows, cols), trace=t_trace)
        s_logits = mlm_logits(student, batch.tokens, (rows, cols), trace=s_trace)
        out = output_distill_loss(s_logits, t_logits, temperature)
    return combine(weights, att, hid, out)


def _run_loop(student, teacher, packed, schedule, stage, layer_map, weights, temperature,
              output, kind="adam") -> TrainResult:
    projection = _projection(student.config, teacher.config, schedule.seed)
    params = student.trainable()
    if projection is not None:
        params["projection"] = projection
    opt = Optimizer(params, kind, schedule.lr, schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    rec = Recorder(student, stage, schedule)
    plan = batch_plan(packed.tokens.shape[0], schedule, rng) if schedule.max_examples else ()
    for idx in plan:
        rec.start()
        opt.zero_grad()
        losses = distill_objective(student, teacher, take_batch(packed, idx), layer_map,
                                   projection, weights, temperature, output)
        losses.total.backward()
        opt.step()
        rec.stop(len(idx), **losses.as_log())
    student.freeze()
    return rec.finish()


def lm_distill(teacher_lm: Checkpoint, student_config: EncoderConfig, corpus,
               schedule: TrainSchedule, weights: LossWeights = LossWeights(), *,
               vocab: Vocabulary | None = None, layer_map=None, temperature: float = 1.0,
               match_mlm_output: bool = False, init: Checkpoint | None = None) -> TrainResult:
    """Distil a pretrained LM into a smaller encoder over unlabelled text."""
    if teacher_lm.stage != "pretrained":
        raise PipelineOrderError(f"lm_distill needs a pretrained teacher, got {teacher_lm.stage!r}")
    if teacher_lm.config.num_layers < student_config.num_layers:
        raise ParameterError("teacher is shallower than the student")
    layer_map = _resolve_map(layer_map, student_config, teacher_lm.config)
    heads = ("mlm",) if match_mlm_output else ()
    if init is not None:
        student = init.clone().with_heads(heads, schedule.seed)
    else:
        student = Checkpoint.initialize(student_config.with_heads(*heads), schedule.seed)
    packed, skipped = pack_corpus(corpus, min(student.config.max_seq_len,
                                              teacher_lm.config.max_seq_len), vocab)
    result = _run_loop(student, teacher_lm, packed, schedule, "lm-distilled", layer_map, weights,
                       temperature, "mlm" if match_mlm_output else None)
    result.skipped = skipped
    return result


RANKER_DISTILL_STUDENT_STAGES = ("initialized", "lm-distilled")


def bm25_candidate_pairs(queries: dict, run: dict, collection: dict, depth: int = 100) -> list:
    """``(query_text, passage_text)`` pairs from a first-stage run."""
    return [(queries[q], collection[d]) for q in sorted(run) if q in queries
            for d, _ in run[q][:depth]]


def ranker_distill(teacher_ranker: Checkpoint, student: Checkpoint, triples,
                   schedule: TrainSchedule, weights: LossWeights = LossWeights(), *,
                   vocab: Vocabulary, layer_map=None, temperature: float = 1.0,
                   pairs=None) -> TrainResult:
    """Train a student ranker purely from a fine-tuned teacher's signals.

    By default the teacher scores both passages of every training triple;
    ``pairs`` (e.g. from :func:`bm25_candidate_pairs`) replaces that source.
    Relevance labels are never read.
    """
    if teacher_ranker.stage != "finetuned":
        raise PipelineOrderError(f"ranker_distill needs a finetuned teacher, got {teacher_ranker.stage!r}")
    if student.stage not in RANKER_DISTILL_STUDENT_STAGES:
        raise PipelineOrderError(f"ranker_distill student must be initialized or lm-distilled, "
                                 f"got {student.stage!r}")
    if teacher_ranker.config.num_layers < student.config.num_layers:
        raise ParameterError("teacher is shallower than the student")
    layer_map = _resolve_map(layer_map, student.config, teacher_ranker.config)
    max_len = min(student.config.max_seq_len, teacher_ranker.config.max_seq_len)
    if pairs is None:
        packed, _ = pack_triples(triples, vocab, max_len)
    else:
        packed = stack_inputs([build_pair_input(tokenize(q, vocab), tokenize(p, vocab), max_len)
                               for q, p in pairs])
    student = student.with_heads(("rank",), schedule.seed)
    return _run_loop(student, teacher_ranker, packed, schedule, "ranker-distilled", layer_map,
                     weights, temperature, "rank")


# -- pipelines -----------------------------------------------------------------------------

@dataclass
class DistillRecipe:
    pipeline: str
    student_config: EncoderConfig
    teacher_lm: Checkpoint | None = None
    teacher_ranker: Checkpoint | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 1.0
    layer_map: list | None = None
    seed: int = 0
    match_mlm_output: bool = False

    def __post_init__(self):
        self.pipeline = canonical_pipeline(self.pipeline)
        if self.temperature <= 0:
            raise ParameterError("temperature must be > 0")
        if self.pipeline != "ranker-distill" and self.teacher_lm is None:
            raise ParameterError(f"{self.pipeline} needs a teacher LM")
        if self.pipeline != "lm-distill+fine-tune" and self.teacher_ranker is None:
            raise ParameterError(f"{self.pipeline} needs a teacher ranker")


@dataclass
class PipelineData:
    corpus: list
    triples: list
    vocab: Vocabulary
    ranker_pairs: list | None = None


@dataclass
class PipelineResult:
    pipeline: str
    stages: dict

    @property
    def final(self) -> Checkpoint:
        return list(self.stages.values())[-1].final


def _stage(name, fn, *args, **kwargs) -> TrainResult:
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(recipe: DistillRecipe, data: PipelineData, schedules: dict) -> PipelineResult:
    """Run one of the three pipelines; ``schedules`` is keyed by stage name
    (``lm-distill``, ``fine-tune``, ``ranker-distill``)."""
    stages = {}
    student = None
    if recipe.pipeline in ("lm-distill+fine-tune", "lm-distill+ranker-distill"):
        res = _stage("lm-distill", lm_distill, recipe.teacher_lm, recipe.student_config,
                     data.corpus, schedules["lm-distill"], recipe.loss_weights, vocab=data.vocab,
                     layer_map=recipe.layer_map, temperature=recipe.temperature,
                     match_mlm_output=recipe.match_mlm_output)
        stages["lm-distill"] = res
        student = res.final
    if recipe.pipeline == "lm-distill+fine-tune":
        stages["fine-tune"] = _stage("fine-tune", finetune_ranker, student, data.triples,
                                     schedules["fine-tune"], data.vocab)
    else:
        if student is None:
            student = Checkpoint.initialize(recipe.student_config.with_heads("rank"), recipe.seed)
        stages["ranker-distill"] = _stage(
            "ranker-distill", ranker_distill, recipe.teacher_ranker, student, data.triples,
            schedules["ranker-distill"], recipe.loss_weights, vocab=data.vocab,
            layer_map=recipe.layer_map, temperature=recipe.temperature, pairs=data.ranker_pairs)
    for res in stages.values():
        res.final.meta["pipeline"] = recipe.pipeline
        for snap in res.snapshots.values():
            snap.meta["pipeline"] = recipe.pipeline
    return PipelineResult(recipe.pipeline, stages)
    return PipelineResult(recipe.pipeline, stages)
