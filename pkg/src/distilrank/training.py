"""MLM pretraining and ranking fine-tuning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Checkpoint, EncoderConfig, encode, mlm_logits, rank_logits
from .errors import ParameterError, PipelineOrderError
from .optim import Optimizer
from .text import (CLS, MASK, PAD, RESERVED, SEP, PairInput, Vocabulary, build_pair_input,
                   build_single_input, tokenize)

log = logging.getLogger(__name__)

DESK_MARKS = (1_000, 5_000, 20_000, 50_000, 100_000)


@dataclass
class TrainSchedule:
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    max_examples: int = 100_000
    checkpoint_marks: tuple = DESK_MARKS
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        marks = tuple(int(m) for m in self.checkpoint_marks)
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ParameterError("checkpoint_marks must be strictly increasing")
        if marks and (marks[0] < 0 or marks[-1] > self.max_examples):
            raise ParameterError("checkpoint_marks must lie in [0, max_examples]")
        if self.batch_size < 1 or self.max_examples < 0:
            raise ParameterError("batch_size must be >= 1 and max_examples >= 0")
        self.checkpoint_marks = marks

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "max_examples": self.max_examples, "checkpoint_marks": list(self.checkpoint_marks),
                "seed": self.seed, "log_every": self.log_every}


@dataclass
class TrainResult:
    final: Checkpoint
    snapshots: dict = field(default_factory=dict)
    mark_seconds: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    skipped: int = 0

    @property
    def seconds_per_example(self) -> float:
        if not self.log or not self.final.examples_seen:
            return float("nan")
        return self.log[-1]["wall_clock_seconds"] / self.final.examples_seen


def batch_plan(num_items: int, schedule: TrainSchedule, rng):
    """Yield index arrays covering ``max_examples`` draws from ``num_items``.

    Items are reshuffled every pass.  A batch is cut short where needed so a
    checkpoint mark always falls exactly on a step boundary.
    """
    if num_items == 0 and schedule.max_examples:
        raise ParameterError("no training items")
    marks = [m for m in schedule.checkpoint_marks if m > 0]
    seen = 0
    perm = np.empty(0, dtype=np.int64)
    cursor = 0
    while seen < schedule.max_examples:
        size = min(schedule.batch_size, schedule.max_examples - seen)
        upcoming = [m for m in marks if m > seen]
        if upcoming:
            size = min(size, upcoming[0] - seen)
        idx = []
        while len(idx) < size:
            if cursor >= perm.size:
                perm = rng.permutation(num_items)
                cursor = 0
            take = min(size - len(idx), perm.size - cursor)
            idx.extend(perm[cursor:cursor + take].tolist())
            cursor += take
        seen += size
        yield np.asarray(idx, dtype=np.int64)


class Recorder:
    """Bookkeeping shared by all training loops: timing, logs, mark snapshots."""

    def __init__(self, model: Checkpoint, stage: str, schedule: TrainSchedule, extra_fields=()):
        self.model = model
        self.stage = stage
        self.schedule = schedule
        self.marks = set(schedule.checkpoint_marks)
        self.seen = 0
        self.seconds = 0.0
        self.steps = 0
        self.result = TrainResult(final=model)
        self._t0 = None
        if 0 in self.marks:
            self._snapshot()

    def _snapshot(self):
        self.result.snapshots[self.seen] = self.model.advance(self.stage, self.seen)
        self.result.mark_seconds[self.seen] = self.seconds

    def start(self):
        self._t0 = time.perf_counter()

    def stop(self, n: int, **losses):
        self.seconds += time.perf_counter() - self._t0
        self.seen += n
        self.steps += 1
        if self.steps % self.schedule.log_every == 0 or self.seen == self.schedule.max_examples:
            row = {"stage": self.stage, "examples_seen": self.seen}
            row.update({k: float(v) for k, v in losses.items()})
            row["wall_clock_seconds"] = self.seconds
            self.result.log.append(row)
        if self.seen in self.marks:
            self._snapshot()

    def finish(self) -> TrainResult:
        self.result.final = self.model.advance(self.stage, self.seen)
        return self.result


def write_log_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row.get(c, "") for c in columns])


TRAIN_LOG_COLUMNS = ("examples_seen", "loss", "wall_clock_seconds")


# -- data packing ---------------------------------------------------------------

def stack_inputs(inputs) -> PairInput:
    return PairInput(np.stack([x.tokens for x in inputs]), np.stack([x.segments for x in inputs]),
                     np.stack([x.mask for x in inputs]))


def take_batch(packed: PairInput, idx) -> PairInput:
    mask = packed.mask[idx]
    width = int(mask.any(axis=0).nonzero()[0].max()) + 1
    return PairInput(packed.tokens[idx, :width], packed.segments[idx, :width], mask[:, :width])


def pack_triples(triples, vocab: Vocabulary, max_len: int):
    """Flatten triples into ``(pos, neg)`` adjacent pairs with labels 1/0."""
    inputs, labels = [], []
    for t in triples:
        q = tokenize(t.query, vocab)
        inputs.append(build_pair_input(q, tokenize(t.positive_passage, vocab), max_len))
        inputs.append(build_pair_input(q, tokenize(t.negative_passage, vocab), max_len))
        labels.extend((1.0, 0.0))
    if not inputs:
        return PairInput(np.zeros((0, max_len), np.int64), np.zeros((0, max_len), np.int64),
                         np.zeros((0, max_len), bool)), np.zeros(0)
    return stack_inputs(inputs), np.asarray(labels)


def pack_corpus(corpus, max_len: int, vocab: Vocabulary | None = None):
    """Pack texts (or id lists) as single-segment sequences; drop ones under 2 tokens."""
    inputs, skipped = [], 0
    for item in corpus:
        ids = tokenize(item, vocab) if isinstance(item, str) else list(item)
        ids = ids[: max_len - 2]
        if len(ids) < 2:
            skipped += 1
            continue
        inputs.append(build_single_input(ids, max_len))
    if not inputs:
        raise ParameterError("corpus has no sequence of at least 2 tokens")
    return stack_inputs(inputs), skipped


# -- MLM -------------------------------------------------------------------------

def mask_tokens(tokens, attn_mask, vocab_size: int, rng, rate: float = 0.15):
    """BERT-style corruption: per sequence pick ``rate`` of the real positions;
    80% become [MASK], 10% a random token, 10% stay.  Returns the corrupted
    tokens, ``(batch_index, position)`` arrays and the original targets."""
    tokens = tokens.copy()
    special = (tokens == CLS) | (tokens == SEP) | (tokens == PAD) | ~attn_mask
    rows, cols = [], []
    for b in range(tokens.shape[0]):
        cand = np.flatnonzero(~special[b])
        if cand.size == 0:
            continue
        k = max(1, int(round(rate * cand.size)))
        chosen = np.sort(rng.choice(cand, size=k, replace=False))
        rows.extend([b] * k)
        cols.extend(chosen.tolist())
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    targets = tokens[rows, cols].copy()
    roll = rng.random(rows.size)
    to_mask = roll < 0.8
    to_rand = (roll >= 0.8) & (roll < 0.9)
    tokens[rows[to_mask], cols[to_mask]] = MASK
    if to_rand.any():
        tokens[rows[to_rand], cols[to_rand]] = rng.integers(len(RESERVED), vocab_size,
                                                           size=int(to_rand.sum()))
    return tokens, (rows, cols), targets


def mlm_loss(model: Checkpoint, batch: PairInput, rng):
    tokens, positions, targets = mask_tokens(batch.tokens, batch.mask, model.config.vocab_size, rng)
    logits = mlm_logits(model, tokens, positions, batch.segments, batch.mask)
    return T.cross_entropy(logits, targets)


def pretrain_mlm(corpus, config: EncoderConfig, schedule: TrainSchedule,
                 vocab: Vocabulary | None = None, init: Checkpoint | None = None) -> TrainResult:
    """Masked-language-model pretraining from random init (or ``init``)."""
    packed, skipped = pack_corpus(corpus, config.max_seq_len, vocab)
    if skipped:
        log.info("pretrain_mlm skipped %d sequences shorter than 2 tokens", skipped)
    model = init.clone() if init is not None else Checkpoint.initialize(config.with_heads("mlm"),
                                                                        schedule.seed)
    if "mlm" not in model.config.heads:
        model = model.with_heads(("mlm",) + model.config.heads, schedule.seed)
    params = model.trainable()
    opt = Optimizer(params, "adamw", schedule.lr, schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    mask_rng = np.random.default_rng([schedule.seed, 1])
    rec = Recorder(model, "pretrained", schedule)
    rec.result.skipped = skipped
    for idx in batch_plan(packed.tokens.shape[0], schedule, rng):
        rec.start()
        opt.zero_grad()
        loss = mlm_loss(model, take_batch(packed, idx), mask_rng)
        loss.backward()
        opt.step()
        rec.stop(len(idx), loss=loss.item())
    model.freeze()
    return rec.finish()


def mlm_accuracy(model: Checkpoint, corpus, vocab=None, seed: int = 0, batch_size: int = 64,
                 max_positions: int | None = None) -> float:
    """Fraction of masked positions whose argmax prediction is the original token."""
    packed, _ = pack_corpus(corpus, model.config.max_seq_len, vocab)
    rng = np.random.default_rng(seed)
    hits = total = 0
    with T.no_grad():
        for start in range(0, packed.tokens.shape[0], batch_size):
            batch = take_batch(packed, np.arange(start, min(start + batch_size, packed.tokens.shape[0])))
            tokens, positions, targets = mask_tokens(batch.tokens, batch.mask,
                                                     model.config.vocab_size, rng)
            logits = mlm_logits(model, tokens, positions, batch.segments, batch.mask)
            pred = logits.data.argmax(axis=-1)
            hits += int((pred == targets).sum())
            total += targets.size
            if max_positions and total >= max_positions:
                break
    return hits / max(total, 1)


# -- fine-tuning -------------------------------------------------------------------

FINETUNE_INPUT_STAGES = ("pretrained", "lm-distilled")


def ranking_loss(scores: T.Tensor, labels, kind: str = "pointwise"):
    if kind == "pointwise":
        return T.bce_with_logits(scores, labels)
    if kind == "pairwise":
        # rows alternate positive, negative
        diff = scores[0::2] - scores[1::2]
        hinge = 1.0 - diff
        return T.mean(hinge * (hinge.data > 0))
    raise ParameterError(f"unknown ranking loss {kind!r}")


def finetune_ranker(model: Checkpoint, triples, schedule: TrainSchedule, vocab: Vocabulary,
                    loss: str = "pointwise") -> TrainResult:
    """Supervised ranking fine-tuning with AdamW.

    Every triple contributes a positive (label 1) and a negative (label 0)
    pair; ``examples_seen`` counts pairs.
    """
    if model.stage not in FINETUNE_INPUT_STAGES:
        raise PipelineOrderError(
            f"finetune_ranker expects a {' or '.join(FINETUNE_INPUT_STAGES)} model, got {model.stage!r}")
    if loss == "pairwise" and (schedule.batch_size % 2 or any(m % 2 for m in schedule.checkpoint_marks)):
        raise ParameterError("pairwise loss needs even batch size and marks")
    packed, labels = pack_triples(triples, vocab, model.config.max_seq_len)
    student = model.with_heads(("rank",), schedule.seed)
    params = student.trainable()
    opt = Optimizer(params, "adamw", schedule.lr, schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    rec = Recorder(student, "finetuned", schedule)
    n_pairs = packed.tokens.shape[0]
    plan_items = n_pairs // 2 if loss == "pairwise" else n_pairs
    plan = batch_plan(plan_items, _pair_schedule(schedule, loss), rng) if schedule.max_examples else ()
    for idx in plan:
        if loss == "pairwise":
            idx = np.stack([2 * idx, 2 * idx + 1], axis=1).reshape(-1)
        rec.start()
        opt.zero_grad()
        batch = take_batch(packed, idx)
        trace = encode(student, batch.tokens, batch.segments, batch.mask, keep_trace=False)
        value = ranking_loss(rank_logits(student, trace), labels[idx], loss)
        value.backward()
        opt.step()
        rec.stop(len(idx), loss=value.item())
    student.freeze()
    return rec.finish()


def _pair_schedule(schedule: TrainSchedule, loss: str) -> TrainSchedule:
    if loss != "pairwise":
        return schedule
    return TrainSchedule(schedule.lr, schedule.weight_decay, schedule.batch_size // 2,
                         schedule.max_examples // 2, tuple(m // 2 for m in schedule.checkpoint_marks),
                         schedule.seed, schedule.log_every)
