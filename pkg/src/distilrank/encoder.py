"""Post-LN transformer encoder with MLM and ranking heads.

Parameters live in a :class:`Checkpoint` (config + ordered name -> Tensor
map).  :func:`encode` runs the encoder and returns an :class:`EncodeTrace`
exposing every layer's hidden states and attention distributions, which is
what attention/hidden-state distillation consumes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (ConfigurationError, FormatError, ParameterError, ShapeError,
                     TruncationError, UsageError, VocabularyError)
from .tensor import Tensor

STAGES = ("initialized", "pretrained", "lm-distilled", "finetuned", "ranker-distilled")
HEADS = ("mlm", "rank")
FORMAT_TAG = "distilrank-checkpoint/1"
INIT_STD = 0.02
LN_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ff_dim: int = 0
    vocab_size: int = 8192
    max_seq_len: int = 128
    num_segments: int = 2
    heads: tuple = HEADS

    def __post_init__(self):
        if self.ff_dim <= 0:
            object.__setattr__(self, "ff_dim", 4 * self.hidden_dim)
        object.__setattr__(self, "heads", tuple(h for h in HEADS if h in tuple(self.heads)))
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.max_seq_len < 8:
            raise ConfigurationError("max_seq_len must be >= 8")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 5:
            raise ConfigurationError("vocab_size must cover the 5 reserved ids")
        if self.num_segments < 1:
            raise ConfigurationError("num_segments must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def with_heads(self, *heads) -> "EncoderConfig":
        return EncoderConfig(**{**self.to_dict(), "heads": tuple(heads)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        d = dict(d)
        d["heads"] = tuple(d.get("heads", HEADS))
        return cls(**d)

    def parameter_shapes(self) -> dict:
        """Ordered ``name -> shape`` manifest of the architecture."""
        H, F, V = self.hidden_dim, self.ff_dim, self.vocab_size
        shapes = {
            "embeddings.word": (V, H),
            "embeddings.position": (self.max_seq_len, H),
            "embeddings.segment": (self.num_segments, H),
            "embeddings.ln.gain": (H,),
            "embeddings.ln.bias": (H,),
        }
        for i in range(self.num_layers):
            p = f"layers.{i}."
            for proj in ("query", "key", "value", "output"):
                shapes[p + f"attn.{proj}.weight"] = (H, H)
                shapes[p + f"attn.{proj}.bias"] = (H,)
            shapes[p + "attn.ln.gain"] = (H,)
            shapes[p + "attn.ln.bias"] = (H,)
            shapes[p + "ff.in.weight"] = (H, F)
            shapes[p + "ff.in.bias"] = (F,)
            shapes[p + "ff.out.weight"] = (F, H)
            shapes[p + "ff.out.bias"] = (H,)
            shapes[p + "ff.ln.gain"] = (H,)
            shapes[p + "ff.ln.bias"] = (H,)
        if "mlm" in self.heads:
            # decoder weight is tied to embeddings.word
            shapes["mlm.transform.weight"] = (H, H)
            shapes["mlm.transform.bias"] = (H,)
            shapes["mlm.ln.gain"] = (H,)
            shapes["mlm.ln.bias"] = (H,)
            shapes["mlm.decoder.bias"] = (V,)
        if "rank" in self.heads:
            shapes["rank.weight"] = (H, 1)
            shapes["rank.bias"] = (1,)
        return shapes

    def parameter_count(self) -> int:
        H, F, V, L = self.hidden_dim, self.ff_dim, self.vocab_size, self.num_layers
        n = (V + self.max_seq_len + self.num_segments) * H + 2 * H
        n += L * (4 * H * H + 2 * H * F + 9 * H + F)
        if "mlm" in self.heads:
            n += H * H + 3 * H + V
        if "rank" in self.heads:
            n += H + 1
        return n


# Model shapes compared in the paper (full scale) and the desk-scale profile.
BERT_BASE = EncoderConfig(12, 768, 12, 3072, vocab_size=8192, max_seq_len=128)
SIX_LAYER = EncoderConfig(6, 768, 12, 3072, vocab_size=8192, max_seq_len=128)
FOUR_LAYER = EncoderConfig(4, 312, 12, 1200, vocab_size=8192, max_seq_len=128)
DESK_TEACHER = EncoderConfig(4, 128, 4, 512, vocab_size=8192, max_seq_len=128)
DESK_STUDENT = EncoderConfig(2, 64, 4, 256, vocab_size=8192, max_seq_len=128)


def _init_array(name, shape, rng):
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict
    examples_seen: int = 0
    stage: str = "initialized"
    lineage: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"unknown stage tag {self.stage!r}")
        expected = self.config.parameter_shapes()
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigurationError(f"parameter set mismatch: missing={missing} extra={extra}")
        ordered = {}
        for name, shape in expected.items():
            p = self.params[name]
            if not isinstance(p, Tensor):
                p = Tensor(p)
            if p.shape != tuple(shape):
                raise ShapeError(f"checkpoint[{name}]", tuple(shape), p.shape)
            ordered[name] = p
        self.params = ordered

    # -- construction -----------------------------------------------------
    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int) -> "Checkpoint":
        rng = np.random.default_rng(seed)
        params = {name: Tensor(_init_array(name, shape, rng), name=name)
                  for name, shape in config.parameter_shapes().items()}
        return cls(config, params, meta={"init_seed": int(seed)})

    def clone(self) -> "Checkpoint":
        params = {n: Tensor(p.data.copy(), name=n) for n, p in self.params.items()}
        return Checkpoint(self.config, params, self.examples_seen, self.stage,
                          list(self.lineage), copy.deepcopy(self.meta))

    def astype(self, dtype) -> "Checkpoint":
        params = {n: Tensor(p.data.astype(dtype), name=n) for n, p in self.params.items()}
        return Checkpoint(self.config, params, self.examples_seen, self.stage,
                          list(self.lineage), copy.deepcopy(self.meta))

    def with_heads(self, heads, seed: int) -> "Checkpoint":
        """Copy with the given head set; new head parameters are freshly initialised."""
        config = self.config.with_heads(*heads)
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.parameter_shapes().items():
            if name in self.params:
                params[name] = Tensor(self.params[name].data.copy(), name=name)
            else:
                params[name] = Tensor(_init_array(name, shape, rng), name=name)
        return Checkpoint(config, params, self.examples_seen, self.stage,
                          list(self.lineage), copy.deepcopy(self.meta))

    def advance(self, stage: str, examples_seen: int) -> "Checkpoint":
        """Snapshot of the current parameters under a new stage tag."""
        if stage not in STAGES:
            raise ParameterError(f"unknown stage tag {stage!r}")
        out = self.clone()
        if out.stage != stage and out.stage != "initialized":
            out.lineage = out.lineage + [out.stage]
        out.stage = stage
        out.examples_seen = int(examples_seen)
        return out

    # -- views ------------------------------------------------------------
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trainable(self, prefixes=None) -> dict:
        """Mark parameters (all, or those under ``prefixes``) as grad-requiring."""
        chosen = {n: p for n, p in self.params.items()
                  if prefixes is None or n.startswith(tuple(prefixes))}
        for p in chosen.values():
            p.requires_grad = True
        return chosen

    def freeze(self) -> "Checkpoint":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def training_meta(self) -> dict:
        return {"examples_seen": int(self.examples_seen), "stage": self.stage,
                "lineage": list(self.lineage), **self.meta}

    # -- serialisation ------------------------------------------------------
    def to_bytes(self) -> bytes:
        header = {
            "format": FORMAT_TAG,
            "config": self.config.to_dict(),
            "training_meta": self.training_meta(),
            "manifest": [[n, list(p.shape)] for n, p in self.params.items()],
        }
        text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [struct.pack("<Q", len(text)), text]
        for p in self.params.values():
            chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 8:
            raise FormatError("checkpoint truncated before header length")
        (n,) = struct.unpack("<Q", blob[:8])
        try:
            header = json.loads(blob[8:8 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad checkpoint header: {exc}") from None
        if header.get("format") != FORMAT_TAG:
            raise FormatError(f"unsupported checkpoint format {header.get('format')!r}")
        config = EncoderConfig.from_dict(header["config"])
        offset = 8 + n
        params = {}
        for name, shape in header["manifest"]:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(blob):
                raise FormatError(f"checkpoint truncated inside {name}")
            arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
            if name in params:
                raise FormatError(f"duplicate parameter {name}")
            params[name] = Tensor(arr, name=name)
            offset = end
        if offset != len(blob):
            raise FormatError("trailing bytes after last parameter buffer")
        meta = dict(header["training_meta"])
        examples = meta.pop("examples_seen", 0)
        stage = meta.pop("stage", "initialized")
        lineage = meta.pop("lineage", [])
        return cls(config, params, examples, stage, lineage, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class EncodeTrace:
    """Per-layer signals of one forward pass (leading batch axis)."""

    hidden_states: list
    attentions: list
    cls_vector: Tensor
    mask: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.attentions)


def _check_inputs(config, tokens, segments, mask):
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    segments = np.atleast_2d(np.asarray(segments, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if not (tokens.shape == segments.shape == mask.shape):
        raise ShapeError("encode", "tokens, segments and mask of equal shape",
                         (tokens.shape, segments.shape, mask.shape))
    if tokens.shape[1] > config.max_seq_len:
        raise TruncationError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise VocabularyError(f"token id outside [0, {config.vocab_size})")
    if segments.size and (segments.min() < 0 or segments.max() >= config.num_segments):
        raise VocabularyError(f"segment id outside [0, {config.num_segments})")
    return tokens, segments, mask


def _linear(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def encode(model: Checkpoint, tokens, segments, mask, keep_trace: bool = True) -> EncodeTrace:
    """Run the encoder over one sequence or a ``[batch, seq]`` block.

    With ``keep_trace=False`` only the final hidden state is retained
    (``hidden_states`` has one entry, ``attentions`` is empty), which keeps
    large inference batches within memory.
    """
    cfg, P = model.config, model.params
    tokens, segments, mask = _check_inputs(cfg, tokens, segments, mask)
    B, L = tokens.shape
    nh, dh = cfg.num_heads, cfg.head_dim

    x = (T.embedding(P["embeddings.word"], tokens)
         + P["embeddings.position"][:L]
         + T.embedding(P["embeddings.segment"], segments))
    x = T.layer_norm(x, P["embeddings.ln.gain"], P["embeddings.ln.bias"], LN_EPS)
    hidden = [x]
    attentions = []
    key_mask = mask[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)

    for i in range(cfg.num_layers):
        p = f"layers.{i}."

        def heads(t):
            return t.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

        q = heads(_linear(x, P, p + "attn.query"))
        k = heads(_linear(x, P, p + "attn.key"))
        v = heads(_linear(x, P, p + "attn.value"))
        probs = T.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, key_mask)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.hidden_dim)
        x = T.layer_norm(x + _linear(ctx, P, p + "attn.output"),
                         P[p + "attn.ln.gain"], P[p + "attn.ln.bias"], LN_EPS)
        ff = _linear(T.gelu(_linear(x, P, p + "ff.in")), P, p + "ff.out")
        x = T.layer_norm(x + ff, P[p + "ff.ln.gain"], P[p + "ff.ln.bias"], LN_EPS)
        if keep_trace:
            hidden.append(x)
            attentions.append(probs)
    if not keep_trace:
        hidden = [x]
    return EncodeTrace(hidden, attentions, x[:, 0, :], mask)


def rank_logits(model: Checkpoint, trace: EncodeTrace) -> Tensor:
    """Ranking-head logits ``[batch]`` from a trace's CLS vectors."""
    if "rank" not in model.config.heads:
        raise ConfigurationError("model has no ranking head")
    out = trace.cls_vector @ model.params["rank.weight"] + model.params["rank.bias"]
    return out.reshape(out.shape[0])


def score_batch(model: Checkpoint, tokens, segments, mask) -> np.ndarray:
    """Relevance scores for a block of packed pairs, without recording gradients."""
    if "rank" not in model.config.heads:
        raise ConfigurationError("model has no ranking head")
    with T.no_grad():
        trace = encode(model, tokens, segments, mask, keep_trace=False)
        return rank_logits(model, trace).data.copy()


def mlm_logits(model: Checkpoint, tokens, mask_positions, segments=None, attn_mask=None,
               trace: EncodeTrace | None = None) -> Tensor:
    """Vocabulary logits, one row per masked position.

    ``mask_positions`` is a list of positions for a single sequence, or a
    ``(batch_index, position)`` pair of arrays for a batch.
    """
    cfg, P = model.config, model.params
    if "mlm" not in cfg.heads:
        raise ConfigurationError("model has no MLM head")
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if segments is None:
        segments = np.zeros_like(tokens)
    if attn_mask is None:
        attn_mask = np.ones(tokens.shape, dtype=bool)
    if trace is None:
        trace = encode(model, tokens, segments, attn_mask)
    h = trace.hidden_states[-1]
    if single:
        rows = np.asarray(mask_positions, dtype=np.int64)
        if rows.size == 0:
            raise UsageError("mask_positions is empty")
        if rows.min() < 0 or rows.max() >= tokens.shape[0]:
            raise ParameterError("mask position outside the sequence")
        sel = h[0][rows]
    else:
        bi, pi = (np.asarray(a, dtype=np.int64) for a in mask_positions)
        if bi.size == 0:
            raise UsageError("mask_positions is empty")
        if pi.min() < 0 or pi.max() >= tokens.shape[1]:
            raise ParameterError("mask position outside the sequence")
        sel = h[bi, pi]
    t = T.gelu(_linear(sel, P, "mlm.transform"))
    t = T.layer_norm(t, P["mlm.ln.gain"], P["mlm.ln.bias"], LN_EPS)
    return t @ P["embeddings.word"].transpose() + P["mlm.decoder.bias"]

