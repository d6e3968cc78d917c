"""
Reranking latency versus model size
===================================

Time scoring plus sorting of a candidate list for encoders of different
depth and width, and report the speedup over the largest one.  Sizes are
kept small so the script runs in seconds on a CPU; pass the ``bert-base``,
``six-layer`` and ``four-layer`` presets to the ``bench`` subcommand for the
full-size comparison.
"""

# %%
from dataclasses import replace

from distilrank.bench import measure_latency, synthetic_latency_inputs
from distilrank.encoder import DESK_STUDENT, DESK_TEACHER, Checkpoint

SEQ_LEN, DEPTH, VOCAB = 64, 100, 500

# %%
configs = {
    "desk-teacher": replace(DESK_TEACHER, vocab_size=VOCAB, max_seq_len=SEQ_LEN).with_heads("rank"),
    "desk-student": replace(DESK_STUDENT, vocab_size=VOCAB, max_seq_len=SEQ_LEN).with_heads("rank"),
}
queries, candidates = synthetic_latency_inputs(2, DEPTH, SEQ_LEN, VOCAB, seed=0)

# %%
baseline = None
for name, cfg in configs.items():
    model = Checkpoint.initialize(cfg, seed=0)
    report = measure_latency(model, queries, candidates, DEPTH, batch_sizes=(32, 64),
                             warmup=1, repeats=2, model_id=name, baseline=baseline)
    baseline = baseline or report
    print(f"{name:14s} best batch {report.best_batch_size:3d}  "
          f"{report.best_latency * 1000:.1f} ms/query  speedup {report.speedup or 1.0:.2f}x")

# %%
# Per-batch measurements of the last model.
print(report.per_batch, report.hardware)
