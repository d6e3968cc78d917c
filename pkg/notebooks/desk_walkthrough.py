"""
Distilling a reranker at desk scale
===================================

Train a small teacher on a synthetic passage-ranking task, distil a student
through the three pipelines and compare them on held-out queries.  The
profile below is shrunk so the script finishes in a couple of minutes; the
default ``DeskProfile()`` is the full desk configuration.
"""

# %%
import logging

from distilrank.bench import random_order_mrr
from distilrank.experiment import DeskProfile, curve_dominates, run_desk_seed
from distilrank.synthetic import generate_synthetic

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

# %%
# A reduced profile: fewer documents and shorter training budgets.
profile = DeskProfile(num_docs=400, num_queries=80, num_heldout=20, vocab_words=96,
                      pretrain_examples=1000, finetune_examples=1500,
                      lm_distill_examples=800, student_examples=800,
                      marks=(0, 200, 400, 800), depth=200)
outcome = run_desk_seed(0, profile)

# %%
# MRR@10 on held-out queries after reranking the BM25 top candidates.
for name, value in outcome.mrr.items():
    print(f"{name:28s} {value:.3f}")

# The random baseline shuffles the whole collection for each query.
task = generate_synthetic(0, profile.num_docs, profile.num_queries, profile.vocab_words,
                          num_heldout=profile.num_heldout,
                          triples_per_query=profile.triples_per_query)
shuffled = {q: [(d, 0.0) for d in task.collection] for q in outcome.qrels}
print(f"{'random order':28s} {random_order_mrr(shuffled, outcome.qrels, len(task.collection)):.3f}")

# %%
# Is the LM-distilled + ranker-distilled student non-inferior to the teacher?
print(outcome.noninferiority)

# %%
# Kendall tau between each student's scores and the teacher's.
for name, tau in outcome.agreement.items():
    print(f"{name:28s} {tau:.3f}")

# %%
# Convergence: MRR@10 per checkpoint, with cumulative training seconds.
for name, curve in outcome.curves.items():
    print(name)
    for row in curve.rows:
        print(f"  {row['examples_seen']:5d}  {row['mrr_at_10']:.3f}  "
              f"{row['wall_clock_training_seconds']:.1f}s")
print(curve_dominates(outcome.curves["lm-distill+ranker-distill"], outcome.curves["ranker-distill"]))

# %%
# First checkpoint within 5% of the teacher, and the cost per training example.
for row in outcome.cost:
    print(row)
