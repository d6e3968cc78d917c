"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from distilrank import tensor as T


def numeric_grad(loss_fn, tensors, h=1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - h
            with T.no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=0.0) -> float:
    """Norm-wise relative error; the denominator never drops below ``floor``."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), floor)
    return float(num / den)


FLOOR_FRACTION = 1e-3


def gradcheck(loss_fn, tensors, h=1e-6) -> float:
    """Worst per-tensor relative error between backward() and finite differences.

    A tensor whose gradient is zero by construction (attention key biases:
    softmax ignores a per-row shift) would turn finite-difference round-off
    into a relative error near 1, so each denominator is floored at
    ``FLOOR_FRACTION`` times the norm of the whole gradient.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_grad(loss_fn, tensors, h)
    total = math.sqrt(sum(float(np.sum(a * a)) for a in analytic))
    floor = max(FLOOR_FRACTION * total, 1e-12)
    return max(rel_error(a, n, floor) for a, n in zip(analytic, numeric))


# -- ranking metric oracles: straight from the definitions ----------------------------

def ranked_docs(run_list):
    return [d for d, _ in sorted(run_list, key=lambda x: (-x[1], x[0]))]


def oracle_rr(docs, rel, k=None):
    limit = len(docs) if k is None else k
    for i in range(min(limit, len(docs))):
        if rel.get(docs[i], 0) >= 1:
            return 1.0 / (i + 1)
    return 0.0


def oracle_ndcg10(docs, rel):
    def dcg(grades):
        return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(grades[:10]))
    got = dcg([rel.get(d, 0) for d in docs])
    ideal = dcg(sorted(rel.values(), reverse=True))
    return got / ideal if ideal > 0 else 0.0


def oracle_ap1000(docs, rel):
    relevant = {d for d, g in rel.items() if g >= 1}
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for i, d in enumerate(docs[:1000]):
        if d in relevant:
            hits += 1
            total += hits / (i + 1)
    return total / len(relevant)


# -- BM25 oracle --------------------------------------------------------------------------

def oracle_bm25(query_words, docs: dict, k1=0.9, b=0.4):
    """Scores every doc with the BM25 formula computed from raw text."""
    toks = {d: text.lower().split() for d, text in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    scores = {}
    for d, words in toks.items():
        s = 0.0
        matched = False
        for q in query_words:
            tf = words.count(q)
            if tf == 0:
                continue
            matched = True
            df = sum(1 for w in toks.values() if q in w)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(words) / avgdl))
        if matched:
            scores[d] = s
    return scores


# -- non-inferiority oracle ---------------------------------------------------------------

def oracle_noninferior(a, b, margin=0.03, alpha=0.05, relative=True):
    """Decision by scipy's one-sample t-test of d = b - a against -delta."""
    from scipy import stats

    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    delta = margin * a.mean() if relative else margin
    if np.std(d, ddof=1) <= 1e-12 * max(1.0, abs(d.mean())):
        return bool(d.mean() > -delta)
    res = stats.ttest_1samp(d, -delta, alternative="greater")
    return bool(res.pvalue < alpha)


def random_micro_case(rng):
    """A small random run + graded qrels, including unjudged and empty queries."""
    nq = int(rng.integers(1, 5))
    ndocs = int(rng.integers(1, 21))
    run, qrels = {}, {}
    for qi in range(nq):
        q = f"q{qi}"
        depth = int(rng.integers(0, ndocs + 1))
        docs = rng.choice(ndocs, size=depth, replace=False)
        # coarse scores force plenty of ties
        scores = rng.integers(0, 6, size=depth).astype(float)
        run[q] = sorted(((f"d{d}", s) for d, s in zip(docs, scores)), key=lambda x: (-x[1], x[0]))
        if rng.random() < 0.9:
            judged = rng.choice(ndocs, size=int(rng.integers(0, ndocs + 1)), replace=False)
            qrels[q] = {f"d{d}": int(rng.integers(0, 4)) for d in judged}
    return run, qrels


def oracle_means(run, qrels):
    qids = sorted(qrels)
    out = {"mrr@10": [], "mrr": [], "ndcg@10": [], "map@1000": []}
    for q in qids:
        docs = ranked_docs(run.get(q, []))
        rel = qrels[q]
        out["mrr@10"].append(oracle_rr(docs, rel, 10))
        out["mrr"].append(oracle_rr(docs, rel))
        out["ndcg@10"].append(oracle_ndcg10(docs, rel))
        out["map@1000"].append(oracle_ap1000(docs, rel))
    return {k: (sum(v) / len(v) if v else 0.0) for k, v in out.items()}
