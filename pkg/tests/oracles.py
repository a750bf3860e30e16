"""Independent reference implementations used as test oracles.

Everything here is deliberately written as direct, loop-based
transcriptions of the standard formulas, sharing no code with the
package: the implementation under test is compared against these, never
the other way around.
"""

from __future__ import annotations

import math
from collections import Counter


def brute_recall(retrieved: list, relevant: set, k: int) -> float:
    hits = 0
    for item in set(relevant):
        if item in list(retrieved)[:k]:
            hits += 1
    return hits / len(set(relevant))


def brute_precision(retrieved: list, relevant: set, k: int) -> float:
    hits = 0
    for item in list(retrieved)[:k]:
        if item in set(relevant):
            hits += 1
    # duplicates in retrieved would double-count; the caller never passes
    # duplicate ids (ranked lists are unique), matching set semantics
    return len({i for i in list(retrieved)[:k] if i in set(relevant)}) / k


def brute_mrr(rank_lists: list) -> float:
    total = 0.0
    for rank in rank_lists:
        if rank is not None:
            total += 1.0 / rank
    return total / len(rank_lists) if rank_lists else 0.0


def brute_ndcg(gains: list, k: int) -> float:
    def dcg_of(values):
        acc = 0.0
        position = 1
        for g in values[:k]:
            acc += g / math.log2(position + 1)
            position += 1
        return acc

    ideal = dcg_of(sorted(gains, reverse=True))
    if ideal == 0:
        return 0.0
    return dcg_of(list(gains)) / ideal


def _grams(tokens: list, n: int):
    return list(zip(*[tokens[i:] for i in range(n)]))


def reference_bleu(candidate_tokens: list, references_tokens: list,
                   max_n: int = 4) -> float:
    """Papineni-style BLEU with the same add-one-on-empty smoothing
    convention as the implementation under test, independently coded."""
    if not candidate_tokens or not references_tokens:
        return 0.0
    log_ps = []
    for n in range(1, max_n + 1):
        cand = Counter(_grams(candidate_tokens, n))
        total = sum(cand.values())
        if total == 0:
            break
        best = Counter()
        for ref in references_tokens:
            for gram, count in Counter(_grams(ref, n)).items():
                if count > best[gram]:
                    best[gram] = count
        clipped = 0
        for gram, count in cand.items():
            clipped += min(count, best[gram])
        p = clipped / total if clipped > 0 else (clipped + 1) / (total + 1)
        log_ps.append(math.log(p))
    if not log_ps:
        return 0.0
    c = len(candidate_tokens)
    best_r = None
    for ref in references_tokens:
        r = len(ref)
        if best_r is None or abs(r - c) < abs(best_r - c) or (
                abs(r - c) == abs(best_r - c) and r < best_r):
            best_r = r
    bp = 1.0 if c > best_r else math.exp(1.0 - best_r / c)
    return bp * math.exp(sum(log_ps) / len(log_ps))


def reference_rouge_n(candidate_tokens: list, reference_tokens: list,
                      n: int) -> dict:
    cand = Counter(_grams(candidate_tokens, n))
    ref = Counter(_grams(reference_tokens, n))
    overlap = 0
    for gram, count in cand.items():
        overlap += min(count, ref.get(gram, 0))
    cand_total = max(len(candidate_tokens) - n + 1, 0)
    ref_total = max(len(reference_tokens) - n + 1, 0)
    recall = overlap / ref_total if ref_total > 0 else 0.0
    precision = overlap / cand_total if cand_total > 0 else 0.0
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return {"recall": recall, "precision": precision, "f1": f1}


def brute_cosine_topk(vectors: dict, query, k: int,
                      recency: dict | None = None) -> list:
    """Exhaustive cosine scan with the package's tie-break convention
    (higher recency first, then id)."""
    scored = []
    for cid, vec in vectors.items():
        dot = 0.0
        for a, b in zip(vec, query):
            dot += float(a) * float(b)
        scored.append((cid, dot))
    recency = recency or {}
    scored.sort(key=lambda item: (-item[1], -recency.get(item[0], 0), item[0]))
    return scored[:k]


def reference_bm25(doc_tokens: dict, query_terms: list,
                   k1: float = 1.2, b: float = 0.75) -> dict:
    """Loop-based BM25 with idf = ln((N - df + 0.5)/(df + 0.5) + 1)."""
    n_docs = len(doc_tokens)
    lengths = {cid: len(toks) for cid, toks in doc_tokens.items()}
    avgdl = sum(lengths.values()) / n_docs
    scores = {cid: 0.0 for cid in doc_tokens}
    for term in query_terms:
        df = sum(1 for toks in doc_tokens.values() if term in toks)
        if df == 0:
            continue
        idf = math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
        for cid, toks in doc_tokens.items():
            tf = toks.count(term)
            if tf == 0:
                continue
            denom = tf + k1 * (1 - b + b * lengths[cid] / avgdl)
            scores[cid] += idf * tf * (k1 + 1) / denom
    return scores


def scipy_js_divergence(p: dict, q: dict) -> float:
    from scipy.spatial.distance import jensenshannon

    vocab = sorted(set(p) | set(q))
    pv = [p.get(t, 0.0) for t in vocab]
    qv = [q.get(t, 0.0) for t in vocab]
    return float(jensenshannon(pv, qv, base=2) ** 2)


def nearest_rank_percentile(values: list, q: float) -> float:
    ordered = sorted(values)
    rank = math.ceil(q * len(ordered))
    return ordered[max(rank - 1, 0)]
