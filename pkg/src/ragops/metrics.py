"""Deterministic metric primitives.

Ranked-retrieval metrics (recall@K, precision@K, MRR, nDCG), overlap
metrics for generated text (BLEU, ROUGE-N), the sentence-support
faithfulness proxy, centroid drift, and Jensen-Shannon divergence over
term distributions. Everything here is a pure function, brute-force
checkable, and bounded in [0, 1].
"""

from __future__ import annotations

import math
import re
from collections import Counter

import numpy as np

from .errors import UndefinedMetric
from .textutils import STOPWORDS, split_sentences, tokenize


def recall_at_k(retrieved, relevant, k: int) -> float:
    """|top-k retrieved ∩ relevant| / |relevant|."""
    if not relevant:
        raise UndefinedMetric("recall undefined for an empty relevant set")
    if k < 1:
        raise UndefinedMetric("k must be >= 1")
    top = set(list(retrieved)[:k])
    return len(top & set(relevant)) / len(set(relevant))


def precision_at_k(retrieved, relevant, k: int) -> float:
    """|top-k retrieved ∩ relevant| / k."""
    if k < 1:
        raise UndefinedMetric("k must be >= 1")
    top = set(list(retrieved)[:k])
    return len(top & set(relevant)) / k


def mrr(first_relevant_ranks) -> float:
    """Mean of 1/rank over queries; rank None counts as 0."""
    ranks = list(first_relevant_ranks)
    if not ranks:
        return 0.0
    return math.fsum(0.0 if r is None else 1.0 / r for r in ranks) / len(ranks)


def dcg(gains, k: int | None = None) -> float:
    """DCG = sum_i gain_i / log2(i + 1), positions i starting at 1."""
    values = list(gains) if k is None else list(gains)[:k]
    return math.fsum(g / math.log2(i + 1) for i, g in enumerate(values, start=1))


def ndcg_at_k(gains, k: int) -> float:
    """nDCG = DCG / IDCG with IDCG over gains sorted descending; 0 when
    the ideal DCG is 0."""
    if k < 1:
        raise UndefinedMetric("k must be >= 1")
    ideal = dcg(sorted(gains, reverse=True), k)
    if ideal == 0:
        return 0.0
    return dcg(gains, k) / ideal


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, references: list[str], max_n: int = 4) -> float:
    """BLEU with brevity penalty and add-one smoothing for empty n-gram
    counts.

    p_n is the clipped n-gram precision; when a usable order has zero
    matches it is smoothed to (matches + 1) / (total + 1). The brevity
    penalty uses the closest reference length (ties to the shorter).
    """
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references if r is not None]
    if not cand or not refs:
        return 0.0
    log_precisions = []
    for n in range(1, max_n + 1):
        total = len(cand) - n + 1
        if total <= 0:
            break
        cand_ngrams = _ngrams(cand, n)
        max_ref = Counter()
        for ref in refs:
            for gram, count in _ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram])
                      for gram, count in cand_ngrams.items())
        if clipped == 0:
            p = (clipped + 1) / (total + 1)
        else:
            p = clipped / total
        log_precisions.append(math.log(p))
    if not log_precisions:
        return 0.0
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c) if c > 0 else 0.0
    return bp * math.exp(math.fsum(log_precisions) / len(log_precisions))


def rouge_n(candidate: str, reference: str, n: int) -> dict[str, float]:
    """Clipped n-gram overlap recall/precision/F1 against one reference."""
    cand = _ngrams(tokenize(candidate), n)
    ref = _ngrams(tokenize(reference), n)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    recall = overlap / ref_total if ref_total else 0.0
    precision = overlap / cand_total if cand_total else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return {"recall": recall, "precision": precision, "f1": f1}


_CITATION_RE = re.compile(r"\s*\[[^\[\]]+\]")


def _content_tokens(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in STOPWORDS}


def faithfulness(answer: str, context_texts: list[str],
                 support_threshold: float = 0.5) -> float:
    """Fraction of answer sentences supported by some single context item.

    A sentence is supported when the best unigram-overlap recall of its
    content tokens against one context item reaches the threshold.
    Citation markers like [doc:1:0] are stripped before tokenizing.
    """
    stripped = _CITATION_RE.sub("", answer)
    sentences = split_sentences(stripped)
    if not sentences or not context_texts:
        return 0.0
    item_tokens = [_content_tokens(item) for item in context_texts]
    supported = 0
    for sentence in sentences:
        tokens = _content_tokens(sentence)
        if not tokens:
            continue
        best = max((len(tokens & items) / len(tokens) for items in item_tokens),
                   default=0.0)
        if best >= support_threshold:
            supported += 1
    return supported / len(sentences)


def hallucination_rate(answer: str, context_texts: list[str]) -> float:
    return 1.0 - faithfulness(answer, context_texts)


def embedding_drift(centroid_a, centroid_b) -> float:
    """1 - cosine between two corpus embedding centroids; 0 when either
    side is undefined (empty corpus)."""
    if centroid_a is None or centroid_b is None:
        return 0.0
    a = np.asarray(centroid_a, dtype=np.float64)
    b = np.asarray(centroid_b, dtype=np.float64)
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return 1.0 - float(np.dot(a, b)) / denom


def term_distribution(texts: list[str]) -> dict[str, float]:
    """Relative term frequencies over a list of texts."""
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    total = sum(counts.values())
    if not total:
        return {}
    return {term: count / total for term, count in counts.items()}


def js_divergence(p: dict[str, float], q: dict[str, float]) -> float:
    """Jensen-Shannon divergence (base-2 logs, so in [0, 1]) between two
    term distributions over their union vocabulary."""
    vocab = set(p) | set(q)
    if not vocab:
        return 0.0

    def _kl_to_mix(dist):
        total = 0.0
        for term in vocab:
            x = dist.get(term, 0.0)
            if x > 0.0:
                m = 0.5 * (p.get(term, 0.0) + q.get(term, 0.0))
                total += x * math.log2(x / m)
        return total

    return 0.5 * _kl_to_mix(p) + 0.5 * _kl_to_mix(q)
