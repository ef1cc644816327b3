"""
Caption metrics on token sequences: corpus BLEU-1..4, exact-match METEOR,
ROUGE-L and CIDEr-D. Every score is on the 0-100 scale except CIDEr-D, which
keeps its native ×10 scale.

candidates: one token list per item
references: a list of token lists per item (at least one)
"""

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

from nltk.translate.bleu_score import brevity_penalty, closest_ref_length

from errors import MetricInputError


Tokens = Sequence[str]

METRIC_COLUMNS = ("B1", "B2", "B3", "B4", "M", "R", "C")
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


@dataclass
class MetricReport:
    B1: float
    B2: float
    B3: float
    B4: float
    M: float
    R: float
    C: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    @staticmethod
    def header() -> str:
        return " ".join(f"{name:>6}" for name in METRIC_COLUMNS)

    def as_row(self) -> str:
        return " ".join(f"{getattr(self, name):6.1f}" for name in METRIC_COLUMNS)


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return re.sub(r"[^\w\s]", " ", text.lower()).split()


def _check_corpus(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> None:
    if len(candidates) == 0:
        raise MetricInputError("empty candidate set")
    if len(candidates) != len(references):
        raise MetricInputError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise MetricInputError(f"item {i} has no references")


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> List[float]:
    """
    Corpus BLEU-1..max_n, no smoothing, closest-reference brevity penalty.

    A candidate shorter than n adds nothing to the order-n counts. Each
    order is capped at the score of the order below it, so B1 >= B2 >= B3 >= B4.
    """
    _check_corpus(candidates, references)
    numerators = [0] * (max_n + 1)
    denominators = [0] * (max_n + 1)
    hyp_length = ref_length = 0
    for hyp, item_refs in zip(candidates, references):
        hyp_length += len(hyp)
        ref_length += closest_ref_length([list(r) for r in item_refs], len(hyp))
        for n in range(1, min(max_n, len(hyp)) + 1):
            counts = ngram_counts(hyp, n)
            max_ref_counts: Counter = Counter()
            for ref in item_refs:
                max_ref_counts |= ngram_counts(ref, n)
            numerators[n] += sum(min(count, max_ref_counts[g]) for g, count in counts.items())
            denominators[n] += sum(counts.values())

    penalty = brevity_penalty(ref_length, hyp_length)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if numerators[n] == 0 or any(numerators[k] == 0 for k in range(1, n)):
            scores.append(0.0)
            continue
        log_sum += math.log(numerators[n] / denominators[n])
        score = 100.0 * penalty * math.exp(log_sum / n)
        scores.append(min(score, scores[-1]) if scores else score)
    return scores


# ---------------------------------------------------------------------------
# METEOR (exact match only)
# ---------------------------------------------------------------------------

def meteor_alignment(candidate: Tokens, reference: Tokens) -> Tuple[int, int]:
    """
    (matches, chunks) of the exact unigram alignment with the most matches,
    ties broken by the fewest chunks. A chunk is a run of adjacent candidate
    tokens aligned to adjacent reference tokens.
    """
    cand = tuple(candidate)
    ref = tuple(reference)
    positions = {}
    for j, token in enumerate(ref):
        positions.setdefault(token, []).append(j)

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> Tuple[int, int]:
        # returns (matches, -chunks) for cand[i:], prev = ref index aligned to cand[i-1] or -1
        if i == len(cand):
            return 0, 0
        result = best(i + 1, used, -1)
        for j in positions.get(cand[i], ()):
            if used & (1 << j):
                continue
            matches, neg_chunks = best(i + 1, used | (1 << j), j)
            new_chunk = 0 if (prev >= 0 and j == prev + 1) else 1
            candidate_result = (matches + 1, neg_chunks - new_chunk)
            if candidate_result > result:
                result = candidate_result
        return result

    matches, neg_chunks = best(0, 0, -1)
    return matches, -neg_chunks


def meteor_sentence(candidate: Tokens, reference: Tokens) -> float:
    matches, chunks = meteor_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_exact(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    _check_corpus(candidates, references)
    per_item = [max(meteor_sentence(c, r) for r in refs) for c, refs in zip(candidates, references)]
    return 100.0 * sum(per_item) / len(per_item)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l_sentence(candidate: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], beta: float = ROUGE_BETA) -> float:
    _check_corpus(candidates, references)
    per_item = [max(rouge_l_sentence(c, r, beta) for r in refs) for c, refs in zip(candidates, references)]
    return 100.0 * sum(per_item) / len(per_item)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _document_frequency(references: Sequence[Sequence[Tokens]], max_n: int) -> Counter:
    df: Counter = Counter()
    for refs in references:
        seen = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(ngram_counts(ref, n))
        df.update(seen)
    return df


def _tfidf(counts: Counter, df: Counter, log_n_images: float) -> Tuple[Dict, float]:
    vec = {g: tf * (log_n_images - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _clipped_cosine(vec_hyp: Dict, vec_ref: Dict, norm_hyp: float, norm_ref: float) -> float:
    if norm_hyp == 0 or norm_ref == 0:
        return 0.0
    dot = sum(min(value, vec_ref[g]) * vec_ref[g] for g, value in vec_hyp.items() if g in vec_ref)
    return dot / (norm_hyp * norm_ref)


def cider_d_item(candidate: Tokens, refs: Sequence[Tokens], df: Counter, log_n_images: float,
                 max_n: int = CIDER_MAX_N, sigma: float = CIDER_SIGMA) -> float:
    """
    CIDEr-D of one item on the ×10 scale. Orders the reference is too short
    to contain are left out of the n-gram mean; when both TF-IDF vectors of
    an order vanish (n-grams present in every image), that order falls back
    to the cosine of the raw counts.
    """
    per_ref = []
    for ref in refs:
        delta = len(candidate) - len(ref)
        length_penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        sims = []
        for n in range(1, max_n + 1):
            ref_counts = ngram_counts(ref, n)
            if not ref_counts:
                continue
            hyp_counts = ngram_counts(candidate, n)
            vec_hyp, norm_hyp = _tfidf(hyp_counts, df, log_n_images)
            vec_ref, norm_ref = _tfidf(ref_counts, df, log_n_images)
            if norm_hyp == 0 and norm_ref == 0:
                raw_hyp = math.sqrt(sum(v * v for v in hyp_counts.values()))
                raw_ref = math.sqrt(sum(v * v for v in ref_counts.values()))
                sim = _clipped_cosine(dict(hyp_counts), dict(ref_counts), raw_hyp, raw_ref)
            else:
                sim = _clipped_cosine(vec_hyp, vec_ref, norm_hyp, norm_ref)
            sims.append(sim * length_penalty)
        per_ref.append(sum(sims) / len(sims) if sims else 0.0)
    return 10.0 * sum(per_ref) / len(per_ref)


def cider_d(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
            max_n: int = CIDER_MAX_N, sigma: float = CIDER_SIGMA) -> float:
    _check_corpus(candidates, references)
    df = _document_frequency(references, max_n)
    log_n_images = math.log(float(len(references)))
    scores = [cider_d_item(c, refs, df, log_n_images, max_n, sigma) for c, refs in zip(candidates, references)]
    return sum(scores) / len(scores)


def compute_metric_report(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> MetricReport:
    b1, b2, b3, b4 = bleu(candidates, references, max_n=4)
    return MetricReport(
        B1=b1, B2=b2, B3=b3, B4=b4,
        M=meteor_exact(candidates, references),
        R=rouge_l(candidates, references),
        C=cider_d(candidates, references),
    )
