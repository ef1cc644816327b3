#!/usr/bin/env python3
"""
Tests for the captioning metrics.

Each metric is checked against hand-computed values and against a
brute-force oracle written out below on the golden caption corpus in
golden_captions.json.
"""

import itertools
import json
import math
import os
import random
import sys
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from caption_metrics import (MetricReport, bleu, cider_d, compute_metric_report, lcs_length,
                             meteor_alignment, meteor_exact, rouge_l, tokenize)
from errors import MetricInputError

GOLDEN = Path(__file__).parent / "golden_captions.json"
GOLDEN_EXPECTED = Path(__file__).parent / "golden_captions_expected.json"


def load_golden():
    items = json.loads(GOLDEN.read_text(encoding="utf-8"))
    candidates = [tokenize(item["candidate"]) for item in items]
    references = [[tokenize(ref) for ref in item["references"]] for item in items]
    return candidates, references


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_bleu(candidates, references, max_n=4):
    numerators = [0] * (max_n + 1)
    denominators = [0] * (max_n + 1)
    hyp_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        hyp_len += len(cand)
        ref_len += min((len(r) for r in refs), key=lambda length: (abs(length - len(cand)), length))
        for n in range(1, max_n + 1):
            counts = Counter(ngrams(cand, n))
            best = Counter()
            for ref in refs:
                for gram, count in Counter(ngrams(ref, n)).items():
                    best[gram] = max(best[gram], count)
            numerators[n] += sum(min(count, best[gram]) for gram, count in counts.items())
            denominators[n] += sum(counts.values())

    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    scores = []
    for n in range(1, max_n + 1):
        if any(numerators[k] == 0 for k in range(1, n + 1)):
            scores.append(0.0)
        else:
            precisions = [Fraction(numerators[k], denominators[k]) for k in range(1, n + 1)]
            score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / n)
            scores.append(min([score] + scores))
    return scores


def all_alignments(cand, ref):
    """Every partial one-to-one exact-match alignment as a list of (i, j)."""
    def extend(i, used):
        if i == len(cand):
            yield []
            return
        yield from extend(i + 1, used)
        for j, token in enumerate(ref):
            if token == cand[i] and j not in used:
                for rest in extend(i + 1, used | {j}):
                    yield [(i, j)] + rest
    yield from extend(0, frozenset())


def count_chunks(pairs):
    chunks = 0
    previous = None
    for i, j in pairs:
        if previous is None or not (i == previous[0] + 1 and j == previous[1] + 1):
            chunks += 1
        previous = (i, j)
    return chunks


def oracle_meteor_sentence(cand, ref):
    best = max(((len(pairs), -count_chunks(pairs)) for pairs in all_alignments(cand, ref)), default=(0, 0))
    matches, chunks = best[0], -best[1]
    if matches == 0:
        return 0.0
    p, r = matches / len(cand), matches / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    return f_mean * (1 - 0.5 * (chunks / matches) ** 3)


def oracle_meteor(candidates, references):
    scores = [max(oracle_meteor_sentence(c, r) for r in refs) for c, refs in zip(candidates, references)]
    return 100.0 * sum(scores) / len(scores)


def is_subsequence(seq, tokens):
    it = iter(tokens)
    return all(any(x == y for y in it) for x in seq)


def oracle_lcs(a, b):
    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subsequence([a[i] for i in idx], b):
                return size
    return 0


def oracle_rouge(candidates, references, beta=1.2):
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            lcs = oracle_lcs(cand, ref)
            if lcs:
                p, r = lcs / len(cand), lcs / len(ref)
                best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
        scores.append(best)
    return 100.0 * sum(scores) / len(scores)


def oracle_cider(candidates, references, sigma=6.0):
    n_images = len(references)
    df = Counter()
    for refs in references:
        df.update({g for ref in refs for n in range(1, 5) for g in ngrams(ref, n)})

    def dense(tokens, n, keys, weighted):
        counts = Counter(ngrams(tokens, n))
        idf = [math.log(n_images) - math.log(max(1, df[g])) for g in keys]
        return np.array([counts[g] * (w if weighted else 1.0) for g, w in zip(keys, idf)])

    total = 0.0
    for cand, refs in zip(candidates, references):
        per_ref = []
        for ref in refs:
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
            sims = []
            for n in range(1, 5):
                if not ngrams(ref, n):
                    continue
                keys = sorted(set(ngrams(cand, n)) | set(ngrams(ref, n)))
                h, r = dense(cand, n, keys, True), dense(ref, n, keys, True)
                if not h.any() and not r.any():
                    h, r = dense(cand, n, keys, False), dense(ref, n, keys, False)
                norm = np.linalg.norm(h) * np.linalg.norm(r)
                sim = float(np.sum(np.minimum(h, r) * r) / norm) if norm > 0 else 0.0
                sims.append(sim * penalty)
            per_ref.append(sum(sims) / len(sims) if sims else 0.0)
        total += 10.0 * sum(per_ref) / len(per_ref)
    return total / len(candidates)


# ---------------------------------------------------------------------------
# Hand-computed values
# ---------------------------------------------------------------------------

def test_tokenize():
    assert tokenize("A dog, running!") == ["a", "dog", "running"]
    assert tokenize("") == []


def test_bleu_examples():
    same = [["a", "dog", "runs", "on", "the", "grass"]]
    assert bleu(same, [same]) == pytest.approx([100.0] * 4)
    b1 = bleu([["a", "b", "c"]], [[["a", "b", "d"]]], max_n=1)[0]
    assert b1 == pytest.approx(200.0 / 3)
    with pytest.raises(MetricInputError):
        bleu([], [])
    with pytest.raises(MetricInputError):
        bleu([["a"]], [[]])


def test_meteor_examples():
    assert meteor_exact([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) == pytest.approx(99.21875)
    assert meteor_alignment(["b", "a"], ["a", "b"]) == (2, 2)
    assert meteor_exact([["b", "a"]], [[["a", "b"]]]) == pytest.approx(50.0)
    assert meteor_exact([["x", "y"]], [[["a", "b"]]]) == 0.0


def test_rouge_examples():
    assert lcs_length(["a", "b", "c", "d"], ["a", "c", "b", "d"]) == 3
    assert rouge_l([["a", "b", "c", "d"]], [[["a", "c", "b", "d"]]]) == pytest.approx(75.0)
    assert rouge_l([["a", "b"]], [[["a", "b"]]]) == pytest.approx(100.0)
    assert rouge_l([["a", "b"]], [[["c", "d"]]]) == 0.0


def test_cider_examples():
    assert cider_d([["a", "dog"]], [[["a", "dog"]]]) == pytest.approx(10.0)
    assert cider_d([["a", "cat"], ["x"]], [[["the", "dog"]], [["y"]]]) == 0.0

    candidates = [["a", "dog"], ["a", "dog"], ["a", "bird", "bird"]]
    references = [[["a", "dog"]], [["a", "cat"]], [["a", "bird"]]]
    assert cider_d(candidates, references) == pytest.approx(oracle_cider(candidates, references), abs=1e-9)
    # a one-image corpus zeroes every IDF weight, so raw counts decide
    assert cider_d([candidates[1]], [references[1]]) > 0.0


def test_report_rows():
    report = MetricReport(B1=100, B2=100, B3=100, B4=100, M=99.2, R=100, C=10)
    assert report.header().split() == ["B1", "B2", "B3", "B4", "M", "R", "C"]
    assert report.as_row().split() == ["100.0", "100.0", "100.0", "100.0", "99.2", "100.0", "10.0"]


# ---------------------------------------------------------------------------
# Golden corpus and properties
# ---------------------------------------------------------------------------

def test_golden_corpus_matches_oracles():
    candidates, references = load_golden()
    assert len(candidates) == 20
    np.testing.assert_allclose(bleu(candidates, references), oracle_bleu(candidates, references), atol=1e-9)
    assert meteor_exact(candidates, references) == pytest.approx(oracle_meteor(candidates, references), abs=1e-9)
    assert rouge_l(candidates, references) == pytest.approx(oracle_rouge(candidates, references), abs=1e-9)
    assert cider_d(candidates, references) == pytest.approx(oracle_cider(candidates, references), abs=1e-9)
    for cand, refs in zip(candidates, references):
        for ref in refs:
            assert lcs_length(cand, ref) == oracle_lcs(cand, ref)


def test_golden_corpus_matches_committed_values():
    candidates, references = load_golden()
    expected = json.loads(GOLDEN_EXPECTED.read_text(encoding="utf-8"))

    stats = expected["bleu"]
    penalty = math.exp(1 - stats["reference_length"] / stats["candidate_length"])
    log_precisions = [math.log(m / t) for m, t in zip(stats["clipped_matches"], stats["ngram_totals"])]
    want_bleu = [100.0 * penalty * math.exp(sum(log_precisions[:n]) / n) for n in range(1, 5)]
    np.testing.assert_allclose(bleu(candidates, references), want_bleu, atol=1e-6)

    per_item = []
    for (ref, matches, chunks, cand_len, ref_len), cand, refs in zip(
            expected["meteor"]["items"], candidates, references):
        assert (len(cand), len(refs[ref])) == (cand_len, ref_len)
        assert meteor_alignment(cand, refs[ref]) == (matches, chunks)
        if matches == 0:
            per_item.append(0.0)
            continue
        precision, recall = matches / cand_len, matches / ref_len
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        per_item.append(f_mean * (1 - 0.5 * (chunks / matches) ** 3))
    assert meteor_exact(candidates, references) == pytest.approx(100 * sum(per_item) / 20, abs=1e-6)

    per_item = []
    for (ref, lcs, cand_len, ref_len), cand, refs in zip(expected["rouge_l"]["items"], candidates, references):
        assert lcs_length(cand, refs[ref]) == lcs
        if lcs == 0:
            per_item.append(0.0)
            continue
        precision, recall = lcs / cand_len, lcs / ref_len
        per_item.append(2.44 * precision * recall / (recall + 1.44 * precision))
    assert rouge_l(candidates, references) == pytest.approx(100 * sum(per_item) / 20, abs=1e-6)

    pair = expected["cider_d_pair"]
    pair_candidates = [tokenize(text) for text in pair["candidates"]]
    pair_references = [[tokenize(text) for text in refs] for refs in pair["references"]]
    assert cider_d(pair_candidates, pair_references) == pytest.approx(pair["score"], abs=1e-6)
    assert oracle_cider(pair_candidates, pair_references) == pytest.approx(pair["score"], abs=1e-6)


def test_metrics_are_invariant_to_item_order():
    candidates, references = load_golden()
    order = list(range(len(candidates)))
    random.Random(0).shuffle(order)
    a = compute_metric_report(candidates, references).as_dict()
    b = compute_metric_report([candidates[i] for i in order], [references[i] for i in order]).as_dict()
    for name in a:
        assert a[name] == pytest.approx(b[name], abs=1e-9), name


def test_disjoint_and_exact_corpora():
    refs = [[["a", "dog", "on", "the", "grass"]], [["the", "man", "with", "a", "ball"]]]
    disjoint = compute_metric_report([["x", "y", "z"], ["u", "v", "w", "q"]], refs)
    assert all(value == pytest.approx(0.0, abs=1e-9) for value in disjoint.as_dict().values())

    exact = compute_metric_report([r[0] for r in refs], refs)
    assert [exact.B1, exact.B2, exact.B3, exact.B4, exact.R] == pytest.approx([100.0] * 5)
    assert exact.C == pytest.approx(10.0)
    assert exact.M == pytest.approx(100.0 * (1 - 0.5 / 5 ** 3))


def test_empty_candidates_score_zero():
    refs = [[["a", "dog"]], [["a", "cat", "runs"]]]
    report = compute_metric_report([[], []], refs)
    assert all(value == 0.0 for value in report.as_dict().values())


def test_bleu_orders_are_nested():
    rng = random.Random(7)
    pool = [f"w{i}" for i in range(30)]
    for trial in range(100):
        candidates, references = [], []
        for item in range(rng.randint(1, 6)):
            ref = rng.sample(pool, rng.randint(8, 12))
            cand = list(ref)
            if rng.random() < 0.7:
                cand[rng.randrange(len(cand))] = f"oov{trial}_{item}"
            if rng.random() < 0.3:
                cand = cand[:rng.randint(1, 3)]
            candidates.append(cand)
            references.append([ref])
        b1, b2, b3, b4 = bleu(candidates, references)
        assert b1 >= b2 >= b3 >= b4 >= 0.0


def test_bleu_short_misses_do_not_lift_higher_orders():
    # unigram precision 2/3, bigram precision 1: the bigram score is held at B1
    scores = bleu([["x"], ["a", "b"]], [[["a"]], [["a", "b"]]])
    assert scores == pytest.approx([200.0 / 3, 200.0 / 3, 0.0, 0.0])
    assert oracle_bleu([["x"], ["a", "b"]], [[["a"]], [["a", "b"]]]) == pytest.approx(scores)


def main():
    print("=" * 80)
    print("CAPTION METRIC TESTS")
    print("=" * 80)
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
