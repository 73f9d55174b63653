import math
from collections import Counter

import numpy as np
import pytest

from cxrkit.metrics import (auroc, bleu, cider_d, extract_labels, f1, fid,
                            gaussian_stats, meteor_lite, rouge_l, tokenize,
                            vqa_score)
from cxrkit.rng import Rng


# ---------------------------------------------------------------------------
# independent brute-force oracles


def oracle_bleu(cands, refs, n, eps=1e-9):
    """Naive corpus BLEU written independently of the library path."""
    num = [0.0] * n
    den = [0.0] * n
    clen = rlen = 0
    for cand, ref in zip(cands, refs):
        ct, rt = tokenize(cand), tokenize(ref)
        clen += len(ct)
        rlen += len(rt)
        for k in range(1, n + 1):
            cg = [tuple(ct[i:i + k]) for i in range(len(ct) - k + 1)]
            rg = [tuple(rt[i:i + k]) for i in range(len(rt) - k + 1)]
            for g in set(cg):
                num[k - 1] += min(cg.count(g), rg.count(g))
            den[k - 1] += len(cg)
    logs = [math.log((num[i] + eps) / (den[i] + eps)) for i in range(n)]
    bp = 1.0 if clen > rlen else math.exp(1 - rlen / max(clen, 1))
    return bp * math.exp(sum(logs) / n)


def oracle_auroc(scores, truths):
    """O(n^2) pair counting with half-credit ties."""
    pos = [s for s, t in zip(scores, truths) if t == 1]
    neg = [s for s, t in zip(scores, truths) if t == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def oracle_tfidf_cosine(cand, ref, docs, sigma=6.0):
    """Brute-force CIDEr-D for a single candidate/reference pair."""
    ct, rt = tokenize(cand), tokenize(ref)
    n_docs = len(docs)
    per_n = []
    for k in range(1, 5):
        def grams(tokens):
            return Counter(tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1))

        df = Counter()
        for d in docs:
            for g in set(grams(tokenize(d))):
                df[g] += 1

        def vec(tokens):
            c = grams(tokens)
            tot = max(sum(c.values()), 1)
            return {g: (v / tot) * math.log(n_docs / max(df.get(g, 0), 1.0))
                    for g, v in c.items()}

        cv, rv = vec(ct), vec(rt)
        dot = sum(min(cv[g], rv[g]) * rv[g] for g in cv if g in rv)
        nc = math.sqrt(sum(v * v for v in cv.values()))
        nr = math.sqrt(sum(v * v for v in rv.values()))
        if nc == 0 or nr == 0:
            per_n.append(0.0)
            continue
        pen = math.exp(-((len(ct) - len(rt)) ** 2) / (2 * sigma ** 2))
        per_n.append(pen * dot / (nc * nr))
    return 10.0 * sum(per_n) / 4.0


_WORDS = ("the cat sat on a mat small right pleural effusion lung is was "
          "chest view process clear new large").split()


def _random_sentence(rng, lo=3, hi=10):
    k = int(rng.integers(lo, hi))
    return " ".join(_WORDS[int(rng.integers(0, len(_WORDS)))] for _ in range(k))


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_identical_is_one():
    for n in range(1, 5):
        assert bleu(["the cat sat on the mat"], ["the cat sat on the mat"], n) == \
            pytest.approx(1.0, abs=1e-9)


def test_bleu_clipped_unigram_hand_count():
    score = bleu(["the the the the the the the"], ["the cat is on the mat"], n=1)
    # c=7 > r=6, BP=1; clipped unigram precision 2/7
    assert score == pytest.approx(2.0 / 7.0, abs=1e-9)


def test_bleu_brevity_penalty():
    score = bleu(["the cat sat"], ["the cat sat on the mat"], n=1)
    assert score == pytest.approx(math.exp(1 - 6 / 3) * 1.0, abs=1e-9)


def test_bleu_matches_oracle_random():
    rng = Rng(21, "test.bleu")
    for trial in range(100):
        m = int(rng.integers(1, 4))
        cands = [_random_sentence(rng) for _ in range(m)]
        refs = [_random_sentence(rng) for _ in range(m)]
        n = int(rng.integers(1, 5))
        assert bleu(cands, refs, n) == pytest.approx(
            oracle_bleu(cands, refs, n), abs=1e-6), (cands, refs, n)


def test_bleu_empty_corpus_rejected():
    with pytest.raises(ValueError):
        bleu([], [], 1)


# ---------------------------------------------------------------------------
# ROUGE-L


def test_rouge_identical_and_disjoint():
    assert rouge_l("a b c", "a b c") == pytest.approx(1.0)
    assert rouge_l("a b c", "x y z") == 0.0
    assert rouge_l("", "a") == 0.0


def test_rouge_hand_lcs():
    # cand "a b c d", ref "a c d e": LCS=3, P=R=0.75
    p = r = 0.75
    beta2 = 1.2
    expected = (1 + beta2) * p * r / (r + beta2 * p)
    assert rouge_l("a b c d", "a c d e") == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# METEOR


def test_meteor_identical_four_tokens():
    assert meteor_lite("a b c d", "a b c d") == pytest.approx(
        1.0 * (1 - 0.5 * (1 / 4) ** 3), abs=1e-12)


def test_meteor_no_overlap():
    assert meteor_lite("a b", "x y") == 0.0


def test_meteor_reversal_strictly_lower():
    forward = meteor_lite("a b c d", "a b c d")
    reverse = meteor_lite("d c b a", "a b c d")
    assert reverse < forward


# ---------------------------------------------------------------------------
# CIDEr-D


def test_cider_matches_oracle():
    docs = ["the cat sat on the mat", "a small right pleural effusion is seen"]
    cand = docs[0]
    got = cider_d([cand], [docs[0]], corpus=docs)
    want = oracle_tfidf_cosine(cand, docs[0], docs)
    assert got == pytest.approx(want, abs=1e-6)


def test_cider_matches_oracle_random():
    rng = Rng(13, "test.cider")
    for trial in range(100):
        docs = [_random_sentence(rng) for _ in range(4)]
        cand = _random_sentence(rng)
        got = cider_d([cand], [docs[0]], corpus=docs)
        want = oracle_tfidf_cosine(cand, docs[0], docs)
        assert got == pytest.approx(want, abs=1e-6)


def test_cider_disjoint_zero():
    assert cider_d(["a b c"], ["x y z"], corpus=["x y z", "q r s"]) == 0.0


def test_cider_duplicate_corpus_idf_zero():
    # every doc identical: IDF of shared terms is log(1)=0
    docs = ["the cat", "the cat"]
    assert cider_d(["the cat"], ["the cat"], corpus=docs) == pytest.approx(0.0, abs=1e-12)


def test_cider_small_corpus_rejected():
    with pytest.raises(ValueError):
        cider_d(["a"], ["a"], corpus=["a"])


# ---------------------------------------------------------------------------
# label extraction fixtures


def test_extract_nofindings():
    lv = extract_labels("No acute cardiopulmonary process.")
    assert lv.categories() == {"NoFindings"}


def test_extract_effusion_attributes():
    lv = extract_labels("There is a small right pleural effusion.")
    assert lv.present == {"PleuralEffusion": ("right", "small")}


def test_extract_negation():
    lv = extract_labels("No pneumothorax. There is a large left pleural effusion.")
    assert lv.categories() == {"PleuralEffusion"}


def test_extract_paper_consolidation_sentence():
    lv = extract_labels("Lateral view of the chest was obtained. "
                        "New right lower lobe consolidation is consistent with pneumonia.")
    assert "ConsolidationPneumonia" in lv.categories()


# ---------------------------------------------------------------------------
# AUROC / F1


def test_auroc_perfect_ranking():
    s = np.array([[0.9], [0.8], [0.3], [0.2]])
    t = np.array([[1], [1], [0], [0]])
    assert auroc(s, t, "micro") == 1.0


def test_auroc_all_ties_half():
    s = np.full((6, 1), 0.5)
    t = np.array([[1], [0], [1], [0], [1], [0]])
    assert auroc(s, t, "micro") == 0.5


def test_auroc_matches_pair_count_oracle():
    rng = Rng(31, "test.auroc")
    for trial in range(100):
        n = 50
        scores = np.round(rng.uniform((n,)), 2)  # rounded to force ties
        truths = (rng.uniform((n,)) < 0.4).astype(int)
        if truths.sum() in (0, n):
            continue
        got = auroc(scores[:, None], truths[:, None], "micro")
        want = oracle_auroc(scores.tolist(), truths.tolist())
        assert got == pytest.approx(want, abs=1e-9)


def test_auroc_modes_and_errors():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.6], [0.1, 0.2]])
    truths = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    macro = auroc(scores, truths, "macro")
    weighted = auroc(scores, truths, "weighted")
    assert 0 <= macro <= 1 and 0 <= weighted <= 1
    with pytest.raises(ValueError):
        auroc(np.array([[0.5]]), np.array([[1]]), "micro")


def test_f1_perfect():
    s = np.array([[0.9, 0.1], [0.1, 0.9]])
    t = np.array([[1, 0], [0, 1]])
    for mode in ("micro", "macro", "weighted"):
        assert f1(s, t, mode=mode) == 1.0


def test_f1_hand_confusion_fixture():
    # category A: tp=2 fp=1 fn=1; category B: tp=1 fp=0 fn=1
    s = np.array([
        [0.9, 0.9],   # A tp, B tp
        [0.9, 0.1],   # A tp, B fn (truth 1)
        [0.9, 0.0],   # A fp
        [0.1, 0.0],   # A fn (truth 1)
        [0.0, 0.0],
    ])
    t = np.array([
        [1, 1],
        [1, 1],
        [0, 0],
        [1, 0],
        [0, 0],
    ])
    micro = f1(s, t, mode="micro")
    macro = f1(s, t, mode="macro")
    assert micro == pytest.approx(2 * 3 / (2 * 3 + 1 + 2), abs=1e-12)
    assert macro == pytest.approx((2 / 3 + 2 / 3) / 2, abs=1e-12)


def test_f1_zero_denominator_convention():
    s = np.zeros((3, 1))
    t = np.zeros((3, 1), dtype=int)
    assert f1(s, t, mode="macro") == 0.0


# ---------------------------------------------------------------------------
# FID


def test_fid_identical_sets_zero():
    rng = Rng(17, "test.fid")
    x = rng.normal((10, 3), np.float64)
    assert fid(x, x) == pytest.approx(0.0, abs=1e-6)


def test_fid_one_d_closed_form():
    # mean 0 vs 1, unit variance both sides -> FID exactly 1
    a = np.array([[-1.0 / math.sqrt(2)], [1.0 / math.sqrt(2)]])
    b = a + 1.0
    assert fid(a, b) == pytest.approx(1.0, abs=1e-9)


def test_fid_matches_gaussian_oracle_random():
    rng = Rng(19, "test.fid2")
    for trial in range(20):
        d = 3
        a = rng.normal((30, d), np.float64)
        b = rng.normal((30, d), np.float64) + 0.5
        mu_a, ca = gaussian_stats(a)
        mu_b, cb = gaussian_stats(b)
        # oracle via numpy eigendecomposition of the symmetrized product
        wa, va = np.linalg.eigh(ca)
        ra = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
        inner = ra @ cb @ ra
        wi, vi = np.linalg.eigh(0.5 * (inner + inner.T))
        tr_sqrt = np.sum(np.sqrt(np.clip(wi, 0, None)))
        want = (mu_a - mu_b) @ (mu_a - mu_b) + np.trace(ca) + np.trace(cb) - 2 * tr_sqrt
        assert fid(a, b) == pytest.approx(want, rel=1e-8, abs=1e-9)


def test_fid_too_few_samples():
    with pytest.raises(ValueError, match="samples"):
        fid(np.zeros((3, 4)), np.zeros((10, 4)))


# ---------------------------------------------------------------------------
# VQA


def test_vqa_all_correct():
    keys = [{"answer": "yes", "topic": "presence", "diagnosis": "Edema"}] * 3
    out = vqa_score(["Yes.", "yes", " YES "], keys)
    assert out["overall"] == 1.0
    assert out["by_topic"]["presence"] == 1.0


def test_vqa_hand_count_slices():
    keys = [
        {"answer": "yes", "topic": "presence", "diagnosis": "Edema"},
        {"answer": "no", "topic": "presence", "diagnosis": "Edema"},
        {"answer": "left", "topic": "location", "diagnosis": "PleuralEffusion"},
        {"answer": "right", "topic": "location", "diagnosis": "PleuralEffusion"},
        {"answer": "small", "topic": "SST", "diagnosis": "LungLesion"},
        {"answer": "large", "topic": "SST", "diagnosis": "LungLesion"},
        {"answer": "yes", "topic": "presence", "diagnosis": "Pneumothorax"},
        {"answer": "no", "topic": "presence", "diagnosis": "Pneumothorax"},
    ]
    answers = ["yes", "no", "left", "left", "small", "large", "yes", "yes"]
    out = vqa_score(answers, keys)
    assert out["overall"] == pytest.approx(6 / 8)
    assert out["by_topic"]["presence"] == pytest.approx(3 / 4)
    assert out["by_topic"]["location"] == pytest.approx(1 / 2)
    assert out["by_topic"]["SST"] == pytest.approx(1.0)
    assert out["by_diagnosis"]["Pneumothorax"] == pytest.approx(1 / 2)


def test_vqa_count_mismatch():
    with pytest.raises(ValueError):
        vqa_score(["yes"], [])
