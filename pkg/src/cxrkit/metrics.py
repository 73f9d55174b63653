"""Evaluation metrics: report-text quality, label extraction, multi-label
classification scores, Frechet distance, and VQA accuracy slices.

All scores live in [0,1] except CIDEr-D (scaled to [0,10]) and FID (>=0).
Design notes that affect comparability:
  - BLEU uses add-epsilon smoothing (reports here are short);
  - METEOR is the exact-match-only variant (no stemming or synonym sets);
  - FID features come from this package's own aligner, so absolute values
    are not comparable across feature extractors.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import CATEGORIES, Finding
from .linalg import sqrtm_psd

# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is dropped."""
    return re.findall(r"[a-z0-9]+", text.lower())


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_ref_lists(references):
    return [[r] if isinstance(r, str) else list(r) for r in references]


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidates, references, n: int = 4, eps: float = 1e-9) -> float:
    """Corpus-level BLEU-n with brevity penalty and add-eps smoothing."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if not candidates:
        raise ValueError("empty corpus")
    refs = _as_ref_lists(references)
    if len(refs) != len(candidates):
        raise ValueError("candidate/reference count mismatch")
    clipped = np.zeros(n)
    totals = np.zeros(n)
    c_len = r_len = 0
    for cand, ref_group in zip(candidates, refs):
        ct = tokenize(cand)
        rts = [tokenize(r) for r in ref_group]
        c_len += len(ct)
        r_len += min((len(rt) for rt in rts), key=lambda L: (abs(L - len(ct)), L))
        for k in range(1, n + 1):
            cg = _ngrams(ct, k)
            max_ref = Counter()
            for rt in rts:
                rg = _ngrams(rt, k)
                for g, cnt in rg.items():
                    max_ref[g] = max(max_ref[g], cnt)
            clipped[k - 1] += sum(min(cnt, max_ref[g]) for g, cnt in cg.items())
            totals[k - 1] += max(sum(cg.values()), 0)
    precisions = (clipped + eps) / (totals + eps)
    log_p = np.mean(np.log(precisions))
    bp = 1.0 if c_len > r_len else float(np.exp(1.0 - r_len / max(c_len, 1)))
    return float(bp * np.exp(log_p))


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_len(a, b):
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, x in enumerate(a, 1):
        for j, y in enumerate(b, 1):
            dp[i, j] = dp[i - 1, j - 1] + 1 if x == y else max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[len(a), len(b)])


def rouge_l(candidate: str, reference: str, beta2: float = 1.2) -> float:
    """LCS-based F-measure with recall weighting beta^2."""
    ct, rt = tokenize(candidate), tokenize(reference)
    if not ct or not rt:
        return 0.0
    lcs = _lcs_len(ct, rt)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(ct), lcs / len(rt)
    return float((1 + beta2) * p * r / (r + beta2 * p))


# ---------------------------------------------------------------------------
# METEOR (exact-match-only variant)


def _meteor_alignment(ct, rt):
    """Greedy left-to-right exact alignment; returns matched ref positions
    in candidate order (None for unmatched candidate tokens)."""
    used = [False] * len(rt)
    positions = []
    for tok in ct:
        pos = None
        for j, r in enumerate(rt):
            if not used[j] and r == tok:
                pos = j
                used[j] = True
                break
        positions.append(pos)
    return positions


def meteor_lite(candidate: str, reference: str) -> float:
    """Unigram harmonic mean (recall weighted 9:1) times a fragmentation
    penalty 0.5*(chunks/matches)^3. Exact matches only."""
    ct, rt = tokenize(candidate), tokenize(reference)
    if not ct or not rt:
        return 0.0
    positions = _meteor_alignment(ct, rt)
    matched = [p for p in positions if p is not None]
    m = len(matched)
    if m == 0:
        return 0.0
    p, r = m / len(ct), m / len(rt)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    idx = [i for i, q in enumerate(positions) if q is not None]
    chunks = 1
    for a, b in zip(idx, idx[1:]):
        if b != a + 1 or positions[b] != positions[a] + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return float(f_mean * (1.0 - penalty))


# ---------------------------------------------------------------------------
# CIDEr-D


def cider_d(candidates, references, corpus=None, sigma: float = 6.0) -> float:
    """TF-IDF n-gram (n=1..4) cosine with Gaussian length penalty, x10.

    `corpus` supplies the documents for IDF; defaults to the flattened
    reference set. Fewer than 2 documents makes IDF degenerate -> error.
    """
    refs = _as_ref_lists(references)
    if len(refs) != len(candidates):
        raise ValueError("candidate/reference count mismatch")
    docs = corpus if corpus is not None else [r for grp in refs for r in grp]
    if len(docs) < 2:
        raise ValueError("IDF corpus must contain at least 2 documents")
    n_docs = len(docs)
    doc_freq = [Counter() for _ in range(4)]
    for doc in docs:
        dt = tokenize(doc)
        for k in range(4):
            for g in set(_ngrams(dt, k + 1)):
                doc_freq[k][g] += 1

    def tfidf_vec(tokens, k):
        counts = _ngrams(tokens, k + 1)
        total = sum(counts.values())
        vec = {}
        for g, c in counts.items():
            idf = np.log(n_docs / max(doc_freq[k].get(g, 0), 1.0))
            vec[g] = (c / max(total, 1)) * idf
        return vec

    def sim(cv, rv, len_c, len_r):
        # clipped dot product (CIDEr-D) over shared n-grams
        dot = sum(min(cv[g], rv[g]) * rv[g] for g in cv if g in rv)
        nc = np.sqrt(sum(v * v for v in cv.values()))
        nr = np.sqrt(sum(v * v for v in rv.values()))
        if nc == 0 or nr == 0:
            return 0.0
        pen = np.exp(-((len_c - len_r) ** 2) / (2 * sigma ** 2))
        return pen * dot / (nc * nr)

    scores = []
    for cand, ref_group in zip(candidates, refs):
        ct = tokenize(cand)
        per_n = []
        for k in range(4):
            cv = tfidf_vec(ct, k)
            vals = []
            for ref in ref_group:
                rt = tokenize(ref)
                rv = tfidf_vec(rt, k)
                vals.append(sim(cv, rv, len(ct), len(rt)))
            per_n.append(np.mean(vals))
        scores.append(np.mean(per_n))
    return float(10.0 * np.mean(scores))


# ---------------------------------------------------------------------------
# label extraction


_CATEGORY_KEYWORDS = {
    "PleuralEffusion": ("pleural effusion",),
    "Pneumothorax": ("pneumothorax",),
    "Edema": ("edema",),
    "ConsolidationPneumonia": ("consolidation", "pneumonia"),
    "LungLesion": ("lung lesion", "nodule"),
}
_NEGATIONS = ("no ", "without ", "no evidence of ", "negative for ")


@dataclass
class LabelVector:
    """Per-category presence with optional (laterality, severity) attributes."""

    present: dict = field(default_factory=dict)  # category -> (lat|None, sev|None)

    def categories(self) -> set:
        return set(self.present)

    def multihot(self) -> np.ndarray:
        return np.array([1.0 if c in self.present else 0.0 for c in CATEGORIES],
                        dtype=np.float32)

    def to_findings(self) -> frozenset:
        out = set()
        for cat, (lat, sev) in self.present.items():
            if cat == "NoFindings":
                out.add(Finding("NoFindings"))
            else:
                out.add(Finding(cat, lat or "right", sev or "moderate"))
        return frozenset(out)


def extract_labels(text: str) -> LabelVector:
    """Rule-based keyword/negation matcher aligned with the report grammar."""
    present = {}
    for raw_sentence in re.split(r"(?<=[.!?])\s+", text):
        s = " " + raw_sentence.lower().strip() + " "
        negated = any((" " + neg) in s or s.strip().startswith(neg) for neg in _NEGATIONS)
        for cat, keywords in _CATEGORY_KEYWORDS.items():
            if not any(kw in s for kw in keywords):
                continue
            if negated:
                continue
            lat = next((w for w in ("bilateral", "left", "right")
                        if re.search(rf"\b{w}\b", s)), None)
            sev = next((w for w in ("small", "moderate", "large")
                        if re.search(rf"\b{w}\b", s)), None)
            if cat not in present or present[cat] == (None, None):
                present[cat] = (lat, sev)
    if not present:
        present["NoFindings"] = (None, None)
    return LabelVector(present=present)


# ---------------------------------------------------------------------------
# AUROC / F1


def _auroc_binary(scores: np.ndarray, truths: np.ndarray) -> float:
    """Mann-Whitney AUROC with tie correction via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    pos = int(truths.sum())
    neg = len(truths) - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[truths == 1].sum()
    return float((pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def _per_category_iter(scores, truths):
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths))
    if scores.shape != truths.shape:
        raise ValueError("scores/truths shape mismatch")
    if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite in [0,1]")
    return scores, truths


def auroc(scores, truths, mode: str = "macro") -> float:
    """Multi-label AUROC. scores/truths: (N, C) arrays."""
    scores, truths = _per_category_iter(scores, truths)
    if mode == "micro":
        return _auroc_binary(scores.reshape(-1), truths.reshape(-1))
    vals, weights = [], []
    for c in range(scores.shape[1]):
        pos = truths[:, c].sum()
        if pos == 0 or pos == len(truths):
            warnings.warn(f"category {c} has a single class; skipped")
            continue
        vals.append(_auroc_binary(scores[:, c], truths[:, c]))
        weights.append(pos)
    if not vals:
        raise ValueError("no category with both classes present")
    if mode == "macro":
        return float(np.mean(vals))
    if mode == "weighted":
        return float(np.average(vals, weights=weights))
    raise ValueError(f"unknown mode {mode!r}")


def f1(scores, truths, threshold: float = 0.5, mode: str = "macro") -> float:
    """Multi-label F1 from thresholded scores; zero-denominator F1 is 0."""
    scores, truths = _per_category_iter(scores, truths)
    preds = (scores >= threshold).astype(np.int64)
    truths = truths.astype(np.int64)
    if mode == "micro":
        tp = int(np.sum((preds == 1) & (truths == 1)))
        fp = int(np.sum((preds == 1) & (truths == 0)))
        fn = int(np.sum((preds == 0) & (truths == 1)))
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 else 2.0 * tp / denom
    vals, weights = [], []
    for c in range(scores.shape[1]):
        tp = int(np.sum((preds[:, c] == 1) & (truths[:, c] == 1)))
        fp = int(np.sum((preds[:, c] == 1) & (truths[:, c] == 0)))
        fn = int(np.sum((preds[:, c] == 0) & (truths[:, c] == 1)))
        denom = 2 * tp + fp + fn
        vals.append(0.0 if denom == 0 else 2.0 * tp / denom)
        weights.append(truths[:, c].sum())
    if mode == "macro":
        return float(np.mean(vals))
    if mode == "weighted":
        total = sum(weights)
        if total == 0:
            return 0.0
        return float(np.average(vals, weights=weights))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# FID


def gaussian_stats(features: np.ndarray, shrinkage: float = 1e-6):
    """Mean and shrunk covariance of a feature matrix (N, D)."""
    x = np.asarray(features, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / max(len(x) - 1, 1)
    cov = 0.5 * (cov + cov.T) + shrinkage * np.eye(x.shape[1])
    return mu, cov


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (N, D)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError("feature dimension mismatch")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least D+1={d + 1} samples per side")
    mu_a, cov_a = gaussian_stats(a)
    mu_b, cov_b = gaussian_stats(b)
    root_a = sqrtm_psd(cov_a)
    inner = sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner)
    return float(max(val, 0.0))


# ---------------------------------------------------------------------------
# VQA accuracy


def _normalize_answer(text: str) -> str:
    words = tokenize(text)
    if words and words[0] in ("yes", "no"):
        return words[0]
    return " ".join(words)


def vqa_score(answers, keys) -> dict:
    """Exact-match accuracy overall and sliced by topic and diagnosis.

    `keys` entries are dicts with 'answer', 'topic' (presence/location/SST),
    and 'diagnosis'.
    """
    if len(answers) != len(keys):
        raise ValueError("answer/key count mismatch")
    overall, by_topic, by_diag = [], {}, {}
    for ans, key in zip(answers, keys):
        correct = _normalize_answer(ans) == _normalize_answer(key["answer"])
        overall.append(correct)
        by_topic.setdefault(key["topic"], []).append(correct)
        by_diag.setdefault(key["diagnosis"], []).append(correct)
    return {
        "overall": float(np.mean(overall)) if overall else 0.0,
        "by_topic": {k: float(np.mean(v)) for k, v in sorted(by_topic.items())},
        "by_diagnosis": {k: float(np.mean(v)) for k, v in sorted(by_diag.items())},
    }
