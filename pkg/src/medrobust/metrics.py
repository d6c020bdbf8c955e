"""Task metrics: mask IoU/Dice, VQA accuracy, grounding Acc@IoU, BLEU, ROUGE-L, CIDEr-D."""

from __future__ import annotations

import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

log = logging.getLogger(__name__)

TASKS = ("segmentation", "vqa", "grounding", "captioning")


# -- records ----------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @classmethod
    def of(cls, b) -> "BoundingBox":
        if isinstance(b, BoundingBox):
            return b
        x0, y0, x1, y1 = (float(v) for v in b)
        return cls(x0, y0, x1, y1)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class PredictionRecord:
    """One model output (or ground-truth item) for a sample under one condition.

    ``payload`` holds a mask (path or array), an answer string, a box or a
    caption depending on ``task``.  Ground-truth captions may be a list of
    references; ``answer_letter`` carries the gold multiple-choice letter.
    """

    sample_id: str
    task: str
    payload: Any
    perturbation_id: str = "clean"
    level: int = 0
    answer_letter: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


GroundTruthRecord = PredictionRecord


def _index(records, what) -> dict:
    out = {}
    for r in records:
        if r.sample_id in out:
            raise ValueError(f"duplicate sample_id {r.sample_id!r} in {what}")
        out[r.sample_id] = r
    return out


# -- segmentation -----------------------------------------------------------

def as_mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("mask values must be binary")
        a = a.astype(bool)
    return a


def _overlap(p, g):
    p, g = as_mask(p), as_mask(g)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(g))


def mask_iou(p, g) -> float:
    """|P & G| / |P | G|; two empty masks score 1."""
    inter, np_, ng = _overlap(p, g)
    union = np_ + ng - inter
    return 1.0 if union == 0 else inter / union


def mask_dice(p, g) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    inter, np_, ng = _overlap(p, g)
    total = np_ + ng
    return 1.0 if total == 0 else 2.0 * inter / total


# -- VQA --------------------------------------------------------------------

_WS = re.compile(r"\s+")
_TRAILING_PUNCT = ".,;:!?"


def normalize_answer(s: str) -> str:
    s = _WS.sub(" ", str(s).casefold().strip())
    return s.rstrip(_TRAILING_PUNCT).strip()


def vqa_match(pred: str, answer: str | None, letter: str | None = None) -> bool:
    p = normalize_answer(pred)
    golds = [normalize_answer(x) for x in (answer, letter) if x is not None]
    return p in golds


def vqa_accuracy(preds: Sequence[PredictionRecord], gts: Sequence[PredictionRecord]) -> float:
    """Exact-match rate over the ground-truth samples; missing predictions count as wrong."""
    p = _index(preds, "predictions")
    g = _index(gts, "ground truth")
    if not g:
        raise ValueError("empty ground truth")
    missing = [sid for sid in g if sid not in p]
    if missing:
        log.warning("%d of %d VQA samples have no prediction; counted wrong", len(missing), len(g))
    hits = sum(
        vqa_match(p[sid].payload, gt.payload, gt.answer_letter)
        for sid, gt in g.items() if sid in p
    )
    return hits / len(g)


# -- grounding --------------------------------------------------------------

def box_iou(a, b) -> float:
    a, b = BoundingBox.of(a), BoundingBox.of(b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union


def grounding_accuracy(preds, gts, threshold: float = 0.5) -> float:
    """Fraction of samples whose predicted box reaches IoU >= ``threshold``."""
    p = _index(preds, "predictions")
    g = _index(gts, "ground truth")
    if not g:
        raise ValueError("empty ground truth")
    missing = sum(1 for sid in g if sid not in p)
    if missing:
        log.warning("%d of %d grounding samples have no prediction; counted wrong", missing, len(g))
    hits = 0
    for sid, gt in g.items():
        if sid in p and p[sid].payload is not None and box_iou(p[sid].payload, gt.payload) >= threshold:
            hits += 1
    return hits / len(g)


# -- captioning -------------------------------------------------------------

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return str(text).casefold().translate(_PUNCT).split()


def _refs(r) -> list[str]:
    return [r] if isinstance(r, str) else list(r)


def ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram precisions and brevity penalty, unsmoothed.

    ``references[i]`` may be one string or a list of strings.
    """
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidates and references are not aligned")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c = tokenize(cand)
        rs = [tokenize(r) for r in _refs(refs)]
        c_len += len(c)
        # closest reference length, shorter on ties
        r_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            cn = ngrams(c, n)
            max_ref = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cn.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = math.exp(min(0.0, 1.0 - r_len / c_len))
    return bp * math.exp(log_p)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate: str, refs, beta: float = 1.2) -> float:
    c = tokenize(candidate)
    rs = [tokenize(r) for r in _refs(refs)]
    if not c and all(not r for r in rs):
        return 1.0
    prec = rec = 0.0
    for r in rs:
        if not c or not r:
            continue
        lcs = lcs_length(c, r)
        prec = max(prec, lcs / len(c))
        rec = max(rec, lcs / len(r))
    if prec == 0.0 or rec == 0.0:
        return 0.0
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean per-sample ROUGE-L F-measure (LCS based)."""
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidates and references are not aligned")
    return float(np.mean([rouge_l_single(c, r, beta) for c, r in zip(candidates, references)]))


CIDER_N = 4
CIDER_SIGMA = 6.0


def _cider_vec(tokens, df, log_docs):
    vecs, norms = [], []
    for n in range(1, CIDER_N + 1):
        v = {g: tf * max(0.0, log_docs - math.log(max(1.0, df.get(g, 0.0))))
             for g, tf in ngrams(tokens, n).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms, len(tokens)


def cider_scores(candidates, references, corpus=None) -> list[float]:
    """Per-sample CIDEr-D before the x10 scaling (each value lies in [0, 1]).

    Document frequencies come from ``corpus`` (a list of reference sets),
    defaulting to ``references``.  Numerators are clipped (min of candidate
    and reference weights) and each n carries a Gaussian length penalty.
    """
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidates and references are not aligned")
    corpus = references if corpus is None else corpus
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    df = Counter()
    for refset in corpus:
        seen = set()
        for r in _refs(refset):
            toks = tokenize(r)
            for n in range(1, CIDER_N + 1):
                seen.update(ngrams(toks, n))
        df.update(seen)
    log_docs = math.log(float(len(corpus)))

    scores = []
    for cand, refs in zip(candidates, references):
        hv, hn, hl = _cider_vec(tokenize(cand), df, log_docs)
        per_ref = []
        for r in _refs(refs):
            rv, rn, rl = _cider_vec(tokenize(r), df, log_docs)
            penalty = math.exp(-((hl - rl) ** 2) / (2 * CIDER_SIGMA ** 2))
            val = 0.0
            for n in range(CIDER_N):
                num = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
                if hn[n] != 0 and rn[n] != 0:
                    num /= hn[n] * rn[n]
                val += num * penalty
            per_ref.append(val / CIDER_N)
        scores.append(float(np.mean(per_ref)) if per_ref else 0.0)
    return scores


def cider(candidates, references, corpus=None, scaled: bool = False) -> float:
    """Mean CIDEr-D; in [0, 1] unless ``scaled`` (the conventional x10 value)."""
    s = float(np.mean(cider_scores(candidates, references, corpus)))
    return 10.0 * s if scaled else s
