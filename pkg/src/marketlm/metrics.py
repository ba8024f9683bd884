"""Evaluation: AUC, paired DeLong significance, and the per-word-category
likelihood-ratio analysis over the objective's token diagnostics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass
class PredictionRecord:
    sample_id: str
    company: str
    date: str
    horizon: int
    score: float
    label: int

    def validate(self):
        if not np.isfinite(self.score):
            raise EvalError(f"non-finite score for {self.sample_id}")
        if self.label not in (0, 1):
            raise EvalError(f"label must be 0/1, got {self.label}")


def save_records(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "company", "date", "horizon", "score", "label"])
        for r in records:
            w.writerow([r.sample_id, r.company, r.date, r.horizon,
                        f"{r.score:.10f}", r.label])


def load_records(path):
    out = []
    with open(path) as f:
        for row in csv.DictReader(f):
            rec = PredictionRecord(row["sample_id"], row["company"], row["date"],
                                   int(row["horizon"]), float(row["score"]),
                                   int(row["label"]))
            rec.validate()
            out.append(rec)
    return out


def _midranks(x):
    """Average ranks (1-based) with ties shared, vectorized via argsort."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j < len(sx) and sx[j] == sx[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1
        i = j
    return ranks


def _split(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    if not np.isfinite(scores).all():
        raise EvalError("scores must be finite")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise EvalError("AUC undefined: both classes must be present")
    return pos, neg


def auc(labels, scores):
    """P(random positive outscores random negative), ties counted half."""
    pos, neg = _split(labels, scores)
    allr = _midranks(np.concatenate([pos, neg]))
    m = len(pos)
    return (allr[:m].sum() - m * (m + 1) / 2) / (m * len(neg))


def auc_records(records):
    return auc([r.label for r in records], [r.score for r in records])


def _placements(pos, neg):
    """DeLong structural components V10 (per positive) and V01 (per negative)."""
    m, n = len(pos), len(neg)
    combined = _midranks(np.concatenate([pos, neg]))
    r_pos = _midranks(pos)
    r_neg = _midranks(neg)
    v10 = (combined[:m] - r_pos) / n
    v01 = 1.0 - (combined[m:] - r_neg) / m
    return v10, v01


def delong(labels, scores_a, scores_b):
    """Paired DeLong test; returns (auc_a, auc_b, z, two-sided p)."""
    labels = np.asarray(labels)
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    if not (len(labels) == len(scores_a) == len(scores_b)):
        raise EvalError("paired test requires identical sample sets")
    pos_a, neg_a = _split(labels, scores_a)
    pos_b, neg_b = _split(labels, scores_b)
    v10a, v01a = _placements(pos_a, neg_a)
    v10b, v01b = _placements(pos_b, neg_b)
    auc_a, auc_b = v10a.mean(), v10b.mean()
    m, n = len(pos_a), len(neg_a)
    s10 = np.cov(np.stack([v10a, v10b]), ddof=1) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.stack([v01a, v01b]), ddof=1) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    if var <= 0:
        if abs(auc_a - auc_b) < 1e-12:
            return auc_a, auc_b, 0.0, 1.0
        raise EvalError("zero DeLong variance with unequal AUCs")
    z = (auc_a - auc_b) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return auc_a, auc_b, z, p


def delong_records(records_a, records_b):
    key = lambda r: (r.sample_id, r.horizon)
    a = sorted(records_a, key=key)
    b = sorted(records_b, key=key)
    if [key(r) for r in a] != [key(r) for r in b] or \
            [r.label for r in a] != [r.label for r in b]:
        raise EvalError("paired test requires identical sample sets")
    return delong([r.label for r in a], [r.score for r in a], [r.score for r in b])


def load_lexicon(path):
    """`category<TAB>word` lines -> {category: set of lowercased words}."""
    lex = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            cat, word = line.split("\t")
            lex.setdefault(cat, set()).add(word.lower())
    return lex


def likelihood_ratio_by_category(diagnostics_path, lexicon):
    """Median raw likelihood ratio per lexicon category.

    Reads the objective's per-token diagnostics CSV; each scored text token
    maps to its lowercased source word (subword pieces marked `word@k` inherit
    the base word's category). Empty categories are omitted with a note.
    """
    ratios = {cat: [] for cat in lexicon}
    with open(diagnostics_path) as f:
        for row in csv.DictReader(f):
            if row["modality"] != "text" or not row["weight_raw"]:
                continue
            word = row["token"].lower().split("@")[0]
            w = float(row["weight_raw"])
            for cat, words in lexicon.items():
                if word in words:
                    ratios[cat].append(w)
    table = {}
    for cat in lexicon:
        if ratios[cat]:
            table[cat] = {"median_ratio": float(np.median(ratios[cat])),
                          "n_tokens": len(ratios[cat])}
        else:
            log.info("category_report omit=%s reason=no_tokens", cat)
    return table


def save_category_report(table, csv_path, text_path=None):
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "median_ratio", "n_tokens"])
        for cat, row in table.items():
            w.writerow([cat, f"{row['median_ratio']:.6f}", row["n_tokens"]])
    if text_path is not None:
        width = max([len(c) for c in table] + [8])
        lines = [f"{'Category'.ljust(width)}  Median W  Tokens"]
        for cat, row in table.items():
            lines.append(f"{cat.ljust(width)}  {row['median_ratio']:8.4f}  "
                         f"{row['n_tokens']:6d}")
        with open(text_path, "w") as f:
            f.write("\n".join(lines) + "\n")
