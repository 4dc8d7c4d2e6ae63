"""
Evaluation measures: PCK/AUC, top-k accuracy, WER, BLEU, ROUGE-L
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .records import write_json_atomic

logger = logging.getLogger(__name__)

AUC_LOW_PX = 20.0
AUC_HIGH_PX = 40.0
AUC_POINTS = 21

# order of rows in the summary table
METRIC_ORDER = (
    "top1_per_instance", "top5_per_instance", "top1_per_class", "top5_per_class",
    "wer", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l",
    "input_pck", "output_pck", "input_auc", "output_auc",
)


# ---------------------------------------------------------------------------
# Keypoints
# ---------------------------------------------------------------------------

def _distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.size == 0:
        raise ValueError("PCK needs at least one joint")
    return np.linalg.norm(pred.reshape(-1, pred.shape[-1]) - gt.reshape(-1, gt.shape[-1]), axis=-1)


def pck(pred: np.ndarray, gt: np.ndarray, threshold: float) -> float:
    """Percentage of joints whose Euclidean error is below `threshold`"""
    return float(100.0 * np.mean(_distances(pred, gt) < threshold))


def pck_curve(pred: np.ndarray, gt: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    d = _distances(pred, gt)
    return np.array([100.0 * np.mean(d < t) for t in thresholds])


def auc_thresholds(low: float = AUC_LOW_PX, high: float = AUC_HIGH_PX,
                   num: int = AUC_POINTS) -> np.ndarray:
    return np.linspace(low, high, num)


def auc_pck(pred: np.ndarray, gt: np.ndarray, low: float = AUC_LOW_PX, high: float = AUC_HIGH_PX,
            num: int = AUC_POINTS) -> float:
    """Mean PCK over an evenly spaced threshold grid"""
    return float(np.mean(pck_curve(pred, gt, auc_thresholds(low, high, num))))


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    k = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.any(top == labels[:, None], axis=1)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int = 1,
                  mode: str = "per_instance") -> float:
    """
    per_instance: mean hit@k over samples.
    per_class: mean over the classes present in `labels` of within-class hit@k.
    """
    hits = topk_hits(scores, labels, k)
    if mode == "per_instance":
        return float(100.0 * hits.mean())
    if mode == "per_class":
        labels = np.asarray(labels)
        per_class = [hits[labels == c].mean() for c in np.unique(labels)]
        return float(100.0 * np.mean(per_class))
    raise ValueError(f"unknown accuracy mode {mode!r}")


def absent_classes(labels: np.ndarray, num_classes: int) -> List[int]:
    present = set(np.asarray(labels).tolist())
    return [c for c in range(num_classes) if c not in present]


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------

@dataclass
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_length

    def __add__(self, other: 'WerResult') -> 'WerResult':
        return WerResult(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_length + other.ref_length)


def wer(hypothesis: Sequence[str], reference: Sequence[str]) -> WerResult:
    """
    Minimal edit alignment by dynamic programming.

    Ties in the backtrace prefer match/substitution, then deletion, then
    insertion.
    """
    if len(reference) == 0:
        raise ValueError("WER is undefined for an empty reference")
    n, m = len(reference), len(hypothesis)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult(subs, dels, ins, n)


def corpus_wer(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> WerResult:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    total = WerResult(0, 0, 0, 0)
    for hyp, ref in zip(hypotheses, references):
        total = total + wer(hyp, ref)
    return total


# ---------------------------------------------------------------------------
# BLEU / ROUGE-L
# ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
                n: int = 4, smooth: bool = False) -> float:
    """
    Corpus BLEU-n: clipped n-gram precisions pooled over the corpus, uniform
    geometric mean over orders 1..n, brevity penalty against the closest
    reference length. `smooth` adds one to numerator and denominator of
    orders above 1.
    """
    if n < 1:
        raise ValueError(f"BLEU order must be at least 1, got {n}")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} reference sets")

    matches = [0] * n
    totals = [0] * n
    hyp_length = ref_length = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("each hypothesis needs at least one reference")
        hyp_length += len(hyp)
        ref_length += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for order in range(1, n + 1):
            counts = _ngrams(hyp, order)
            max_ref = Counter()
            for ref in refs:
                max_ref |= _ngrams(ref, order)
            matches[order - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[order - 1] += max(0, len(hyp) - order + 1)

    if hyp_length == 0:
        logger.warning("BLEU of an empty hypothesis is 0")
        return 0.0

    log_precision = 0.0
    for order in range(n):
        num, den = matches[order], totals[order]
        if smooth and order > 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_precision += math.log(num / den) / n

    brevity = 1.0 if hyp_length > ref_length else math.exp(1.0 - ref_length / hyp_length)
    return brevity * math.exp(log_precision)


def bleu(hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int = 4,
         smooth: bool = False) -> float:
    """BLEU-n of one hypothesis against one or more references"""
    return corpus_bleu([hypothesis], [references], n=n, smooth=smooth)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table[i - 1, j - 1] + 1
            else:
                table[i, j] = max(table[i - 1, j], table[i, j - 1])
    return int(table[-1, -1])


def rouge_l_f1(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    if not hypothesis and not reference:
        logger.warning("ROUGE-L of two empty sequences is defined as 0")
        return 0.0
    if not hypothesis or not reference:
        return 0.0
    lcs = lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


def corpus_rouge_l(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Mean sentence-level ROUGE-L F1"""
    if not hypotheses:
        raise ValueError("ROUGE-L needs at least one sentence pair")
    return float(np.mean([rouge_l_f1(h, r) for h, r in zip(hypotheses, references)]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Named scalars with their units, plus counts and breakdowns"""
    task: str
    split: str
    metrics: Dict[str, float] = field(default_factory=dict)
    units: Dict[str, str] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    breakdowns: Dict[str, Any] = field(default_factory=dict)
    config: Optional[Dict[str, Any]] = None

    def add(self, name: str, value: float, unit: str) -> None:
        self.metrics[name] = float(value)
        self.units[name] = unit

    def ordered_names(self) -> List[str]:
        known = [m for m in METRIC_ORDER if m in self.metrics]
        return known + sorted(m for m in self.metrics if m not in METRIC_ORDER)

    def format_table(self) -> str:
        rows: List[Tuple[str, str, str]] = [
            (name, f"{self.metrics[name]:.4f}", self.units.get(name, "")) for name in self.ordered_names()
        ]
        rows += [(name, str(value), "count") for name, value in self.counts.items()]
        width = max([len(r[0]) for r in rows] + [6])
        lines = [f"{self.task} / {self.split}", f"{'metric':<{width}}  {'value':>12}  unit"]
        lines += [f"{name:<{width}}  {value:>12}  {unit}" for name, value, unit in rows]
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "split": self.split,
            "metrics": {name: self.metrics[name] for name in self.ordered_names()},
            "units": self.units,
            "counts": self.counts,
            "breakdowns": self.breakdowns,
            "config": self.config,
        }


def write_metric_report(report: MetricReport, path: Union[str, Path]) -> None:
    write_json_atomic(path, report.to_dict())
