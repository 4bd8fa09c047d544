"""Expected calibration error, reliability tables and the probability breakdown.

Binning convention: ``R`` equal-width bins with edges ``r / R``; bin ``r``
covers ``((r-1)/R, r/R]`` and the first bin also holds confidence 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mipl_cdl.errors import UsageError

CSV_HEADER = ("bin", "lower", "upper", "count", "accuracy", "confidence")


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    bag_id: int
    probs: np.ndarray
    predicted: int
    confidence: float
    true_label: int
    candidates: tuple

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label


def make_records(bag_ids, probs: np.ndarray, true_labels, candidates) -> list:
    """Build records from a probability matrix; labels are 1-based."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    return [
        PredictionRecord(int(bid), probs[i].copy(), int(pred[i]) + 1, float(probs[i, pred[i]]),
                         int(y), tuple(int(c) for c in s))
        for i, (bid, y, s) in enumerate(zip(bag_ids, true_labels, candidates))
    ]


@dataclass(frozen=True, eq=False)
class ReliabilityReport:
    n_bins: int
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    ece: float

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.n_bins)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> list:
        e = self.edges
        return [(r + 1, float(e[r]), float(e[r + 1]), int(self.counts[r]),
                 float(self.accuracy[r]), float(self.confidence[r])) for r in range(self.n_bins)]


def bin_edges(n_bins: int) -> np.ndarray:
    return np.arange(n_bins + 1, dtype=np.float64) / n_bins


def bin_index(confidences, n_bins: int) -> np.ndarray:
    """0-based bin of each confidence under the right-inclusive convention."""
    conf = np.asarray(confidences, dtype=np.float64)
    idx = np.searchsorted(bin_edges(n_bins), conf, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def _conf_correct(records) -> tuple:
    if isinstance(records, tuple) and len(records) == 2:
        conf, correct = records
        return np.asarray(conf, dtype=np.float64), np.asarray(correct, dtype=np.float64)
    return (np.array([r.confidence for r in records], dtype=np.float64),
            np.array([r.correct for r in records], dtype=np.float64))


def ece(records, n_bins: int = 15) -> ReliabilityReport:
    """Binned expected calibration error.

    ``records`` is a sequence of :class:`PredictionRecord` or a
    ``(confidences, correct)`` tuple of arrays.
    """
    conf, correct = _conf_correct(records)
    m = conf.shape[0]
    if m == 0:
        raise UsageError("ece() needs at least one record")
    if n_bins < 1:
        raise UsageError("n_bins must be >= 1")
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    nonzero = counts > 0
    acc = np.zeros(n_bins)
    mean_conf = np.zeros(n_bins)
    acc[nonzero] = acc_sum[nonzero] / counts[nonzero]
    mean_conf[nonzero] = conf_sum[nonzero] / counts[nonzero]
    value = float(np.sum(counts / m * np.abs(acc - mean_conf)))
    return ReliabilityReport(n_bins, counts, acc, mean_conf, value)


def accuracy(records: Sequence[PredictionRecord]) -> float:
    if len(records) == 0:
        raise UsageError("accuracy() needs at least one record")
    return float(np.mean([r.correct for r in records]))


def probability_breakdown(records: Sequence[PredictionRecord]) -> dict:
    """Mean predicted probability on true, false-positive and non-candidate labels.

    Categories with no label slots are reported as ``None``.
    """
    true_vals, fp_vals, nc_vals = [], [], []
    for rec in records:
        k = rec.probs.shape[0]
        cands = set(rec.candidates)
        true_vals.append(rec.probs[rec.true_label - 1])
        for c in range(1, k + 1):
            if c == rec.true_label:
                continue
            (fp_vals if c in cands else nc_vals).append(rec.probs[c - 1])

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    return {"true": mean(true_vals), "fp": mean(fp_vals), "nc": mean(nc_vals)}


def reliability_csv(report: ReliabilityReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in report.rows():
        writer.writerow([row[0]] + [repr(v) if isinstance(v, float) else v for v in row[1:]])
    return buf.getvalue()


def parse_reliability_csv(text: str) -> ReliabilityReport:
    """Inverse of :func:`reliability_csv`; the ECE is recomputed from the bins."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a reliability CSV")
    body = rows[1:]
    counts = np.array([int(r[3]) for r in body], dtype=np.int64)
    acc = np.array([float(r[4]) for r in body])
    conf = np.array([float(r[5]) for r in body])
    m = counts.sum()
    value = float(np.sum(counts / m * np.abs(acc - conf))) if m else 0.0
    return ReliabilityReport(len(body), counts, acc, conf, value)
