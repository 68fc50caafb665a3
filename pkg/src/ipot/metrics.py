"""Evaluation: top-K precision/recall/F1 on shot index sequences, plan KL, shot statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = ["topk_prf", "alignment_kl", "shot_stats", "MetricReport", "evaluate_sequences"]


def topk_prf(a, b, k: int) -> tuple[float, float, float]:
    """Positional top-K match between two index sequences.

    Position ``i`` (over the common prefix) matches when
    ``|a[i] - b[i]| <= k - 1``. Precision divides the match count by ``len(a)``,
    recall by ``len(b)``.
    """
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("index sequences must be nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = min(a.size, b.size)
    m = int(np.count_nonzero(np.abs(a[:n] - b[:n]) <= k - 1))
    if m == 0:
        return 0.0, 0.0, 0.0
    p, r = m / a.size, m / b.size
    return p, r, 2 * p * r / (p + r)


def alignment_kl(pred, truth, eps: float = 1e-12) -> float:
    """``sum truth * (log truth - log(pred + eps))`` with ``0 log 0 = 0``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"plan shapes differ: {pred.shape} vs {truth.shape}")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    pos = truth > 0
    return float((truth[pos] * (np.log(truth[pos]) - np.log(pred[pos] + eps))).sum())


def shot_stats(durations) -> tuple[int, float, float]:
    """Count, mean and population standard deviation of shot durations.

    Accepts an :class:`~ipot.inference.EditDecisionList` or a duration sequence.
    """
    if hasattr(durations, "durations"):
        durations = durations.durations()
    d = np.asarray(durations, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("no shots")
    return int(d.size), float(d.mean()), float(d.std())


@dataclass
class MetricReport:
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    f1: dict[int, float] = field(default_factory=dict)
    kl: float | None = None
    shot_count: int | None = None
    duration_mean: float | None = None
    duration_std: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("precision", "recall", "f1"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.precision)
        lines = [f"{'metric':<10}" + "".join(f"{'@' + str(k):>10}" for k in ks)]
        for label, vals in (("P", self.precision), ("R", self.recall), ("F1", self.f1)):
            lines.append(f"{label:<10}" + "".join(f"{vals[k]:>10.4f}" for k in ks))
        if self.kl is not None:
            lines.append(f"{'KL':<10}{self.kl:>10.4f}")
        if self.shot_count is not None:
            lines.append(f"{'#shots':<10}{self.shot_count:>10d}")
            lines.append(f"{'dur mean':<10}{self.duration_mean:>10.4f}")
            lines.append(f"{'dur std':<10}{self.duration_std:>10.4f}")
        return "\n".join(lines) + "\n"


def evaluate_sequences(truth_seq, pred_seq, ks=(1, 3, 5)) -> MetricReport:
    """P/R/F1 with the reference as ``a`` and the prediction as ``b``."""
    rep = MetricReport()
    for k in ks:
        p, r, f = topk_prf(truth_seq, pred_seq, k)
        rep.precision[k], rep.recall[k], rep.f1[k] = p, r, f
    return rep
