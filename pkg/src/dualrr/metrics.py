"""Evaluation metrics: PTAR, RFR, AUC, NDCG and distribution profiles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .models import _prefix_mask
from .numkit import MASK
from .rewards import prior_ndcg as ndcg

__all__ = [
    "MetricReport",
    "auc",
    "distribution_profile",
    "ndcg",
    "ptar",
    "ptar_from_logits",
    "rfr",
    "sequence_consistency",
]


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)

    def add(self, name: str, value: float, count: int, window: str = "all") -> None:
        self.metrics[name] = {"value": float(value), "count": int(count), "window": window}

    def value(self, name: str) -> float:
        return self.metrics[name]["value"]

    def to_json(self) -> str:
        return json.dumps(self.metrics, sort_keys=True)


def ptar_from_logits(teacher_logits: torch.Tensor, student_cube: torch.Tensor, prefixes: torch.Tensor) -> float:
    """Share of (record, position) cells where teacher and student argmaxes agree.

    ``teacher_logits`` are teacher-forced on ``prefixes`` ``[R, L]``; the
    student's row t is masked with the same prefix before its argmax.
    """
    L = prefixes.shape[-1]
    t_hat = teacher_logits[..., :L, :].argmax(dim=-1)
    masked = student_cube[..., :L, :].masked_fill(_prefix_mask(prefixes, student_cube.shape[-1]), MASK)
    s_hat = masked.argmax(dim=-1)
    return float((t_hat == s_hat).double().mean())


def ptar(model, batch) -> float:
    """PTAR of ``model.student`` against ``model.teacher`` on a RecordBatch."""
    with torch.no_grad():
        enc = model.encoder(batch.ctx, batch.feats)
        t_logits = model.teacher.forced(enc, batch.exposed)
        cube = model.student(enc)
    return ptar_from_logits(t_logits, cube, batch.exposed)


def rfr(teacher_scores: Sequence[float], student_scores: Sequence[float]) -> float:
    """Fraction of strictly teacher-ordered pairs the student reverses; student ties count 1/2."""
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1 or t.size < 2:
        raise ValueError("rfr needs two score vectors of equal length >= 2")
    ordered = t[:, None] > t[None, :]
    n = int(ordered.sum())
    if n == 0:
        raise ValueError("no ordered pairs")
    flips = (s[:, None] < s[None, :]) & ordered
    ties = (s[:, None] == s[None, :]) & ordered
    return float((flips.sum() + 0.5 * ties.sum()) / n)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg), ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative")
    # rank-sum form of the pairwise count; average ranks handle ties
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def distribution_profile(dist: Sequence[float]) -> tuple[float, float]:
    """(top-1 confidence, branching factor 2**H) with H in bits."""
    p = np.asarray(dist, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("distribution is not normalized")
    nz = p[p > 0]
    h = float(-(nz * np.log2(nz)).sum())
    return float(p.max()), float(2.0**h)


def sequence_consistency(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Jaccard similarity of the two slates' item sets."""
    a, b = set(pred), set(truth)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def mean_rfr(teacher_scores: torch.Tensor, student_scores: torch.Tensor) -> float:
    """Average RFR over rows, skipping rows without ordered teacher pairs."""
    vals = []
    for t, s in zip(teacher_scores.tolist(), student_scores.tolist()):
        try:
            vals.append(rfr(t, s))
        except ValueError:
            continue
    return float(np.mean(vals)) if vals else math.nan
