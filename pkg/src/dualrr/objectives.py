"""Loss terms for the teacher, the distillation bridge and the RL path."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from . import numkit as nk
from .numkit import MASK
from .sampler import duplicate_masked_log_probs

DELTA_SCORE = 0.5


@dataclass(frozen=True)
class FeedbackFlags:
    exposure: bool
    click: bool
    long_view: bool

    def __post_init__(self):
        if self.click and not self.exposure:
            raise ValueError("click without exposure")
        if self.long_view and not self.click:
            raise ValueError("long_view without click")


@dataclass(frozen=True)
class PreferencePair:
    winner_idx: int
    loser_idx: int


@dataclass
class LossBreakdown:
    mle: float
    bpr: float
    kd: float
    ldro: float
    kl_penalty: float
    entropy_bonus: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def utility_score(f: FeedbackFlags) -> float:
    if (f.click and not f.exposure) or (f.long_view and not f.click):
        raise ValueError(f"inconsistent feedback flags: {f}")
    return 1.0 * f.click + 2.0 * f.long_view + 0.1 * f.exposure


def build_pairs(exposed: Sequence[int], feedback: Sequence[FeedbackFlags], delta_score: float = DELTA_SCORE) -> list[PreferencePair]:
    if delta_score <= 0:
        raise ValueError("delta_score must be > 0")
    scores = [utility_score(f) for f in feedback]
    pairs = []
    for a, sa in zip(exposed, scores):
        for b, sb in zip(exposed, scores):
            if sa - sb > delta_score:
                pairs.append(PreferencePair(int(a), int(b)))
    return pairs


def mle_loss(teacher_logits: torch.Tensor, exposed: torch.Tensor) -> torch.Tensor:
    """Sum over steps of -log pi_T(y_t | y_<t, x); batched inputs are averaged over records.

    ``teacher_logits`` ``[..., L, N]`` must come from teacher forcing on ``exposed`` ``[..., L]``.
    """
    picked = nk.gather(teacher_logits, exposed.unsqueeze(-1)).squeeze(-1)
    if bool((picked <= MASK / 2).any()):
        raise ValueError("exposed item is masked at its own step (prefix mask bug)")
    nll = -nk.gather(nk.log_softmax(teacher_logits), exposed.unsqueeze(-1)).squeeze(-1)
    return nll.sum(dim=-1).mean()


def bpr_loss(item_scores: torch.Tensor, pairs: Sequence[PreferencePair]) -> torch.Tensor:
    """-sum ln sigmoid(s_winner - s_loser) over one record's pairs."""
    if not pairs:
        return item_scores.sum() * 0.0
    w = torch.tensor([p.winner_idx for p in pairs])
    l = torch.tensor([p.loser_idx for p in pairs])
    gap = item_scores[w] - item_scores[l]
    return -torch.nn.functional.logsigmoid(gap).sum()


def bpr_loss_batched(item_scores: torch.Tensor, winners: torch.Tensor, losers: torch.Tensor, rows: torch.Tensor, n_rows: int) -> torch.Tensor:
    """BPR summed within each record and averaged over ``n_rows`` records."""
    if winners.numel() == 0:
        return item_scores.sum() * 0.0
    gap = item_scores[rows, winners] - item_scores[rows, losers]
    return -torch.nn.functional.logsigmoid(gap).sum() / n_rows


def _kl_rows(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    # KL(p || q) per row, 0 * log 0 := 0
    p = torch.exp(p_log)
    return (p * (p_log - q_log)).sum(dim=-1)


def kd_loss(teacher_logits: torch.Tensor, student_cube: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Sum over positions of KL(stop_grad(pi_T) || pi_S) at temperature ``tau``."""
    t_log = torch.log_softmax(teacher_logits.detach() / tau, dim=-1)
    s_log = nk.log_softmax(nk.scale(student_cube, 1.0 / tau))
    return nk.check_finite("kd_loss", _kl_rows(t_log, s_log).sum(dim=-1).mean())


def rank_weight(t: int, K: int = 4) -> float:
    if t < 1 or K < 1:
        raise ValueError("t and K must be >= 1")
    return 1.0 if t <= K else 1.0 / math.log2(t - K + 2)


def rank_weights(L: int, K: int = 4, enabled: bool = True) -> torch.Tensor:
    if not enabled:
        return torch.ones(L, dtype=nk.DTYPE)
    return torch.tensor([rank_weight(t, K) for t in range(1, L + 1)], dtype=nk.DTYPE)


def ldro_loss(student_cube: torch.Tensor, group: torch.Tensor, advantages: torch.Tensor, K: int = 4, weights: torch.Tensor | None = None) -> torch.Tensor:
    """-(1/G) sum_j A_j sum_t w_t log pi_S(y_t^j | x), averaged over records.

    ``student_cube`` ``[..., L, N]``, ``group`` ``[..., G, L]``, ``advantages`` ``[..., G]``.
    """
    G = group.shape[-2]
    if G == 0:
        raise ValueError("empty group")
    L = group.shape[-1]
    if weights is None:
        weights = rank_weights(L, K)
    cube = student_cube[..., :L, :].unsqueeze(-3)
    cube = cube.expand(*group.shape[:-1], L, student_cube.shape[-1])
    logp = duplicate_masked_log_probs(cube, group)  # [..., G, L]
    per_slate = (logp * weights).sum(dim=-1)
    loss = -(advantages.detach() * per_slate).sum(dim=-1) / G
    return loss.mean()


def regularizers(student_cube: torch.Tensor, teacher_logits: torch.Tensor, prefix_mask: torch.Tensor | None = None):
    """(sum_t KL(pi_S || pi_T), sum_t H(pi_S)), averaged over records.

    The KL term compares the student on the teacher's support: items the
    teacher masked (already placed in the forced prefix) are masked in the
    student row too, otherwise KL(S || T) is dominated by the sentinel.
    """
    s_log = nk.log_softmax(student_cube)
    entropy = -(torch.exp(s_log) * s_log).sum(dim=-1).sum(dim=-1).mean()
    masked = student_cube if prefix_mask is None else nk.masked_fill(student_cube, prefix_mask, MASK)
    sm_log = nk.log_softmax(masked)
    t_log = torch.log_softmax(teacher_logits.detach(), dim=-1)
    kl = _kl_rows(sm_log, t_log).sum(dim=-1).mean()
    return nk.check_finite("kl_penalty", kl), nk.check_finite("entropy_bonus", entropy)


def assemble_total(mle, bpr, kd, ldro, kl_penalty, entropy_bonus, lam_bpr=1.0, lam_kd=1.0, lam_rl=0.5, beta_kl=0.02, beta_ent=0.05):
    return mle + lam_bpr * bpr + lam_kd * kd + lam_rl * (ldro + beta_kl * kl_penalty - beta_ent * entropy_bonus)
