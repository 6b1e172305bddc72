"""Hybrid slate rewards and the two-stage advantage normalizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numkit as nk
from .numkit import DTYPE

OBJECTIVES = ("pctr_net", "plvr_net", "ndcg@4", "ndcg@8")
NDCG_CUTOFFS = (4, 8)
EPS = 1e-8


def prior_ndcg(slate: Sequence[int], relevance: Sequence[float], k: int) -> float:
    """NDCG@k with linear gain and 1/log2(pos+1) discount; 0.0 when IDCG is 0."""
    rel = np.asarray(relevance, dtype=np.float64)
    slate = list(slate)
    if k > len(slate):
        raise ValueError(f"k={k} exceeds slate length {len(slate)}")
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((rel[slate[:k]] * disc).sum())
    ideal = np.sort(rel)[::-1][:k]
    idcg = float((ideal * disc[: len(ideal)]).sum())
    return 0.0 if idcg <= 0 else dcg / idcg


def batch_ndcg(slates: torch.Tensor, relevance: torch.Tensor, k: int) -> torch.Tensor:
    """Vectorized prior_ndcg: ``slates`` ``[B, G, L]``, ``relevance`` ``[B, N]`` -> ``[B, G]``."""
    k = min(k, slates.shape[-1])
    disc = 1.0 / torch.log2(torch.arange(2, k + 2, dtype=DTYPE))
    B, G, _ = slates.shape
    rel = relevance.unsqueeze(1).expand(B, G, -1)
    gains = torch.gather(rel, -1, slates[..., :k])
    dcg = (gains * disc).sum(-1)
    ideal = relevance.sort(dim=-1, descending=True).values[:, :k]
    idcg = (ideal * disc[: ideal.shape[-1]]).sum(-1, keepdim=True)
    return torch.where(idcg > 0, dcg / idcg.clamp(min=1e-300), torch.zeros_like(dcg))


class RewardNet(nn.Module):
    """Two-tower click / long-view estimator with a learned position bias.

    Per position t of a slate: click logit ``<g(ctx), e(item)> + b_t``,
    long-view-given-click logit from a second head.  Slate pCTR is the mean
    click probability, pLVR the mean of click * long-view probabilities.
    """

    def __init__(self, d_ctx: int, d_item: int, l_out: int, hidden: int = 16, seed: int = 0, init_scale: float = 0.3):
        super().__init__()
        self.ctx_tower = nn.Parameter(torch.zeros(d_ctx, 2 * hidden, dtype=DTYPE))
        self.item_tower = nn.Parameter(torch.zeros(d_item, 2 * hidden, dtype=DTYPE))
        self.pos_bias = nn.Parameter(torch.zeros(2, l_out, dtype=DTYPE))
        self.hidden = hidden
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            self.ctx_tower.uniform_(-init_scale, init_scale, generator=gen)
            self.item_tower.uniform_(-init_scale, init_scale, generator=gen)

    def item_logits(self, ctx: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """``[B, 2, N]``: click and long-view logits per candidate (position-free)."""
        g = nk.linear(ctx, self.ctx_tower)  # [B, 2h]
        e = nk.linear(feats, self.item_tower)  # [B, N, 2h]
        h = self.hidden
        click = (g[:, None, :h] * e[..., :h]).sum(-1)
        lv = (g[:, None, h:] * e[..., h:]).sum(-1)
        return torch.stack([click, lv], dim=1)

    def position_probs(self, ctx, feats, slates: torch.Tensor):
        """Click and long-view probabilities ``[B, G, L]`` for slates ``[B, G, L]``."""
        logits = self.item_logits(ctx, feats)
        B, G, L = slates.shape
        idx = slates.reshape(B, 1, G * L).expand(B, 2, G * L)
        per = torch.gather(logits, 2, idx).reshape(B, 2, G, L) + self.pos_bias[:, None, :L].unsqueeze(0)
        p_click = torch.sigmoid(per[:, 0])
        p_lv = torch.sigmoid(per[:, 1])
        return p_click, p_lv

    def forward(self, ctx, feats, slates):
        """Slate-level ``[B, G, 2]`` (pCTR, pLVR) estimates in (0, 1)."""
        p_click, p_lv = self.position_probs(ctx, feats, slates)
        return torch.stack([p_click.mean(-1), (p_click * p_lv).mean(-1)], dim=-1)

    def fit_loss(self, ctx, feats, exposed: torch.Tensor, clicks: torch.Tensor, long_views: torch.Tensor) -> torch.Tensor:
        """Squared error against realized per-position feedback on exposed slates ``[B, L]``."""
        p_click, p_lv = self.position_probs(ctx, feats, exposed.unsqueeze(1))
        p_click, p_lv = p_click[:, 0], p_lv[:, 0]
        return ((p_click - clicks) ** 2).mean() + ((p_click * p_lv - long_views) ** 2).mean()


def hybrid_rewards(
    net: RewardNet,
    ctx: torch.Tensor,
    feats: torch.Tensor,
    slates: torch.Tensor,
    relevance: torch.Tensor | None,
    posterior: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Reward vectors ``[B, G, 4]`` in objective order ``OBJECTIVES``.

    ``posterior`` = (clicks, long_views), each ``[B, L]``, realized on slate 0
    of every group; when given, slate 0's pCTR/pLVR are replaced by the
    realized per-slate rates.  Missing relevance yields zero NDCG terms.
    """
    with torch.no_grad():
        est = net(ctx, feats, slates)
        B, G, L = slates.shape
        if relevance is None:
            ndcg = torch.zeros(B, G, 2, dtype=DTYPE)
        else:
            ndcg = torch.stack([batch_ndcg(slates, relevance, k) for k in NDCG_CUTOFFS], dim=-1)
        r = torch.cat([est, ndcg], dim=-1)
        if posterior is not None:
            clicks, lvs = posterior
            if clicks.shape != (B, L) or lvs.shape != (B, L):
                raise ValueError(f"posterior length mismatch: expected {(B, L)}, got {tuple(clicks.shape)}")
            r = r.clone()
            r[:, 0, 0] = clicks.mean(-1)
            r[:, 0, 1] = lvs.mean(-1)
    return r


def hybrid_reward(slate, ctx_vec, feats, net: RewardNet, relevance=None, posterior=None) -> np.ndarray:
    """Single-slate convenience wrapper; ``posterior`` is a list of FeedbackFlags."""
    slate_t = torch.as_tensor([[list(slate)]], dtype=torch.long)
    ctx_t = torch.as_tensor(np.asarray(ctx_vec)[None], dtype=DTYPE)
    feats_t = torch.as_tensor(np.asarray(feats)[None], dtype=DTYPE)
    rel_t = None if relevance is None else torch.as_tensor(np.asarray(relevance)[None], dtype=DTYPE)
    post = None
    if posterior is not None:
        if len(posterior) != len(slate):
            raise ValueError(f"posterior length mismatch: {len(posterior)} flags for a slate of {len(slate)}")
        post = (
            torch.tensor([[float(f.click) for f in posterior]], dtype=DTYPE),
            torch.tensor([[float(f.long_view) for f in posterior]], dtype=DTYPE),
        )
    return hybrid_rewards(net, ctx_t, feats_t, slate_t, rel_t, post)[0, 0].numpy()


@dataclass
class AdvantageMatrix:
    group_stage: torch.Tensor  # [B, G, M]
    batch_stage: torch.Tensor  # [B, G, M]; equals group_stage in GRPO mode

    def fused(self, alpha) -> torch.Tensor:
        return fuse(self, alpha)


def _standardize(x: torch.Tensor, dims, eps: float) -> torch.Tensor:
    mu = x.mean(dim=dims, keepdim=True)
    sd = ((x - mu) ** 2).mean(dim=dims, keepdim=True).sqrt()  # population
    return (x - mu) / (sd + eps)


def double_decouple(rewards: torch.Tensor, eps: float = EPS, mode: str = "ldro") -> AdvantageMatrix:
    """Group-wise then batch-wise standardization of ``rewards`` ``[B, G, M]``.

    ``mode='grpo'`` stops after the group stage.
    """
    rewards = torch.as_tensor(rewards, dtype=DTYPE)
    if rewards.dim() != 3:
        raise ValueError(f"rewards must be [B, G, M], got {tuple(rewards.shape)}")
    if rewards.shape[1] < 2:
        raise ValueError("group size G must be >= 2")
    mode = mode.lower()
    if mode not in ("ldro", "grpo"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    group = _standardize(rewards, 1, eps)
    batch = _standardize(group, (0, 1), eps) if mode == "ldro" else group
    return AdvantageMatrix(group_stage=group, batch_stage=batch)


def fuse(adv: AdvantageMatrix | torch.Tensor, alpha) -> torch.Tensor:
    a = adv.batch_stage if isinstance(adv, AdvantageMatrix) else torch.as_tensor(adv, dtype=DTYPE)
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    if alpha.shape != a.shape[-1:]:
        raise ValueError(f"alpha has {alpha.numel()} weights for {a.shape[-1]} objectives")
    return (a * alpha).sum(-1)
