"""Vectorized Gumbel-Max slate sampling from a student logits cube."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import numkit as nk
from .numkit import DTYPE, MASK

GUMBEL_STREAM = 0x6A7


def gumbel_noise(seed: int, step: int, shape: tuple[int, ...], stream: int = GUMBEL_STREAM) -> np.ndarray:
    """Standard Gumbel block keyed by ``(seed, step)``.

    Values are laid out row-major over ``shape``, so a block with a larger
    leading dimension extends a smaller one: the first K slates' noise does
    not depend on how many slates were requested.
    """
    rng = np.random.default_rng([int(seed), int(stream), int(step)])
    return rng.gumbel(size=shape)


@dataclass
class SampledGroup:
    slates: torch.Tensor  # [..., K, L] long
    log_probs: torch.Tensor  # [..., K]


def masked_argmax_fill(scores: torch.Tensor, length: int) -> torch.Tensor:
    """Fill positions left to right, excluding items already placed in the slate.

    ``scores`` is ``[..., L, N]``; ties go to the lowest index.
    """
    *lead, L, N = scores.shape
    taken = torch.zeros(*lead, N, dtype=torch.bool)
    out = torch.empty(*lead, length, dtype=torch.long)
    for t in range(length):
        row = scores[..., t, :].masked_fill(taken, -torch.inf)
        pick = row.argmax(dim=-1)
        out[..., t] = pick
        taken = taken.scatter(-1, pick.unsqueeze(-1), True)
    return out


def gumbel_sample_group(cube: torch.Tensor, K: int, tau: float, seed: int, step: int = 0, stream: int = GUMBEL_STREAM) -> SampledGroup:
    """Draw K slates per cube.

    ``cube`` is ``[L, N]`` or ``[B, L, N]``.  Position t of slate k takes the
    argmax over not-yet-chosen items of ``log pi(i|x,t)/tau + g[k, t, i]``.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if K < 1:
        raise ValueError("K must be >= 1")
    single = cube.dim() == 2
    cube3 = cube.unsqueeze(0) if single else cube
    B, L, N = cube3.shape
    if L > N:
        raise ValueError(f"L_out={L} exceeds N_cand={N}")
    with torch.no_grad():
        logp = torch.log_softmax(cube3.detach(), dim=-1)
        noise = torch.as_tensor(gumbel_noise(seed, step, (B, K, L, N), stream), dtype=DTYPE)
        scores = logp.unsqueeze(1) / tau + noise
        slates = masked_argmax_fill(scores, L)
    lp = sequence_log_prob(cube3.detach().unsqueeze(1).expand(B, K, L, N), slates)
    if single:
        slates, lp = slates[0], lp[0]
    return SampledGroup(slates=slates, log_probs=lp)


def duplicate_masked_log_probs(cube: torch.Tensor, slates: torch.Tensor) -> torch.Tensor:
    """Per-position log pi of each slate's item, items placed earlier masked out.

    ``cube`` ``[..., L, N]`` broadcast against ``slates`` ``[..., L]``.
    """
    N = cube.shape[-1]
    onehot = torch.nn.functional.one_hot(slates, N).to(torch.int64)
    seen = (onehot.cumsum(dim=-2) - onehot) > 0
    logp = nk.log_softmax(nk.masked_fill(cube, seen, MASK))
    return nk.gather(logp, slates.unsqueeze(-1)).squeeze(-1)


def sequence_log_prob(cube: torch.Tensor, slate) -> torch.Tensor:
    """Sum over positions of the duplicate-masked log-probabilities."""
    slate = torch.as_tensor(slate, dtype=torch.long)
    if slate.dim() < cube.dim() - 1:
        cube = cube.expand(*slate.shape[:-1], *cube.shape[-2:])
    L = slate.shape[-1]
    return duplicate_masked_log_probs(cube[..., :L, :], slate).sum(dim=-1)
