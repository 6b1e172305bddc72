"""Synthetic non-stationary interaction stream with a known cascade user model.

Click model per exposed position t (1-based) of item i::

    P(examine t)        = d ** (t - 1)          (examination is a prefix)
    P(click | examine)  = base(step) * sigmoid(u_i)
    P(long_view | click) = sigmoid(u_i - 1)
    base(step)          = b0 * (1 + a * sin(2 pi step / period))

``u_i`` is a bilinear function of context and item features, so the
optimal slate is recoverable from the model inputs.  ``sigmoid(u_i)`` is
also exposed as the relevance side channel used by NDCG priors.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .models import Candidate, CandidateList, Context, Slate
from .numkit import DTYPE
from .objectives import FeedbackFlags
from .rewards import NDCG_CUTOFFS, prior_ndcg

ENV_STREAM = 0xE17
EVAL_STREAM = 0xE7A1
LOGGING_STREAM = 0x109


@dataclass
class EnvConfig:
    n_cand: int = 12
    l_out: int = 6
    latent_dim: int = 8
    drift_amplitude: float = 0.5
    drift_period: int = 2000
    seed: int = 0
    examination_decay: float = 0.85
    base_rate: float = 0.3
    utility_scale: float = 2.0
    utility_shift: float = 0.0
    logging_policy: str = "plackett_luce"  # or "uniform"
    logging_temperature: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.drift_amplitude < 1.0:
            raise ValueError("drift_amplitude must lie in [0, 1)")
        if not 0.0 < self.base_rate * (1 + self.drift_amplitude) < 1.0:
            raise ValueError("drift must keep base rates inside (0, 1)")
        if self.l_out > self.n_cand:
            raise ValueError("l_out cannot exceed n_cand")
        if not 0.0 <= self.examination_decay <= 1.0:
            raise ValueError("examination_decay must lie in [0, 1]")
        if self.logging_policy not in ("plackett_luce", "uniform"):
            raise ValueError(f"unknown logging policy {self.logging_policy!r}")


@dataclass
class InteractionRecord:
    ctx: Context
    cands: CandidateList
    exposed: Slate
    feedback: tuple[FeedbackFlags, ...]
    step: int
    true_relevance: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.exposed.check(len(self.cands))
        if len(self.feedback) != len(self.exposed):
            raise ValueError("feedback length must match the exposed slate")
        self.true_relevance = np.asarray(self.true_relevance, dtype=np.float64)

    def __eq__(self, other):
        return (
            isinstance(other, InteractionRecord)
            and self.ctx == other.ctx
            and self.cands == other.cands
            and self.exposed == other.exposed
            and self.feedback == other.feedback
            and self.step == other.step
            and np.array_equal(self.true_relevance, other.true_relevance)
        )


@dataclass
class RecordBatch:
    """Column view of a batch of records, ready for the models."""

    ctx: torch.Tensor  # [B, d_ctx]
    feats: torch.Tensor  # [B, N, d_item]
    exposed: torch.Tensor  # [B, L] long
    exposure: torch.Tensor  # [B, L] float 0/1
    clicks: torch.Tensor
    long_views: torch.Tensor
    relevance: torch.Tensor  # [B, N]
    steps: np.ndarray  # [B]
    ids: np.ndarray  # [B, N]
    d_user: int
    d_query: int

    def __len__(self):
        return self.ctx.shape[0]

    def records(self) -> list[InteractionRecord]:
        out = []
        du, dq = self.d_user, self.d_query
        for b in range(len(self)):
            c = self.ctx[b].numpy()
            ctx = Context(c[:du], c[du : du + dq], c[du + dq :])
            cands = CandidateList(tuple(Candidate(int(i), f) for i, f in zip(self.ids[b], self.feats[b].numpy())))
            fb = tuple(
                FeedbackFlags(bool(e), bool(c_), bool(l_))
                for e, c_, l_ in zip(self.exposure[b].tolist(), self.clicks[b].tolist(), self.long_views[b].tolist())
            )
            out.append(
                InteractionRecord(ctx, cands, Slate(tuple(self.exposed[b].tolist())), fb, int(self.steps[b]), self.relevance[b].numpy().copy())
            )
        return out

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord]) -> "RecordBatch":
        if not records:
            raise ValueError("empty record batch")
        r0 = records[0]
        return cls(
            ctx=torch.as_tensor(np.stack([r.ctx.vector() for r in records]), dtype=DTYPE),
            feats=torch.as_tensor(np.stack([r.cands.features() for r in records]), dtype=DTYPE),
            exposed=torch.as_tensor([list(r.exposed.positions) for r in records], dtype=torch.long),
            exposure=torch.as_tensor([[float(f.exposure) for f in r.feedback] for r in records], dtype=DTYPE),
            clicks=torch.as_tensor([[float(f.click) for f in r.feedback] for r in records], dtype=DTYPE),
            long_views=torch.as_tensor([[float(f.long_view) for f in r.feedback] for r in records], dtype=DTYPE),
            relevance=torch.as_tensor(np.stack([r.true_relevance for r in records]), dtype=DTYPE),
            steps=np.array([r.step for r in records], dtype=np.int64),
            ids=np.array([r.cands.ids() for r in records], dtype=np.int64),
            d_user=len(r0.ctx.user_vec),
            d_query=len(r0.ctx.query_vec),
        )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class StreamEnv:
    """Seeded generator of interaction batches; batch ``step`` depends only on ``(seed, step)``."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg

    @property
    def d_ctx(self) -> int:
        return 3 * self.cfg.latent_dim

    def base(self, step: int) -> float:
        c = self.cfg
        return c.base_rate * (1.0 + c.drift_amplitude * math.sin(2.0 * math.pi * step / c.drift_period))

    def utilities(self, ctx_vec: np.ndarray, feats: np.ndarray) -> np.ndarray:
        """Latent utilities ``u`` for ``ctx_vec`` ``[..., 3k]`` and ``feats`` ``[..., N, k]``."""
        k = self.cfg.latent_dim
        pref = ctx_vec[..., :k] + ctx_vec[..., k : 2 * k]
        z = np.einsum("...k,...nk->...n", pref, feats) / math.sqrt(2 * k)
        return self.cfg.utility_scale * z + self.cfg.utility_shift

    def relevance(self, ctx_vec, feats) -> np.ndarray:
        return _sigmoid(self.utilities(ctx_vec, feats))

    def _draw_inputs(self, rng: np.random.Generator, B: int):
        c = self.cfg
        k = c.latent_dim
        user = rng.standard_normal((B, k))
        query = rng.standard_normal((B, k))
        hist = user + 0.3 * rng.standard_normal((B, k))
        feats = rng.standard_normal((B, c.n_cand, k))
        return np.concatenate([user, query, hist], axis=1), feats

    def logging_slates(self, rng: np.random.Generator, u: np.ndarray) -> np.ndarray:
        c = self.cfg
        if c.logging_policy == "uniform":
            keys = rng.random(u.shape)
        else:
            keys = u / c.logging_temperature + rng.gumbel(size=u.shape)
        return np.argsort(-keys, axis=-1, kind="stable")[:, : c.l_out]

    def _feedback(self, rng: np.random.Generator, u_slate: np.ndarray, step: int):
        c = self.cfg
        B, L = u_slate.shape
        cont = rng.random((B, L)) < c.examination_decay
        cont[:, 0] = True
        exposure = np.cumprod(cont, axis=1).astype(bool)
        clicks = exposure & (rng.random((B, L)) < self.base(step) * _sigmoid(u_slate))
        lvs = clicks & (rng.random((B, L)) < _sigmoid(u_slate - 1.0))
        return exposure, clicks, lvs

    def next_batch(self, step: int, B: int, policy: Callable | None = None) -> RecordBatch:
        """Batch for ``step``.  ``policy(ctx, feats, relevance) -> [B, L]`` closes the loop; default is the logging policy."""
        c = self.cfg
        rng = np.random.default_rng([c.seed, ENV_STREAM, int(step)])
        ctx, feats = self._draw_inputs(rng, B)
        u = self.utilities(ctx, feats)
        log_rng = np.random.default_rng([c.seed, LOGGING_STREAM, int(step)])
        if policy is None:
            exposed = self.logging_slates(log_rng, u)
        else:
            exposed = np.asarray(policy(
                torch.as_tensor(ctx, dtype=DTYPE), torch.as_tensor(feats, dtype=DTYPE), torch.as_tensor(_sigmoid(u), dtype=DTYPE)
            ))
        u_slate = np.take_along_axis(u, exposed, axis=1)
        exposure, clicks, lvs = self._feedback(rng, u_slate, step)
        N = c.n_cand
        ids = (np.int64(step) * B + np.arange(B, dtype=np.int64))[:, None] * N + np.arange(N, dtype=np.int64)
        return RecordBatch(
            ctx=torch.as_tensor(ctx, dtype=DTYPE),
            feats=torch.as_tensor(feats, dtype=DTYPE),
            exposed=torch.as_tensor(exposed, dtype=torch.long),
            exposure=torch.as_tensor(exposure, dtype=DTYPE),
            clicks=torch.as_tensor(clicks, dtype=DTYPE),
            long_views=torch.as_tensor(lvs, dtype=DTYPE),
            relevance=torch.as_tensor(_sigmoid(u), dtype=DTYPE),
            steps=np.full(B, step, dtype=np.int64),
            ids=ids,
            d_user=c.latent_dim,
            d_query=c.latent_dim,
        )

    def eval_batch(self, n: int, tag: int = 0) -> RecordBatch:
        """Held-out records drawn from a stream disjoint from training steps."""
        c = self.cfg
        rng = np.random.default_rng([c.seed, EVAL_STREAM, int(tag)])
        ctx, feats = self._draw_inputs(rng, n)
        u = self.utilities(ctx, feats)
        exposed = self.logging_slates(rng, u)
        exposure, clicks, lvs = self._feedback(rng, np.take_along_axis(u, exposed, axis=1), 0)
        N = c.n_cand
        return RecordBatch(
            ctx=torch.as_tensor(ctx, dtype=DTYPE),
            feats=torch.as_tensor(feats, dtype=DTYPE),
            exposed=torch.as_tensor(exposed, dtype=torch.long),
            exposure=torch.as_tensor(exposure, dtype=DTYPE),
            clicks=torch.as_tensor(clicks, dtype=DTYPE),
            long_views=torch.as_tensor(lvs, dtype=DTYPE),
            relevance=torch.as_tensor(_sigmoid(u), dtype=DTYPE),
            steps=np.full(n, -1, dtype=np.int64),
            ids=np.arange(n * N, dtype=np.int64).reshape(n, N),
            d_user=c.latent_dim,
            d_query=c.latent_dim,
        )

    # -------------------------------------------------------------- oracle

    def expected_rewards(self, ctx_vec, feats, slates: np.ndarray, step: int = 0) -> np.ndarray:
        """Exact expected reward vectors ``[S, 4]`` for slates ``[S, L]`` of one context."""
        c = self.cfg
        u = self.utilities(np.asarray(ctx_vec), np.asarray(feats))
        rel = _sigmoid(u)
        slates = np.asarray(slates)
        L = slates.shape[1]
        exam = c.examination_decay ** np.arange(L)
        p_click = self.base(step) * rel[slates] * exam
        ctr = p_click.mean(axis=1)
        lvr = (p_click * _sigmoid(u[slates] - 1.0)).mean(axis=1)
        cols = [ctr, lvr]
        ideal = np.sort(rel)[::-1]
        for k in NDCG_CUTOFFS:
            k = min(k, L)
            disc = 1.0 / np.log2(np.arange(2, k + 2))
            idcg = float((ideal[:k] * disc).sum())
            dcg = (rel[slates[:, :k]] * disc).sum(axis=1)
            cols.append(dcg / idcg if idcg > 0 else np.zeros_like(dcg))
        return np.stack(cols, axis=1)

    def expected_fused(self, ctx_vec, feats, slates, alpha=(1.0, 1.0, 1.0, 1.0), step: int = 0) -> np.ndarray:
        return self.expected_rewards(ctx_vec, feats, slates, step) @ np.asarray(alpha, dtype=np.float64)


def enumerate_slates(n_cand: int, l_out: int) -> np.ndarray:
    """All ordered ``l_out``-permutations of ``range(n_cand)`` in lexicographic order."""
    return np.array(list(itertools.permutations(range(n_cand), l_out)), dtype=np.int64)


def oracle_best_slate(ctx: Context | np.ndarray, cands: CandidateList | np.ndarray, env: StreamEnv, alpha=(1.0, 1.0, 1.0, 1.0), step: int = 0) -> tuple[Slate, float]:
    """Exhaustive argmax of expected fused reward; ties go to the lexicographically smallest slate."""
    ctx_vec = ctx.vector() if isinstance(ctx, Context) else np.asarray(ctx)
    feats = cands.features() if isinstance(cands, CandidateList) else np.asarray(cands)
    n, L = feats.shape[0], env.cfg.l_out
    if n > 10 or L > 5:
        raise ValueError(f"enumeration bound exceeded: N_cand={n} (<=10), L_out={L} (<=5)")
    slates = enumerate_slates(n, L)
    vals = env.expected_fused(ctx_vec, feats, slates, alpha, step)
    best = int(np.argmax(vals))  # first maximum == lexicographically smallest
    return Slate(tuple(slates[best].tolist())), float(vals[best])


# ------------------------------------------------------------------ JSONL I/O


def record_to_json(r: InteractionRecord) -> dict:
    return {
        "step": int(r.step),
        "ctx": {
            "user": r.ctx.user_vec.tolist(),
            "query": r.ctx.query_vec.tolist(),
            "hist": r.ctx.history_summary.tolist(),
        },
        "cands": [{"id": c.item_id, "feat": c.feat.tolist()} for c in r.cands.items],
        "exposed": list(r.exposed.positions),
        "feedback": [{"exposure": f.exposure, "click": f.click, "long_view": f.long_view} for f in r.feedback],
        "relevance": r.true_relevance.tolist(),
    }


class LogFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def record_from_json(obj: dict) -> InteractionRecord:
    for key in ("step", "ctx", "cands", "exposed", "feedback", "relevance"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    ctx = obj["ctx"]
    for key in ("user", "query", "hist"):
        if key not in ctx:
            raise ValueError(f"missing field 'ctx.{key}'")
    cands = CandidateList(tuple(Candidate(int(c["id"]), c["feat"]) for c in obj["cands"]))
    exposed = [int(i) for i in obj["exposed"]]
    if any(i < 0 or i >= len(cands) for i in exposed):
        raise ValueError(f"exposed index out of range for {len(cands)} candidates")
    feedback = tuple(FeedbackFlags(bool(f["exposure"]), bool(f["click"]), bool(f["long_view"])) for f in obj["feedback"])
    return InteractionRecord(
        ctx=Context(ctx["user"], ctx["query"], ctx["hist"]),
        cands=cands,
        exposed=Slate(tuple(exposed)),
        feedback=feedback,
        step=int(obj["step"]),
        true_relevance=np.asarray(obj["relevance"], dtype=np.float64),
    )


def write_log(path, records: Sequence[InteractionRecord], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r)) + "\n")


def ingest_log(path) -> Iterator[InteractionRecord]:
    """Validated records in file order; a bad line raises ``LogFormatError`` naming it."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield record_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise LogFormatError(lineno, str(exc)) from exc


def env_config_dict(cfg: EnvConfig) -> dict:
    return asdict(cfg)
