"""Sample-and-Rank inference and the AR-vs-NAR decoding benchmark."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .models import Candidate, CandidateList, Context, RerankModel, Slate
from .numkit import DTYPE
from .rewards import RewardNet, hybrid_rewards
from .sampler import gumbel_sample_group

DEFAULT_N = 8
SERVE_STREAM = 0x5E7


@dataclass
class ServeRequest:
    ctx: Context
    cands: CandidateList
    n: int = DEFAULT_N
    tau: float = 1.0
    seed: int = 0
    # optional rule-based prior relevance; the prior terms score 0 without it
    relevance: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @classmethod
    def from_json(cls, obj: dict) -> "ServeRequest":
        try:
            c = obj["ctx"]
            ctx = Context(np.asarray(c["user"], float), np.asarray(c["query"], float), np.asarray(c["hist"], float))
            cands = CandidateList(tuple(Candidate(int(d["id"]), np.asarray(d["feat"], float)) for d in obj["cands"]))
        except KeyError as exc:
            raise ValueError(f"missing field {exc.args[0]!r}") from None
        rel = obj.get("relevance")
        return cls(
            ctx=ctx, cands=cands, n=int(obj.get("n", DEFAULT_N)), tau=float(obj.get("tau", 1.0)),
            seed=int(obj.get("seed", 0)), relevance=None if rel is None else np.asarray(rel, float),
        )


@dataclass
class ServeResult:
    best: Slate
    best_score: float
    all_scores: np.ndarray
    forwards_used: int
    wall_time: float
    samples: np.ndarray = field(repr=False, default=None)

    def to_json(self, cands: CandidateList | None = None) -> dict:
        out = {
            "best": list(self.best.positions),
            "best_score": self.best_score,
            "all_scores": [float(s) for s in self.all_scores],
            "forwards_used": self.forwards_used,
            "wall_time": self.wall_time,
        }
        if cands is not None:
            ids = cands.ids()
            out["best_ids"] = [ids[i] for i in self.best.positions]
        return out


def score_slates(net: RewardNet, ctx: torch.Tensor, feats: torch.Tensor, slates: torch.Tensor, relevance, alpha) -> torch.Tensor:
    """Inference-time fused score ``[K]`` of slates ``[K, L]``: reward net plus NDCG priors."""
    rel = None if relevance is None else torch.as_tensor(np.asarray(relevance), dtype=DTYPE).reshape(1, -1)
    r = hybrid_rewards(net, ctx.reshape(1, -1), feats.unsqueeze(0), slates.unsqueeze(0), rel)
    return (r[0] * torch.as_tensor(alpha, dtype=DTYPE)).sum(-1)


def serve(req: ServeRequest, model: RerankModel, reward_net: RewardNet, alpha=(1.0, 1.0, 1.0, 1.0)) -> ServeResult:
    """One student pass, N Gumbel-Max slates, best fused score wins (first index on ties)."""
    t0 = time.perf_counter()
    before = model.student.forward_count
    with torch.no_grad():
        ctx = torch.as_tensor(req.ctx.vector(), dtype=DTYPE)
        feats = torch.as_tensor(req.cands.features(), dtype=DTYPE)
        enc = model.encoder(ctx.unsqueeze(0), feats.unsqueeze(0))
        cube = model.student(enc)[0]
        slates = gumbel_sample_group(cube, req.n, req.tau, req.seed).slates
        scores = score_slates(reward_net, ctx, feats, slates, req.relevance, alpha)
    k = int(torch.argmax(scores))
    return ServeResult(
        best=Slate(tuple(int(i) for i in slates[k])),
        best_score=float(scores[k]),
        all_scores=scores.numpy(),
        forwards_used=model.student.forward_count - before,
        wall_time=time.perf_counter() - t0,
        samples=slates.numpy(),
    )


def serve_batch(model: RerankModel, reward_net: RewardNet, ctx, feats, relevance, n: int, tau: float, seed: int, step: int = 0, alpha=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Best-of-N slates ``[B, L]`` for a whole batch; the closed-loop exposure policy."""
    with torch.no_grad():
        cube = model.student(model.encoder(ctx, feats))
        slates = gumbel_sample_group(cube, n, tau, seed, step, stream=SERVE_STREAM).slates  # [B, n, L]
        r = hybrid_rewards(reward_net, ctx, feats, slates, relevance)
        scores = (r * torch.as_tensor(alpha, dtype=DTYPE)).sum(-1)
    best = scores.argmax(dim=1)
    return slates[torch.arange(slates.shape[0]), best]


def teacher_decode(req: ServeRequest, model: RerankModel) -> tuple[Slate, int, float]:
    """Greedy AR decode of one request: (slate, teacher forwards, seconds)."""
    t0 = time.perf_counter()
    before = model.teacher.forward_count
    with torch.no_grad():
        ctx = torch.as_tensor(req.ctx.vector(), dtype=DTYPE).unsqueeze(0)
        feats = torch.as_tensor(req.cands.features(), dtype=DTYPE).unsqueeze(0)
        slate = model.teacher.decode_greedy(model.encoder(ctx, feats))[0]
    return Slate(tuple(int(i) for i in slate)), model.teacher.forward_count - before, time.perf_counter() - t0


@dataclass
class BenchReport:
    trials: int
    l_out: int
    d_model: int
    n_samples: int
    teacher_forwards: int
    student_forwards: int
    teacher_ms: dict
    student_ms: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    def to_text(self) -> str:
        t, s = self.teacher_ms, self.student_ms
        speed = t["median"] / s["median"] if s["median"] > 0 else float("inf")
        return "\n".join([
            f"decoding benchmark: {self.trials} trials, L_out={self.l_out}, d_model={self.d_model}, N={self.n_samples}",
            f"  teacher greedy   forwards={self.teacher_forwards:<3d} median={t['median']:.3f}ms p99={t['p99']:.3f}ms",
            f"  student serve    forwards={self.student_forwards:<3d} median={s['median']:.3f}ms p99={s['p99']:.3f}ms",
            f"  median speedup   {speed:.2f}x",
        ])


def _summary(times) -> dict:
    ms = np.asarray(times) * 1e3
    return {"median": float(np.median(ms)), "p99": float(np.percentile(ms, 99)), "mean": float(ms.mean())}


def random_request(rng: np.random.Generator, cfg, n: int = DEFAULT_N, seed: int = 0) -> ServeRequest:
    ctx = Context(rng.standard_normal(cfg.d_user), rng.standard_normal(cfg.d_query), rng.standard_normal(cfg.d_hist))
    cands = CandidateList(tuple(Candidate(i, rng.standard_normal(cfg.d_item)) for i in range(cfg.n_cand)))
    return ServeRequest(ctx=ctx, cands=cands, n=n, seed=seed)


def bench_decoding(model: RerankModel, reward_net: RewardNet, trials: int = 1000, n: int = DEFAULT_N, seed: int = 0) -> BenchReport:
    """Time teacher greedy decode against full ``serve`` on identical random requests."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    t_times, s_times, t_fw, s_fw = [], [], set(), set()
    for i in range(trials):
        req = random_request(rng, cfg, n=n, seed=i)
        # alternate order so warm caches don't favor one path
        if i % 2:
            res = serve(req, model, reward_net)
            _, fw, dt = teacher_decode(req, model)
        else:
            _, fw, dt = teacher_decode(req, model)
            res = serve(req, model, reward_net)
        t_times.append(dt)
        s_times.append(res.wall_time)
        t_fw.add(fw)
        s_fw.add(res.forwards_used)
    if len(t_fw) != 1 or len(s_fw) != 1:
        raise RuntimeError(f"forward counts varied across trials: teacher {t_fw}, student {s_fw}")
    return BenchReport(
        trials=trials, l_out=cfg.l_out, d_model=cfg.d_model, n_samples=n,
        teacher_forwards=t_fw.pop(), student_forwards=s_fw.pop(),
        teacher_ms=_summary(t_times), student_ms=_summary(s_times),
    )
