"""scikit-learn style facade over the training loop and the serving path."""

from __future__ import annotations

from typing import Iterable

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .models import CandidateList, Context
from .numkit import DTYPE
from .serving import ServeRequest, serve
from .streamsim import InteractionRecord, RecordBatch, StreamEnv
from .trainloop import TrainConfig, init_state, train_step


def check_requests(X, n_cand: int, d_ctx: int) -> list[tuple[Context, CandidateList]]:
    """Validate ``X`` as a sequence of ``(Context, CandidateList)`` pairs matching the model shape."""
    out = []
    for i, item in enumerate(X):
        if isinstance(item, InteractionRecord):
            item = (item.ctx, item.cands)
        try:
            ctx, cands = item
        except (TypeError, ValueError):
            raise ValueError(f"request {i}: expected a (Context, CandidateList) pair") from None
        if not isinstance(ctx, Context) or not isinstance(cands, CandidateList):
            raise TypeError(f"request {i}: expected a (Context, CandidateList) pair")
        if len(cands) != n_cand:
            raise ValueError(f"request {i}: {len(cands)} candidates, model expects {n_cand}")
        if ctx.vector().size != d_ctx:
            raise ValueError(f"request {i}: context has {ctx.vector().size} features, model expects {d_ctx}")
        out.append((ctx, cands))
    return out


def as_batches(X, batch_size: int) -> Iterable[RecordBatch]:
    if isinstance(X, RecordBatch):
        yield X
        return
    records = list(X)
    if records and isinstance(records[0], RecordBatch):
        yield from records
        return
    for a in range(0, len(records), batch_size):
        yield RecordBatch.from_records(records[a : a + batch_size])


class DualRerank(BaseEstimator):
    """Teacher/student reranker trained online; ``predict`` runs Best-of-N serving.

    ``fit(X)`` accepts a ``StreamEnv`` (trains ``steps`` steps on its stream),
    a ``RecordBatch``, or any iterable of ``InteractionRecord``/``RecordBatch``.
    """

    def __init__(self, steps=200, batch_size=64, group_size=12, mode="ldro", distill=True,
                 n_samples=8, tau=1.0, d_model=64, seed=0, config=None):
        self.steps = steps
        self.batch_size = batch_size
        self.group_size = group_size
        self.mode = mode
        self.distill = distill
        self.n_samples = n_samples
        self.tau = tau
        self.d_model = d_model
        self.seed = seed
        self.config = config

    def _train_config(self, env_cfg=None) -> TrainConfig:
        if self.mode not in ("ldro", "grpo"):
            raise ValueError(f"mode must be 'ldro' or 'grpo', got {self.mode!r}")
        base = self.config or TrainConfig()
        changes = dict(
            total_steps=self.steps, batch_size=self.batch_size, group_size=self.group_size,
            grpo_mode=self.mode == "grpo", no_kd=not self.distill, d_model=self.d_model, seed=self.seed,
        )
        if env_cfg is not None:
            changes.update(
                n_cand=env_cfg.n_cand, l_out=env_cfg.l_out, latent_dim=env_cfg.latent_dim,
                drift_amplitude=env_cfg.drift_amplitude, drift_period=env_cfg.drift_period,
            )
        return base.replace(**changes)

    def fit(self, X, y=None):
        env = X if isinstance(X, StreamEnv) else None
        self.state_ = init_state(self._train_config(env.cfg if env else None))
        self.history_ = []
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "state_"):
            return self.fit(X)
        st = self.state_
        if isinstance(X, StreamEnv):
            batches = (X.next_batch(s, st.cfg.batch_size) for s in range(st.step, st.cfg.total_steps))
        else:
            batches = as_batches(X, st.cfg.batch_size)
        for batch in batches:
            _, metrics = train_step(st, batch)
            self.history_.append(metrics)
        return self

    def transform(self, X) -> np.ndarray:
        """Student logits cubes ``[n, L_out, N_cand]``."""
        check_is_fitted(self, "state_")
        cfg = self.state_.model.cfg
        reqs = check_requests(X, cfg.n_cand, cfg.d_ctx)
        ctx = torch.as_tensor(np.stack([c.vector() for c, _ in reqs]), dtype=DTYPE)
        feats = torch.as_tensor(np.stack([k.features() for _, k in reqs]), dtype=DTYPE)
        with torch.no_grad():
            return self.state_.model.student(self.state_.model.encoder(ctx, feats)).numpy()

    def predict(self, X, relevance=None) -> np.ndarray:
        """Best-of-N slates ``[n, L_out]`` (candidate positions)."""
        check_is_fitted(self, "state_")
        st = self.state_
        reqs = check_requests(X, st.model.cfg.n_cand, st.model.cfg.d_ctx)
        out = []
        for i, (ctx, cands) in enumerate(reqs):
            rel = None if relevance is None else relevance[i]
            req = ServeRequest(ctx=ctx, cands=cands, n=self.n_samples, tau=self.tau, seed=self.seed + i, relevance=rel)
            out.append(serve(req, st.model, st.reward_net, st.cfg.alpha).best.positions)
        return np.asarray(out, dtype=np.int64)
