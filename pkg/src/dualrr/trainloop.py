"""Joint online teacher/student training on the interaction stream."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call

from . import numkit as nk
from .models import (
    ModelConfig,
    RerankModel,
    _prefix_mask,
    load_checkpoint,
    load_model_arrays,
    model_arrays,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    assemble_total,
    bpr_loss_batched,
    kd_loss,
    ldro_loss,
    mle_loss,
    rank_weights,
    regularizers,
)
from .rewards import OBJECTIVES, RewardNet, double_decouple, fuse, hybrid_rewards
from .sampler import gumbel_sample_group, masked_argmax_fill
from .streamsim import EnvConfig, RecordBatch, StreamEnv, enumerate_slates

log = logging.getLogger(__name__)

LOSS_FIELDS = ("mle", "bpr", "kd", "ldro", "kl_penalty", "entropy_bonus", "total")
RING = 256


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {json.dumps(breakdown)}")
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    seed: int = 0
    total_steps: int = 200
    batch_size: int = 64
    group_size: int = 12
    lambda_kd: float = 1.0
    lambda_rl: float = 0.5
    lambda_bpr: float = 1.0
    beta_kl: float = 0.02
    beta_ent: float = 0.05
    tau_sample: float = 0.8
    tau_distill: float = 1.0
    k_viewport: int = 4
    delta_score: float = 0.5
    warmup_frac: float = 0.1
    alpha_pctr: float = 1.0
    alpha_plvr: float = 1.0
    alpha_ndcg4: float = 1.0
    alpha_ndcg8: float = 1.0
    lr_dense: float = 1e-3
    lr_embed: float = 1e-3
    momentum: float = 0.9
    adagrad_init: float = 3.0
    grad_clip: float = 5.0
    lr_reward: float = 0.05
    reward_hidden: int = 16
    no_kd: bool = False
    grpo_mode: bool = False
    no_rank_weight: bool = False
    no_batch_decouple: bool = False
    closed_loop: bool = True
    serve_samples: int = 8
    serve_tau: float = 1.0
    # model
    d_model: int = 64
    n_heads: int = 2
    d_head: int = 0
    d_ffn: int = 64
    n_enc_layers: int = 2
    n_teacher_layers: int = 2
    n_student_layers: int = 1
    init_scale: float = 0.05
    # environment
    n_cand: int = 12
    l_out: int = 6
    latent_dim: int = 8
    drift_amplitude: float = 0.5
    drift_period: int = 2000
    examination_decay: float = 0.85
    base_rate: float = 0.3
    utility_scale: float = 2.0
    utility_shift: float = 0.0
    logging_policy: str = "plackett_luce"
    logging_temperature: float = 0.5
    # bookkeeping
    eval_every: int = 100
    eval_size: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        for name in ("lambda_kd", "lambda_rl", "lambda_bpr", "beta_kl", "beta_ent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau_sample <= 0 or self.tau_distill <= 0:
            raise ValueError("temperatures must be > 0")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")

    @property
    def mode(self) -> str:
        return "grpo" if (self.grpo_mode or self.no_batch_decouple) else "ldro"

    @property
    def alpha(self) -> tuple[float, float, float, float]:
        return (self.alpha_pctr, self.alpha_plvr, self.alpha_ndcg4, self.alpha_ndcg8)

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_frac * self.total_steps))

    def model_config(self) -> ModelConfig:
        k = self.latent_dim
        return ModelConfig(
            d_user=k, d_query=k, d_hist=k, d_item=k,
            n_cand=self.n_cand, l_out=self.l_out, d_model=self.d_model,
            n_heads=self.n_heads, d_head=self.d_head, d_ffn=self.d_ffn,
            n_enc_layers=self.n_enc_layers, n_teacher_layers=self.n_teacher_layers,
            n_student_layers=self.n_student_layers, init_scale=self.init_scale,
        )

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            n_cand=self.n_cand, l_out=self.l_out, latent_dim=self.latent_dim,
            drift_amplitude=self.drift_amplitude, drift_period=self.drift_period,
            seed=self.seed, examination_decay=self.examination_decay,
            base_rate=self.base_rate, utility_scale=self.utility_scale,
            utility_shift=self.utility_shift, logging_policy=self.logging_policy,
            logging_temperature=self.logging_temperature,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ------------------------------------------------------------------ config I/O

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, types[key], raw)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


# ------------------------------------------------------------------ optimizer


class SplitOptimizer:
    """Adagrad for embedding tables, heavy-ball momentum for dense weights."""

    def __init__(self, named_params: dict[str, torch.nn.Parameter], lr_dense, lr_embed, momentum, adagrad_init):
        self.params = named_params
        self.lr_dense, self.lr_embed = lr_dense, lr_embed
        self.momentum, self.adagrad_init = momentum, adagrad_init
        self.state = {
            name: torch.full_like(p, adagrad_init) if self.is_embedding(name) else torch.zeros_like(p)
            for name, p in named_params.items()
        }

    @staticmethod
    def is_embedding(name: str) -> bool:
        return name.endswith("_embed")

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            buf = self.state[name]
            if self.is_embedding(name):
                buf.add_(g * g)
                p.sub_(self.lr_embed * g / buf.sqrt())
            else:
                buf.mul_(self.momentum).add_(g)
                p.sub_(self.lr_dense * buf)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class MomentumSGD(SplitOptimizer):
    def __init__(self, named_params, lr, momentum):
        super().__init__(named_params, lr, lr, momentum, 0.0)

    @staticmethod
    def is_embedding(name: str) -> bool:
        return False


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    cfg: TrainConfig
    model: RerankModel
    reward_net: RewardNet
    opt: SplitOptimizer
    reward_opt: MomentumSGD
    step: int = 0
    rings: dict = field(default_factory=dict)

    def ring(self, name: str) -> deque:
        return self.rings.setdefault(name, deque(maxlen=RING))


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = RerankModel(cfg.model_config(), seed=cfg.seed)
    k = cfg.latent_dim
    net = RewardNet(3 * k, k, cfg.l_out, hidden=cfg.reward_hidden, seed=cfg.seed + 1)
    opt = SplitOptimizer(dict(model.named_parameters()), cfg.lr_dense, cfg.lr_embed, cfg.momentum, cfg.adagrad_init)
    ropt = MomentumSGD(dict(net.named_parameters()), cfg.lr_reward, cfg.momentum)
    return TrainState(cfg=cfg, model=model, reward_net=net, opt=opt, reward_opt=ropt)


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = model_arrays(state.model, "model/")
    arrays.update(model_arrays(state.reward_net, "reward/"))
    arrays.update({f"opt/{k}": v.numpy().copy() for k, v in state.opt.state.items()})
    arrays.update({f"ropt/{k}": v.numpy().copy() for k, v in state.reward_opt.state.items()})
    arrays.update({f"ring/{k}": np.asarray(list(v), dtype=np.float64) for k, v in state.rings.items()})
    return arrays


def save_state(state: TrainState, path) -> None:
    header = {"kind": "dualrr-train-state", "step": state.step, "config": dataclasses.asdict(state.cfg)}
    save_checkpoint(path, header, state_arrays(state))


def load_state(path, cfg: TrainConfig | None = None) -> TrainState:
    header, arrays = load_checkpoint(path)
    saved = TrainConfig(**header["config"])
    cfg = cfg or saved
    state = init_state(saved if cfg.model_config() != saved.model_config() else cfg)
    load_model_arrays(state.model, arrays, "model/")
    load_model_arrays(state.reward_net, arrays, "reward/")
    for prefix, opt in (("opt/", state.opt), ("ropt/", state.reward_opt)):
        for k in opt.state:
            opt.state[k] = torch.from_numpy(arrays[prefix + k].copy())
    for k, v in arrays.items():
        if k.startswith("ring/"):
            state.ring(k[5:]).extend(v.tolist())
    state.step = int(header["step"])
    return state


# ------------------------------------------------------------------ one step


def feedback_scores(batch: RecordBatch) -> torch.Tensor:
    return 1.0 * batch.clicks + 2.0 * batch.long_views + 0.1 * batch.exposure


def preference_pairs(batch: RecordBatch, delta_score: float):
    """Index tensors (rows, winners, losers) over every record's exposed items."""
    s = feedback_scores(batch)
    gap = s.unsqueeze(2) - s.unsqueeze(1)  # [B, L, L]
    b, i, j = torch.nonzero(gap > delta_score, as_tuple=True)
    return b, batch.exposed[b, i], batch.exposed[b, j]


@dataclass
class RLInputs:
    """Everything the RL term needs that does not depend on policy parameters."""

    group: torch.Tensor  # [B, G, L]
    advantages: torch.Tensor  # [B, G] fused
    rewards: torch.Tensor  # [B, G, M]
    adv: object


def sample_rl_inputs(state: TrainState, batch: RecordBatch, cube: torch.Tensor) -> RLInputs:
    cfg = state.cfg
    group = gumbel_sample_group(cube.detach(), cfg.group_size, cfg.tau_sample, cfg.seed, state.step).slates
    group = group.clone()
    group[:, 0] = batch.exposed
    rewards = hybrid_rewards(
        state.reward_net, batch.ctx, batch.feats, group, batch.relevance,
        posterior=(batch.clicks, batch.long_views),
    )
    adv = double_decouple(rewards, mode=cfg.mode)
    return RLInputs(group=group, advantages=fuse(adv, cfg.alpha), rewards=rewards, adv=adv)


def effective_weights(cfg: TrainConfig, step: int) -> dict:
    lam_rl = 0.0 if step < cfg.warmup_steps else cfg.lambda_rl
    return dict(
        lam_bpr=cfg.lambda_bpr,
        lam_kd=0.0 if cfg.no_kd else cfg.lambda_kd,
        lam_rl=lam_rl,
        beta_kl=cfg.beta_kl,
        beta_ent=cfg.beta_ent,
    )


def compute_losses(model: RerankModel, batch: RecordBatch, cfg: TrainConfig, rl: RLInputs, weights: dict, pairs=None, targets=None):
    """Every loss term and the weighted total, as tensors.

    ``targets`` pins the stop-gradient teacher distributions used by the KD and
    KL terms to fixed logits; by default they are this pass's teacher logits.
    """
    enc = model.encoder(batch.ctx, batch.feats)
    t_logits = model.teacher.forced(enc, batch.exposed)
    cube = model.student(enc)
    targets = t_logits if targets is None else targets
    B = len(batch)
    mle = mle_loss(t_logits, batch.exposed)
    rows, win, lose = pairs if pairs is not None else preference_pairs(batch, cfg.delta_score)
    bpr = bpr_loss_batched(t_logits[:, 0, :], win, lose, rows, B)
    kd = kd_loss(targets, cube, cfg.tau_distill)
    w = rank_weights(batch.exposed.shape[1], cfg.k_viewport, enabled=not cfg.no_rank_weight)
    ldro = ldro_loss(cube, rl.group, rl.advantages, cfg.k_viewport, weights=w)
    kl, ent = regularizers(cube, targets, _prefix_mask(batch.exposed, cube.shape[-1]))
    terms = dict(mle=mle, bpr=bpr, kd=kd, ldro=ldro, kl_penalty=kl, entropy_bonus=ent)
    total = assemble_total(**terms, **weights)
    return total, terms, cube


def train_step(state: TrainState, batch: RecordBatch) -> tuple[LossBreakdown, dict]:
    """One online step: teacher, distillation and RL terms, one joint update."""
    cfg, model = state.cfg, state.model
    weights = effective_weights(cfg, state.step)

    with torch.no_grad():
        cube0 = model.student(model.encoder(batch.ctx, batch.feats))
    rl = sample_rl_inputs(state, batch, cube0)

    total, terms, _ = compute_losses(model, batch, cfg, rl, weights)
    values = {k: float(v.detach()) for k, v in terms.items()}
    values["total"] = float(total.detach())
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(state.step, values)

    state.opt.zero_grad()
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(list(state.opt.params.values()), cfg.grad_clip)
    state.opt.step()

    # the reward net is scored before this update and never sees policy gradients
    state.reward_opt.zero_grad()
    rloss = state.reward_net.fit_loss(batch.ctx, batch.feats, batch.exposed, batch.clicks, batch.long_views)
    rloss.backward()
    state.reward_opt.step()

    fused_raw = (rl.rewards * torch.as_tensor(cfg.alpha, dtype=nk.DTYPE)).sum(-1)
    metrics = {
        "step": state.step,
        **{k: values[k] for k in LOSS_FIELDS},
        "lambda_rl": weights["lam_rl"],
        "mean_group_reward": float(fused_raw.mean()),
        "reward_net_loss": float(rloss.detach()),
        "base_rate": StreamEnv(cfg.env_config()).base(state.step),
    }
    bs = rl.adv.batch_stage
    for m, name in enumerate(OBJECTIVES):
        metrics[f"reward_mean/{name}"] = float(rl.rewards[..., m].mean())
        metrics[f"adv_mean/{name}"] = float(bs[..., m].mean())
        metrics[f"adv_std/{name}"] = float(bs[..., m].std(unbiased=False))
    state.ring("mean_group_reward").append(metrics["mean_group_reward"])
    state.step += 1
    return LossBreakdown(**values), metrics


# ------------------------------------------------------------------ evaluation


def exposure_policy(state: TrainState):
    """Closed-loop exposure: the current student served Best-of-N, as in deployment."""
    from .serving import serve_batch

    cfg = state.cfg

    def policy(ctx, feats, relevance):
        return serve_batch(state.model, state.reward_net, ctx, feats, relevance,
                           cfg.serve_samples, cfg.serve_tau, cfg.seed, state.step, cfg.alpha)

    return policy


def greedy_student_slates(model: RerankModel, ctx, feats) -> torch.Tensor:
    with torch.no_grad():
        cube = model.student(model.encoder(ctx, feats))
    return masked_argmax_fill(cube, cube.shape[1])


def evaluate(state: TrainState, eval_batch: RecordBatch, env: StreamEnv) -> dict:
    """PTAR, RFR, NDCG and (when enumerable) reward ratio against the oracle."""
    from .metrics import mean_rfr, ptar_from_logits

    model = state.model
    with torch.no_grad():
        enc = model.encoder(eval_batch.ctx, eval_batch.feats)
        t_logits = model.teacher.forced(enc, eval_batch.exposed)
        cube = model.student(enc)
    out = {
        "eval/ptar": ptar_from_logits(t_logits, cube, eval_batch.exposed),
        "eval/rfr": mean_rfr(t_logits[:, 0], cube[:, 0]),
    }
    slates = masked_argmax_fill(cube, cube.shape[1])
    from .rewards import batch_ndcg

    L = slates.shape[1]
    out["eval/ndcg"] = float(batch_ndcg(slates.unsqueeze(1), eval_batch.relevance, L).mean())
    cfg = env.cfg
    if cfg.n_cand <= 10 and cfg.l_out <= 5:
        every = enumerate_slates(cfg.n_cand, cfg.l_out)
        got, best = [], []
        alpha = state.cfg.alpha
        for b in range(len(eval_batch)):
            c, f = eval_batch.ctx[b].numpy(), eval_batch.feats[b].numpy()
            best.append(env.expected_fused(c, f, every, alpha).max())
            got.append(env.expected_fused(c, f, slates[b : b + 1].numpy(), alpha)[0])
        out["eval/oracle_ratio"] = float(np.mean(got) / np.mean(best))
    return out


# ------------------------------------------------------------------ run


def _dump(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True)


def run(cfg: TrainConfig, out_dir, resume_from=None) -> TrainState:
    """Train for ``cfg.total_steps`` steps; writes ``metrics.jsonl`` and checkpoints under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_state(resume_from, cfg) if resume_from else init_state(cfg)
    if resume_from:
        state.cfg = cfg
    env = StreamEnv(cfg.env_config())
    eval_batch = env.eval_batch(cfg.eval_size) if cfg.eval_every else None
    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume_from else "w"
    try:
        save_state(state, out / f"ckpt_{state.step:07d}.bin")
    except OSError as exc:
        raise RuntimeError(f"checkpoint write failed: {exc}") from exc
    policy = exposure_policy(state) if cfg.closed_loop else None
    with open(metrics_path, mode, encoding="utf-8") as fh:
        while state.step < cfg.total_steps:
            batch = env.next_batch(state.step, cfg.batch_size, policy if state.step >= cfg.warmup_steps else None)
            _, metrics = train_step(state, batch)
            if eval_batch is not None and state.step % cfg.eval_every == 0:
                metrics.update(evaluate(state, eval_batch, env))
            fh.write(_dump(metrics) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / f"ckpt_{state.step:07d}.bin")
            if state.step % 100 == 0:
                log.info("step %d total=%.4f reward=%.4f", state.step, metrics["total"], metrics["mean_group_reward"])
    try:
        save_state(state, out / "final.bin")
    except OSError as exc:
        raise RuntimeError(f"checkpoint write failed: {exc}") from exc
    return state


class _LossHarness(torch.nn.Module):
    """Exposes the total loss as ``forward`` so ``functional_call`` can swap parameters."""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, batch, cfg, rl, weights, pairs, targets):
        return compute_losses(self.model, batch, cfg, rl, weights, pairs, targets)[0]


def flat_params(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def loss_along_directions(state: TrainState, batch: RecordBatch, rl: RLInputs, directions: list[dict], weights=None):
    """Closure ``f(c) = total_loss(theta + sum_k c_k d_k)`` for directional grad checks.

    Stop-gradient teacher targets are frozen at ``theta`` so that finite
    differences see the same surrogate that backprop differentiates.
    """
    cfg = state.cfg
    harness = _LossHarness(state.model)
    base = flat_params(state.model)
    weights = weights or effective_weights(cfg, state.step)
    pairs = preference_pairs(batch, cfg.delta_score)
    with torch.no_grad():
        targets = state.model.teacher.forced(state.model.encoder(batch.ctx, batch.feats), batch.exposed)

    def f(c: torch.Tensor) -> torch.Tensor:
        params = {"model." + k: base[k] + sum(c[i] * d[k] for i, d in enumerate(directions)) for k in base}
        return functional_call(harness, params, (batch, cfg, rl, weights, pairs, targets))

    return f
