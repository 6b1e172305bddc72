"""Shared encoder, autoregressive pointer teacher and one-step student.

All three work on batches: contexts ``[B, d_ctx]`` and candidate features
``[B, N, d_item]``.  Teacher and student read the same ``EncoderOutput``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numkit as nk
from .numkit import DTYPE, MASK, ShapeError


# ---------------------------------------------------------------- domain types


@dataclass(frozen=True)
class Context:
    user_vec: np.ndarray
    query_vec: np.ndarray
    history_summary: np.ndarray

    def __post_init__(self):
        for name in ("user_vec", "query_vec", "history_summary"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or not np.isfinite(arr).all():
                raise ValueError(f"Context.{name} must be a finite 1-d vector")
            object.__setattr__(self, name, arr)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.user_vec, self.query_vec, self.history_summary])

    def __eq__(self, other):
        return isinstance(other, Context) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("user_vec", "query_vec", "history_summary")
        )


@dataclass(frozen=True)
class Candidate:
    item_id: int
    feat: np.ndarray

    def __post_init__(self):
        if int(self.item_id) < 0:
            raise ValueError("item_id must be >= 0")
        object.__setattr__(self, "item_id", int(self.item_id))
        object.__setattr__(self, "feat", np.asarray(self.feat, dtype=np.float64))

    def __eq__(self, other):
        return (
            isinstance(other, Candidate)
            and self.item_id == other.item_id
            and np.array_equal(self.feat, other.feat)
        )


@dataclass(frozen=True)
class CandidateList:
    items: tuple[Candidate, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        ids = [c.item_id for c in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("item_id must be unique within a CandidateList")

    def __len__(self) -> int:
        return len(self.items)

    def features(self) -> np.ndarray:
        return np.stack([c.feat for c in self.items])

    def ids(self) -> list[int]:
        return [c.item_id for c in self.items]


@dataclass(frozen=True)
class Slate:
    positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        if len(set(pos)) != len(pos):
            raise ValueError(f"slate has repeated candidates: {pos}")
        if any(p < 0 for p in pos):
            raise ValueError(f"slate index out of range: {pos}")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def check(self, n_cand: int) -> "Slate":
        if any(p >= n_cand for p in self.positions):
            raise ValueError(f"slate index out of range for {n_cand} candidates: {self.positions}")
        return self


@dataclass
class ModelConfig:
    d_user: int = 8
    d_query: int = 8
    d_hist: int = 8
    d_item: int = 8
    n_cand: int = 12
    l_out: int = 6
    d_model: int = 64
    n_heads: int = 2
    d_head: int = 0  # 0 -> d_model // n_heads
    d_ffn: int = 64
    n_enc_layers: int = 2
    n_teacher_layers: int = 2
    n_student_layers: int = 1
    init_scale: float = 0.05

    @property
    def d_ctx(self) -> int:
        return self.d_user + self.d_query + self.d_hist

    @property
    def head_dim(self) -> int:
        return self.d_head or self.d_model // self.n_heads


@dataclass
class EncoderOutput:
    item_states: torch.Tensor  # [B, N, d]
    context_state: torch.Tensor  # [B, d]
    memory: torch.Tensor = field(repr=False)  # [B, 1 + N, d]


# ---------------------------------------------------------------- layers


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_in, d_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x):
        return nk.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return nk.layer_norm(x, self.gain, self.bias)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_head: int):
        super().__init__()
        self.n_heads, self.d_head = n_heads, d_head
        inner = n_heads * d_head
        self.q = Dense(d_model, inner)
        self.k = Dense(d_model, inner)
        self.v = Dense(d_model, inner)
        self.o = Dense(inner, d_model)

    def forward(self, x, mem, blocked=None):
        B, Tq, _ = x.shape
        Tk = mem.shape[1]
        h, dh = self.n_heads, self.d_head
        q = self.q(x).view(B, Tq, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Tk, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Tk, h, dh).transpose(1, 2)
        scores = nk.scale(nk.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(dh))
        if blocked is not None:
            scores = nk.masked_fill(scores, blocked)
        out = nk.matmul(nk.softmax(scores), v)
        return self.o(out.transpose(1, 2).reshape(B, Tq, h * dh))


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, cfg: ModelConfig, cross: bool):
        super().__init__()
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads, cfg.head_dim)
        self.ln_x = LayerNorm(d) if cross else None
        self.cross = Attention(d, cfg.n_heads, cfg.head_dim) if cross else None
        self.ln2 = LayerNorm(d)
        self.ff1 = Dense(d, cfg.d_ffn)
        self.ff2 = Dense(cfg.d_ffn, d)

    def forward(self, x, mem=None, self_blocked=None):
        y = self.ln1(x)
        x = x + self.attn(y, y, self_blocked)
        if self.cross is not None:
            x = x + self.cross(self.ln_x(x), mem)
        return x + self.ff2(nk.gelu(self.ff1(self.ln2(x))))


def _causal(T: int) -> torch.Tensor:
    return torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)


def _prefix_mask(slates: torch.Tensor, n_cand: int) -> torch.Tensor:
    """``mask[b, t, i]`` is True when item i sits at a position < t of slate b."""
    onehot = torch.nn.functional.one_hot(slates, n_cand).to(torch.int64)
    seen = onehot.cumsum(dim=-2) - onehot
    return seen > 0


# ---------------------------------------------------------------- networks


class Encoder(nn.Module):
    """Set encoder: one context token plus one token per candidate, no positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ctx_in = Dense(cfg.d_ctx, cfg.d_model)
        self.item_in = Dense(cfg.d_item, cfg.d_model)
        self.layers = nn.ModuleList([Block(cfg, cross=False) for _ in range(cfg.n_enc_layers)])
        self.ln = LayerNorm(cfg.d_model)

    def forward(self, ctx: torch.Tensor, feats: torch.Tensor) -> EncoderOutput:
        if ctx.dim() != 2 or ctx.shape[-1] != self.cfg.d_ctx:
            raise ShapeError(f"context features: expected [B, {self.cfg.d_ctx}], got {tuple(ctx.shape)}")
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.d_item or feats.shape[0] != ctx.shape[0]:
            raise ShapeError(
                f"candidate features: expected [{ctx.shape[0]}, N, {self.cfg.d_item}], got {tuple(feats.shape)}"
            )
        x = torch.cat([self.ctx_in(ctx).unsqueeze(1), self.item_in(feats)], dim=1)
        for layer in self.layers:
            x = layer(x)
        x = self.ln(x)
        return EncoderOutput(item_states=x[:, 1:], context_state=x[:, 0], memory=x)


class _PointerHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.q = Dense(d, d, bias=False)
        self.k = Dense(d, d, bias=False)
        self.d = d

    def forward(self, h, items):
        # h [B, T, d], items [B, N, d] -> [B, T, N]
        return nk.scale(nk.matmul(self.q(h), self.k(items).transpose(-1, -2)), 1.0 / math.sqrt(self.d))


class Teacher(nn.Module):
    """Autoregressive pointer decoder; one call scores the next position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.start_embed = nn.Parameter(torch.zeros(cfg.d_model, dtype=DTYPE))
        self.step_embed = nn.Parameter(torch.zeros(cfg.l_out, cfg.d_model, dtype=DTYPE))
        self.layers = nn.ModuleList([Block(cfg, cross=True) for _ in range(cfg.n_teacher_layers)])
        self.ln = LayerNorm(cfg.d_model)
        self.pointer = _PointerHead(cfg.d_model)
        self.forward_count = 0

    def _tokens(self, enc: EncoderOutput, prefix: torch.Tensor) -> torch.Tensor:
        B, T = prefix.shape
        d = self.cfg.d_model
        start = self.start_embed.expand(B, 1, d)
        if T:
            idx = prefix.unsqueeze(-1).expand(B, T, d)
            placed = torch.gather(enc.item_states, 1, idx)
            tokens = torch.cat([start, placed], dim=1)
        else:
            tokens = start
        T1 = T + 1
        return tokens + self.step_embed[:T1] + enc.context_state.unsqueeze(1)

    def _decode(self, enc: EncoderOutput, tokens: torch.Tensor) -> torch.Tensor:
        blocked = _causal(tokens.shape[1])
        x = tokens
        for layer in self.layers:
            x = layer(x, enc.memory, blocked)
        return self.pointer(self.ln(x), enc.item_states)

    def forced(self, enc: EncoderOutput, slates: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits ``[B, L, N]`` for every step of ``slates``.

        Row t equals ``step(enc, slates[:, :t])``; computed in one causal pass.
        """
        L = slates.shape[1]
        if L > self.cfg.l_out:
            raise ShapeError(f"slate length {L} exceeds l_out={self.cfg.l_out}")
        self.forward_count += 1
        logits = self._decode(enc, self._tokens(enc, slates[:, : L - 1]))
        return nk.masked_fill(logits, _prefix_mask(slates, logits.shape[-1]))

    def step(self, enc: EncoderOutput, prefix: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, N]`` for the next position given ``prefix`` ``[B, t]``."""
        prefix = torch.as_tensor(prefix, dtype=torch.long)
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0).expand(enc.item_states.shape[0], -1)
        t = prefix.shape[1]
        if t >= self.cfg.l_out:
            raise ValueError(f"prefix length {t} must be < l_out={self.cfg.l_out}")
        srt = prefix.sort(dim=1).values
        if t > 1 and bool((srt[:, 1:] == srt[:, :-1]).any()):
            raise ValueError("prefix contains repeated candidates")
        self.forward_count += 1
        logits = self._decode(enc, self._tokens(enc, prefix))[:, -1]
        if t:
            seen = torch.zeros_like(logits, dtype=torch.bool).scatter(1, prefix, True)
            logits = nk.masked_fill(logits, seen)
        return logits

    def decode_greedy(self, enc: EncoderOutput, length: int | None = None) -> torch.Tensor:
        L = self.cfg.l_out if length is None else length
        B = enc.item_states.shape[0]
        prefix = torch.zeros(B, 0, dtype=torch.long)
        for _ in range(L):
            nxt = self.step(enc, prefix).argmax(dim=-1, keepdim=True)
            prefix = torch.cat([prefix, nxt], dim=1)
        return prefix


class Student(nn.Module):
    """One-pass decoder: learned position queries cross-attend to the items."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_embed = nn.Parameter(torch.zeros(cfg.l_out, cfg.d_model, dtype=DTYPE))
        self.layers = nn.ModuleList([Block(cfg, cross=True) for _ in range(cfg.n_student_layers)])
        self.ln = LayerNorm(cfg.d_model)
        self.pointer = _PointerHead(cfg.d_model)
        self.forward_count = 0

    def forward(self, enc: EncoderOutput) -> torch.Tensor:
        """Logits cube ``[B, L_out, N]`` in a single pass."""
        self.forward_count += 1
        x = self.pos_embed.unsqueeze(0) + enc.context_state.unsqueeze(1)
        blocked = _causal(self.cfg.l_out)
        for layer in self.layers:
            x = layer(x, enc.memory, blocked)
        return self.pointer(self.ln(x), enc.item_states)


class RerankModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.teacher = Teacher(cfg)
        self.student = Student(cfg)
        init_uniform(self, cfg.init_scale, seed)

    def encode(self, ctx, feats) -> EncoderOutput:
        return self.encoder(torch.as_tensor(ctx, dtype=DTYPE), torch.as_tensor(feats, dtype=DTYPE))


def init_uniform(module: nn.Module, scale: float, seed: int) -> None:
    """Seeded uniform(-scale, scale) for weights and embeddings; norms stay at 1/0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if name.endswith(".gain"):
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.uniform_(-scale, scale, generator=gen)


def batch_inputs(contexts: Sequence[Context], cands: Sequence[CandidateList]):
    ctx = torch.as_tensor(np.stack([c.vector() for c in contexts]), dtype=DTYPE)
    feats = torch.as_tensor(np.stack([cl.features() for cl in cands]), dtype=DTYPE)
    return ctx, feats


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DRRCKPT\x00"
_VERSION = 1


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Field-tagged binary: magic, version, JSON header, named little-endian f64 arrays."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(head)), head]
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        bname = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(bname)) + bname)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 12)
    off = 16
    header = json.loads(buf[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return header, arrays


def model_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_model_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {
        k[len(prefix) :]: torch.from_numpy(np.array(v, dtype=np.float64))
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state, strict=True)


def config_dict(cfg) -> dict:
    return asdict(cfg)
