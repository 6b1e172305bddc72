"""Checked float64 tensor primitives on top of torch autograd.

Every primitive validates shapes up front and refuses to hand back a
non-finite result, so a NaN is reported at the op that produced it rather
than three layers later in a loss.  ``grad_check`` is an independent
central-difference oracle; it never consults autograd for its reference.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import torch

DTYPE = torch.float64
MASK = -1e9

_strict = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def unchecked() -> Iterator[None]:
    """Temporarily skip the finiteness scan (benchmarks, inner loops)."""
    global _strict
    prev, _strict = _strict, False
    try:
        yield
    finally:
        _strict = prev


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def _finite(op: str, out: torch.Tensor) -> torch.Tensor:
    if _strict and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


def _same(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finite("matmul", a @ b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}") from None
    return _finite("add", a + b)


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return _finite("scale", a * c)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    # weight is [in, out]
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shape mismatch {tuple(x.shape)} vs {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return _finite("linear", out)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return _finite("softmax", torch.softmax(x, dim=-1))


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return _finite("log_softmax", torch.log_softmax(x, dim=-1))


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: shape mismatch {tuple(x.shape)} vs {tuple(gain.shape)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return _finite("layer_norm", (x - mu) / torch.sqrt(var + eps) * gain + bias)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh form: smooth everywhere, which finite differences need
    c = math.sqrt(2.0 / math.pi)
    return _finite("gelu", 0.5 * x * (1.0 + torch.tanh(c * (x + 0.044715 * x**3))))


def relu(x: torch.Tensor) -> torch.Tensor:
    return _finite("relu", torch.clamp(x, min=0.0))


def masked_fill(x: torch.Tensor, mask: torch.Tensor, value: float = MASK) -> torch.Tensor:
    try:
        torch.broadcast_shapes(x.shape, mask.shape)
    except RuntimeError:
        raise ShapeError(f"masked_fill: shape mismatch {tuple(x.shape)} vs {tuple(mask.shape)}") from None
    return _finite("masked_fill", x.masked_fill(mask, value))


def gather(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    if index.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather: shape mismatch {tuple(x.shape)} vs {tuple(index.shape)}")
    return torch.gather(x, -1, index)


def sum(x: torch.Tensor, dim: int | Sequence[int] | None = None) -> torch.Tensor:  # noqa: A001
    return _finite("sum", x.sum() if dim is None else x.sum(dim=dim))


def mean(x: torch.Tensor, dim: int | Sequence[int] | None = None) -> torch.Tensor:
    return _finite("mean", x.mean() if dim is None else x.mean(dim=dim))


def log(x: torch.Tensor) -> torch.Tensor:
    return _finite("log", torch.log(x))


def exp(x: torch.Tensor) -> torch.Tensor:
    return _finite("exp", torch.exp(x))


def check_finite(name: str, x: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{name} produced a non-finite value")
    return x


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    Relative error per coordinate is ``|analytic - fd| / max(1e-8, |fd|)``.
    """
    x0 = x.detach().clone().to(DTYPE)
    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    analytic = None
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.detach().reshape(-1)

    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += eps
            xm[i] -= eps
            fp = float(f(xp.reshape(x0.shape)))
            fm = float(f(xm.reshape(x0.shape)))
            numeric[i] = (fp - fm) / (2.0 * eps)
    if numeric.numel() == 0:
        return 0.0
    err = (analytic - numeric).abs() / numeric.abs().clamp(min=1e-8)
    return float(err.max())
