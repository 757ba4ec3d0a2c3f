"""Differentiable kernels shared by SGNE, DHCL and the language model.

Everything runs in float64 on CPU. Gradients come from torch autograd and are
cross-checked by :func:`grad_check` with central finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


def silu(x: torch.Tensor | float) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    return x * torch.sigmoid(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def cosine_to_rows(x: np.ndarray, mat: np.ndarray, row_norms: np.ndarray | None = None) -> np.ndarray:
    """Cosine of ``x`` against every row of ``mat``; zero-norm rows score -inf."""
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    if row_norms is None:
        row_norms = np.linalg.norm(mat, axis=1)
    dots = mat @ x
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = dots / (row_norms * nx)
    sims[row_norms == 0] = -np.inf
    return sims


def topk(scores: Sequence[float], k: int, order: str = "highest") -> list[int]:
    """Indices of the k extreme scores, ties broken by ascending index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("topk of an empty sequence")
    if order == "highest":
        key = -s
    elif order == "lowest":
        key = s
    else:
        raise ValueError(f"order must be 'highest' or 'lowest', got {order!r}")
    idx = np.arange(s.size)
    if k < s.size:
        # O(n) preselection; ties at the boundary are resolved by the stable sort below
        kth = np.partition(key, k - 1)[k - 1]
        idx = idx[key <= kth]
    chosen = idx[np.lexsort((idx, key[idx]))][:k]
    return chosen.tolist()


class AttentionParams(nn.Module):
    """Self-attention projections of width ``width`` split over ``heads`` heads."""

    def __init__(self, width: int, heads: int, generator: torch.Generator | None = None):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        std = 1.0 / math.sqrt(width)
        self.w_q, self.w_k, self.w_v, self.w_o = (
            nn.Parameter(torch.randn(width, width, generator=generator, dtype=DTYPE) * std)
            for _ in range(4)
        )


def multi_head_attention(seq: torch.Tensor, params: AttentionParams, return_weights: bool = False):
    """Unmasked scaled dot-product self-attention over the rows of ``seq`` (..., L, h).

    No positional information is added, so the output is equivariant to row
    permutations. Row vectors are multiplied on the right: ``seq @ W``.
    Leading dimensions are treated as independent batch entries.
    """
    if seq.dim() < 2 or seq.shape[-1] != params.width:
        raise ValueError(f"expected (..., L, {params.width}) input, got {tuple(seq.shape)}")
    *batch, L, h = seq.shape
    nh = params.heads
    dh = h // nh

    def split(t):
        return t.reshape(*batch, L, nh, dh).transpose(-3, -2)

    q = split(seq @ params.w_q)
    k = split(seq @ params.w_k)
    v = split(seq @ params.w_v)
    weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (weights @ v).transpose(-3, -2).reshape(*batch, L, h) @ params.w_o
    return (out, weights) if return_weights else out


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor | np.ndarray,
    eps: float = 1e-4,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a flat float64 parameter vector to a scalar tensor. The error for
    each coordinate is ``|fd - analytic| / max(1, |analytic|)``.
    """
    if isinstance(params, torch.Tensor):
        p = params.detach().to(DTYPE).clone().reshape(-1)
    else:
        p = torch.as_tensor(np.asarray(params, dtype=np.float64)).clone().reshape(-1)
    x = p.clone().requires_grad_(True)
    out = torch.as_tensor(f(x))
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out, x, allow_unused=True)
    analytic = torch.zeros_like(p) if grad is None else grad.detach()
    worst = 0.0
    with torch.no_grad():
        for i in range(p.numel()):
            up = p.clone()
            up[i] += eps
            down = p.clone()
            down[i] -= eps
            fd = (float(f(up)) - float(f(down))) / (2 * eps)
            a = analytic[i].item()
            worst = max(worst, abs(fd - a) / max(1.0, abs(a)))
    return worst


def flat_params(params: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params])


def bind_flat(module_params: Sequence[torch.Tensor], flat: torch.Tensor) -> list[torch.Tensor]:
    """Split ``flat`` into tensors shaped like ``module_params`` (keeps the autograd link)."""
    out, pos = [], 0
    for p in module_params:
        n = p.numel()
        out.append(flat[pos:pos + n].view_as(p))
        pos += n
    return out


def grad_check_params(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-4) -> float:
    """Like :func:`grad_check` but perturbs existing parameter tensors in place.

    ``loss_fn`` takes no arguments and reads ``params`` from wherever they live
    (a module, a model); every coordinate is restored after its probe.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            analytic = torch.zeros_like(flat) if g is None else g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                a = analytic[i].item()
                worst = max(worst, abs((up - down) / (2 * eps) - a) / max(1.0, abs(a)))
    return worst
