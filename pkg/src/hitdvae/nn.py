"""Transformer building blocks with explicit masking and switchable residuals.

Autograd is provided by torch; the blocks themselves (attention, layer norm,
post-norm encoder/decoder layers) are written out here because the model
needs control the stock torch layers do not give: a residual flag that can
be flipped per call on a shared stack, and masks that must never produce an
empty attention row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn


@dataclass(frozen=True)
class LayerConfig:
    d_model: int = 256
    n_heads: int = 1
    d_ff: int = 1024
    residual_enabled: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


def positional_encoding(T: int, d: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal encoding: sin on even columns, cos on odd columns."""
    if d % 2:
        raise ValueError(f"positional encoding width must be even, got {d}")
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


def build_causal_mask(T: int, inclusive: bool = True) -> torch.Tensor:
    """Boolean T x T mask, ``mask[t, tau]`` true when query t may see key tau.

    Only the inclusive form (tau <= t) is produced. Strict dependencies on the
    past are obtained with :func:`shift_right` followed by this mask, which
    keeps the first row non-empty.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not inclusive:
        raise ValueError(
            "exclusive masks leave row 0 empty; shift the sequence right and use inclusive=True"
        )
    return torch.ones(T, T, dtype=torch.bool).tril()


def shift_right(x: torch.Tensor) -> torch.Tensor:
    """Delay a (..., T, D) sequence by one step, inserting a zero start frame."""
    return torch.cat([torch.zeros_like(x[..., :1, :]), x[..., :-1, :]], dim=-2)


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention mask has a row with no allowed positions")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int = 1):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.w_q = nn.Linear(d_model, d_model)
        # a key bias shifts every score in a row equally; softmax ignores it
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    def _split(self, x):
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.n_heads, -1).transpose(-3, -2)

    def forward(self, x_query, x_kv, mask=None):
        if x_query.shape[-1] != self.d_model or x_kv.shape[-1] != self.d_model:
            raise ValueError(
                f"expected width {self.d_model}, got {x_query.shape[-1]} and {x_kv.shape[-1]}"
            )
        if self.n_heads == 1:
            return self.w_o(scaled_dot_attention(self.w_q(x_query), self.w_k(x_kv), self.w_v(x_kv), mask))
        q = self._split(self.w_q(x_query))
        k = self._split(self.w_k(x_kv))
        v = self._split(self.w_v(x_kv))
        heads = scaled_dot_attention(q, k, v, mask)
        *lead, H, T, dh = heads.shape
        return self.w_o(heads.transpose(-3, -2).reshape(*lead, T, H * dh))


class LayerNorm(nn.Module):
    def __init__(self, d_model: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))

    @staticmethod
    def normalize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + eps)

    def forward(self, x):
        return self.gain * self.normalize(x, self.eps) + self.bias


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.lin2(torch.relu(self.lin1(x)))


def _sublayer(norm: LayerNorm, x: torch.Tensor, out: torch.Tensor, residual: bool):
    return norm(x + out) if residual else norm(out)


class EncoderLayer(nn.Module):
    """Post-norm layer: NL(x + MHA(x)) then NL(. + FF(.))."""

    def __init__(self, cfg: LayerConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm2 = LayerNorm(cfg.d_model)

    def forward(self, x, mask=None):
        res = self.cfg.residual_enabled
        x = _sublayer(self.norm1, x, self.attn(x, x, mask), res)
        return _sublayer(self.norm2, x, self.ff(x), res)


class DecoderLayer(nn.Module):
    """Self-attention, cross-attention (query from the stream, key/value from
    ``memory``), feed-forward; each wrapped in a post-norm.

    ``residual`` overrides ``cfg.residual_enabled`` for one call so a single
    parameter set can serve passes that differ only in their skip paths.
    """

    def __init__(self, cfg: LayerConfig):
        super().__init__()
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm3 = LayerNorm(cfg.d_model)

    def forward(self, x, memory, self_mask=None, cross_mask=None, residual: bool | None = None):
        res = self.cfg.residual_enabled if residual is None else residual
        x = _sublayer(self.norm1, x, self.self_attn(x, x, self_mask), res)
        x = _sublayer(self.norm2, x, self.cross_attn(x, memory, cross_mask), res)
        return _sublayer(self.norm3, x, self.ff(x), res)


class EncoderStack(nn.Module):
    def __init__(self, cfg: LayerConfig, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(n_layers))

    def forward(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return x


class DecoderStack(nn.Module):
    def __init__(self, cfg: LayerConfig, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(n_layers))

    def forward(self, x, memory, self_mask=None, cross_mask=None, residual=None):
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask, residual)
        return x


def _finite_differences(evaluate, tensors, eps):
    numeric = []
    with torch.no_grad():
        for x in tensors:
            flat = x.view(-1)
            out = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = evaluate().item()
                flat[i] = orig - eps
                down = evaluate().item()
                flat[i] = orig
                out[i] = (up - down) / (2 * eps)
            numeric.append(out)
    return numeric


def _max_rel_error(evaluate, tensors, analytic, eps, per_tensor=False):
    worst = 0.0
    for x, g, n in zip(tensors, analytic, _finite_differences(evaluate, tensors, eps)):
        a = torch.zeros(x.numel(), dtype=torch.float64) if g is None else g.detach().reshape(-1).double()
        if per_tensor:
            err = (a - n).norm() / max(a.norm().item(), n.norm().item(), 1e-8)
        else:
            err = ((a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-8)).max()
        worst = max(worst, float(err))
    return worst


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    per_tensor: bool = False,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``fn`` maps the tensors in ``inputs`` to a scalar. Every coordinate of
    every input is perturbed, so keep the inputs small. The error is taken
    coordinate-wise, or with ``per_tensor`` as a norm ratio per tensor, which
    stays meaningful when single coordinates sit below the rounding floor of
    the difference quotient.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    return _max_rel_error(lambda: fn(*inputs), inputs, analytic, eps, per_tensor)


def module_grad_check(
    fn: Callable[[], torch.Tensor], module: nn.Module, eps: float = 1e-6, per_tensor: bool = False
) -> float:
    """:func:`grad_check` with respect to every parameter of ``module``."""
    params = [p for p in module.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(fn(), params, allow_unused=True)
    return _max_rel_error(fn, params, analytic, eps, per_tensor)
