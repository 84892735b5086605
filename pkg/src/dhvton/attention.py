"""Self, cross and hybrid attention.

Hybrid attention adds a lambda-scaled cross-attention read of the garment
tokens to a self-attention read of the spatial tokens, using one query
projection for both::

    Q = O_s W_q,  K = O_s W_k,  V = O_s W_v,  K' = I_g W'_k,  V' = I_g W'_v
    O_h = softmax(Q K^T / sqrt(d)) V + lam * softmax(Q K'^T / sqrt(d)) V'

where ``d`` is the per-head projection width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .core import ConfigError, DimensionError, PreconditionError, matmul, softmax_rows

LAMBDA_RANGE = (0.0, 1.5)


class TokenOrigin(str, Enum):
    SPATIAL = "spatial-features"
    GARMENT = "garment-tokens"


@dataclass
class TokenSeq:
    """Token matrix ``(..., n, c)`` plus where it came from."""

    tokens: torch.Tensor
    origin: TokenOrigin = TokenOrigin.SPATIAL

    def __post_init__(self):
        if self.tokens.dim() < 2 or self.tokens.shape[-2] < 1:
            raise PreconditionError(f"token sequence needs n >= 1, got {tuple(self.tokens.shape)}")

    @classmethod
    def from_feature_map(cls, x: torch.Tensor) -> "TokenSeq":
        """``(B, C, H, W)`` -> ``(B, H*W, C)``, height-major."""
        b, c, h, w = x.shape
        return cls(x.permute(0, 2, 3, 1).reshape(b, h * w, c), TokenOrigin.SPATIAL)

    def to_feature_map(self, height: int, width: int) -> torch.Tensor:
        b, n, c = self.tokens.shape
        if n != height * width:
            raise DimensionError(f"{n} tokens cannot form a {height}x{width} map")
        return self.tokens.reshape(b, height, width, c).permute(0, 3, 1, 2)


def check_lambda(lam: float) -> float:
    lo, hi = LAMBDA_RANGE
    if not lo <= lam <= hi:
        raise ConfigError(f"lambda must lie in [{lo}, {hi}], got {lam}")
    return float(lam)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    if heads == 1:
        return x
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    if heads == 1:
        return x
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    return matmul(softmax_rows(scores), v)


def _check_proj(x: torch.Tensor, w: torch.Tensor, what: str) -> None:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{what}: tokens have {x.shape[-1]} channels, projection expects {w.shape[0]}")


def self_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> torch.Tensor:
    """Scaled dot-product self attention over the rows of ``x``."""
    for w, n in ((w_q, "W_q"), (w_k, "W_k"), (w_v, "W_v")):
        _check_proj(x, w, n)
    q, k, v = (_split_heads(matmul(x, w), heads) for w in (w_q, w_k, w_v))
    return _merge_heads(_attend(q, k, v), heads)


def cross_attention(
    x: torch.Tensor,
    ctx: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> torch.Tensor:
    """Queries from ``x``, keys and values from ``ctx``."""
    _check_proj(x, w_q, "W_q")
    _check_proj(ctx, w_k, "W_k")
    _check_proj(ctx, w_v, "W_v")
    q = _split_heads(matmul(x, w_q), heads)
    k = _split_heads(matmul(ctx, w_k), heads)
    v = _split_heads(matmul(ctx, w_v), heads)
    return _merge_heads(_attend(q, k, v), heads)


def hybrid_attention(
    o_s: torch.Tensor,
    i_g: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_k_g: torch.Tensor,
    w_v_g: torch.Tensor,
    lam: float,
    heads: int = 1,
) -> torch.Tensor:
    """Hybrid self/cross attention with a single shared query projection."""
    check_lambda(lam)
    if i_g.shape[-2] == 0:
        raise PreconditionError("hybrid attention needs at least one garment token")
    for w, n in ((w_q, "W_q"), (w_k, "W_k"), (w_v, "W_v")):
        _check_proj(o_s, w, n)
    _check_proj(i_g, w_k_g, "W'_k")
    _check_proj(i_g, w_v_g, "W'_v")

    q = _split_heads(matmul(o_s, w_q), heads)  # computed once, used by both terms
    k = _split_heads(matmul(o_s, w_k), heads)
    v = _split_heads(matmul(o_s, w_v), heads)
    self_term = _attend(q, k, v)
    k_g = _split_heads(matmul(i_g, w_k_g), heads)
    v_g = _split_heads(matmul(i_g, w_v_g), heads)
    cross_term = _attend(q, k_g, v_g)
    return _merge_heads(self_term + lam * cross_term, heads)


class _Projections(nn.Module):
    def __init__(self, names: list[tuple[str, int]], d_out: int):
        super().__init__()
        for name, d_in in names:
            w = torch.empty(d_in, d_out)
            nn.init.xavier_uniform_(w)
            self.register_parameter(name, nn.Parameter(w))


class SelfAttention(_Projections):
    def __init__(self, channels: int, d_head: int | None = None, heads: int = 1):
        d_head = d_head or channels // heads
        super().__init__([("w_q", channels), ("w_k", channels), ("w_v", channels)], d_head * heads)
        self.heads = heads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self_attention(x, self.w_q, self.w_k, self.w_v, self.heads)


class CrossAttention(_Projections):
    def __init__(self, channels: int, ctx_channels: int, d_head: int | None = None, heads: int = 1):
        d_head = d_head or channels // heads
        super().__init__(
            [("w_q", channels), ("w_k", ctx_channels), ("w_v", ctx_channels)], d_head * heads
        )
        self.heads = heads

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return cross_attention(x, ctx, self.w_q, self.w_k, self.w_v, self.heads)


class HybridAttention(_Projections):
    """Holds ``W_q, W_k, W_v`` (spatial) and ``W'_k, W'_v`` (garment).

    ``lam`` is a run-level setting, not a parameter.  With ``enabled=False``
    the block is plain self attention over the same ``W_q, W_k, W_v``.
    """

    def __init__(
        self,
        channels: int,
        garment_channels: int,
        d_head: int | None = None,
        heads: int = 1,
        lam: float = 1.0,
        enabled: bool = True,
    ):
        d_head = d_head or channels // heads
        super().__init__(
            [
                ("w_q", channels),
                ("w_k", channels),
                ("w_v", channels),
                ("w_k_g", garment_channels),
                ("w_v_g", garment_channels),
            ],
            d_head * heads,
        )
        self.heads = heads
        self.lam = check_lambda(lam)
        self.enabled = enabled

    def forward(self, o_s: torch.Tensor, i_g: torch.Tensor | None) -> torch.Tensor:
        if not self.enabled:
            return self_attention(o_s, self.w_q, self.w_k, self.w_v, self.heads)
        if i_g is None:
            raise PreconditionError("hybrid attention is enabled but no garment tokens were given")
        return hybrid_attention(
            o_s, i_g, self.w_q, self.w_k, self.w_v, self.w_k_g, self.w_v_g, self.lam, self.heads
        )


class FeedForward(nn.Module):
    def __init__(self, channels: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels, channels * mult), nn.GELU(), nn.Linear(channels * mult, channels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SpatialTransformer(nn.Module):
    """Attention block over a feature map.

    ``kind="cross"``: self attention, then plain cross attention to context
    tokens (backbone).  ``kind="hybrid"``: self attention produces O_s, then a
    hybrid block reads O_s and the fine-grained garment tokens (control
    branch).  Pre-norm residual sub-layers throughout.
    """

    def __init__(
        self,
        channels: int,
        ctx_channels: int,
        kind: str = "cross",
        heads: int = 1,
        lam: float = 1.0,
        hybrid_enabled: bool = True,
        groups: int = 8,
    ):
        super().__init__()
        if kind not in ("cross", "hybrid"):
            raise ConfigError(f"unknown attention block kind {kind!r}")
        self.kind = kind
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Linear(channels, channels)
        self.ln1 = nn.LayerNorm(channels)
        self.attn1 = SelfAttention(channels, heads=heads)
        self.out1 = nn.Linear(channels, channels)
        self.ln2 = nn.LayerNorm(channels)
        self.ln_ctx = nn.LayerNorm(ctx_channels)
        if kind == "cross":
            self.attn2 = CrossAttention(channels, ctx_channels, heads=heads)
        else:
            self.attn2 = HybridAttention(
                channels, ctx_channels, heads=heads, lam=lam, enabled=hybrid_enabled
            )
        self.out2 = nn.Linear(channels, channels)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = TokenSeq.from_feature_map(self.norm(x))
        tok = self.proj_in(seq.tokens)
        tok = tok + self.out1(self.attn1(self.ln1(tok)))
        tok = tok + self.out2(self.attn2(self.ln2(tok), None if ctx is None else self.ln_ctx(ctx)))
        tok = tok + self.ff(self.ln3(tok))
        out = TokenSeq(self.proj_out(tok)).to_feature_map(h, w)
        return x + out
