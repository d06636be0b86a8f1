"""Building blocks of the two denoisers and the condition encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 t`` for ``t`` of shape ``(B,)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeMLP(nn.Module):
    def __init__(self, dim: int, out: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, out), nn.SiLU(), nn.Linear(out, out))

    def forward(self, t):
        return self.net(timestep_embedding(t, self.dim))


@dataclass
class ConditionEmbedding:
    """Condition tokens ``(B, M, d_c)`` and the image they came from.

    ``null`` marks items whose condition was dropped; their tokens are the
    learned null tokens and their image is zeroed.
    """

    tokens: torch.Tensor
    image: torch.Tensor  # (B, V, V, 3) in [0, 1]
    null: torch.Tensor  # (B,) bool

    def __len__(self):
        return self.tokens.shape[0]


class ConditionEncoder(nn.Module):
    """Patchify the input image into ``(V / patch)^2`` tokens."""

    def __init__(self, V: int, patch: int, d_c: int):
        super().__init__()
        if V % patch:
            raise ShapeError(f"patch {patch} does not divide image side {V}")
        self.V, self.patch = V, patch
        self.num_tokens = (V // patch) ** 2
        self.proj = nn.Conv2d(3, d_c, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(self.num_tokens, d_c) * 0.02)
        self.norm = nn.LayerNorm(d_c)
        self.null_tokens = nn.Parameter(torch.randn(self.num_tokens, d_c) * 0.02)

    def forward(self, image: torch.Tensor, null=None) -> ConditionEmbedding:
        if image.dim() == 3:
            image = image[None]
        if image.dim() != 4 or tuple(image.shape[1:]) != (self.V, self.V, 3):
            raise ShapeError(f"condition image must be ({self.V}, {self.V}, 3), got {tuple(image.shape)}")
        B = image.shape[0]
        null = torch.zeros(B, dtype=torch.bool) if null is None else torch.as_tensor(null, dtype=torch.bool)
        null = null.to(image.device)
        x = self.proj(image.permute(0, 3, 1, 2) * 2 - 1).flatten(2).transpose(1, 2)
        tokens = self.norm(x + self.pos)
        tokens = torch.where(null[:, None, None], self.null_tokens.expand_as(tokens), tokens)
        image = torch.where(null[:, None, None, None], torch.zeros_like(image), image)
        return ConditionEmbedding(tokens, image, null)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, t_dim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(_groups(cin), cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(t_dim, cout)
        self.n2 = nn.GroupNorm(_groups(cout), cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class RowAttention(nn.Module):
    """Attention among all pixels of one image row across every view and modality.

    Canonical views share the vertical axis, so a row of every view images
    the same horizontal slab of the object.
    """

    def __init__(self, c: int, heads: int, n_images: int = 8):
        super().__init__()
        self.n_images = n_images
        self.norm = nn.LayerNorm(c)
        self.attn = nn.MultiheadAttention(c, heads, batch_first=True)

    def forward(self, x):
        BI, C, H, W = x.shape
        B = BI // self.n_images
        tok = x.reshape(B, self.n_images, C, H, W).permute(0, 3, 1, 4, 2).reshape(B * H, self.n_images * W, C)
        h = self.norm(tok)
        tok = tok + self.attn(h, h, h, need_weights=False)[0]
        return tok.reshape(B, H, self.n_images, W, C).permute(0, 2, 4, 1, 3).reshape(BI, C, H, W)


class CrossAttention(nn.Module):
    def __init__(self, c: int, d_ctx: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.attn = nn.MultiheadAttention(c, heads, kdim=d_ctx, vdim=d_ctx, batch_first=True)

    def forward(self, tokens, ctx):
        return tokens + self.attn(self.norm(tokens), ctx, ctx, need_weights=False)[0]


class ImageCrossAttention(nn.Module):
    """Condition cross attention for a stack of images sharing one condition per object."""

    def __init__(self, c: int, d_ctx: int, heads: int, n_images: int = 8):
        super().__init__()
        self.n_images = n_images
        self.inner = CrossAttention(c, d_ctx, heads)

    def forward(self, x, ctx):
        BI, C, H, W = x.shape
        tok = x.flatten(2).transpose(1, 2)
        ctx = ctx.repeat_interleave(self.n_images, dim=0)
        return self.inner(tok, ctx).transpose(1, 2).reshape(BI, C, H, W)


class TransformerBlock(nn.Module):
    """Pre-norm self attention, condition cross attention and MLP."""

    def __init__(self, d: int, d_ctx: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.n1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross = CrossAttention(d, d_ctx, heads) if d_ctx else None
        self.n3 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def attend_self(self, x):
        h = self.n1(x)
        return x + self.self_attn(h, h, h, need_weights=False)[0]

    def finish(self, x, ctx=None):
        if self.cross is not None:
            x = self.cross(x, ctx)
        return x + self.mlp(self.n3(x))

    def forward(self, x, ctx=None):
        return self.finish(self.attend_self(x), ctx)
