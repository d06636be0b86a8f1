"""Pixel-aligned cross attention between voxel features and multiview feature maps.

Two residual directions share one block type:

* 2D -> 3D: each voxel queries the four normal-map features it projects onto.
* 3D -> 2D: each pixel (color and normal maps alike) queries the column of
  voxels along its orthographic ray.

Tensor layouts (channel-last):

* voxel features: ``(B, N, N, N, d_u)`` indexed ``[x, y, z]``
* view feature maps: ``(B, 4, 2, V, V, d_p)`` indexed ``[view, modality, v, u]``
  with modality 0 = color, 1 = normal.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError
from .geometry import ProjectionMap

COLOR, NORMAL = 0, 1


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


class SyncBlock(nn.Module):
    """Multi-head cross attention with a zero-initialised residual output MLP.

    Queries come from ``query_dim`` features, keys/values from ``context_dim``
    features; the attention width equals ``query_dim``.  With ``heads=1`` the
    forward pass is exactly ``x + MLP(softmax(q K^T / sqrt(d)) V)``.
    """

    def __init__(self, query_dim: int, context_dim: int, heads: int = 4, generator=None):
        super().__init__()
        if query_dim <= 0 or context_dim <= 0 or heads <= 0:
            raise ConfigurationError("sync block dimensions must be positive")
        if query_dim % heads:
            raise ConfigurationError(f"{heads} heads do not divide attention width {query_dim}")
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.heads = heads
        self.head_dim = query_dim // heads
        self.to_q = nn.Linear(query_dim, query_dim)
        self.to_k = nn.Linear(context_dim, query_dim)
        self.to_v = nn.Linear(context_dim, query_dim)
        self.out = nn.Sequential(
            nn.Linear(query_dim, query_dim), nn.SiLU(), nn.Linear(query_dim, query_dim)
        )
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        for layer in (self.to_q, self.to_k, self.to_v, self.out[0]):
            _init_linear(layer, gen)
        self.reset_gate()

    @property
    def gate(self) -> nn.Linear:
        return self.out[-1]

    def reset_gate(self) -> None:
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def attend(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """``query``: ``(..., Dq)``; ``context``: ``(..., S, Dc)``.  Returns ``(..., Dq)``."""
        return self.attend_projected(query, self.to_k(context), self.to_v(context))

    def attend_projected(self, query: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Like :meth:`attend` with keys/values already projected, ``(..., S, width)``.

        ``k`` and ``v`` may carry singleton lead dimensions that broadcast
        against the query's.
        """
        lead = query.shape[:-1]
        h, d = self.heads, self.head_dim
        q = self.to_q(query).reshape(*lead, 1, h, d)
        k = k.reshape(*k.shape[:-1], h, d)  # (..., S, h, d)
        v = v.reshape(*v.shape[:-1], h, d)
        # contexts are short (4 views or one ray column), so elementwise products beat batched matmuls
        scores = (q * k).sum(-1) / math.sqrt(d)  # (..., S, h)
        weights = scores.softmax(dim=-2)
        mixed = (weights[..., None] * v).sum(-3)  # (..., h, d)
        return query + self.out(mixed.reshape(*lead, h * d))


def init_sync_block(d_u: int, d_p: int, h: int, seed: int, direction: str = "2d_to_3d") -> SyncBlock:
    """Build a block for one direction; query/key/value weights are drawn from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    if direction == "2d_to_3d":
        return SyncBlock(d_u, d_p, h, generator=gen)
    if direction == "3d_to_2d":
        return SyncBlock(d_p, d_u, h, generator=gen)
    raise ConfigurationError(f"unknown sync direction {direction!r}")


def _check_shapes(vox: torch.Tensor, maps: torch.Tensor, proj: ProjectionMap, block: SyncBlock, direction):
    N, V = proj.grid.N, proj.V
    if vox.dim() != 5 or tuple(vox.shape[1:4]) != (N, N, N):
        raise ShapeError(f"voxel features {tuple(vox.shape)} do not match a {N}^3 grid")
    if maps.dim() != 6 or tuple(maps.shape[1:5]) != (len(proj.views), 2, V, V):
        raise ShapeError(f"view maps {tuple(maps.shape)} do not match {len(proj.views)} views at {V}x{V}")
    if vox.shape[0] != maps.shape[0]:
        raise ShapeError("voxel and view batches differ")
    d_u, d_p = vox.shape[-1], maps.shape[-1]
    q_dim, c_dim = (d_u, d_p) if direction == "2d_to_3d" else (d_p, d_u)
    if (block.query_dim, block.context_dim) != (q_dim, c_dim):
        raise ShapeError(
            f"block expects query/context dims {(block.query_dim, block.context_dim)}, got {(q_dim, c_dim)}"
        )


def gather_view_features(maps: torch.Tensor, proj: ProjectionMap, modality: int = NORMAL) -> torch.Tensor:
    """Per-voxel features sampled from each view: ``(B, N^3, n_views, d)``."""
    B, n_views, _, V, _, d = maps.shape
    flat = maps[:, :, modality].reshape(B, n_views, V * V, d)
    idx = proj.tensor("voxel_to_pixel_flat", maps.device)  # (n_views, N^3)
    per_view = [flat[:, k, idx[k]] for k in range(n_views)]
    return torch.stack(per_view, dim=2)


def attend_2d_to_3d(vox: torch.Tensor, maps: torch.Tensor, block: SyncBlock, proj: ProjectionMap) -> torch.Tensor:
    """Refine voxel features with the normal-map features of their four projections."""
    _check_shapes(vox, maps, proj, block, "2d_to_3d")
    B, N = vox.shape[0], proj.grid.N
    context = gather_view_features(maps, proj, NORMAL)
    out = block.attend(vox.reshape(B, N**3, -1), context)
    return out.reshape(vox.shape)


def attend_3d_to_2d(maps: torch.Tensor, vox: torch.Tensor, block: SyncBlock, proj: ProjectionMap) -> torch.Tensor:
    """Refine every pixel feature with the voxel features along its ray column."""
    _check_shapes(vox, maps, proj, block, "3d_to_2d")
    B, n_views, n_mod, V, _, d_p = maps.shape
    vox_flat = vox.reshape(B, -1, vox.shape[-1])
    # project once per voxel, then gather columns: (B, n_views, V^2, 1, H, width)
    k_vox, v_vox = block.to_k(vox_flat), block.to_v(vox_flat)
    cols = proj.tensor("pixel_to_column", maps.device)
    k = torch.stack([k_vox[:, cols[i]] for i in range(n_views)], dim=1).unsqueeze(3)
    v = torch.stack([v_vox[:, cols[i]] for i in range(n_views)], dim=1).unsqueeze(3)
    query = maps.permute(0, 1, 3, 4, 2, 5).reshape(B, n_views, V * V, n_mod, d_p)
    out = block.attend_projected(query, k, v)
    return out.reshape(B, n_views, V, V, n_mod, d_p).permute(0, 1, 4, 2, 3, 5)
