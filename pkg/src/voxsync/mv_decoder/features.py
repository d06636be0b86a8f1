"""Pixel-aligned multiview features and their injection into per-voxel tokens."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError
from ..geometry import ProjectionMap

N_MAPS = 8  # 4 views x {color, normal}


class FeatureExtractor(nn.Module):
    """Trainable multi-level patch encoder.

    Images are upsampled, split into ``patch x patch`` patches, passed through
    four conv stages at patch resolution; the four stage outputs are
    concatenated per location and fused by an MLP to ``feat_dim`` channels.
    """

    def __init__(self, feat_dim: int = 32, channels=(16, 32, 32, 32), upsample: int = 2, patch: int = 4):
        super().__init__()
        self.upsample, self.patch, self.feat_dim = upsample, patch, feat_dim
        self.embed = nn.Conv2d(3, channels[0], patch, stride=patch)
        self.image_emb = nn.Embedding(N_MAPS, channels[0])
        stages = []
        cin = channels[0]
        for c in channels:
            stages.append(nn.Sequential(nn.Conv2d(cin, c, 3, padding=1), nn.GELU()))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.fuse = nn.Sequential(nn.Linear(sum(channels), 2 * feat_dim), nn.GELU(), nn.Linear(2 * feat_dim, feat_dim))

    def output_size(self, V: int) -> int:
        return V * self.upsample // self.patch

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 4, 2, V, V, 3)`` in [0, 1] -> ``(B, 4, 2, V', V', feat_dim)``."""
        if images.dim() == 5:
            images = images[None]
        if images.dim() != 6 or tuple(images.shape[1:3]) != (4, 2) or images.shape[-1] != 3:
            raise ShapeError(f"expected 4 views x 2 modalities of RGB maps, got {tuple(images.shape)}")
        B, V = images.shape[0], images.shape[3]
        x = images.reshape(B * N_MAPS, V, V, 3).permute(0, 3, 1, 2) * 2 - 1
        if self.upsample != 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        h = self.embed(x)
        ids = torch.arange(N_MAPS, device=images.device).repeat(B)
        h = h + self.image_emb(ids)[:, :, None, None]
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        h = torch.cat(levels, 1).permute(0, 2, 3, 1)
        S = h.shape[1]
        return self.fuse(h).reshape(B, 4, 2, S, S, self.feat_dim)


def extract_view_features(images, extractor: FeatureExtractor) -> torch.Tensor:
    return extractor(images)


def gather_pixel_features(coords: torch.Tensor, maps: torch.Tensor, proj: ProjectionMap) -> torch.Tensor:
    """The 8 feature vectors each voxel projects onto: ``(L, 8, d)``, view-major then modality.

    ``maps`` is one object's ``(4, 2, V', V', d)``.
    """
    N = proj.grid.N
    if maps.shape[2] != proj.V or maps.shape[3] != proj.V:
        raise ShapeError(f"feature maps {tuple(maps.shape)} do not match projection size {proj.V}")
    if coords.numel() and (coords.min() < 0 or coords.max() >= N):
        raise IndexError("voxel coordinate outside the grid")
    flat_vox = (coords[:, 0] * N + coords[:, 1]) * N + coords[:, 2]
    pix = proj.tensor("voxel_to_pixel_flat", maps.device)[:, flat_vox]  # (4, L)
    n_views = len(proj.views)
    flat = maps.reshape(n_views, 2, proj.V * proj.V, -1)
    per_view = [flat[k][:, pix[k]] for k in range(n_views)]  # each (2, L, d)
    return torch.stack(per_view, 0).permute(2, 0, 1, 3).reshape(coords.shape[0], n_views * 2, -1)


class InjectionModule(nn.Module):
    """``z + MLP(concat(z, f_1..f_8))`` with a zero-initialised final layer."""

    def __init__(self, token_dim: int, feat_dim: int, hidden: int | None = None):
        super().__init__()
        self.in_dim = token_dim + N_MAPS * feat_dim
        hidden = hidden or 2 * token_dim
        self.mlp = nn.Sequential(nn.Linear(self.in_dim, hidden), nn.GELU(), nn.Linear(hidden, token_dim))
        self.reset_gate()

    @property
    def gate(self) -> nn.Linear:
        return self.mlp[-1]

    def reset_gate(self):
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def forward(self, z: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """``z``: ``(L, token_dim)``; ``feats``: ``(L, 8, feat_dim)``."""
        z_inj = torch.cat([z, feats.reshape(z.shape[0], -1)], -1)
        return z + self.mlp(z_inj)


def inject_features(z: torch.Tensor, coords: torch.Tensor, maps: torch.Tensor, proj: ProjectionMap,
                    module: InjectionModule) -> torch.Tensor:
    return module(z, gather_pixel_features(coords, maps, proj))
