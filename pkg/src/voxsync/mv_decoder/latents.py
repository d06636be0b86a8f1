"""Structured latents: per-active-voxel codes, their encoder and their flow generator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..dual_branch.flow import euler_integrate, make_noisy_sample
from ..dual_branch.networks import ConditionEncoder, TimeMLP, TransformerBlock
from ..errors import EmptyShapeError, ShapeError


@dataclass
class StructuredLatentSet:
    coords: torch.Tensor  # (L, 3) long
    latents: torch.Tensor  # (L, d_z)

    def __len__(self) -> int:
        return self.coords.shape[0]


def active_coords(occupancy) -> torch.Tensor:
    occ = torch.as_tensor(np.asarray(occupancy, dtype=bool))
    coords = torch.nonzero(occ)
    if coords.shape[0] == 0:
        raise EmptyShapeError("occupancy grid has no active voxels")
    return coords


def coord_encoding(coords: torch.Tensor, N: int, dim: int) -> torch.Tensor:
    """Sinusoidal features of normalized voxel centers, ``dim // 6`` frequencies per axis (zero padded)."""
    n_freq = max(dim // 6, 1)
    x = (coords.to(torch.float32) + 0.5) / N  # (L, 3)
    freqs = (2.0 ** torch.arange(n_freq, dtype=torch.float32)) * torch.pi
    ang = x[:, :, None] * freqs  # (L, 3, F)
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], -1).reshape(coords.shape[0], -1)
    if enc.shape[1] < dim:
        enc = torch.cat([enc, enc.new_zeros(enc.shape[0], dim - enc.shape[1])], 1)
    return enc[:, :dim]


class SLatEncoder(nn.Module):
    """Local-attribute encoder: a 3x3x3 convolution over ``[occupancy, color, normal]`` read at active voxels.

    The decoders and the latent generator treat its output as fixed targets,
    so it is used frozen at its seeded initialisation.
    """

    def __init__(self, d_z: int = 16, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.d_z = d_z
        self.conv = nn.Conv3d(7, d_z, 3, padding=1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=gen) / np.sqrt(7 * 27))
            self.conv.bias.zero_()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, occupancy, colors, normals) -> StructuredLatentSet:
        coords = active_coords(occupancy)
        occ = torch.as_tensor(np.asarray(occupancy, np.float32))
        grid = torch.cat([occ[..., None], torch.as_tensor(np.asarray(colors, np.float32)),
                          torch.as_tensor(np.asarray(normals, np.float32))], -1)
        feats = self.conv(grid.permute(3, 0, 1, 2)[None])[0].permute(1, 2, 3, 0)
        z = feats[coords[:, 0], coords[:, 1], coords[:, 2]]
        return StructuredLatentSet(coords, z * 3.0)


class LatentFlowModel(nn.Module):
    """Velocity transformer over active-voxel tokens, conditioned on the input image."""

    def __init__(self, N: int, V: int, d_z: int = 16, width: int = 64, blocks: int = 4, heads: int = 4,
                 cond_patch: int = 8, d_c: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.N, self.V, self.d_z, self.width = N, V, d_z, width
        self.config = dict(N=N, V=V, d_z=d_z, width=width, blocks=blocks, heads=heads, cond_patch=cond_patch, d_c=d_c)
        self.cond_encoder = ConditionEncoder(V, cond_patch, d_c)
        self.time = TimeMLP(128, width)
        self.inp = nn.Linear(d_z, width)
        self.pos = nn.Linear(width, width)
        self.blocks = nn.ModuleList([TransformerBlock(width, d_c, heads) for _ in range(blocks)])
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, d_z)

    def forward(self, x_t: torch.Tensor, coords: torch.Tensor, t, cond) -> torch.Tensor:
        """``x_t`` ``(L, d_z)`` for one object; ``cond`` is its single-item condition embedding."""
        if x_t.dim() != 2 or x_t.shape[1] != self.d_z or x_t.shape[0] != coords.shape[0]:
            raise ShapeError(f"latent tokens {tuple(x_t.shape)} do not match {coords.shape[0]} voxels x {self.d_z}")
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(1)
        h = self.inp(x_t) + self.pos(coord_encoding(coords, self.N, self.width).to(x_t.dtype)) + self.time(t)
        h = h[None]
        for blk in self.blocks:
            h = blk(h, cond.tokens)
        return self.out(self.norm(h))[0]


def latent_flow_loss(model: LatentFlowModel, items, generator: torch.Generator, dropout_rate: float = 0.05):
    """Mean flow-matching loss over ``(StructuredLatentSet, cond_image)`` items."""
    losses = []
    for slat, image in items:
        t = torch.rand((), generator=generator)
        eps = torch.randn(slat.latents.shape, generator=generator)
        null = torch.rand(1, generator=generator) < dropout_rate
        sample = make_noisy_sample(slat.latents, eps, t)
        cond = model.cond_encoder(torch.as_tensor(image, dtype=torch.float32), null)
        v = model(sample.x_t, slat.coords, t, cond)
        losses.append(((v - sample.target) ** 2).mean())
    return torch.stack(losses).mean()


@torch.no_grad()
def generate_structured_latents(occupancy, cond_image, seed: int, model: LatentFlowModel,
                                steps: int = 25, cfg_scale: float = 1.0) -> StructuredLatentSet:
    """One latent per active voxel, Euler-integrated from seeded noise."""
    coords = active_coords(occupancy)
    image = torch.as_tensor(np.asarray(cond_image, np.float32))
    cond = model.cond_encoder(image)
    uncond = model.cond_encoder(image, torch.ones(1, dtype=torch.bool))
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((coords.shape[0], model.d_z), generator=gen)

    def velocity(states, t, conditional):
        return (model(states[0], coords, t, cond if conditional else uncond),)

    (z,) = euler_integrate(velocity, (x,), steps, cfg_scale)
    return StructuredLatentSet(coords, z)
