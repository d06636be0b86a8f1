"""Structured-latent decoders to Gaussian splats and to a triangle mesh."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from ..geometry import GridSpec, ProjectionMap
from .features import InjectionModule, gather_pixel_features
from .gaussians import RAW_WIDTH, GaussianSet, activate
from .latents import StructuredLatentSet, coord_encoding
from .mesh import OUTSIDE, Isosurface, extract_isosurface

# corner offsets of a voxel in (dx, dy, dz) order, dx slowest
CORNERS = torch.tensor([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


class DecoderBlock(nn.Module):
    def __init__(self, width: int, heads: int, feat_dim: int, inject: bool):
        super().__init__()
        self.n1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.inject = InjectionModule(width, feat_dim) if inject else None
        self.n2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, h, feats=None):
        x = self.n1(h)[None]
        h = h + self.attn(x, x, x, need_weights=False)[0][0]
        if self.inject is not None and feats is not None:
            h = self.inject(h, feats)
        return h + self.mlp(self.n2(h))


class StructuredDecoder(nn.Module):
    """Transformer trunk over active-voxel tokens with feature injection after every self attention.

    With ``injection=False`` the trunk has no injection modules at all; the
    gate-frozen ablation instead keeps the modules and freezes their zero gates
    (:meth:`freeze_injection`).
    """

    def __init__(self, N: int, d_z: int, out_dim: int, width: int = 64, blocks: int = 4, heads: int = 4,
                 feat_dim: int = 32, injection: bool = True):
        super().__init__()
        self.N, self.width, self.injection = N, width, injection
        self.inp = nn.Linear(d_z, width)
        self.pos = nn.Linear(width, width)
        self.blocks = nn.ModuleList([DecoderBlock(width, heads, feat_dim, injection) for _ in range(blocks)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, out_dim)

    def injection_modules(self):
        return [b.inject for b in self.blocks if b.inject is not None]

    def freeze_injection(self):
        """Zero and freeze every injection gate so the trunk behaves as a plain decoder."""
        for m in self.injection_modules():
            m.reset_gate()
            m.gate.requires_grad_(False)

    def trunk(self, slat: StructuredLatentSet, maps=None, proj: ProjectionMap | None = None) -> torch.Tensor:
        feats = None
        if maps is not None and self.injection:
            feats = gather_pixel_features(slat.coords, maps, proj)
        h = self.inp(slat.latents) + self.pos(coord_encoding(slat.coords, self.N, self.width))
        for blk in self.blocks:
            h = blk(h, feats)
        return self.head(self.norm(h))


class GaussianDecoder(StructuredDecoder):
    def __init__(self, N: int, d_z: int, K: int = 4, **kw):
        super().__init__(N, d_z, K * RAW_WIDTH, **kw)
        self.K = K
        with torch.no_grad():
            bias = self.head.bias.view(K, RAW_WIDTH)
            bias[:, 3:6] = -1.0  # start with footprints of about a third of a voxel
            bias[:, 6] = 2.0

    def forward(self, slat: StructuredLatentSet, maps=None, proj=None) -> GaussianSet:
        raw = self.trunk(slat, maps, proj).reshape(len(slat), self.K, RAW_WIDTH)
        return activate(slat.coords, raw)


def decode_gaussians(slat, maps, proj, decoder: GaussianDecoder) -> GaussianSet:
    return decoder(slat, maps, proj)


@dataclass
class MeshDecoding:
    iso: Isosurface
    voxel_field: torch.Tensor  # (L,) field at each active voxel center
    corner_ids: torch.Tensor  # (L, 8) flat ids on the (N+1)^3 corner grid
    corner_attrs: torch.Tensor  # (L, 8, 6) color and normal per voxel corner
    field: torch.Tensor  # (N, N, N) voxel-center field, OUTSIDE where inactive

    @property
    def mesh(self):
        return self.iso.mesh


class MeshDecoder(StructuredDecoder):
    """Signed field and a bounded offset at each active voxel center, color and normal at its 8 corners.

    Inactive voxels hold ``OUTSIDE`` and stay in place; the head starts every
    active voxel at ``-OUTSIDE`` with zero offset so the initial surface
    crosses each boundary face at its center.  Offsets move the field samples
    (at most ``MAX_OFFSET`` voxels per axis) so vertices can leave the lattice
    edges, e.g. toward cube corners.  Corner attributes of voxels sharing a corner are averaged and
    read at each vertex by trilinear interpolation inside the voxel on the
    negative end of its host edge.
    """

    ATTRS = 6  # rgb, normal
    MAX_OFFSET = 0.45

    def __init__(self, N: int, d_z: int, **kw):
        super().__init__(N, d_z, 4 + 8 * self.ATTRS, **kw)
        with torch.no_grad():
            self.head.bias[0] = math.atanh(-OUTSIDE)
            self.head.weight[1:4].zero_()
            self.head.bias[1:4].zero_()

    def forward(self, slat: StructuredLatentSet, maps=None, proj=None) -> MeshDecoding:
        N, A = self.N, self.ATTRS
        raw = self.trunk(slat, maps, proj)
        vfield = torch.tanh(raw[:, 0])
        offset = self.MAX_OFFSET * torch.tanh(raw[:, 1:4])
        corner_raw = raw[:, 4:].reshape(-1, 8, A)
        attrs = torch.cat([torch.sigmoid(corner_raw[..., :3]), torch.tanh(corner_raw[..., 3:])], -1)
        c = slat.coords
        at = (c[:, 0], c[:, 1], c[:, 2])
        field = vfield.new_full((N, N, N), OUTSIDE).index_put(at, vfield)
        deform = offset.new_zeros(N, N, N, 3).index_put(at, offset)
        corners = c[:, None, :] + CORNERS[None]
        ids = (corners[..., 0] * (N + 1) + corners[..., 1]) * (N + 1) + corners[..., 2]
        flat_ids = ids.reshape(-1)
        M = (N + 1) ** 3
        sums = attrs.new_zeros(M, A).index_add(0, flat_ids, attrs.reshape(-1, A))
        counts = attrs.new_zeros(M).index_add(0, flat_ids, torch.ones_like(flat_ids, dtype=attrs.dtype))
        corner_mean = sums / counts.clamp_min(1)[:, None]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            iso = extract_isosurface(field, pad_value=OUTSIDE, origin=0.5, deform=deform)
        if not iso.empty:
            iso.mesh.colors, iso.mesh.normals = self._vertex_attrs(iso, field, corner_mean).split(3, -1)
        return MeshDecoding(iso, vfield, ids, attrs, field)

    def _vertex_attrs(self, iso: Isosurface, field: torch.Tensor, corner_mean: torch.Tensor) -> torch.Tensor:
        N = self.N
        f = torch.nn.functional.pad(field.detach(), (1,) * 6, value=OUTSIDE)
        e = iso.edges + 1
        f0 = f[e[:, 0, 0], e[:, 0, 1], e[:, 0, 2]]
        f1 = f[e[:, 1, 0], e[:, 1, 1], e[:, 1, 2]]
        inside = torch.where((f0 <= f1)[:, None], iso.edges[:, 0], iso.edges[:, 1])  # always an active voxel
        local = (iso.rest - inside.to(iso.rest.dtype)).clamp(0.0, 1.0)
        corners = inside[:, None, :] + CORNERS[None]
        ids = (corners[..., 0] * (N + 1) + corners[..., 1]) * (N + 1) + corners[..., 2]
        off = CORNERS.to(local.dtype)[None]
        w = (off * local[:, None] + (1 - off) * (1 - local[:, None])).prod(-1)  # (n, 8)
        return (w[..., None] * corner_mean[ids].to(local.dtype)).sum(1)


def decode_mesh(slat, maps, proj, decoder: MeshDecoder):
    return decoder(slat, maps, proj).mesh


def occupancy_from_field(field: torch.Tensor) -> torch.Tensor:
    """Sign test at voxel centers."""
    return field < 0


def grid_spec(N: int) -> GridSpec:
    return GridSpec(N)
