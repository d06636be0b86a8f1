"""The coupled multiview-image / voxel-latent velocity model."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ShapeError
from ..geometry import GridSpec, build_projection_tables, canonical_views
from ..sync_attention import SyncBlock, attend_2d_to_3d, attend_3d_to_2d
from .networks import (
    ConditionEmbedding,
    ConditionEncoder,
    ImageCrossAttention,
    ResBlock,
    RowAttention,
    TimeMLP,
    TransformerBlock,
    _groups,
)

N_IMAGES = 8  # 4 views x {color, normal}


class ImageBranch(nn.Module):
    """Per-image encoder/decoder over the 8 view maps of each object.

    A ``patch x patch`` stem embeds each image at ``V / patch`` resolution and
    a pixel-shuffle head maps back to ``V``.  Each image sees its own noisy
    state concatenated with the condition image.  The deepest stage mixes
    views with row attention and reads the condition tokens.  ``down``/``up``/
    ``head`` split the pass at the two points where voxel features are
    exchanged.
    """

    def __init__(self, channels, t_dim: int, d_c: int, heads: int, patch: int = 2):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.patch = patch
        self.stem = nn.Conv2d(6, c0, patch, stride=patch)
        self.image_emb = nn.Embedding(N_IMAGES, c0)
        self.d0 = ResBlock(c0, c0, t_dim)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.d1 = ResBlock(c1, c1, t_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, t_dim)
        self.rows = RowAttention(c2, heads, N_IMAGES)
        self.cross = ImageCrossAttention(c2, d_c, heads, N_IMAGES)
        self.mid2 = ResBlock(c2, c2, t_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.u1 = ResBlock(2 * c1, c1, t_dim)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.u0 = ResBlock(2 * c0, c0, t_dim)
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out = nn.Conv2d(c0, 3 * patch * patch, 3, padding=1)

    def down(self, x, cond_image, ctx, temb):
        """``x``: ``(B, 4, 2, V, V, 3)``.  Returns the deepest features and the skips."""
        B, _, _, V = x.shape[:4]
        imgs = x.reshape(B * N_IMAGES, V, V, 3)
        cimg = cond_image.repeat_interleave(N_IMAGES, 0)
        h = self.stem(torch.cat([imgs, cimg * 2 - 1], -1).permute(0, 3, 1, 2))
        ids = torch.arange(N_IMAGES, device=x.device).repeat(B)
        h = h + self.image_emb(ids)[:, :, None, None]
        s0 = self.d0(h, temb)
        s1 = self.d1(self.down0(s0), temb)
        h = self.mid(self.down1(s1), temb)
        h = self.cross(self.rows(h), ctx)
        return h, (s0, s1)

    def up(self, h, skips, temb):
        s0, s1 = skips
        h = self.mid2(h, temb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.u1(torch.cat([h, s1], 1), temb)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.u0(torch.cat([h, s0], 1), temb)

    def head(self, h, B):
        v = F.pixel_shuffle(self.out(F.silu(self.out_norm(h))), self.patch)
        V = v.shape[-1]
        return v.permute(0, 2, 3, 1).reshape(B, 4, 2, V, V, 3)


class VoxelBranch(nn.Module):
    """Transformer over patchified latent-grid tokens."""

    def __init__(self, N: int, c_lat: int, patch: int, d_u: int, blocks: int, d_c: int, heads: int):
        super().__init__()
        self.N, self.c_lat, self.patch = N, c_lat, patch
        self.n = N // patch
        self.d_u = d_u
        width = patch**3 * c_lat
        self.embed = nn.Linear(width, d_u)
        self.pos = nn.Parameter(torch.randn(self.n**3, d_u) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(d_u, d_c, heads) for _ in range(blocks)])
        self.out_norm = nn.LayerNorm(d_u)
        self.out = nn.Linear(d_u, width)

    def patchify(self, x):
        B, p, n, c = x.shape[0], self.patch, self.n, self.c_lat
        x = x.reshape(B, n, p, n, p, n, p, c).permute(0, 1, 3, 5, 2, 4, 6, 7)
        return x.reshape(B, n**3, p**3 * c)

    def unpatchify(self, tok):
        B, p, n, c = tok.shape[0], self.patch, self.n, self.c_lat
        x = tok.reshape(B, n, n, n, p, p, p, c).permute(0, 1, 4, 2, 5, 3, 6, 7)
        return x.reshape(B, n * p, n * p, n * p, c)

    def tokens(self, x, temb):
        return self.embed(self.patchify(x)) + self.pos + temb[:, None]

    def head(self, tok):
        return self.unpatchify(self.out(self.out_norm(tok)))


class JointModel(nn.Module):
    """Both velocity networks plus the sync blocks coupling them.

    Sync exchanges happen after 3D blocks ``sync_after[0]`` (paired with the
    deepest image stage, ``V / (4 image_patch)``) and ``sync_after[1]``
    (paired with the last up stage, ``V / image_patch``).  Each exchange reads
    both branches' pre-exchange features, so the two directions are applied
    concurrently.
    """

    def __init__(self, N: int, V: int, c_lat: int = 4, patch: int = 2, d_u: int = 64,
                 channels=(32, 48, 64), heads: int = 4, blocks: int = 8, sync_after=(4, 8),
                 cond_patch: int = 8, d_c: int = 64, sync_attention: bool = True, image_patch: int = 2,
                 seed: int = 0):
        super().__init__()
        if N % patch:
            raise ConfigurationError("token patch must divide N")
        n = N // patch
        deep = V // (4 * image_patch)
        if V % (4 * image_patch) or deep % n:
            raise ConfigurationError(f"deepest image side {deep} must be a multiple of the token grid {n}")
        if len(sync_after) != 2 or not (1 <= sync_after[0] <= sync_after[1] <= blocks):
            raise ConfigurationError(f"bad sync insertion depths {sync_after}")
        torch.manual_seed(seed)
        self.N, self.V, self.c_lat = N, V, c_lat
        self.sync_after = tuple(sync_after)
        self.sync_attention = sync_attention
        self.config = dict(N=N, V=V, c_lat=c_lat, patch=patch, d_u=d_u, channels=list(channels), heads=heads,
                           blocks=blocks, sync_after=list(sync_after), cond_patch=cond_patch, d_c=d_c,
                           sync_attention=sync_attention, image_patch=image_patch)
        t_dim = 128
        self.cond_encoder = ConditionEncoder(V, cond_patch, d_c)
        self.t2d = TimeMLP(t_dim, t_dim)
        self.t3d = TimeMLP(t_dim, d_u)
        self.image = ImageBranch(channels, t_dim, d_c, heads, image_patch)
        self.voxel = VoxelBranch(N, c_lat, patch, d_u, blocks, d_c, heads)
        token_grid = GridSpec(n)
        self.proj = (
            build_projection_tables(token_grid, canonical_views(deep)),
            build_projection_tables(token_grid, canonical_views(V // image_patch)),
        )
        if sync_attention:
            gen = torch.Generator().manual_seed(seed + 1)
            dims = (channels[2], channels[0])
            self.sync_to_3d = nn.ModuleList([SyncBlock(d_u, d, heads, generator=gen) for d in dims])
            self.sync_to_2d = nn.ModuleList([SyncBlock(d, d_u, heads, generator=gen) for d in dims])

    def encode_condition(self, image, null=None) -> ConditionEmbedding:
        return self.cond_encoder(image, null)

    def sync_blocks(self):
        if not self.sync_attention:
            return []
        return list(self.sync_to_3d) + list(self.sync_to_2d)

    def _exchange(self, k, h, tok, B):
        BI, C, S, _ = h.shape
        n = self.voxel.n
        vox = tok.reshape(B, n, n, n, -1)
        maps = h.reshape(B, 4, 2, C, S, S).permute(0, 1, 2, 4, 5, 3)
        new_vox = attend_2d_to_3d(vox, maps, self.sync_to_3d[k], self.proj[k])
        new_maps = attend_3d_to_2d(maps, vox, self.sync_to_2d[k], self.proj[k])
        h = new_maps.permute(0, 1, 2, 5, 3, 4).reshape(BI, C, S, S)
        return h, new_vox.reshape(B, n**3, -1)

    def forward(self, x2d, x3d, t, cond: ConditionEmbedding, sync: bool | None = None):
        """Velocities for ``x2d`` ``(B, 4, 2, V, V, 3)`` and ``x3d`` ``(B, N, N, N, c_lat)``."""
        B, V, N = x2d.shape[0], self.V, self.N
        if tuple(x2d.shape[1:]) != (4, 2, V, V, 3):
            raise ShapeError(f"image state {tuple(x2d.shape)} does not match (B, 4, 2, {V}, {V}, 3)")
        if tuple(x3d.shape[1:]) != (N, N, N, self.c_lat) or x3d.shape[0] != B:
            raise ShapeError(f"voxel state {tuple(x3d.shape)} does not match (B={B}, {N}, {N}, {N}, {self.c_lat})")
        if len(cond) != B:
            raise ShapeError("condition batch differs from state batch")
        sync = self.sync_attention if sync is None else sync
        if sync and not self.sync_attention:
            raise ConfigurationError("model was built without sync blocks")
        t = torch.as_tensor(t, dtype=x2d.dtype, device=x2d.device).reshape(-1).expand(B)
        temb2 = self.t2d(t).repeat_interleave(N_IMAGES, 0)
        tok = self.voxel.tokens(x3d, self.t3d(t))
        ctx = cond.tokens

        h, skips = self.image.down(x2d, cond.image, ctx, temb2)
        k0, k1 = self.sync_after
        blocks = self.voxel.blocks
        for blk in blocks[:k0]:
            tok = blk(tok, ctx)
        if sync:
            h, tok = self._exchange(0, h, tok, B)
        h = self.image.up(h, skips, temb2)
        for blk in blocks[k0:k1]:
            tok = blk(tok, ctx)
        if sync:
            h, tok = self._exchange(1, h, tok, B)
        for blk in blocks[k1:]:
            tok = blk(tok, ctx)
        return self.image.head(h, B), self.voxel.head(tok)


def joint_denoise_step(x2d_t, x3d_t, t, cond, model: JointModel, sync: bool | None = None):
    """One forward pass of both branches; returns ``(v2d, v3d)``."""
    return model(x2d_t, x3d_t, t, cond, sync=sync)
