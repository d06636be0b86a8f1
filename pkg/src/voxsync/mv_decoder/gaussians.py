"""Per-voxel Gaussian splats: head activations, orthographic compositing and a binary table format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import CorruptFileError, VersionError
from ..geometry import GridSpec, ViewSpec, continuous_component

SCALE_MIN, SCALE_MAX = 1e-4, 1.0
FOOTPRINT_SIGMAS = 3.0
RAW_WIDTH = 10  # offset 3, scale 3, opacity 1, color 3


@dataclass
class GaussianSet:
    coords: torch.Tensor  # (L, 3) long voxel coordinates
    offset: torch.Tensor  # (L, K, 3) in [-0.5, 0.5] voxel units
    scale: torch.Tensor  # (L, K, 3) grid units
    opacity: torch.Tensor  # (L, K)
    color: torch.Tensor  # (L, K, 3)

    @property
    def K(self) -> int:
        return self.offset.shape[1]

    def __len__(self) -> int:
        return self.offset.shape[0] * self.offset.shape[1]

    def centers(self) -> torch.Tensor:
        """``(L * K, 3)`` centers in grid units."""
        base = self.coords.to(self.offset.dtype)[:, None, :] + 0.5
        return (base + self.offset).reshape(-1, 3)

    @classmethod
    def empty(cls, K: int = 4) -> "GaussianSet":
        return cls(torch.zeros(0, 3, dtype=torch.long), torch.zeros(0, K, 3), torch.ones(0, K, 3) * 0.1,
                   torch.zeros(0, K), torch.zeros(0, K, 3))


def activate(coords: torch.Tensor, raw: torch.Tensor) -> GaussianSet:
    """Map raw head outputs ``(L, K, 10)`` to attributes with enforced ranges."""
    offset = torch.tanh(raw[..., 0:3]) * 0.5
    scale = torch.exp(raw[..., 3:6]).clamp(SCALE_MIN, SCALE_MAX)
    opacity = torch.sigmoid(raw[..., 6])
    color = torch.sigmoid(raw[..., 7:10])
    return GaussianSet(coords, offset, scale, opacity, color)


def render_gaussians(gs: GaussianSet, view: ViewSpec, grid: GridSpec):
    """Front-to-back alpha compositing of axis-aligned 2D footprints.

    Footprints are truncated at three standard deviations.  Returns ``color``
    ``(V, V, 3)`` on a black background and accumulated ``alpha`` ``(V, V)``.
    """
    V = view.V
    dtype = gs.offset.dtype
    if len(gs) == 0:
        return torch.zeros(V, V, 3, dtype=dtype), torch.zeros(V, V, dtype=dtype)
    px_per_unit = V / grid.N
    c = gs.centers()
    u = continuous_component(c, view.u_axis, grid.N) * px_per_unit
    v = continuous_component(c, view.v_axis, grid.N) * px_per_unit
    depth = continuous_component(c, view.depth_axis, grid.N)
    scale = gs.scale.reshape(-1, 3)
    su = scale[:, view.u_axis[0]] * px_per_unit
    sv = scale[:, view.v_axis[0]] * px_per_unit
    order = torch.argsort(depth.detach(), stable=True)
    u, v, su, sv = u[order], v[order], su[order], sv[order]
    opacity = gs.opacity.reshape(-1)[order]
    color = gs.color.reshape(-1, 3)[order]

    # each splat touches a (2r+1)^2 pixel window around its center
    r = int(torch.ceil(FOOTPRINT_SIGMAS * torch.maximum(su, sv).max().detach()).item()) + 1
    offs = torch.arange(-r, r + 1)
    iu = torch.floor(u.detach()).long()[:, None] + offs  # (G, W)
    iv = torch.floor(v.detach()).long()[:, None] + offs
    du = (iu.to(dtype) + 0.5 - u[:, None]) / su[:, None]
    dv = (iv.to(dtype) + 0.5 - v[:, None]) / sv[:, None]
    wu = torch.where((du.abs() <= FOOTPRINT_SIGMAS) & (iu >= 0) & (iu < V), torch.exp(-0.5 * du * du), 0.0)
    wv = torch.where((dv.abs() <= FOOTPRINT_SIGMAS) & (iv >= 0) & (iv < V), torch.exp(-0.5 * dv * dv), 0.0)
    alpha = opacity[:, None, None] * wv[:, :, None] * wu[:, None, :]  # (G, W[v], W[u])
    G = alpha.shape[0]
    keep = (alpha.detach() > 0).reshape(-1)
    pix = (iv[:, :, None] * V + iu[:, None, :]).reshape(-1)[keep]
    rank = torch.arange(G)[:, None].expand(G, alpha.shape[1] * alpha.shape[2]).reshape(-1)[keep]
    frag_alpha = alpha.reshape(-1)[keep]
    # order fragments by pixel, then front to back; pad each pixel's list into a dense row
    order = torch.argsort(pix * G + rank)
    pix, rank, frag_alpha = pix[order], rank[order], frag_alpha[order]
    counts = torch.bincount(pix, minlength=V * V)
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.arange(pix.numel()) - starts[pix]
    width = int(counts.max().item()) if pix.numel() else 0
    A = alpha.new_zeros(V * V, width + 1).index_put((pix, slot), frag_alpha)
    C = alpha.new_zeros(V * V, width + 1, 3).index_put((pix, slot), color[rank])
    trans = torch.cumprod(torch.cat([torch.ones_like(A[:, :1]), 1 - A[:, :-1]], 1), 1)
    weight = trans * A
    image = (weight[..., None] * C).sum(1).reshape(V, V, 3)
    return image, weight.sum(1).reshape(V, V)


# ---------------------------------------------------------------- binary table

MAGIC = b"VXGS"
FORMAT_VERSION = 1
LAYOUT = ["x", "y", "z", "offset_x", "offset_y", "offset_z", "scale_x", "scale_y", "scale_z",
          "opacity", "r", "g", "b"]


def write_gaussians(gs: GaussianSet, N: int, path) -> Path:
    """Header ``VXGS``, u32 version, u32 count, u32 N, u32 K, u32 layout length, JSON layout, then float32 rows."""
    path = Path(path)
    K = gs.K
    coords = gs.coords[:, None, :].expand(-1, K, -1).to(torch.float32)
    table = torch.cat([coords, gs.offset, gs.scale, gs.opacity[..., None], gs.color], -1)
    table = table.detach().reshape(-1, len(LAYOUT)).to(torch.float32).numpy()
    layout = json.dumps(LAYOUT).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, table.shape[0], N, K, len(layout)))
        fh.write(layout)
        fh.write(table.astype("<f4").tobytes())
    return path


def read_gaussians(path) -> tuple[GaussianSet, int]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CorruptFileError(f"{path} is not a gaussian table")
    try:
        version, count, N, K, n_layout = struct.unpack_from("<5I", data, 4)
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: table version {version}, expected {FORMAT_VERSION}")
    start = 4 + 20
    layout = json.loads(data[start:start + n_layout])
    body = np.frombuffer(data, dtype="<f4", offset=start + n_layout)
    if layout != LAYOUT or body.size != count * len(LAYOUT) or (K and count % K):
        raise CorruptFileError(f"{path}: table size or layout mismatch")
    t = torch.from_numpy(body.reshape(-1, K, len(LAYOUT)).astype(np.float32))
    gs = GaussianSet(t[:, 0, 0:3].round().long(), t[..., 3:6], t[..., 6:9], t[..., 9], t[..., 10:13])
    return gs, N
