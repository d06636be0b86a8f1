"""Decoder training losses: image reconstruction, Gaussian-splat and mesh objectives.

Images are channel-last float tensors ``(..., H, W, C)`` in [0, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ContractError, ShapeError

Perceptual = Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]]


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2
    perceptual: float = 0.2
    color: float = 0.4
    depth: float = 10.0
    front: float = 0.1
    tsdf: float = 0.01
    consist: float = 1.0
    dev: float = 1.0
    huber_delta: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    H, W, C = x.shape[-3:]
    return x.reshape(-1, H, W, C).permute(0, 3, 1, 2)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW) -> torch.Tensor:
    """Mean SSIM with a uniform window over the valid (uncropped) region.

    The window shrinks to the largest odd size that fits small images.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    x, y = _to_nchw(a), _to_nchw(b)
    win = min(window, x.shape[-1], x.shape[-2])
    win -= 1 - win % 2
    pool = lambda t: F.avg_pool2d(t, win, stride=1)  # noqa: E731
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cxy = pool(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean()


def recon_terms(pred, gt, perceptual: Perceptual = None) -> dict:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    terms = {"l1": (pred - gt).abs().mean(), "ssim": ssim(pred, gt)}
    terms["perceptual"] = perceptual(pred, gt) if perceptual is not None else pred.new_zeros(())
    return terms


def recon_loss(pred, gt, perceptual: Perceptual = None, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``L1 + w_ssim (1 - SSIM) + w_p P`` where ``P`` is the optional perceptual distance."""
    t = recon_terms(pred, gt, perceptual)
    return t["l1"] + weights.ssim * (1 - t["ssim"]) + weights.perceptual * t["perceptual"]


def gs_loss(renders, gts, gs, weights: LossWeights = LossWeights(), perceptual: Perceptual = None):
    """Splat objective: reconstruction over all views plus volume and opacity regularisers.

    ``gs`` needs ``scale`` ``(L, K, 3)`` and ``opacity`` ``(L, K)``.
    Returns ``(total, breakdown)``.
    """
    recon = recon_loss(renders, gts, perceptual, weights)
    vol = gs.scale.prod(dim=-1).mean()
    alpha = ((1 - gs.opacity) ** 2).mean()
    total = recon + vol + alpha
    return total, {"recon": recon, "vol": vol, "alpha": alpha, "total": total}


@dataclass
class RenderedViews:
    """Per-view maps; ``view_ids`` names each leading index and must include ``front``.

    ``normal`` renders a predicted-normal attribute; ``normal_mesh`` uses the
    geometric face normals.  For ground truth both hold the same maps.
    """

    color: torch.Tensor  # (n, H, W, 3)
    normal: torch.Tensor  # (n, H, W, 3)
    normal_mesh: torch.Tensor  # (n, H, W, 3)
    depth: torch.Tensor  # (n, H, W)
    mask: torch.Tensor  # (n, H, W)
    view_ids: tuple = ("front", "back", "left", "right")

    def front(self) -> int:
        if "front" not in self.view_ids:
            raise ContractError("rendered views lack the front view")
        return list(self.view_ids).index("front")


@dataclass
class VertexAttributes:
    """Inputs of the mesh regularisers.

    ``corner_ids``: ``(L, 8)`` ids of the grid corners each active voxel
    predicts; ``corner_attrs``: ``(L, 8, A)`` the attributes predicted there;
    ``displacement``: ``(n_vertices, 3)`` offsets of extracted vertices from
    the midpoint of their host grid edge.
    """

    corner_ids: torch.Tensor
    corner_attrs: torch.Tensor
    displacement: torch.Tensor


def huber(x: torch.Tensor, delta: float) -> torch.Tensor:
    a = x.abs()
    return torch.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def masked_depth_huber(pred_depth, gt_depth, pred_mask, gt_mask, delta: float) -> torch.Tensor:
    both = (pred_mask > 0.5) & (gt_mask > 0.5)
    if not both.any():
        return pred_depth.new_zeros(())
    return huber(pred_depth[both] - gt_depth[both], delta).mean()


def shared_corner_variance(corner_ids: torch.Tensor, corner_attrs: torch.Tensor) -> torch.Tensor:
    """Mean variance of attributes over corners predicted by two or more voxels."""
    ids = corner_ids.reshape(-1)
    attrs = corner_attrs.reshape(ids.numel(), corner_attrs.shape[-1])
    if ids.numel() == 0:
        return attrs.new_zeros(())
    uniq, inv = torch.unique(ids, return_inverse=True)
    count = torch.zeros(len(uniq), dtype=attrs.dtype, device=attrs.device).index_add_(0, inv, torch.ones_like(ids, dtype=attrs.dtype))
    s1 = attrs.new_zeros(len(uniq), attrs.shape[1]).index_add_(0, inv, attrs)
    s2 = attrs.new_zeros(len(uniq), attrs.shape[1]).index_add_(0, inv, attrs * attrs)
    shared = count >= 2
    if not shared.any():
        return attrs.new_zeros(())
    c = count[shared, None]
    mean = s1[shared] / c
    var = (s2[shared] / c - mean * mean).clamp_min(0.0)
    return var.mean()


def mesh_loss(renders: RenderedViews, gts: RenderedViews, field_values, vertex_attrs: VertexAttributes,
              weights: LossWeights = LossWeights(), perceptual: Perceptual = None):
    """Mesh objective ``L_geo + w_color L_color + L_reg``; returns ``(total, breakdown)``."""
    f, fg = renders.front(), gts.front()
    w = weights
    rec = lambda a, b: recon_loss(a, b, perceptual, w)  # noqa: E731
    mask_l1 = (renders.mask.float() - gts.mask.float()).abs().mean()
    depth = masked_depth_huber(renders.depth, gts.depth, renders.mask.float(), gts.mask.float(), w.huber_delta)
    normal_mesh = rec(renders.normal_mesh, gts.normal_mesh)
    normal_mesh_front = rec(renders.normal_mesh[f], gts.normal_mesh[fg])
    geo = mask_l1 + w.depth * depth + normal_mesh + w.front * normal_mesh_front

    color = rec(renders.color, gts.color)
    normal = rec(renders.normal, gts.normal)
    color_front = rec(renders.color[f], gts.color[fg])
    color_total = color + normal + w.front * color_front

    consist = shared_corner_variance(vertex_attrs.corner_ids, vertex_attrs.corner_attrs)
    disp = vertex_attrs.displacement
    dev = (disp * disp).sum(-1).mean() if disp.numel() else disp.new_zeros(())
    tsdf = (field_values * field_values).mean() if field_values.numel() else field_values.new_zeros(())
    reg = w.consist * consist + w.dev * dev + w.tsdf * tsdf

    total = geo + w.color * color_total + reg
    breakdown = {
        "mask": mask_l1,
        "depth": depth,
        "normal_mesh": normal_mesh,
        "normal_mesh_front": normal_mesh_front,
        "geo": geo,
        "color_recon": color,
        "normal_recon": normal,
        "color_front": color_front,
        "color": color_total,
        "consist": consist,
        "dev": dev,
        "tsdf": tsdf,
        "reg": reg,
        "total": total,
    }
    return total, breakdown


def format_breakdown(step: int, breakdown: dict, prefix: str = "") -> list[str]:
    """Structured log lines ``step=<n> term=<name> value=<v>``."""
    return [
        f"step={step} term={prefix}{name} value={float(value):.8g}" for name, value in breakdown.items()
    ]
