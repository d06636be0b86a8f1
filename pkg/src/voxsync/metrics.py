"""Geometry and appearance metrics plus occupancy IoU.

Geometry metrics work on :class:`~voxsync.mv_decoder.mesh.TriMesh` or plain
``(vertices, faces)`` pairs and report distances in normalized units (longest
bounding-box side 1 after :func:`normalize_align`).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import _kernels
from .errors import EmptyShapeError, ShapeError
from .losses import ssim as _ssim

PSNR_CAP = 99.0
ICP_MAX_ITERS = 50


def _as_arrays(mesh) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(mesh, "vertices"):
        v, f = mesh.vertices, mesh.faces
    else:
        v, f = mesh
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    if isinstance(f, torch.Tensor):
        f = f.cpu().numpy()
    return np.asarray(v, np.float64).reshape(-1, 3), np.asarray(f, np.int64).reshape(-1, 3)


def _require_surface(v, f, what):
    if len(f) == 0 or len(v) == 0:
        raise EmptyShapeError(f"{what} mesh is empty")


def sample_surface(mesh, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples and the unit normal of the face each lands on."""
    v, f = _as_arrays(mesh)
    _require_surface(v, f, "sampled")
    tri = v[f]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = np.linalg.norm(cross, axis=1)
    if area.sum() <= 0:
        raise EmptyShapeError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(f), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", w, tri[idx])
    normals = cross[idx] / np.maximum(area[idx], 1e-300)[:, None]
    return pts, normals


def _normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(0), v.max(0)
    extent = (hi - lo).max()
    if extent <= 0:
        raise EmptyShapeError("mesh has zero extent")
    return (v - (lo + hi) / 2) / extent


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation ``R`` and translation ``t`` minimising ``|R src + t - dst|``."""
    cs, cd = src.mean(0), dst.mean(0)
    U, _, Vt = np.linalg.svd((src - cs).T @ (dst - cd))
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def icp(src_pts: np.ndarray, dst_pts: np.ndarray, iters: int = ICP_MAX_ITERS, tol: float = 1e-10):
    """Rigid point-to-point ICP aligning ``src_pts`` onto ``dst_pts``; returns ``(R, t)``."""
    tree = cKDTree(dst_pts)
    R, t = np.eye(3), np.zeros(3)
    prev = np.inf
    for _ in range(iters):
        moved = src_pts @ R.T + t
        dist, nn = tree.query(moved)
        err = float(np.mean(dist * dist))
        if prev - err < tol:
            break
        prev = err
        dR, dt = kabsch(moved, dst_pts[nn])
        R, t = dR @ R, dR @ t + dt
    return R, t


def normalize_align(mesh, gt_mesh, icp_refine: bool = False, n_icp_samples: int = 2000, seed: int = 0):
    """Center both bounding boxes at the origin and scale longest sides to 1.

    With ``icp_refine`` the prediction is additionally rigidly registered onto
    the ground truth.  Returns two ``(vertices, faces)`` pairs.
    """
    v, f = _as_arrays(mesh)
    gv, gf = _as_arrays(gt_mesh)
    _require_surface(v, f, "predicted")
    _require_surface(gv, gf, "reference")
    v, gv = _normalize(v), _normalize(gv)
    if icp_refine:
        src, _ = sample_surface((v, f), n_icp_samples, seed)
        dst, _ = sample_surface((gv, gf), n_icp_samples, seed + 1)
        R, t = icp(src, dst)
        v = v @ R.T + t
    return (v, f), (gv, gf)


@dataclass
class GeometryScores:
    chamfer: float
    p2s: float
    nc: float


def evaluate_geometry(pred_mesh, gt_mesh, n_samples: int = 10000, seed: int = 0) -> GeometryScores:
    """Chamfer-L1 (symmetric mean NN distance), P2S (gt points to predicted triangles) and NC.

    Both meshes are sampled with the same seed, so identical meshes score exactly 0 / 0 / 1.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pv, pf = _as_arrays(pred_mesh)
    gv, gf = _as_arrays(gt_mesh)
    _require_surface(pv, pf, "predicted")
    _require_surface(gv, gf, "reference")
    p_pts, p_n = sample_surface((pv, pf), n_samples, seed)
    g_pts, g_n = sample_surface((gv, gf), n_samples, seed)
    d_pg, nn_pg = cKDTree(g_pts).query(p_pts)
    d_gp, nn_gp = cKDTree(p_pts).query(g_pts)
    chamfer = 0.5 * (d_pg.mean() + d_gp.mean())
    dist2, _, _ = _kernels.point_triangle_distance(g_pts, pv[pf])
    p2s = float(np.sqrt(dist2).mean())
    nc = 0.5 * (np.sum(p_n * g_n[nn_pg], 1).mean() + np.sum(g_n * p_n[nn_gp], 1).mean())
    return GeometryScores(float(chamfer), p2s, float(nc))


def score_meshes(pred_mesh, gt_mesh, n_samples: int = 10000, seed: int = 0, icp: bool = False) -> GeometryScores:
    """Normalize both meshes (optionally ICP-register the prediction), then score them."""
    pred, gt = normalize_align(pred_mesh, gt_mesh, icp_refine=icp, seed=seed)
    return evaluate_geometry(pred, gt, n_samples, seed)


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def evaluate_appearance(pred, gt) -> tuple[float, float]:
    """Mean PSNR and SSIM over views of ``(n_views, H, W, C)`` images in [0, 1]."""
    pred = torch.as_tensor(np.asarray(pred, np.float64))
    gt = torch.as_tensor(np.asarray(gt, np.float64))
    if pred.shape != gt.shape or pred.dim() != 4:
        raise ShapeError(f"render stacks must match as (views, H, W, C): {tuple(pred.shape)} vs {tuple(gt.shape)}")
    ps = [psnr(p.numpy(), g.numpy()) for p, g in zip(pred, gt)]
    ss = [float(_ssim(p, g)) for p, g in zip(pred, gt)]
    return float(np.mean(ps)), float(np.mean(ss))


def voxel_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ShapeError(f"occupancy grids differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


METRIC_FIELDS = ("chamfer", "p2s", "nc", "psnr", "ssim", "iou")


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def add(self, sample: str, **metrics) -> None:
        self.records.append({"sample": sample, **{k: metrics.get(k) for k in METRIC_FIELDS}})

    def aggregate(self) -> dict:
        out = {"sample": "mean"}
        for k in METRIC_FIELDS:
            vals = [r[k] for r in self.records if r[k] is not None]
            out[k] = float(np.mean(vals)) if vals else None
        return out

    def write(self, directory) -> tuple[Path, Path]:
        """``report.jsonl`` (one record per sample, then the mean row) and ``report.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = self.records + [self.aggregate()]
        jl = directory / "report.jsonl"
        jl.write_text("".join(json.dumps(r) + "\n" for r in rows))
        table = directory / "report.csv"
        with table.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("sample",) + METRIC_FIELDS)
            w.writeheader()
            w.writerows(rows)
        return jl, table

    def to_dict(self) -> dict:
        return asdict(self)
