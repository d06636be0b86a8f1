"""Triangle meshes: isosurface extraction, orthographic rasterisation and OBJ I/O.

Mesh vertices live in grid units (voxel ``(x, y, z)`` spans ``[x, x+1]`` per
axis).  Scalar fields are negative inside the surface; decoders and the
reference surface sample them at voxel centers.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from skimage.measure import marching_cubes

from .. import _kernels
from ..geometry import GridSpec, ViewSpec, continuous_component
from ..synthetic_data import BACKGROUND_DEPTH


@dataclass
class TriMesh:
    vertices: torch.Tensor  # (n, 3) grid units
    faces: torch.Tensor  # (f, 3) long
    colors: Optional[torch.Tensor] = None  # (n, 3) in [0, 1]
    normals: Optional[torch.Tensor] = None  # (n, 3) predicted per-vertex normal attribute

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def face_normals(self) -> torch.Tensor:
        tri = self.vertices[self.faces]
        n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.detach().cpu().numpy().astype(np.float64), self.faces.cpu().numpy()

    @classmethod
    def from_numpy(cls, vertices, faces, colors=None, normals=None, dtype=torch.float32) -> "TriMesh":
        t = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
        return cls(t(vertices), torch.as_tensor(np.asarray(faces), dtype=torch.long).reshape(-1, 3), t(colors), t(normals))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(torch.zeros(0, 3), torch.zeros(0, 3, dtype=torch.long))


@dataclass
class Isosurface:
    mesh: TriMesh
    displacement: torch.Tensor  # (n, 3) vertex offset from its undeformed host edge midpoint
    empty: bool
    edges: torch.Tensor  # (n, 2, 3) host edge endpoints
    rest: torch.Tensor  # (n, 3) vertex positions before sample deformation


def extract_isosurface(field: torch.Tensor, attrs: Optional[torch.Tensor] = None, pad_value: float = 1.0,
                       origin: float = 0.0, deform: Optional[torch.Tensor] = None) -> Isosurface:
    """Zero isosurface of a sampled field via marching cubes.

    Topology comes from ``skimage``; vertex positions and attributes are then
    re-interpolated along each vertex's host edge so they stay differentiable
    w.r.t. ``field`` and ``attrs`` (same grid, trailing attribute axis).  A
    field without a sign change yields an empty mesh and a warning.  Otherwise
    the grid is padded with ``pad_value`` so surfaces touching the boundary
    are closed.  Sample ``i`` sits at grid-unit position ``i + origin``.
    ``Isosurface.edges`` holds each vertex's two host samples (unpadded
    indices, so ``-1`` or ``n`` denote padding).  ``deform`` (``(n, n, n, 3)``,
    zero in the padding) moves each sample before vertices are interpolated;
    ``Isosurface.rest`` keeps the undeformed vertex positions.
    """
    f_np = field.detach().cpu().numpy().astype(np.float64)
    if not (f_np.min() < 0 < f_np.max()):
        warnings.warn("field has no sign change; returning an empty mesh", stacklevel=2)
        mesh = TriMesh.empty()
        if attrs is not None:
            mesh.colors = torch.zeros(0, attrs.shape[-1])
        return Isosurface(mesh, torch.zeros(0, 3), True, torch.zeros(0, 2, 3, dtype=torch.long), torch.zeros(0, 3))
    padded = np.pad(f_np, 1, constant_values=pad_value)
    verts, faces, _, _ = marching_cubes(padded, 0.0, allow_degenerate=False)

    frac = np.abs(verts - np.round(verts))
    axis = frac.argmax(axis=1)
    c0 = np.round(verts).astype(np.int64)
    rows = np.arange(len(verts))
    c0[rows, axis] = np.floor(verts[rows, axis]).astype(np.int64)
    c1 = c0.copy()
    c1[rows, axis] += 1
    hi = np.array(padded.shape) - 1
    over = c1[rows, axis] > hi[axis]
    c0[rows[over], axis[over]] -= 1
    c1[rows[over], axis[over]] -= 1

    f_pad = torch.nn.functional.pad(field[None, None], (1,) * 6, value=pad_value)[0, 0]
    i0, i1 = torch.as_tensor(c0), torch.as_tensor(c1)
    f0 = f_pad[i0[:, 0], i0[:, 1], i0[:, 2]]
    f1 = f_pad[i1[:, 0], i1[:, 1], i1[:, 2]]
    denom = f0 - f1
    denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
    t = (f0 / denom).clamp(0.0, 1.0)
    e = torch.zeros(len(verts), 3, dtype=field.dtype)
    e[rows, torch.as_tensor(axis)] = 1.0
    base = i0.to(field.dtype) - 1.0  # undo padding
    rest = base + t[:, None] * e + origin
    positions = rest
    if deform is not None:
        d_pad = torch.nn.functional.pad(deform.permute(3, 0, 1, 2)[None], (1,) * 6)[0].permute(1, 2, 3, 0)
        d0 = d_pad[i0[:, 0], i0[:, 1], i0[:, 2]]
        d1 = d_pad[i1[:, 0], i1[:, 1], i1[:, 2]]
        positions = rest + d0 + t[:, None] * (d1 - d0)
    displacement = positions - (base + 0.5 * e + origin)

    colors = None
    if attrs is not None:
        a_pad = torch.nn.functional.pad(attrs.permute(3, 0, 1, 2)[None], (1,) * 6, value=0.0)[0].permute(1, 2, 3, 0)
        a0 = a_pad[i0[:, 0], i0[:, 1], i0[:, 2]]
        a1 = a_pad[i1[:, 0], i1[:, 1], i1[:, 2]]
        colors = a0 + t[:, None] * (a1 - a0)
    mesh = TriMesh(positions, torch.as_tensor(faces.astype(np.int64)), colors)
    return Isosurface(mesh, displacement, False, torch.stack([i0, i1], 1) - 1, rest)


def euler_characteristic(faces: np.ndarray) -> int:
    faces = np.asarray(faces)
    n_vertices = len(np.unique(faces))
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    n_edges = len(np.unique(edges, axis=0))
    return n_vertices - n_edges + len(faces)


@dataclass
class MeshRender:
    mask: torch.Tensor  # (V, V) bool
    depth: torch.Tensor  # (V, V), normalized, background 1
    normal_mesh: torch.Tensor  # (V, V, 3) face normals as (n + 1) / 2
    color: torch.Tensor  # (V, V, 3)
    normal: torch.Tensor  # (V, V, 3) interpolated normal attribute as (n + 1) / 2
    face_id: np.ndarray


def project_points(points: torch.Tensor, view: ViewSpec, grid: GridSpec):
    """Continuous pixel coordinates ``(u, v)`` and normalized depth of grid-unit points."""
    scale = view.V / grid.N
    u = continuous_component(points, view.u_axis, grid.N) * scale
    v = continuous_component(points, view.v_axis, grid.N) * scale
    d = continuous_component(points, view.depth_axis, grid.N) / grid.N
    return u, v, d


def render_mesh_views(mesh: TriMesh, view: ViewSpec, grid: GridSpec, backend=None) -> MeshRender:
    """Orthographic z-buffer render.

    Coverage and barycentrics are computed without gradients; colors, normals
    and depth are interpolated from differentiable vertex quantities.
    """
    V = view.V
    dtype = mesh.vertices.dtype
    if mesh.is_empty:
        z3 = torch.zeros(V, V, 3, dtype=dtype)
        return MeshRender(
            torch.zeros(V, V, dtype=torch.bool), torch.full((V, V), BACKGROUND_DEPTH, dtype=dtype),
            z3, z3.clone(), z3.clone(), np.full((V, V), -1),
        )
    u, v, d = project_points(mesh.vertices, view, grid)
    xy = torch.stack([u, v], -1).detach().cpu().numpy()
    face_id, bary, _ = _kernels.rasterize_triangles(
        xy, d.detach().cpu().numpy(), mesh.faces.cpu().numpy(), V, V, backend=backend
    )
    covered = torch.as_tensor(face_id >= 0)
    fid = torch.as_tensor(face_id[face_id >= 0])
    b = torch.as_tensor(bary[face_id >= 0], dtype=dtype)  # (P, 3)
    tri = mesh.faces[fid]  # (P, 3)

    def interp(values):
        return (b[..., None] * values[tri]).sum(1)

    depth = torch.full((V, V), BACKGROUND_DEPTH, dtype=dtype).masked_scatter(covered, (b * d[tri]).sum(1))
    zeros = torch.zeros(V, V, 3, dtype=dtype)
    fn = mesh.face_normals()[fid]
    normal_mesh = zeros.masked_scatter(covered[..., None], (fn + 1) / 2)
    color = zeros
    if mesh.colors is not None:
        color = zeros.masked_scatter(covered[..., None], interp(mesh.colors))
    normal = zeros
    if mesh.normals is not None:
        n = interp(mesh.normals)
        n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        normal = zeros.masked_scatter(covered[..., None], (n + 1) / 2)
    return MeshRender(covered, depth, normal_mesh, color, normal, face_id)


# --------------------------------------------------------------------- OBJ I/O

def write_obj(mesh: TriMesh, path) -> Path:
    """``v x y z r g b`` / ``vn`` / ``f a//a b//b c//c`` with 1-based indices."""
    path = Path(path)
    verts, faces = mesh.numpy()
    colors = None if mesh.colors is None else mesh.colors.detach().cpu().numpy()
    normals = None if mesh.normals is None else mesh.normals.detach().cpu().numpy()
    lines = ["# voxsync mesh: positions in grid units"]
    for i, p in enumerate(verts):
        c = "" if colors is None else " " + " ".join(map(repr, colors[i].tolist()))
        lines.append("v " + " ".join(map(repr, p.tolist())) + c)
    if normals is not None:
        lines += ["vn " + " ".join(map(repr, n.tolist())) for n in normals]
        lines += ["f %d//%d %d//%d %d//%d" % (a + 1, a + 1, b + 1, b + 1, c + 1, c + 1) for a, b, c in faces]
    else:
        lines += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path) -> TriMesh:
    verts, colors, normals, faces = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh.from_numpy(
        np.asarray(verts, float).reshape(-1, 3),
        np.asarray(faces, int).reshape(-1, 3),
        colors if len(colors) == len(verts) and colors else None,
        normals if len(normals) == len(verts) and normals else None,
        dtype=torch.float64,
    )


OUTSIDE = 0.5  # field value of an empty voxel


def occupancy_to_field(occ: np.ndarray) -> np.ndarray:
    """Voxel-center field: ``-0.5`` in occupied voxels, ``+0.5`` elsewhere."""
    return np.where(occ, -OUTSIDE, OUTSIDE)


def occupancy_to_box_mesh(occ: np.ndarray) -> TriMesh:
    """Exact boundary of the union of occupied unit cubes, outward winding.

    This is the surface the reference renders show, so it is the geometry
    ground truth for scoring decoded meshes.
    """
    occ = np.asarray(occ, bool)
    padded = np.pad(occ, 1)
    quads = []
    for axis in range(3):
        b, d = (axis + 1) % 3, (axis + 2) % 3
        for side in (1, -1):
            neighbour = np.roll(padded, -side, axis=axis)[1:-1, 1:-1, 1:-1]
            cells = np.argwhere(occ & ~neighbour)
            if not len(cells):
                continue
            base = cells.astype(np.int64)
            base[:, axis] += side > 0
            corners = np.repeat(base[:, None], 4, axis=1)
            corners[:, 1, b] += 1
            corners[:, 2, b] += 1
            corners[:, 2, d] += 1
            corners[:, 3, d] += 1
            quads.append(corners if side > 0 else corners[:, ::-1])
    if not quads:
        return TriMesh.empty()
    quads = np.concatenate(quads)
    vertices, index = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    index = index.reshape(-1, 4)
    faces = np.concatenate([index[:, [0, 1, 2]], index[:, [0, 2, 3]]])
    return TriMesh.from_numpy(vertices.astype(np.float64), faces, dtype=torch.float64)


def occupancy_to_mesh(occ: np.ndarray) -> TriMesh:
    """Isosurface of the voxel-center field of an occupancy grid.

    It crosses every boundary face at its center and keeps single voxels.
    This is the surface an untrained mesh decoder starts from.
    """
    field = torch.as_tensor(occupancy_to_field(occ))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return extract_isosurface(field, pad_value=OUTSIDE, origin=0.5).mesh
