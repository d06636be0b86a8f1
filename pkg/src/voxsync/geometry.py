"""Grid/image coordinate conventions and voxel <-> pixel correspondence tables.

World space is the unit cube [0, 1)^3 discretised into ``N`` voxels per axis;
voxel ``(x, y, z)`` has its center at ``((x, y, z) + 0.5) / N``.  Continuous
positions used by the renderers are expressed in *grid units*, i.e. world
coordinates multiplied by ``N``.

Images have their origin at the top-left corner, ``u`` grows rightward and
``v`` downward.  Pixel arrays are indexed ``[v, u]``.

Each canonical view is an orthographic camera described by three signed grid
axes (u, v, depth).  A negative axis ``a`` maps voxel coordinate ``c_a`` to
``N - 1 - c_a``:

=======  ======  ======  ======
view     u       v       depth
=======  ======  ======  ======
front    +x      -y      -z      (camera at z = +inf)
back     -x      -y      +z
left     -z      -y      +x      (camera at x = -inf)
right    +z      -y      -x
=======  ======  ======  ======
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError

VIEW_NAMES = ("front", "back", "left", "right")

# (axis index, sign) for u, v and depth
_AXES = {
    "front": ((0, 1), (1, -1), (2, -1)),
    "back": ((0, -1), (1, -1), (2, 1)),
    "left": ((2, -1), (1, -1), (0, 1)),
    "right": ((2, 1), (1, -1), (0, -1)),
}

SignedAxis = tuple[int, int]


@dataclass(frozen=True)
class GridSpec:
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ConfigurationError(f"grid resolution must be an integer >= 2, got {self.N}")

    @property
    def num_voxels(self) -> int:
        return self.N ** 3

    def flat_index(self, c) -> int:
        x, y, z = (int(v) for v in c)
        return (x * self.N + y) * self.N + z

    def unflatten(self, idx: int) -> tuple[int, int, int]:
        x, rem = divmod(int(idx), self.N * self.N)
        y, z = divmod(rem, self.N)
        return (x, y, z)


@dataclass(frozen=True)
class ViewSpec:
    view_id: str
    u_axis: SignedAxis
    v_axis: SignedAxis
    depth_axis: SignedAxis
    V: int

    def __post_init__(self):
        axes = (self.u_axis, self.v_axis, self.depth_axis)
        if sorted(a for a, _ in axes) != [0, 1, 2] or any(s not in (1, -1) for _, s in axes):
            raise ConfigurationError(f"view {self.view_id!r}: axes must be a signed permutation of x, y, z")
        if self.V < 1:
            raise ConfigurationError("image side length must be positive")

    @property
    def index(self) -> int:
        return VIEW_NAMES.index(self.view_id)


def make_view(view_id: str, V: int) -> ViewSpec:
    if view_id not in _AXES:
        raise ConfigurationError(f"unknown view {view_id!r}; expected one of {VIEW_NAMES}")
    u, v, d = _AXES[view_id]
    return ViewSpec(view_id, u, v, d, V)


def canonical_views(V: int) -> list[ViewSpec]:
    return [make_view(name, V) for name in VIEW_NAMES]


def signed_component(coords: np.ndarray, axis: SignedAxis, N: int) -> np.ndarray:
    """Integer voxel coordinate along a signed axis (``N - 1 - c`` when negative)."""
    a, s = axis
    c = np.asarray(coords)[..., a]
    return c if s > 0 else N - 1 - c


def continuous_component(points, axis: SignedAxis, N: int):
    """Grid-unit position along a signed axis; works on numpy arrays and torch tensors."""
    a, s = axis
    c = points[..., a]
    return c if s > 0 else N - c


def _check_voxel(c, grid: GridSpec) -> np.ndarray:
    c = np.asarray(c)
    if c.shape[-1] != 3 or not np.issubdtype(c.dtype, np.integer):
        raise DomainError(f"voxel coordinates must be integer triples, got {c!r}")
    if np.any(c < 0) or np.any(c >= grid.N):
        raise DomainError(f"voxel coordinate {c.tolist()} outside grid of size {grid.N}")
    return c


def project_voxel(c, view: ViewSpec, grid: GridSpec) -> tuple[int, int]:
    """Pixel ``(u, v)`` containing the orthographic projection of voxel ``c``'s center."""
    c = _check_voxel(c, grid)
    cu = int(signed_component(c, view.u_axis, grid.N))
    cv = int(signed_component(c, view.v_axis, grid.N))
    # (2c+1)V / 2N in integers avoids float rounding at exact bin edges
    return ((2 * cu + 1) * view.V // (2 * grid.N), (2 * cv + 1) * view.V // (2 * grid.N))


def _pixel_to_lateral(p: int, V: int, N: int) -> int:
    return (2 * p + 1) * N // (2 * V)


def _lateral_to_voxels(cu, cv, depth, view: ViewSpec, N: int) -> np.ndarray:
    """Assemble voxel coordinates from signed-axis components (broadcasting)."""
    cu, cv, depth = np.broadcast_arrays(cu, cv, depth)
    out = np.empty(cu.shape + (3,), dtype=np.int64)
    for comp, (a, s) in ((cu, view.u_axis), (cv, view.v_axis), (depth, view.depth_axis)):
        out[..., a] = comp if s > 0 else N - 1 - comp
    return out


def ray_column(p, view: ViewSpec, grid: GridSpec) -> list[tuple[int, int, int]]:
    """The ``N`` voxels hit by the ray through pixel ``p = (u, v)``, ordered near to far."""
    u, v = (int(t) for t in p)
    if not (0 <= u < view.V and 0 <= v < view.V):
        raise DomainError(f"pixel {(u, v)} outside a {view.V}x{view.V} image")
    cu = _pixel_to_lateral(u, view.V, grid.N)
    cv = _pixel_to_lateral(v, view.V, grid.N)
    vox = _lateral_to_voxels(cu, cv, np.arange(grid.N), view, grid.N)
    return [tuple(int(t) for t in row) for row in vox]


@dataclass(frozen=True)
class ProjectionMap:
    """Precomputed correspondence tables for one grid and a list of views.

    ``voxel_to_pixel[k]`` has shape ``(N^3, 2)`` holding ``(u, v)`` per flat
    voxel index; ``pixel_to_column[k]`` has shape ``(V^2, N)`` holding flat
    voxel indices near-to-far for flat pixel ``v * V + u``.
    """

    grid: GridSpec
    views: tuple[ViewSpec, ...]
    voxel_to_pixel: np.ndarray
    pixel_to_column: np.ndarray
    voxel_to_pixel_flat: np.ndarray = field(repr=False)
    _tensors: dict = field(default_factory=dict, repr=False, compare=False)

    def tensor(self, name: str, device=None):
        """A table as a cached ``torch.long`` tensor on ``device``."""
        import torch

        key = (name, str(device))
        if key not in self._tensors:
            self._tensors[key] = torch.tensor(getattr(self, name), dtype=torch.long, device=device)
        return self._tensors[key]

    @property
    def V(self) -> int:
        return self.views[0].V

    @property
    def H(self) -> int:
        return self.pixel_to_column.shape[-1]


def all_voxel_coords(N: int) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(N),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)


def build_projection_tables(grid: GridSpec, views, require_multiple: bool = True) -> ProjectionMap:
    """Tables for ``views``; ``V`` must be a multiple of ``N`` unless ``require_multiple`` is off."""
    views = tuple(views)
    if not views:
        raise ConfigurationError("at least one view is required")
    V = views[0].V
    for view in views:
        if view.V != V:
            raise ConfigurationError("all views must share one image resolution")
        if view.V < grid.N:
            raise ConfigurationError(f"image side {view.V} smaller than grid side {grid.N}")
        if require_multiple and view.V % grid.N:
            raise ConfigurationError(f"image side {view.V} is not a multiple of grid side {grid.N}")
    N = grid.N
    coords = all_voxel_coords(N)
    v2p, p2c = [], []
    pix = np.arange(V)
    lateral = (2 * pix + 1) * N // (2 * V)
    for view in views:
        cu = signed_component(coords, view.u_axis, N)
        cv = signed_component(coords, view.v_axis, N)
        v2p.append(np.stack([(2 * cu + 1) * V // (2 * N), (2 * cv + 1) * V // (2 * N)], axis=-1))
        # pixel grid [v, u] -> lateral voxel components, then the full depth run
        lv, lu = np.meshgrid(lateral, lateral, indexing="ij")
        vox = _lateral_to_voxels(
            lu.reshape(-1, 1), lv.reshape(-1, 1), np.arange(N).reshape(1, -1), view, N
        )
        p2c.append((vox[..., 0] * N + vox[..., 1]) * N + vox[..., 2])
    v2p = np.stack(v2p).astype(np.int64)
    p2c = np.stack(p2c).astype(np.int64)
    flat = v2p[..., 1] * V + v2p[..., 0]
    for arr in (v2p, p2c, flat):
        arr.setflags(write=False)
    return ProjectionMap(grid, views, v2p, p2c, flat)
