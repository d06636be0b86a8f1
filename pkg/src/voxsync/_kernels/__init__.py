"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``VOXSYNC_PURE_PYTHON=1``
to force the fallback.  ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if not os.environ.get("VOXSYNC_PURE_PYTHON"):
    try:
        from . import _core as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(name, backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return getattr(_compiled, name)
    return getattr(_fallback, name)


def rasterize_triangles(xy, depth, faces, width, height, backend=None):
    """Z-buffer rasterisation of 2D-projected triangles at pixel centers.

    Returns ``(face_id, bary, zbuf)`` of shapes ``(H, W)``, ``(H, W, 3)`` and
    ``(H, W)``; uncovered pixels have ``face_id == -1`` and ``zbuf == inf``.
    Both windings are rasterised; on equal depth the earlier face wins.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    return _impl("rasterize_triangles", backend)(xy, depth, faces, int(width), int(height))


def point_triangle_distance(points, tris, backend=None):
    """Brute-force squared distance from each point to the nearest triangle.

    Returns ``(dist2, face_index, closest_point)``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    tris = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    return _impl("point_triangle_distance", backend)(points, tris)
