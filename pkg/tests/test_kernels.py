import numpy as np
import pytest

from voxsync import _kernels

backends = ["python"] + (["cython"] if _kernels.BACKEND == "cython" else [])


def segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def oracle_point_triangle(p, a, b, c):
    """Plane projection if it lands inside, else the nearest of the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentric coordinates by area ratios
    area = np.dot(np.cross(b - a, c - a), n)
    l0 = np.dot(np.cross(c - b, q - b), n) / area
    l1 = np.dot(np.cross(a - c, q - c), n) / area
    l2 = 1 - l0 - l1
    if min(l0, l1, l2) >= 0:
        return abs(np.dot(p - a, n))
    return min(segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a))


@pytest.mark.parametrize("backend", backends)
def test_point_triangle_matches_oracle(backend):
    rng = np.random.default_rng(0)
    tris = rng.normal(size=(12, 3, 3))
    pts = rng.normal(size=(200, 3)) * 1.5
    d2, face, closest = _kernels.point_triangle_distance(pts, tris, backend=backend)
    for i, p in enumerate(pts):
        expected = min(oracle_point_triangle(p, *t) for t in tris)
        assert abs(np.sqrt(d2[i]) - expected) < 1e-9
        assert abs(np.linalg.norm(p - closest[i]) - np.sqrt(d2[i])) < 1e-9


def test_backends_agree():
    if len(backends) < 2:
        pytest.skip("compiled kernels unavailable")
    rng = np.random.default_rng(1)
    xy = rng.uniform(-2, 18, size=(30, 2))
    z = rng.uniform(0, 1, size=30)
    faces = rng.integers(0, 30, size=(25, 3))
    a = _kernels.rasterize_triangles(xy, z, faces, 16, 16, backend="python")
    b = _kernels.rasterize_triangles(xy, z, faces, 16, 16, backend="cython")
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    tris = rng.normal(size=(40, 3, 3))
    pts = rng.normal(size=(300, 3))
    a = _kernels.point_triangle_distance(pts, tris, backend="python")
    b = _kernels.point_triangle_distance(pts, tris, backend="cython")
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[2], b[2], atol=1e-12)


@pytest.mark.parametrize("backend", backends)
def test_rasterize_full_quad(backend):
    xy = np.array([[0, 0], [8, 0], [8, 8], [0, 8]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    fid, bary, z = _kernels.rasterize_triangles(xy, np.full(4, 0.25), faces, 8, 8, backend=backend)
    assert np.all(fid >= 0)
    np.testing.assert_allclose(z, 0.25)
    np.testing.assert_allclose(bary.sum(-1), 1.0)


@pytest.mark.parametrize("backend", backends)
def test_rasterize_empty(backend):
    fid, bary, z = _kernels.rasterize_triangles(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), int), 4, 4, backend=backend)
    assert np.all(fid == -1) and np.all(np.isinf(z))
