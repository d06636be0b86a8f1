"""Pure-numpy implementations of the compiled kernels (same semantics, slower)."""
import numpy as np


def rasterize_triangles(xy, depth, faces, width, height):
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    for f, (a, b, c) in enumerate(faces):
        (ax, ay), (bx, by), (cx, cy) = xy[a], xy[b], xy[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        py, px = np.meshgrid(np.arange(y0, y1 + 1) + 0.5, np.arange(x0, x1 + 1) + 0.5, indexing="ij")
        w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
        w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
        w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        w0, w1, w2 = w0 / area, w1 / area, w2 / area
        z = w0 * depth[a] + w1 * depth[b] + w2 * depth[c]
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < sub)
        sub[win] = z[win]
        face_id[y0:y1 + 1, x0:x1 + 1][win] = f
        bsub = bary[y0:y1 + 1, x0:x1 + 1]
        bsub[win] = np.stack([w0[win], w1[win], w2[win]], axis=-1)
    return face_id, bary, zbuf


def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all arrays (..., 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        out = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]
        # later assignments override earlier ones, so apply regions in reverse priority
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(m[..., None], b + w[..., None] * (c - b), out)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w = d2 / (d2 - d6)
        out = np.where(m[..., None], a + w[..., None] * ac, out)
        m = (d6 >= 0) & (d5 <= d6)
        out = np.where(m[..., None], c, out)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = d1 / (d1 - d3)
        out = np.where(m[..., None], a + v[..., None] * ab, out)
        m = (d3 >= 0) & (d4 <= d3)
        out = np.where(m[..., None], b, out)
        m = (d1 <= 0) & (d2 <= 0)
        out = np.where(m[..., None], a, out)
    return out


def point_triangle_distance(points, tris, chunk=256):
    P = points.shape[0]
    dist2 = np.full(P, np.inf)
    face = np.full(P, -1, dtype=np.int64)
    closest = np.zeros((P, 3))
    if tris.shape[0] == 0:
        return dist2, face, closest
    a, b, c = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    for s in range(0, P, chunk):
        p = points[s:s + chunk, None, :]
        q = _closest_on_triangles(p, a, b, c)
        d = np.sum((p - q) ** 2, axis=-1)
        k = np.argmin(d, axis=1)
        rows = np.arange(len(k))
        dist2[s:s + chunk] = d[rows, k]
        face[s:s + chunk] = k
        closest[s:s + chunk] = q[rows, k]
    return dist2, face, closest
