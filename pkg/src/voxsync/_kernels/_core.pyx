# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: triangle z-buffer rasterisation and point-triangle distance."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, INFINITY

cnp.import_array()


def rasterize_triangles(double[:, ::1] xy, double[::1] depth, long long[:, ::1] faces,
                        int width, int height):
    cdef Py_ssize_t F = faces.shape[0]
    face_id_arr = np.full((height, width), -1, dtype=np.int64)
    bary_arr = np.zeros((height, width, 3), dtype=np.float64)
    zbuf_arr = np.full((height, width), np.inf, dtype=np.float64)
    cdef long long[:, ::1] face_id = face_id_arr
    cdef double[:, :, ::1] bary = bary_arr
    cdef double[:, ::1] zbuf = zbuf_arr
    cdef Py_ssize_t f, i, j
    cdef long long a, b, c
    cdef double ax, ay, bx, by, cx, cy, area, px, py, w0, w1, w2, z
    cdef int x0, x1, y0, y1
    for f in range(F):
        a = faces[f, 0]; b = faces[f, 1]; c = faces[f, 2]
        ax = xy[a, 0]; ay = xy[a, 1]
        bx = xy[b, 0]; by = xy[b, 1]
        cx = xy[c, 0]; cy = xy[c, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = <int>floor(min(ax, min(bx, cx)) - 0.5)
        x1 = <int>ceil(max(ax, max(bx, cx)) - 0.5)
        y0 = <int>floor(min(ay, min(by, cy)) - 0.5)
        y1 = <int>ceil(max(ay, max(by, cy)) - 0.5)
        if x0 < 0: x0 = 0
        if y0 < 0: y0 = 0
        if x1 > width - 1: x1 = width - 1
        if y1 > height - 1: y1 = height - 1
        for j in range(y0, y1 + 1):
            py = j + 0.5
            for i in range(x0, x1 + 1):
                px = i + 0.5
                w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
                w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
                if area > 0:
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                else:
                    if w0 > 0 or w1 > 0 or w2 > 0:
                        continue
                w0 = w0 / area; w1 = w1 / area; w2 = w2 / area
                z = w0 * depth[a] + w1 * depth[b] + w2 * depth[c]
                if z < zbuf[j, i]:
                    zbuf[j, i] = z
                    face_id[j, i] = f
                    bary[j, i, 0] = w0
                    bary[j, i, 1] = w1
                    bary[j, i, 2] = w2
    return face_id_arr, bary_arr, zbuf_arr


cdef inline double dot3(double ax, double ay, double az, double bx, double by, double bz) nogil:
    return ax * bx + ay * by + az * bz


cdef void closest_on_triangle(double px, double py, double pz,
                              double ax, double ay, double az,
                              double bx, double by, double bz,
                              double cx, double cy, double cz,
                              double* out) nogil:
    # region classification of the closest feature (vertex, edge or face)
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = dot3(abx, aby, abz, apx, apy, apz)
    cdef double d2 = dot3(acx, acy, acz, apx, apy, apz)
    cdef double bpx, bpy, bpz, cpx, cpy, cpz, d3, d4, d5, d6, va, vb, vc, v, w, denom
    if d1 <= 0 and d2 <= 0:
        out[0] = ax; out[1] = ay; out[2] = az
        return
    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = dot3(abx, aby, abz, bpx, bpy, bpz)
    d4 = dot3(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0 and d4 <= d3:
        out[0] = bx; out[1] = by; out[2] = bz
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        out[0] = ax + v * abx; out[1] = ay + v * aby; out[2] = az + v * abz
        return
    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = dot3(abx, aby, abz, cpx, cpy, cpz)
    d6 = dot3(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0 and d5 <= d6:
        out[0] = cx; out[1] = cy; out[2] = cz
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        out[0] = ax + w * acx; out[1] = ay + w * acy; out[2] = az + w * acz
        return
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = bx + w * (cx - bx); out[1] = by + w * (cy - by); out[2] = bz + w * (cz - bz)
        return
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = ax + abx * v + acx * w
    out[1] = ay + aby * v + acy * w
    out[2] = az + abz * v + acz * w


def point_triangle_distance(double[:, ::1] points, double[:, :, ::1] tris):
    cdef Py_ssize_t P = points.shape[0], F = tris.shape[0]
    dist2_arr = np.full(P, np.inf, dtype=np.float64)
    face_arr = np.full(P, -1, dtype=np.int64)
    closest_arr = np.zeros((P, 3), dtype=np.float64)
    cdef double[::1] dist2 = dist2_arr
    cdef long long[::1] face = face_arr
    cdef double[:, ::1] closest = closest_arr
    cdef double q[3]
    cdef double d, dx, dy, dz
    cdef Py_ssize_t p, f
    with nogil:
        for p in range(P):
            for f in range(F):
                closest_on_triangle(points[p, 0], points[p, 1], points[p, 2],
                                    tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                                    tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                                    tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2], q)
                dx = points[p, 0] - q[0]; dy = points[p, 1] - q[1]; dz = points[p, 2] - q[2]
                d = dx * dx + dy * dy + dz * dz
                if d < dist2[p]:
                    dist2[p] = d
                    face[p] = f
                    closest[p, 0] = q[0]; closest[p, 1] = q[1]; closest[p, 2] = q[2]
    return dist2_arr, face_arr, closest_arr
