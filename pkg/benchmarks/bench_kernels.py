"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are run on the same inputs and their outputs are checked to
agree before any timing is reported.
"""
import argparse
import timeit

import numpy as np

from voxsync import _kernels
from voxsync.geometry import GridSpec
from voxsync.mv_decoder import occupancy_to_mesh
from voxsync.synthetic_data import generate_shape


def raster_case(N=32, V=128):
    mesh = occupancy_to_mesh(generate_shape(3, 5, GridSpec(N)).occupancy)
    verts, faces = mesh.numpy()
    xy = verts[:, :2] * (V / N)
    return (xy, verts[:, 2], faces, V, V), f"rasterize {len(faces)} faces at {V}x{V}"


def distance_case(n_points=2000, n_tris=400, seed=0):
    rng = np.random.default_rng(seed)
    points = rng.random((n_points, 3))
    tris = rng.random((n_tris, 3, 3))
    return (points, tris), f"distance {n_points} points x {n_tris} triangles"


def check_same(a, b):
    for x, y in zip(a, b):
        np.testing.assert_allclose(np.asarray(x, float), np.asarray(y, float), atol=1e-9)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    cases = [("rasterize_triangles", *raster_case()), ("point_triangle_distance", *distance_case())]
    print(f"{'case':48s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    for name, inputs, label in cases:
        fn = getattr(_kernels, name)
        check_same(fn(*inputs, backend="cython"), fn(*inputs, backend="python"))
        times = {}
        for backend in ("cython", "python"):
            t = timeit.repeat(lambda: fn(*inputs, backend=backend), number=1, repeat=args.repeat)
            times[backend] = min(t) * 1e3
        print(f"{label:48s} {times['cython']:10.2f} {times['python']:10.2f} {times['python'] / times['cython']:7.1f}x")


if __name__ == "__main__":
    main()
