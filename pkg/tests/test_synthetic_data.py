import json

import numpy as np
import pytest

from voxsync.errors import ConfigurationError, CorruptFileError, VersionError
from voxsync.geometry import GridSpec, build_projection_tables, canonical_views
from voxsync.synthetic_data import (
    ShapeSample,
    generate_dataset,
    generate_shape,
    is_six_connected,
    load_dataset,
    load_sample,
    render_reference_views,
    save_sample,
    stick_figure,
)

G16 = GridSpec(16)


def test_deterministic():
    a = generate_shape(7, 3, G16)
    b = generate_shape(7, 3, G16)
    assert a == b


def test_primitive_count():
    for c in range(1, 6):
        assert len(stick_figure(np.random.default_rng(0), c)) == c + 2
    with pytest.raises(ConfigurationError):
        generate_shape(0, 6, G16)


def test_hundred_seeds_connected_nonempty():
    for seed in range(100):
        s = generate_shape(seed, 1 + seed % 5, G16)
        assert s.occupancy.any()
        assert is_six_connected(s.occupancy)
        surf = s.surface_mask()
        norms = np.linalg.norm(s.normals[surf], axis=-1)
        assert np.all(np.abs(norms - 1) < 1e-4)
        assert np.all(s.colors[s.occupancy] >= 0) and np.all(s.colors <= 1)


def slab_sample(N=8):
    occ = np.zeros((N, N, N), bool)
    occ[:, :, N - 3:] = True  # a full-face slab at the front (large z)
    rng = np.random.default_rng(0)
    colors = np.where(occ[..., None], np.round(rng.random((N, N, N, 3)) * 255) / 255, 0).astype(np.float32)
    normals = np.zeros((N, N, N, 3), np.float32)
    normals[:, :, N - 1] = (0, 0, 1)
    normals[:, :, N - 3, 2] = -1
    return ShapeSample(occ, colors, normals, 0, 1)


def test_slab_front_render():
    s = slab_sample()
    r = render_reference_views(s, canonical_views(16))
    front = r.color[0].astype(float) / 255
    # voxel (x, y, N-1) seen at pixel block u = x, v = N-1-y
    expected = np.repeat(np.repeat(s.colors[:, ::-1, -1].transpose(1, 0, 2), 2, 0), 2, 1)
    np.testing.assert_allclose(front, expected, atol=0.5 / 255)
    assert np.all(r.normal[0] == np.array([128, 128, 255]))
    assert r.mask[0].all()
    np.testing.assert_array_equal(r.depth[0], 0.0)


def test_empty_column_is_background():
    s = slab_sample()
    s.occupancy[0] = False  # carve the x = 0 layer
    r = render_reference_views(s, canonical_views(16))
    assert not r.mask[0][:, :2].any()
    assert np.all(r.color[0][:, :2] == 0)
    assert np.all(r.depth[0][:, :2] == 1.0)


def test_first_hit_matches_ray_column():
    s = generate_shape(3, 5, G16)
    r = render_reference_views(s, canonical_views(32))
    proj = build_projection_tables(G16, canonical_views(32))
    occ = s.occupancy.reshape(-1)
    for k in range(4):
        for pix in range(0, 32 * 32, 7):
            col = proj.pixel_to_column[k, pix]
            hits = np.flatnonzero(occ[col])
            v, u = divmod(pix, 32)
            if hits.size == 0:
                assert not r.mask[k, v, u]
            else:
                vox = col[hits[0]]
                assert r.mask[k, v, u]
                assert r.depth[k, v, u] == pytest.approx(hits[0] / 16)
                np.testing.assert_array_equal(
                    r.color[k, v, u], np.round(s.colors.reshape(-1, 3)[vox] * 255).astype(np.uint8)
                )


def test_left_right_mirror_renders():
    s = generate_shape(11, 5, G16)
    occ = s.occupancy | s.occupancy[::-1]
    sym = ShapeSample(occ, np.zeros(occ.shape + (3,), np.float32), np.zeros(occ.shape + (3,), np.float32), 0, 1)
    r = render_reference_views(sym, canonical_views(32))
    np.testing.assert_array_equal(r.mask[2], r.mask[3][:, ::-1])
    np.testing.assert_array_equal(r.depth[2], r.depth[3][:, ::-1])


def test_round_trip(tmp_path):
    s = generate_shape(5, 4, G16)
    r = render_reference_views(s, canonical_views(64))
    path = save_sample(s, r, tmp_path)
    s2, r2 = load_sample(path)
    assert s2 == s and r2 == r


def test_version_and_corruption_errors(tmp_path):
    s = generate_shape(5, 2, G16)
    path = save_sample(s, render_reference_views(s, canonical_views(16)), tmp_path)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["version"] = "voxsync-conv-2"
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_sample(path)
    path = save_sample(s, render_reference_views(s, canonical_views(16)), tmp_path / "b")
    (path / "shape.npz").write_bytes(b"not a zip archive")
    with pytest.raises(CorruptFileError):
        load_sample(path)


def test_bulk_dataset_round_trip(tmp_path):
    seeds = list(range(100))
    generate_dataset(seeds, 3, 16, 16, tmp_path, eval_seeds=seeds[-10:])
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 100
    for seed, (sample, _) in zip(seeds, loaded):
        ref = generate_shape(seed, 3, G16)
        inter = np.logical_and(ref.occupancy, sample.occupancy).sum()
        union = np.logical_or(ref.occupancy, sample.occupancy).sum()
        assert inter / union == 1.0
    assert len(load_dataset(tmp_path, "eval")) == 10
