import warnings

import numpy as np
import pytest
import torch

from voxsync.geometry import GridSpec, canonical_views, make_view
from voxsync.synthetic_data import generate_shape, render_reference_views
from voxsync.mv_decoder.mesh import (
    TriMesh,
    euler_characteristic,
    extract_isosurface,
    occupancy_to_box_mesh,
    occupancy_to_field,
    occupancy_to_mesh,
    read_obj,
    render_mesh_views,
    write_obj,
)


def ray_cast(mesh_v, faces, colors, view, N):
    """Per-pixel Moller-Trumbore along the view's depth axis; nearest hit wins."""
    V = view.V
    mask = np.zeros((V, V), bool)
    depth = np.ones((V, V))
    color = np.zeros((V, V, 3))
    (au, su), (av, sv), (ad, sd) = view.u_axis, view.v_axis, view.depth_axis
    direction = np.zeros(3)
    direction[ad] = sd
    for v in range(V):
        for u in range(V):
            o = np.zeros(3)
            pu, pv = (u + 0.5) * N / V, (v + 0.5) * N / V
            o[au] = pu if su > 0 else N - pu
            o[av] = pv if sv > 0 else N - pv
            o[ad] = -10.0 if sd > 0 else N + 10.0
            best = np.inf
            for f, (a, b, c) in enumerate(faces):
                e1, e2 = mesh_v[b] - mesh_v[a], mesh_v[c] - mesh_v[a]
                h = np.cross(direction, e2)
                det = np.dot(e1, h)
                if abs(det) < 1e-14:
                    continue
                s = o - mesh_v[a]
                l1 = np.dot(s, h) / det
                q = np.cross(s, e1)
                l2 = np.dot(direction, q) / det
                t = np.dot(e2, q) / det
                if l1 < 0 or l2 < 0 or l1 + l2 > 1:
                    continue
                hit = o + t * direction
                d = (hit[ad] if sd > 0 else N - hit[ad]) / N
                if d < best:
                    best = d
                    mask[v, u] = True
                    depth[v, u] = d
                    color[v, u] = (1 - l1 - l2) * colors[a] + l1 * colors[b] + l2 * colors[c]
    return mask, depth, color


def test_empty_mesh_renders_background():
    r = render_mesh_views(TriMesh.empty(), make_view("front", 8), GridSpec(4))
    assert not r.mask.any()
    assert torch.all(r.depth == 1.0)
    assert torch.all(r.color == 0)


def test_front_quad_full_frame():
    N = 4
    verts = torch.tensor([[0, 0, 3], [4, 0, 3], [4, 4, 3], [0, 4, 3]], dtype=torch.float64)
    faces = torch.tensor([[0, 1, 2], [0, 2, 3]])
    r = render_mesh_views(TriMesh(verts, faces), make_view("front", 16), GridSpec(N))
    assert r.mask.all()
    assert torch.allclose(r.depth, torch.full_like(r.depth, 0.25))
    expected = torch.tensor([0.5, 0.5, 1.0], dtype=torch.float64)
    assert torch.allclose(r.normal_mesh, expected.expand_as(r.normal_mesh))


@pytest.mark.parametrize("trial", range(100))
def test_rasterizer_matches_ray_casting(trial):
    rng = np.random.default_rng(1000 + trial)
    N, V = 4, 8
    n_v = int(rng.integers(3, 8))
    verts = rng.uniform(-0.5, N + 0.5, size=(n_v, 3))
    faces = np.array([rng.choice(n_v, 3, replace=False) for _ in range(int(rng.integers(1, 6)))])
    colors = rng.uniform(size=(n_v, 3))
    mesh = TriMesh(torch.tensor(verts), torch.tensor(faces), torch.tensor(colors))
    view = canonical_views(V)[trial % 4]
    r = render_mesh_views(mesh, view, GridSpec(N))
    mask, depth, color = ray_cast(verts, faces, colors, view, N)
    np.testing.assert_array_equal(r.mask.numpy(), mask)
    np.testing.assert_allclose(r.depth.numpy(), depth, rtol=0, atol=1e-9)
    np.testing.assert_allclose(r.color.numpy(), color, rtol=0, atol=1e-5)


def test_single_negative_corner_gives_closed_surface():
    field = torch.ones(5, 5, 5, dtype=torch.float64)
    field[2, 2, 2] = -1.0
    iso = extract_isosurface(field)
    _, faces = iso.mesh.numpy()
    assert len(faces) > 0
    assert euler_characteristic(faces) == 2


def test_uniform_negative_field_is_empty_with_warning():
    with pytest.warns(UserWarning):
        iso = extract_isosurface(-torch.ones(4, 4, 4))
    assert iso.empty and iso.mesh.is_empty


def test_uniform_positive_field_is_empty():
    with pytest.warns(UserWarning):
        assert extract_isosurface(torch.ones(4, 4, 4)).mesh.is_empty


def test_extracted_vertices_on_zero_crossing_and_outward():
    x = torch.linspace(0, 8, 9, dtype=torch.float64)
    g = torch.stack(torch.meshgrid(x, x, x, indexing="ij"), -1)
    field = (g - 4.0).norm(dim=-1) - 2.7
    iso = extract_isosurface(field)
    v = iso.mesh.vertices
    r = (v - 4.0).norm(dim=-1)
    assert (r - 2.7).abs().max() < 0.2
    centroid = v[iso.mesh.faces].mean(1) - 4.0
    assert ((iso.mesh.face_normals() * centroid).sum(-1) > 0).all()
    assert iso.displacement.abs().max() <= 0.5 + 1e-12


def test_extraction_is_differentiable():
    x = torch.linspace(0, 6, 7, dtype=torch.float64)
    g = torch.stack(torch.meshgrid(x, x, x, indexing="ij"), -1)
    field = ((g - 3.0).norm(dim=-1) - 1.8).requires_grad_()
    attrs = torch.rand(7, 7, 7, 3, dtype=torch.float64, requires_grad=True)
    iso = extract_isosurface(field, attrs)
    (iso.mesh.vertices.sum() + iso.mesh.colors.sum()).backward()
    assert field.grad.abs().sum() > 0 and attrs.grad.abs().sum() > 0


def test_deformed_samples_move_vertices_by_interpolated_offset():
    occ = np.zeros((3, 3, 3), bool)
    occ[1, 1, 1] = True
    field = torch.as_tensor(occupancy_to_field(occ), dtype=torch.float64)
    deform = torch.zeros(3, 3, 3, 3, dtype=torch.float64)
    deform[1, 1, 1] = torch.tensor([0.2, -0.1, 0.3])
    deform.requires_grad_()
    iso = extract_isosurface(field, pad_value=0.5, origin=0.5, deform=deform)
    # every vertex sits halfway along its edge, so it takes half the inside sample's offset
    assert torch.allclose(iso.mesh.vertices - iso.rest, 0.5 * deform[1, 1, 1].detach().expand(6, 3))
    assert torch.allclose(iso.displacement, iso.mesh.vertices - iso.rest)
    iso.mesh.vertices[:, 0].sum().backward()
    assert deform.grad[1, 1, 1, 0] == 3.0 and deform.grad[1, 1, 1, 1:].abs().sum() == 0


def test_mesh_render_color_gradient():
    verts = torch.tensor([[0.3, 0.2, 2.0], [3.7, 0.4, 2.0], [1.5, 3.6, 2.0]], dtype=torch.float64)
    colors = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    r = render_mesh_views(TriMesh(verts, torch.tensor([[0, 1, 2]]), colors), make_view("front", 8), GridSpec(4))
    r.color.sum().backward()
    assert colors.grad.abs().sum() > 0


def test_no_degenerate_triangles_from_occupancy():
    occ = np.zeros((6, 6, 6), bool)
    occ[1:4, 2:5, 1:3] = True
    occ[4, 4, 4] = True
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mesh = occupancy_to_mesh(occ)
    v, f = mesh.numpy()
    area = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    assert area.min() > 0
    assert f.min() >= 0 and f.max() < len(v)


def test_reference_surface_crosses_face_centers():
    occ = np.zeros((3, 3, 3), bool)
    occ[1, 1, 1] = True
    f = occupancy_to_field(occ)
    assert f[1, 1, 1] == -0.5 and f[0, 0, 0] == 0.5
    v, faces = occupancy_to_mesh(occ).numpy()
    # a single voxel gives an octahedron through its six face centers
    expected = np.array([[1, 1.5, 1.5], [2, 1.5, 1.5], [1.5, 1, 1.5], [1.5, 2, 1.5], [1.5, 1.5, 1], [1.5, 1.5, 2]])
    assert len(v) == 6 and len(faces) == 8
    assert np.allclose(np.sort(v, axis=0), np.sort(expected, axis=0))
    assert euler_characteristic(faces) == 2


def test_box_mesh_single_voxel_is_outward_cube():
    occ = np.zeros((3, 3, 3), bool)
    occ[1, 1, 1] = True
    mesh = occupancy_to_box_mesh(occ)
    v, faces = mesh.numpy()
    assert len(v) == 8 and len(faces) == 12
    assert v.min() == 1 and v.max() == 2
    outward = ((v[faces].mean(1) - 1.5) * mesh.face_normals().numpy()).sum(1)
    assert np.all(outward > 0)
    assert euler_characteristic(faces) == 2


def test_box_mesh_renders_like_the_reference_views():
    shape = generate_shape(2, 5, GridSpec(8))
    ref = render_reference_views(shape, V=32)
    mesh = occupancy_to_box_mesh(shape.occupancy)
    for k, view in enumerate(canonical_views(32)):
        r = render_mesh_views(mesh, view, GridSpec(8))
        np.testing.assert_array_equal(r.mask.numpy(), ref.mask[k])
        np.testing.assert_allclose(r.depth.numpy(), ref.depth[k], rtol=0, atol=1e-6)


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mesh = TriMesh.from_numpy(rng.uniform(size=(5, 3)), [[0, 1, 2], [2, 3, 4]], rng.uniform(size=(5, 3)),
                              rng.normal(size=(5, 3)), dtype=torch.float64)
    back = read_obj(write_obj(mesh, tmp_path / "m.obj"))
    assert torch.equal(back.faces, mesh.faces)
    for a, b in ((back.vertices, mesh.vertices), (back.colors, mesh.colors), (back.normals, mesh.normals)):
        assert torch.equal(a, b)
