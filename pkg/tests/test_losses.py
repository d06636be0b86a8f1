from collections import defaultdict
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from voxsync.errors import ContractError
from voxsync.losses import (
    LossWeights,
    RenderedViews,
    VertexAttributes,
    gs_loss,
    mesh_loss,
    recon_loss,
    shared_corner_variance,
    ssim,
)



@pytest.fixture(autouse=True, scope="module")
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
W = LossWeights()


def ref_ssim(a, b):
    """skimage reference: uniform 7x7 window, population covariance, per-channel mean."""
    a, b = np.asarray(a), np.asarray(b)
    a = a.reshape(-1, *a.shape[-3:])
    b = b.reshape(-1, *b.shape[-3:])
    vals = [
        structural_similarity(x, y, win_size=7, gaussian_weights=False, use_sample_covariance=False,
                              data_range=1.0, channel_axis=-1)
        for x, y in zip(a, b)
    ]
    return float(np.mean(vals))


def ref_recon(a, b, p=0.0):
    return np.abs(np.asarray(a) - np.asarray(b)).mean() + 0.2 * (1 - ref_ssim(a, b)) + 0.2 * p


def test_published_weights():
    assert (W.ssim, W.perceptual, W.color, W.depth, W.front, W.tsdf) == (0.2, 0.2, 0.4, 10.0, 0.1, 0.01)


def test_ssim_matches_reference_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 16, 16, 3)), rng.random((2, 16, 16, 3))
    s = ssim(torch.tensor(a), torch.tensor(b)).item()
    assert abs(s - ref_ssim(a, b)) < 1e-9
    assert abs(s - ssim(torch.tensor(b), torch.tensor(a)).item()) < 1e-9
    assert abs(ssim(torch.tensor(a), torch.tensor(a)).item() - 1) < 1e-12


def test_recon_examples():
    rng = np.random.default_rng(1)
    img = torch.tensor(rng.random((12, 12, 3)))
    assert recon_loss(img, img, lambda x, y: x.new_zeros(())).item() == pytest.approx(0.0, abs=1e-12)
    a, b = torch.full((12, 12, 3), 0.2), torch.full((12, 12, 3), 0.7)
    assert recon_loss(a, b).item() >= 0.5


def test_recon_termwise_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 10, 10, 3)), rng.random((3, 10, 10, 3))
    perceptual = lambda x, y: ((x - y) ** 2).mean()  # noqa: E731
    got = recon_loss(torch.tensor(a), torch.tensor(b), perceptual).item()
    assert abs(got - ref_recon(a, b, ((a - b) ** 2).mean())) < 1e-6


def test_gs_loss_examples():
    img = torch.rand(4, 8, 8, 3)
    gs = SimpleNamespace(scale=torch.full((1, 1, 3), 0.5), opacity=torch.ones(1, 1))
    total, parts = gs_loss(img, img, gs)
    assert parts["vol"].item() == pytest.approx(0.125)
    assert parts["alpha"].item() == 0.0
    assert total.item() == pytest.approx(0.125, abs=1e-12)
    gs = SimpleNamespace(scale=torch.rand(1, 2, 3), opacity=torch.full((1, 2), 0.5))
    assert gs_loss(img, img, gs)[1]["alpha"].item() == pytest.approx(0.25)


def test_gs_loss_brute_force():
    rng = np.random.default_rng(3)
    L, K = 5, 3
    scale, opacity = rng.random((L, K, 3)), rng.random((L, K))
    a, b = rng.random((4, 8, 8, 3)), rng.random((4, 8, 8, 3))
    gs = SimpleNamespace(scale=torch.tensor(scale), opacity=torch.tensor(opacity))
    total, parts = gs_loss(torch.tensor(a), torch.tensor(b), gs)
    vol = alpha = 0.0
    for i in range(L):
        for k in range(K):
            vol += scale[i, k, 0] * scale[i, k, 1] * scale[i, k, 2]
            alpha += (1 - opacity[i, k]) ** 2
    vol, alpha = vol / (L * K), alpha / (L * K)
    assert abs(parts["vol"].item() - vol) < 1e-9
    assert abs(parts["alpha"].item() - alpha) < 1e-9
    assert abs(total.item() - (ref_recon(a, b) + vol + alpha)) < 1e-6
    # any live gaussian keeps the volume term strictly positive
    assert parts["vol"].item() > 0


def views(rng, n=4, H=8, mask=None):
    m = (rng.random((n, H, H)) < 0.6) if mask is None else mask
    return RenderedViews(
        color=torch.tensor(rng.random((n, H, H, 3))),
        normal=torch.tensor(rng.random((n, H, H, 3))),
        normal_mesh=torch.tensor(rng.random((n, H, H, 3))),
        depth=torch.tensor(rng.random((n, H, H))),
        mask=torch.tensor(m),
    )


def reg_inputs(rng, L=6):
    ids = torch.tensor(rng.integers(0, 12, size=(L, 8)))
    return VertexAttributes(ids, torch.tensor(rng.random((L, 8, 4))), torch.tensor(rng.random((9, 3)) - 0.5))


def test_mesh_loss_zero_case():
    rng = np.random.default_rng(4)
    r = views(rng)
    attrs = VertexAttributes(torch.zeros(2, 8, dtype=torch.long), torch.zeros(2, 8, 3), torch.zeros(5, 3))
    total, _ = mesh_loss(r, r, torch.zeros(2, 8), attrs)
    assert abs(total.item()) < 1e-12


def test_mesh_loss_depth_huber_example():
    rng = np.random.default_rng(5)
    gt = views(rng, mask=np.ones((4, 8, 8), bool))
    pred = replace(gt, depth=gt.depth + 0.1)
    attrs = VertexAttributes(torch.zeros(0, 8, dtype=torch.long), torch.zeros(0, 8, 3), torch.zeros(0, 3))
    _, parts = mesh_loss(pred, gt, torch.zeros(0), attrs)
    assert 10 * parts["depth"].item() == pytest.approx(0.05)
    assert parts["geo"].item() == pytest.approx(0.05)


def ref_variance(ids, attrs):
    groups = defaultdict(list)
    for i, row in zip(ids.reshape(-1), attrs.reshape(len(ids.reshape(-1)), -1)):
        groups[int(i)].append(row)
    vs = [np.var(np.stack(g), axis=0) for g in groups.values() if len(g) >= 2]
    return float(np.mean(vs)) if vs else 0.0


def test_mesh_loss_termwise_oracle():
    rng = np.random.default_rng(6)
    pred, gt = views(rng), views(rng)
    attrs = reg_inputs(rng)
    field = torch.tensor(rng.normal(size=(6, 8)))
    total, parts = mesh_loss(pred, gt, field, attrs)
    P = {k: getattr(pred, k).numpy() for k in ("color", "normal", "normal_mesh", "depth", "mask")}
    G = {k: getattr(gt, k).numpy() for k in ("color", "normal", "normal_mesh", "depth", "mask")}
    mask = np.abs(P["mask"].astype(float) - G["mask"].astype(float)).mean()
    both = P["mask"] & G["mask"]
    d = np.abs(P["depth"][both] - G["depth"][both])
    hub = np.where(d <= 1, 0.5 * d**2, d - 0.5).mean()
    geo = mask + 10 * hub + ref_recon(P["normal_mesh"], G["normal_mesh"]) + 0.1 * ref_recon(P["normal_mesh"][0], G["normal_mesh"][0])
    color = ref_recon(P["color"], G["color"]) + ref_recon(P["normal"], G["normal"]) + 0.1 * ref_recon(P["color"][0], G["color"][0])
    consist = ref_variance(attrs.corner_ids.numpy(), attrs.corner_attrs.numpy())
    dev = np.mean(np.sum(attrs.displacement.numpy() ** 2, -1))
    tsdf = np.mean(field.numpy() ** 2)
    expected = geo + 0.4 * color + consist + dev + 0.01 * tsdf
    assert abs(parts["consist"].item() - consist) < 1e-9
    assert abs(total.item() - expected) < 1e-6


@pytest.mark.parametrize("name,term", [
    ("ssim", None), ("perceptual", None), ("color", "color"), ("depth", "depth"),
    ("front", None), ("tsdf", "tsdf"),
])
def test_weight_audit(name, term):
    rng = np.random.default_rng(7)
    pred, gt = views(rng), views(rng)
    attrs = reg_inputs(rng)
    field = torch.tensor(rng.normal(size=(6, 8)))
    perceptual = lambda x, y: (x - y).abs().mean() * 2  # noqa: E731
    base, _ = mesh_loss(pred, gt, field, attrs, W, perceptual)
    changed, _ = mesh_loss(pred, gt, field, attrs, replace(W, **{name: getattr(W, name) * 2}), perceptual)
    assert changed.item() != pytest.approx(base.item(), rel=1e-9)


def test_missing_front_view():
    rng = np.random.default_rng(8)
    r = replace(views(rng), view_ids=("back", "left", "right", "top"))
    attrs = reg_inputs(rng)
    with pytest.raises(ContractError):
        mesh_loss(r, r, torch.zeros(1), attrs)


def test_losses_nonnegative():
    rng = np.random.default_rng(9)
    for _ in range(5):
        total, parts = mesh_loss(views(rng), views(rng), torch.tensor(rng.normal(size=(6, 8))), reg_inputs(rng))
        assert all(v.item() >= -1e-12 for v in parts.values())


def test_term_gradients_4x4():
    rng = np.random.default_rng(10)
    a = torch.tensor(rng.random((2, 4, 4, 3)), requires_grad=True)
    b = torch.tensor(rng.random((2, 4, 4, 3)))
    assert torch.autograd.gradcheck(lambda x: recon_loss(x, b), (a,), eps=1e-6, atol=1e-5)
    assert torch.autograd.gradcheck(lambda x: ssim(x, b), (a,), eps=1e-6, atol=1e-5)
    d = torch.tensor(rng.random((2, 4, 4)), requires_grad=True)
    gt = views(rng, n=2, H=4, mask=np.ones((2, 4, 4), bool))
    gt.view_ids = ("front", "back")
    attrs = VertexAttributes(torch.zeros(0, 8, dtype=torch.long), torch.zeros(0, 8, 3), torch.zeros(0, 3))

    def depth_term(x):
        return mesh_loss(replace(gt, depth=x), gt, torch.zeros(0), attrs)[1]["depth"]

    assert torch.autograd.gradcheck(depth_term, (d,), eps=1e-6, atol=1e-5)
    ids = torch.tensor(rng.integers(0, 5, size=(3, 8)))
    vals = torch.tensor(rng.random((3, 8, 2)), requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: shared_corner_variance(ids, v), (vals,), eps=1e-6, atol=1e-5)
