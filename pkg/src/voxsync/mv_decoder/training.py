"""Training and evaluation drivers for the structured-latent generator and the two decoders."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from ..checkpoint import load_checkpoint, restore, save_checkpoint
from ..errors import EmptyShapeError, TrainingDivergedError
from ..geometry import GridSpec, build_projection_tables, canonical_views
from ..losses import LossWeights, RenderedViews, VertexAttributes, gs_loss, mesh_loss
from ..metrics import evaluate_appearance, score_meshes, voxel_iou
from .decoders import GaussianDecoder, MeshDecoder, occupancy_from_field
from .features import FeatureExtractor
from .gaussians import render_gaussians
from .latents import LatentFlowModel, SLatEncoder, StructuredLatentSet, generate_structured_latents, latent_flow_loss
from .mesh import occupancy_to_box_mesh, render_mesh_views


@dataclass
class DecoderTargets:
    """Ground truth of one shape as float tensors."""

    occupancy: np.ndarray
    images: torch.Tensor  # (4, 2, V, V, 3) in [0, 1]
    mask: torch.Tensor  # (4, V, V)
    depth: torch.Tensor  # (4, V, V)
    cond_image: torch.Tensor  # (V, V, 3)

    @classmethod
    def from_sample(cls, shape, views) -> "DecoderTargets":
        imgs = torch.as_tensor(views.as_float())
        return cls(shape.occupancy, imgs, torch.as_tensor(views.mask), torch.as_tensor(views.depth),
                   torch.as_tensor(views.condition_image))

    def rendered(self) -> RenderedViews:
        normal = self.images[:, 1]
        return RenderedViews(self.images[:, 0], normal, normal, self.depth, self.mask.float())


class LatentTrainer:
    """Fits the structured-latent flow model to frozen-encoder latents of the training shapes."""

    def __init__(self, cfg_dec, samples, encoder: SLatEncoder, seed: int = 0, log=None):
        self.cfg, self.log = cfg_dec, log or (lambda record: None)
        N, V = samples[0][0].N, samples[0][1].V
        self.items = [(encoder(s.occupancy, s.colors, s.normals), torch.as_tensor(v.condition_image))
                      for s, v in samples]
        self.model = LatentFlowModel(N, V, cfg_dec.d_z, cfg_dec.latent_width, cfg_dec.latent_blocks, seed=seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg_dec.latent_lr)
        self.generator = torch.Generator().manual_seed(seed + 29)
        self.step = 0

    def train(self, steps: int | None = None) -> list:
        steps = self.cfg.latent_steps if steps is None else steps
        history = []
        for _ in range(steps):
            loss = latent_flow_loss(self.model, self.items, self.generator)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"latent flow loss became {loss.item()} at step {self.step}")
            self.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), 1.0)
            self.optimizer.step()
            history.append(loss.item())
            if self.step % self.cfg.log_every == 0:
                self.log({"stage": "latent", "step": self.step, "loss": loss.item()})
            self.step += 1
        return history


class DecoderTrainer:
    """Trains the feature extractor with the Gaussian and mesh decoders on encoder latents.

    ``injection=False`` keeps the injection modules but freezes their zero
    gates, which makes both decoders ignore the multiview features.
    """

    def __init__(self, cfg_dec, samples, encoder: SLatEncoder, injection: bool | None = None, seed: int = 0,
                 weights: LossWeights = LossWeights(), log=None):
        self.cfg, self.weights = cfg_dec, weights
        self.log = log or (lambda record: None)
        self.injection = cfg_dec.injection if injection is None else injection
        self.N, self.V = samples[0][0].N, samples[0][1].V
        self.grid = GridSpec(self.N)
        self.views = canonical_views(self.V)
        self.encoder = encoder
        self.targets = [DecoderTargets.from_sample(s, v) for s, v in samples]
        self.latents = [encoder(s.occupancy, s.colors, s.normals) for s, _ in samples]
        torch.manual_seed(seed)
        self.extractor = FeatureExtractor(cfg_dec.feat_dim, cfg_dec.encoder_channels, cfg_dec.upsample)
        self.proj = build_projection_tables(self.grid, canonical_views(self.extractor.output_size(self.V)))
        kw = dict(width=cfg_dec.width, blocks=cfg_dec.blocks, heads=cfg_dec.heads, feat_dim=cfg_dec.feat_dim)
        self.gs_decoder = GaussianDecoder(self.N, cfg_dec.d_z, cfg_dec.gaussians_per_voxel, **kw)
        self.mesh_decoder = MeshDecoder(self.N, cfg_dec.d_z, **kw)
        if not self.injection:
            self.gs_decoder.freeze_injection()
            self.mesh_decoder.freeze_injection()
        params = [p for m in self.modules().values() for p in m.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=cfg_dec.lr)
        self.generator = torch.Generator().manual_seed(seed + 31)
        self.step = 0

    def modules(self) -> dict:
        return {"extractor": self.extractor, "gs_decoder": self.gs_decoder, "mesh_decoder": self.mesh_decoder}

    def feature_maps(self, target: DecoderTargets) -> torch.Tensor:
        return self.extractor(target.images)[0]

    def render_gaussian_views(self, gs):
        return torch.stack([render_gaussians(gs, view, self.grid)[0] for view in self.views])

    def render_mesh(self, mesh) -> RenderedViews:
        r = [render_mesh_views(mesh, view, self.grid) for view in self.views]
        return RenderedViews(torch.stack([x.color for x in r]), torch.stack([x.normal for x in r]),
                             torch.stack([x.normal_mesh for x in r]), torch.stack([x.depth for x in r]),
                             torch.stack([x.mask for x in r]).float())

    def losses(self, slat: StructuredLatentSet, target: DecoderTargets):
        maps = self.feature_maps(target)
        gs = self.gs_decoder(slat, maps, self.proj)
        g_total, g_terms = gs_loss(self.render_gaussian_views(gs), target.images[:, 0], gs, self.weights)
        dec = self.mesh_decoder(slat, maps, self.proj)
        attrs = VertexAttributes(dec.corner_ids, dec.corner_attrs, dec.iso.displacement)
        m_total, m_terms = mesh_loss(self.render_mesh(dec.mesh), target.rendered(), dec.voxel_field, attrs,
                                     self.weights)
        terms = {f"gs_{k}": v for k, v in g_terms.items()} | {f"mesh_{k}": v for k, v in m_terms.items()}
        return g_total + m_total, terms

    def train(self, steps: int | None = None) -> list:
        steps = self.cfg.steps if steps is None else steps
        history = []
        t0 = time.time()
        for _ in range(steps):
            i = int(torch.randint(len(self.targets), (1,), generator=self.generator))
            loss, terms = self.losses(self.latents[i], self.targets[i])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"decoder loss became {loss.item()} at step {self.step}")
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            history.append(loss.item())
            if self.step % self.cfg.log_every == 0:
                record = {k: round(v.item(), 6) for k, v in terms.items()}
                self.log({"stage": "decoder", "injection": self.injection, "step": self.step, "loss": loss.item(),
                          **record, "elapsed": round(time.time() - t0, 2)})
            self.step += 1
        return history

    @torch.no_grad()
    def evaluate(self, slat: StructuredLatentSet, target: DecoderTargets, n_samples: int = 10000,
                 seed: int = 0, icp: bool = False) -> dict:
        """Splat-render PSNR/SSIM against the color views and mesh geometry against the voxel boxes."""
        maps = self.feature_maps(target)
        gs = self.gs_decoder(slat, maps, self.proj)
        psnr, ssim = evaluate_appearance(self.render_gaussian_views(gs).numpy(), target.images[:, 0].numpy())
        dec = self.mesh_decoder(slat, maps, self.proj)
        out = {"psnr": psnr, "ssim": ssim, "field_iou": voxel_iou(occupancy_from_field(dec.field).numpy(),
                                                                  target.occupancy)}
        try:
            geo = score_meshes(dec.mesh, occupancy_to_box_mesh(target.occupancy), n_samples, seed, icp)
            out.update(chamfer=geo.chamfer, p2s=geo.p2s, nc=geo.nc)
        except EmptyShapeError:
            out.update(chamfer=float("inf"), p2s=float("inf"), nc=0.0)
        return out

    def save(self, path, extra: dict | None = None):
        manifest = {"stage": "decoder", "N": self.N, "V": self.V, "injection": self.injection, "step": self.step,
                    "decoder": {k: getattr(self.cfg, k) for k in ("d_z", "feat_dim", "upsample", "encoder_channels",
                                                                  "gaussians_per_voxel", "width", "blocks", "heads")},
                    **(extra or {})}
        return save_checkpoint(path, self.modules(), manifest)


def load_decoders(path):
    """Rebuild ``(extractor, gs_decoder, mesh_decoder, manifest)`` from a decoder checkpoint."""
    manifest, state = load_checkpoint(path)
    c, N = manifest["decoder"], manifest["N"]
    extractor = FeatureExtractor(c["feat_dim"], c["encoder_channels"], c["upsample"])
    kw = dict(width=c["width"], blocks=c["blocks"], heads=c["heads"], feat_dim=c["feat_dim"])
    gs_dec = GaussianDecoder(N, c["d_z"], c["gaussians_per_voxel"], **kw)
    mesh_dec = MeshDecoder(N, c["d_z"], **kw)
    for name, module in (("extractor", extractor), ("gs_decoder", gs_dec), ("mesh_decoder", mesh_dec)):
        restore(module, state, name)
    return extractor.eval(), gs_dec.eval(), mesh_dec.eval(), manifest


def generated_latents(model: LatentFlowModel, target: DecoderTargets, seed: int, steps: int,
                      cfg_scale: float = 1.0) -> StructuredLatentSet:
    return generate_structured_latents(target.occupancy, target.cond_image, seed, model, steps, cfg_scale)
