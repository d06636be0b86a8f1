"""Joint training step, guided sampling and the stage-1 training/evaluation driver."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from ..checkpoint import load_checkpoint, restore, save_checkpoint
from ..errors import TrainingDivergedError
from ..metrics import evaluate_appearance, voxel_iou
from .flow import euler_integrate, flow_matching_loss, make_noisy_sample
from .joint import JointModel
from .structure import StructureAutoencoder, decode_structure, train_autoencoder


@dataclass
class Stage1Batch:
    cond_image: torch.Tensor  # (B, V, V, 3) in [0, 1]
    x0_2d: torch.Tensor  # (B, 4, 2, V, V, 3) in [-1, 1]
    x0_3d: torch.Tensor  # (B, N, N, N, c_lat)

    def __len__(self):
        return self.cond_image.shape[0]

    def select(self, idx) -> "Stage1Batch":
        return Stage1Batch(self.cond_image[idx], self.x0_2d[idx], self.x0_3d[idx])


def draw_null_mask(batch: int, rate: float, generator: torch.Generator) -> torch.Tensor:
    """Items whose condition is dropped; ``rate`` 0 never drops, 1 always does."""
    return torch.rand(batch, generator=generator) < rate


def train_joint_step(batch: Stage1Batch, model: JointModel, optimizer, dropout_rate: float,
                     generator: torch.Generator, grad_clip: float | None = 1.0, step: int | None = None) -> dict:
    """One flow-matching update on both branches; raises on a non-finite loss."""
    B = len(batch)
    dtype = batch.x0_2d.dtype
    t = torch.rand(B, generator=generator).to(dtype)
    null = draw_null_mask(B, dropout_rate, generator)
    eps2d = torch.randn(batch.x0_2d.shape, generator=generator).to(dtype)
    eps3d = torch.randn(batch.x0_3d.shape, generator=generator).to(dtype)
    s2 = make_noisy_sample(batch.x0_2d, eps2d, t)
    s3 = make_noisy_sample(batch.x0_3d, eps3d, t)
    cond = model.encode_condition(batch.cond_image, null)
    v2d, v3d = model(s2.x_t, s3.x_t, t, cond)
    loss = flow_matching_loss(v2d, v3d, batch.x0_2d, batch.x0_3d, eps2d, eps3d)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite flow loss at step {step}: t={t.tolist()} null={null.tolist()} "
            f"|v2d|max={v2d.detach().abs().max():.3g} |v3d|max={v3d.detach().abs().max():.3g}"
        )
    optimizer.zero_grad()
    loss.backward()
    grad_norm = None
    if grad_clip:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip))
    optimizer.step()
    with torch.no_grad():
        l2 = float(((v2d - s2.target) ** 2).mean())
        l3 = float(((v3d - s3.target) ** 2).mean())
    return {"loss": loss.item(), "loss_2d": l2, "loss_3d": l3, "n_null": int(null.sum()), "grad_norm": grad_norm}


@dataclass
class JointSample:
    images: torch.Tensor  # (B, 4, 2, V, V, 3) in [0, 1]
    latent: torch.Tensor  # (B, N, N, N, c_lat)
    logits: torch.Tensor | None  # (B, N, N, N) occupancy logits

    @property
    def occupancy(self) -> torch.Tensor:
        return decode_structure(self.latent, logits=self.logits)


@torch.no_grad()
def sample_joint(cond_image, steps: int, cfg_scale: float, seed: int, model: JointModel,
                 ae: StructureAutoencoder | None = None, sync: bool | None = None) -> JointSample:
    """Euler-integrate both branches from seeded noise at ``t = 0`` to data at ``t = 1``."""
    cond_image = torch.as_tensor(cond_image)
    if cond_image.dim() == 3:
        cond_image = cond_image[None]
    B, V, N = cond_image.shape[0], model.V, model.N
    dtype = next(model.parameters()).dtype
    cond_image = cond_image.to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    x2d = torch.randn((B, 4, 2, V, V, 3), generator=gen).to(dtype)
    x3d = torch.randn((B, N, N, N, model.c_lat), generator=gen).to(dtype)
    cond = model.encode_condition(cond_image)
    uncond = model.encode_condition(cond_image, torch.ones(B, dtype=torch.bool))

    def velocity(states, t, conditional):
        return model(states[0], states[1], torch.full((B,), t, dtype=dtype), cond if conditional else uncond, sync=sync)

    x2d, x3d = euler_integrate(velocity, (x2d, x3d), steps, cfg_scale)
    images = ((x2d.clamp(-1, 1) + 1) / 2)
    logits = ae.decode(x3d) if ae is not None else None
    return JointSample(images, x3d, logits)


# ---------------------------------------------------------------- stage-1 driver

def stage1_tensors(samples, dtype=torch.float32):
    """Occupancy, condition images and ``[-1, 1]`` multiview targets from loaded samples."""
    occ = torch.as_tensor(np.stack([s.occupancy for s, _ in samples]), dtype=dtype)
    views = torch.as_tensor(np.stack([r.as_float() for _, r in samples]), dtype=dtype)
    cond = torch.as_tensor(np.stack([r.condition_image for _, r in samples]), dtype=dtype)
    return occ, cond, views * 2 - 1


def build_joint_model(cfg_dual, N: int, V: int, seed: int, sync_attention: bool | None = None) -> JointModel:
    c = cfg_dual
    return JointModel(
        N, V, c_lat=c.latent_channels, patch=c.token_patch, d_u=c.d_u, channels=tuple(c.unet_channels),
        heads=c.heads, blocks=c.voxel_blocks, sync_after=tuple(c.sync_after), cond_patch=c.cond_patch,
        d_c=c.d_c, sync_attention=c.sync_attention if sync_attention is None else sync_attention,
        image_patch=c.image_patch, seed=seed,
    )


class Stage1Trainer:
    """Fits the structure autoencoder, then trains the joint model on the encoded shapes."""

    def __init__(self, cfg_dual, samples, seed: int = 0, sync_attention: bool | None = None, log=None):
        self.cfg = cfg_dual
        self.seed = seed
        self.log = log or (lambda record: None)
        self.samples = samples
        N, V = samples[0][0].N, samples[0][1].V
        self.occ, self.cond, self.views = stage1_tensors(samples)
        torch.manual_seed(seed)
        self.ae = StructureAutoencoder(cfg_dual.latent_channels)
        self.model = build_joint_model(cfg_dual, N, V, seed, sync_attention)
        self.step = 0
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg_dual.lr)
        self.generator = torch.Generator().manual_seed(seed + 17)
        self.batch = None

    def fit_structure(self) -> float:
        torch.manual_seed(self.seed + 3)
        loss = train_autoencoder(self.ae, self.occ, self.cfg.ae_steps, self.cfg.ae_lr, self.log)
        self.ae.requires_grad_(False)
        with torch.no_grad():
            latents = self.ae.encode(self.occ)
        self.batch = Stage1Batch(self.cond, self.views, latents)
        return loss

    def train(self, steps: int | None = None) -> list:
        if self.batch is None:
            self.fit_structure()
        steps = self.cfg.steps if steps is None else steps
        S, bs = len(self.batch), self.cfg.batch_size
        history = []
        t0 = time.time()
        for _ in range(steps):
            idx = torch.randperm(S, generator=self.generator)[:bs] if bs < S else torch.arange(S)
            m = train_joint_step(self.batch.select(idx), self.model, self.optimizer, self.cfg.cond_dropout,
                                 self.generator, self.cfg.grad_clip, step=self.step)
            history.append(m["loss"])
            if self.step % self.cfg.log_every == 0:
                self.log({"stage": "joint", "step": self.step, **m, "elapsed": round(time.time() - t0, 2)})
            self.step += 1
        return history

    @torch.no_grad()
    def evaluate(self, steps: int | None = None, cfg_scale: float | None = None, seed: int = 1234) -> dict:
        """Per-shape structure IoU and multiview PSNR of samples against the training targets."""
        steps = self.cfg.sample_steps if steps is None else steps
        cfg_scale = self.cfg.cfg_scale if cfg_scale is None else cfg_scale
        self.model.eval()
        out = sample_joint(self.cond, steps, cfg_scale, seed, self.model, self.ae)
        self.model.train()
        gt = (self.views + 1) / 2
        ious, psnrs, ssims = [], [], []
        for i in range(len(self.cond)):
            ious.append(voxel_iou(out.occupancy[i].numpy(), self.occ[i].numpy() > 0.5))
            p, s = evaluate_appearance(out.images[i].reshape(8, *gt.shape[-3:]).numpy(),
                                       gt[i].reshape(8, *gt.shape[-3:]).numpy())
            psnrs.append(p)
            ssims.append(s)
        return {"iou": ious, "psnr": psnrs, "ssim": ssims, "mean_iou": float(np.mean(ious)),
                "mean_psnr": float(np.mean(psnrs)), "sample": out}

    def save(self, path, extra: dict | None = None):
        manifest = {"stage": "joint", "model": self.model.config, "step": self.step, "seed": self.seed,
                    "latent_channels": self.ae.c_lat, **(extra or {})}
        return save_checkpoint(path, {"model": self.model, "structure": self.ae}, manifest)


def load_stage1(path):
    """Rebuild ``(model, autoencoder, manifest)`` from a stage-1 checkpoint."""
    manifest, state = load_checkpoint(path)
    cfg = dict(manifest["model"])
    model = JointModel(cfg.pop("N"), cfg.pop("V"), **cfg)
    restore(model, state, "model")
    ae = StructureAutoencoder(manifest["latent_channels"])
    restore(ae, state, "structure")
    return model.eval(), ae.eval(), manifest

