"""Occupancy autoencoder giving the voxel branch a continuous latent grid."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class StructureAutoencoder(nn.Module):
    """Convolutional encoder/decoder between ``(B, N, N, N)`` occupancy and ``(B, N, N, N, c)`` latents.

    ``scale`` rescales latents to roughly unit variance; it is fitted once
    after training by :meth:`fit_scale`.
    """

    def __init__(self, c_lat: int = 4, hidden: int = 32):
        super().__init__()
        self.c_lat = c_lat
        self.enc = nn.Sequential(
            nn.Conv3d(1, hidden, 3, padding=1), nn.SiLU(), nn.Conv3d(hidden, c_lat, 3, padding=1)
        )
        self.dec = nn.Sequential(
            nn.Conv3d(c_lat, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv3d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv3d(hidden, 1, 3, padding=1),
        )
        self.register_buffer("scale", torch.ones(()))

    def encode(self, occ: torch.Tensor) -> torch.Tensor:
        z = torch.tanh(self.enc(occ.to(self.scale.dtype)[:, None] * 2 - 1))
        return z.permute(0, 2, 3, 4, 1) / self.scale

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Per-voxel occupancy logits."""
        return self.dec((latent * self.scale).permute(0, 4, 1, 2, 3))[:, 0]

    def loss(self, occ: torch.Tensor) -> torch.Tensor:
        return F.binary_cross_entropy_with_logits(self.decode(self.encode(occ)), occ.to(self.scale.dtype))

    @torch.no_grad()
    def fit_scale(self, occ: torch.Tensor) -> None:
        self.scale.fill_(1.0)
        self.scale.fill_(float(self.encode(occ).std().clamp_min(1e-3)))


def decode_structure(latent: torch.Tensor, ae: StructureAutoencoder | None = None, logits: torch.Tensor | None = None):
    """Binary occupancy, ``logit > 0``; pass precomputed ``logits`` to skip the decoder."""
    if logits is None:
        logits = ae.decode(latent)
    return logits > 0


def train_autoencoder(ae: StructureAutoencoder, occ: torch.Tensor, steps: int, lr: float, log=None) -> float:
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    loss = torch.tensor(float("nan"))
    for step in range(steps):
        loss = ae.loss(occ)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % 50 == 0 or step == steps - 1):
            log({"stage": "structure_ae", "step": step, "loss": loss.item()})
    ae.fit_scale(occ)
    return loss.item()
