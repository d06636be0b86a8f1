"""Flow-matching interpolant, objective and guided Euler integration.

Convention: ``x_t = (1 - t) eps + t x0`` so ``x0 - eps`` is the exact velocity
and integrating from ``t = 0`` (noise) to ``t = 1`` yields data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from ..errors import DomainError, ShapeError


@dataclass
class FlowSample:
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor

    @property
    def target(self) -> torch.Tensor:
        return self.x0 - self.eps


def _broadcast_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def make_noisy_sample(x0, eps, t) -> FlowSample:
    """``t`` is a scalar or one value per leading batch item."""
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    t_t = torch.as_tensor(t, dtype=x0.dtype if x0.is_floating_point() else torch.float64)
    if torch.any(t_t < 0) or torch.any(t_t > 1) or torch.any(torch.isnan(t_t)):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    tb = _broadcast_t(t_t, x0)
    return FlowSample(x0, eps, t_t, (1 - tb) * eps + tb * x0)


def flow_matching_loss(v2d, v3d, x0_2d, x0_3d, eps2d, eps3d) -> torch.Tensor:
    """Per-branch mean squared velocity error, summed over the two branches."""
    for v, x0, e in ((v2d, x0_2d, eps2d), (v3d, x0_3d, eps3d)):
        if v.shape != x0.shape or x0.shape != e.shape:
            raise ShapeError(f"velocity {tuple(v.shape)} vs target {tuple(x0.shape)} / noise {tuple(e.shape)}")
    l2d = ((v2d - (x0_2d - eps2d)) ** 2).mean()
    l3d = ((v3d - (x0_3d - eps3d)) ** 2).mean()
    return l2d + l3d


def guided_velocity(v_cond, v_uncond, scale: float):
    """``v_u + s (v_c - v_u)``, written as ``v_c + (s - 1)(v_c - v_u)`` so ``s = 1`` is exactly ``v_c``."""
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_cond + (scale - 1.0) * (v_cond - v_uncond)


Velocity = Callable[..., tuple]


def euler_integrate(velocity: Velocity, x_init: tuple, steps: int, cfg_scale: float = 1.0) -> tuple:
    """Integrate ``dx/dt = v(x, t)`` from 0 to 1 for a tuple of jointly advanced states.

    ``velocity(states, t, conditional)`` returns a tuple of velocities;
    ``conditional=False`` requests the unconditional prediction.  The
    unconditional pass is skipped when ``cfg_scale == 1`` and the conditional
    one when ``cfg_scale == 0``.
    """
    if steps < 1:
        raise DomainError("need at least one integration step")
    if cfg_scale < 0:
        raise DomainError("cfg_scale must be non-negative")
    xs = tuple(x_init)
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        if cfg_scale == 1.0:
            v = velocity(xs, t, True)
        elif cfg_scale == 0.0:
            v = velocity(xs, t, False)
        else:
            v_c, v_u = velocity(xs, t, True), velocity(xs, t, False)
            v = tuple(guided_velocity(c, u, cfg_scale) for c, u in zip(v_c, v_u))
        xs = tuple(x + dt * vi for x, vi in zip(xs, v))
    return xs
