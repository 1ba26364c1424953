"""Full saliency model: conditional encoder + guidance + latent velocity field.

The frozen VAE is held by reference and is not part of this module's
parameters or checkpoints.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .encoder import PyramidEncoder, StageConfig
from .flow import FlowSchedule, VelocityNet, euler_sample
from .guidance import ConditionBundle, GuidanceStack
from .nn import Module
from .tensor import Tensor, no_grad
from .vae import MaskVAE

CONDITION_MODES = ("per_step", "once")


def standardize(images: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Per-image, per-channel zero mean and unit deviation.

    Saliency here is relative to each scene's own background, so the encoder
    sees every image on its own scale.
    """
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=(-2, -1), keepdims=True)
    std = images.std(axis=(-2, -1), keepdims=True)
    return (images - mean) / (std + eps)


class ORSIFlow(Module):
    def __init__(self, rng: np.random.Generator, vae: MaskVAE, stage_cfg: StageConfig | None = None,
                 velocity_width: int = 64, velocity_blocks: int = 2, sfd_enabled: bool = True,
                 sfc_enabled: bool = True, strict_eq10: bool = False, condition_mode: str = "per_step"):
        if condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}")
        stage_cfg = stage_cfg or StageConfig()
        self.encoder = PyramidEncoder(rng, stage_cfg)
        self.guidance = GuidanceStack(rng, stage_cfg.channels, sfd_enabled, sfc_enabled, strict_eq10)
        self.velocity = VelocityNet(rng, vae.cfg.latent_channels, velocity_width, stage_cfg.channels,
                                    stage_cfg.d_t, velocity_blocks)
        self.condition_mode = condition_mode
        self._vae = vae

    @property
    def vae(self) -> MaskVAE:
        return self._vae

    def condition(self, image, x_t, t) -> ConditionBundle:
        """Conditional features for raw RGB ``image`` (array) and noisy mask ``x_t``."""
        image = Tensor(standardize(image.data if isinstance(image, Tensor) else image))
        return self.guidance(self.encoder(image, x_t, t))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Mask for a flow-space (normalized) latent."""
        with no_grad():
            return self.vae.decode(Tensor(self.vae.denormalize(z))).data

    def pixel_state(self, z: np.ndarray) -> np.ndarray:
        """Noisy mask fed to the encoder for flow-space latent ``z`` under the condition mode."""
        if self.condition_mode == "once":
            lat = z.shape[-2:]
            f = self.vae.cfg.factor
            return np.full(z.shape[:-3] + (1, lat[0] * f, lat[1] * f), 0.5)
        return self.decode(z)

    def velocity_at(self, z, t, image, x_t) -> Tensor:
        bundle = self.condition(image, x_t, t)
        return self.velocity(z, t, bundle.cond)

    def flow_loss(self, images: np.ndarray, z0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> Tensor:
        """Rectified-flow loss for a batch of normalized latents ``z0``.

        The VAE is only run without gradients.
        """
        tb = t.reshape(-1, 1, 1, 1)
        zt = (1.0 - tb) * z0 + tb * eps
        x_t = self.pixel_state(zt)
        if self.condition_mode == "once":
            # inference computes the features once, at t = 1, so training must too
            bundle = self.condition(images, Tensor(x_t), np.ones_like(t))
            return ops.mse(self.velocity(Tensor(zt), t, bundle.cond), eps - z0)
        v = self.velocity_at(Tensor(zt), t, Tensor(images), Tensor(x_t))
        return ops.mse(v, eps - z0)

    def sample_latent(self, images: np.ndarray, eps: np.ndarray, steps: int = 3,
                      return_trajectory: bool = False):
        images = Tensor(images)
        n = eps.shape[0]
        once_cond = None
        if self.condition_mode == "once":
            with no_grad():
                once_cond = self.condition(images, Tensor(self.pixel_state(eps)), np.full(n, 1.0)).cond

        def field(z, t):
            with no_grad():
                tt = np.full(n, t)
                if once_cond is not None:
                    return self.velocity(Tensor(z), tt, once_cond).data
                return self.velocity_at(Tensor(z), tt, images, Tensor(self.pixel_state(z))).data

        return euler_sample(eps, field, steps, return_trajectory)

    def predict(self, images: np.ndarray, steps: int = 3, seed: int = 0, eps: np.ndarray | None = None,
                batch_size: int = 16) -> np.ndarray:
        """Saliency maps ``(N, 1, H, W)`` in (0, 1) for images ``(N, 3, H, W)``."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        FlowSchedule(steps)
        n, _, h, w = images.shape
        if eps is None:
            eps = np.random.default_rng(seed).standard_normal((n,) + self.vae.latent_shape(h, w))
        out = np.empty((n, 1, h, w))
        for s in range(0, n, batch_size):
            z = self.sample_latent(images[s:s + batch_size], eps[s:s + batch_size], steps)
            out[s:s + batch_size] = self.decode(z)
        return out[0] if single else out
