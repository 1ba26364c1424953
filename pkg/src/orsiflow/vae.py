"""Small convolutional VAE over single-channel masks.

The encoder halves resolution ``log2(factor)`` times with k4/s2 convs; the
decoder mirrors it with bilinear x2 upsampling followed by 3x3 convs and ends
in a sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeMismatch
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor, record


@dataclass
class VaeConfig:
    factor: int = 8
    latent_channels: int = 4
    hidden: tuple = (16, 32, 64)
    beta_kl: float = 1e-4

    def __post_init__(self):
        f = self.factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"factor must be a power of two >= 2, got {f}")
        if len(self.hidden) != self.levels:
            raise ValueError(f"need {self.levels} hidden widths for factor {f}")

    @property
    def levels(self) -> int:
        return int(np.log2(self.factor))


@dataclass
class LatentState:
    z: np.ndarray
    t: float


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).

    ``expm1`` keeps the value non-negative for tiny ``logvar`` where
    ``exp(lv) - 1 - lv`` would cancel to a negative rounding error.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {mu.shape} vs logvar {logvar.shape}")
    m, lv = mu.data, logvar.data
    n = m.size
    out = np.array(0.5 * np.sum(m * m + (np.expm1(lv) - lv)) / n)
    return record("kl_normal", out, (mu, logvar), lambda g: (g * m / n, 0.5 * g * np.expm1(lv) / n))


def reparameterize(mu, logvar, noise) -> Tensor:
    mu, logvar, noise = as_tensor(mu), as_tensor(logvar), as_tensor(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeMismatch(f"mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}")
    return mu + ops.exp(logvar * 0.5) * noise


class MaskVAE(Module):
    def __init__(self, rng: np.random.Generator, cfg: VaeConfig | None = None):
        self.cfg = cfg = cfg or VaeConfig()
        h = cfg.hidden
        self.enc_in = Conv2d(rng, 1, h[0], 3, 1, 1)
        widths = (h[0],) + tuple(h)
        self.enc_down = [Conv2d(rng, widths[i], widths[i + 1], 4, 2, 1) for i in range(cfg.levels)]
        self.enc_out = Conv2d(rng, h[-1], 2 * cfg.latent_channels, 3, 1, 1)
        self.dec_in = Conv2d(rng, cfg.latent_channels, h[-1], 3, 1, 1)
        rev = tuple(reversed(widths))
        self.dec_up = [Conv2d(rng, rev[i], rev[i + 1], 3, 1, 1) for i in range(cfg.levels)]
        self.dec_out = Conv2d(rng, h[0], 1, 3, 1, 1)
        # scalar affine taking posterior means to roughly zero mean, unit variance
        self.latent_shift = 0.0
        self.latent_scale = 1.0

    def latent_shape(self, h: int, w: int) -> tuple:
        f = self.cfg.factor
        if h % f or w % f:
            raise ShapeMismatch(f"mask size {h}x{w} not divisible by {f}")
        return (self.cfg.latent_channels, h // f, w // f)

    def encode(self, x) -> tuple:
        """Return ``(mu, logvar)``, each ``(c_z, H/f, W/f)`` (batched if x is)."""
        x = as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[1] != 1:
            raise ShapeMismatch(f"expected a single-channel mask, got {x.shape}")
        self.latent_shape(*x.shape[-2:])
        h = ops.relu(self.enc_in(x))
        for conv in self.enc_down:
            h = ops.relu(conv(h))
        mu, logvar = ops.split(self.enc_out(h), 2, axis=1)
        if squeeze:
            mu, logvar = ops.reshape(mu, mu.shape[1:]), ops.reshape(logvar, logvar.shape[1:])
        return mu, logvar

    def decode_logits(self, z) -> Tensor:
        z = as_tensor(z)
        squeeze = z.ndim == 3
        if squeeze:
            z = ops.reshape(z, (1,) + z.shape)
        if z.shape[1] != self.cfg.latent_channels:
            raise ShapeMismatch(f"latent has {z.shape[1]} channels, expected {self.cfg.latent_channels}")
        h = ops.relu(self.dec_in(z))
        for conv in self.dec_up:
            h = ops.resize_bilinear(h, 2 * h.shape[-2], 2 * h.shape[-1])
            h = ops.relu(conv(h))
        out = self.dec_out(h)
        return ops.reshape(out, out.shape[1:]) if squeeze else out

    def calibrate(self, mu: np.ndarray) -> None:
        """Set the latent normalization from a sample of posterior means."""
        self.latent_shift = float(np.mean(mu))
        self.latent_scale = float(np.std(mu)) or 1.0

    def normalize(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z) - self.latent_shift) / self.latent_scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.latent_scale + self.latent_shift

    def decode(self, z) -> Tensor:
        return ops.sigmoid(self.decode_logits(z))

    def loss(self, masks, noise) -> dict:
        """BCE reconstruction + beta * KL for a batch of masks ``(N, 1, H, W)``."""
        masks = as_tensor(masks)
        mu, logvar = self.encode(masks)
        z = reparameterize(mu, logvar, noise)
        recon = ops.bce_with_logits(self.decode_logits(z), masks)
        kl = kl_divergence(mu, logvar)
        total = recon + kl * self.cfg.beta_kl if self.cfg.beta_kl else recon + kl * 0.0
        return {"loss": total, "recon": recon, "kl": kl}
