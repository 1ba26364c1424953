"""Rectified flow in latent space: straight-line paths, velocity loss, Euler sampling.

Time runs from t=0 (data) to t=1 (noise): ``z_t = (1 - t) z_0 + t eps`` and the
regression target is the constant path velocity ``eps - z_0``. Sampling
therefore integrates from t=1 down to t=0 with ``z <- z - dt * v``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .encoder import time_embed
from .errors import DegenerateTrajectory, NonFiniteState, OutOfRange, ShapeMismatch
from .nn import ChannelNorm, Conv2d, Linear, Module
from .tensor import Tensor, as_tensor
from .vae import LatentState


@dataclass
class FlowSchedule:
    steps: int = 3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def times(self) -> np.ndarray:
        """Uniform grid ``1 = t_K > ... > t_0 = 0`` (K+1 points)."""
        return np.arange(self.steps, -1, -1) / self.steps

    @property
    def dt(self) -> float:
        return 1.0 / self.steps


def interpolate_state(z0, eps, t) -> LatentState:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise OutOfRange(f"t must lie in [0, 1], got {t}")
    # per-sample times broadcast over the trailing latent axes
    tb = t_arr.reshape(t_arr.shape + (1,) * (z0.ndim - t_arr.ndim))
    return LatentState(z=(1.0 - tb) * z0 + tb * eps, t=t)


def rf_loss(velocity: Callable, z0, eps, t, cond=None) -> Tensor:
    """Mean squared error between ``velocity(z_t, t, cond)`` and ``eps - z0``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    state = interpolate_state(z0, eps, t)
    v = velocity(Tensor(state.z), t, cond)
    return ops.mse(v, eps - z0)


def euler_sample(eps, velocity: Callable, steps: int = 3, return_trajectory: bool = False):
    """Integrate from noise ``eps`` at t=1 to t=0 in ``steps`` uniform Euler steps.

    ``velocity(z, t)`` returns the field as an array shaped like ``z``.
    """
    sched = FlowSchedule(steps)
    z = np.array(eps, dtype=np.float64)
    times = sched.times
    traj = [z.copy()]
    for k in range(steps):
        v = np.asarray(velocity(z, float(times[k])))
        z = z - sched.dt * v
        if not np.all(np.isfinite(z)):
            raise NonFiniteState(f"non-finite latent after step {k + 1} (t={times[k + 1]:.3f})")
        if return_trajectory:
            traj.append(z.copy())
    return (z, np.stack(traj)) if return_trajectory else z


def straightness(trajectory) -> float:
    """Mean squared distance of interior points from the endpoint chord, over chord length^2.

    ``trajectory`` has shape ``(P, ...)`` with ``P >= 2``; each point is
    flattened. The distance is perpendicular distance to the chord's line.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.shape[0] < 2:
        raise ValueError("need at least two trajectory points")
    pts = traj.reshape(traj.shape[0], -1)
    chord = pts[-1] - pts[0]
    length2 = float(chord @ chord)
    if length2 == 0.0:
        raise DegenerateTrajectory("trajectory endpoints coincide")
    interior = pts[1:-1] - pts[0]
    if interior.shape[0] == 0:
        return 0.0
    along = interior @ chord / length2
    perp = interior - along[:, None] * chord
    return float(np.mean(np.sum(perp * perp, axis=1)) / length2)


class ResBlock(Module):
    def __init__(self, rng, width, d_t):
        self.conv1 = Conv2d(rng, width, width, 3, 1, 1)
        self.time = Linear(rng, d_t, width)
        self.conv2 = Conv2d(rng, width, width, 3, 1, 1)

    def forward(self, h, temb):
        n, c = h.shape[:2]
        r = self.conv1(ops.relu(h)) + ops.reshape(self.time(temb), (n, c, 1, 1))
        return h + self.conv2(ops.relu(r))


class VelocityNet(Module):
    """Conv stack predicting the latent velocity.

    The stack predicts the offset of the velocity from the current state,
    ``v = z + net(z, t, cond)``: at t = 1 the state is pure noise and the
    target ``eps - z0`` is ``z - z0``, so the net only has to find ``-z0``.
    Time enters as a per-channel bias after the input conv and inside each
    residual block. Each conditional feature map is channel-normalized,
    projected by a 1x1 conv, resized bilinearly to the latent grid and summed
    into the hidden state.
    """

    def __init__(self, rng, latent_channels=4, width=64, cond_channels=(16, 32, 64, 128), d_t=32, blocks=2):
        self.d_t = d_t
        self.inp = Conv2d(rng, latent_channels, width, 3, 1, 1)
        self.time = Linear(rng, d_t, width)
        self.cond_norm = [ChannelNorm(c) for c in cond_channels]
        self.cond = [Conv2d(rng, c, width, 1) for c in cond_channels]
        self.blocks = [ResBlock(rng, width, d_t) for _ in range(blocks)]
        self.out = Conv2d(rng, width, latent_channels, 3, 1, 1)

    def forward(self, z, t, cond=None) -> Tensor:
        z = as_tensor(z)
        squeeze = z.ndim == 3
        if squeeze:
            z = ops.reshape(z, (1,) + z.shape)
            cond = [ops.reshape(as_tensor(f), (1,) + np.shape(f)) for f in cond] if cond else cond
        n, _, h, w = z.shape
        temb = Tensor(np.broadcast_to(time_embed(t, self.d_t), (n, self.d_t)).copy())
        x = self.inp(z) + ops.reshape(self.time(temb), (n, -1, 1, 1))
        if cond:
            for norm, proj, f in zip(self.cond_norm, self.cond, cond):
                x = x + ops.resize_bilinear(proj(norm(as_tensor(f))), h, w)
        for block in self.blocks:
            x = block(x, temb)
        out = self.out(ops.relu(x)) + z
        return ops.reshape(out, out.shape[1:]) if squeeze else out
