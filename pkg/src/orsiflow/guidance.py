"""Saliency guidance: channel-graph discrimination (SFD) and dual-gate calibration (SFC).

Both modules map ``(N, C, H, W) -> (N, C, H, W)`` and also accept a single
``(C, H, W)`` feature map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, Linear, Module, Parameter
from .tensor import Tensor


def _batched(x: Tensor):
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


class SFD(Module):
    """Salient feature discriminator.

    Two 1x1 projections are pooled into channel descriptors ``z1, z2``; their
    pairwise differences ``z1[i] - z2[j]`` pass through tanh, a scalar affine
    (the 1x1 conv on the one-channel C x C map) and a sigmoid to form the
    adjacency ``A``. A third 1x1 projection gives channel node features, which
    are propagated as ``(A + I) @ nodes``.
    """

    def __init__(self, rng, channels: int):
        self.proj1 = Conv2d(rng, channels, channels, 1)
        self.proj2 = Conv2d(rng, channels, channels, 1)
        self.nodes = Conv2d(rng, channels, channels, 1)
        # zero edge scale at init: A starts uniform (0.5), so the graph adds only a
        # per-pixel common mode instead of image-dependent mixing of all C channels
        self.affine_scale = Parameter(np.zeros(()))
        self.affine_bias = Parameter(np.zeros(()))

    def adjacency(self, f: Tensor) -> Tensor:
        f, _ = _batched(f)
        n, c = f.shape[:2]
        z1 = ops.pool_global(self.proj1(f), "avg")
        z2 = ops.pool_global(self.proj2(f), "avg")
        diff = ops.reshape(z1, (n, c, 1)) - ops.reshape(z2, (n, 1, c))
        return ops.sigmoid(ops.tanh(diff) * self.affine_scale + self.affine_bias)

    def forward(self, f: Tensor) -> Tensor:
        f, squeeze = _batched(f)
        n, c, h, w = f.shape
        a = self.adjacency(f)
        nodes = ops.reshape(self.nodes(f), (n, c, h * w))
        out = ops.reshape(ops.matmul(a, nodes) + nodes, (n, c, h, w))
        return ops.reshape(out, out.shape[1:]) if squeeze else out


class SFC(Module):
    """Salient feature calibrator.

    ``strict_eq10=False`` (default) gates the branch features,
    ``(W1*s1)*F1 + (W2*s2)*F2 + F_sfd``. ``strict_eq10=True`` adds the
    channel vectors ``W1*s1 + W2*s2`` to ``F_sfd`` as a per-channel bias.
    """

    def __init__(self, rng, channels: int, strict_eq10: bool = False):
        self.branch1 = Conv2d(rng, channels, channels, 1)
        self.branch2 = Conv2d(rng, channels, channels, 1)
        # 1x1 conv over the pooled (4C, 1, 1) statistics == linear map
        self.gate = Linear(rng, 4 * channels, 2 * channels)
        self.fc = Linear(rng, 2 * channels, 2 * channels)
        # zero scales at init: the module starts as the identity on F_sfd
        self.fc.weight.data = np.zeros_like(self.fc.weight.data)
        self.strict_eq10 = strict_eq10

    def parts(self, f_sfd: Tensor) -> dict:
        """Intermediate quantities of one forward pass, for inspection and tests."""
        f_sfd, _ = _batched(f_sfd)
        f1 = self.branch1(f_sfd)
        f2 = self.branch2(f_sfd)
        fc = ops.concat([f1, f2], axis=1)
        g_avg = ops.pool_global(fc, "avg")
        g_max = ops.pool_global(fc, "max")
        w1, w2 = ops.split(ops.sigmoid(self.gate(ops.concat([g_avg, g_max], axis=1))), 2, axis=1)
        s1, s2 = ops.split(self.fc(g_avg), 2, axis=1)
        return dict(f1=f1, f2=f2, fc=fc, g_avg=g_avg, g_max=g_max, w1=w1, w2=w2, s1=s1, s2=s2)

    def forward(self, f_sfd: Tensor) -> Tensor:
        f_sfd, squeeze = _batched(f_sfd)
        n, c = f_sfd.shape[:2]
        p = self.parts(f_sfd)
        a1 = ops.reshape(p["w1"] * p["s1"], (n, c, 1, 1))
        a2 = ops.reshape(p["w2"] * p["s2"], (n, c, 1, 1))
        if self.strict_eq10:
            out = a1 + a2 + f_sfd
        else:
            out = a1 * p["f1"] + a2 * p["f2"] + f_sfd
        return ops.reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class ConditionBundle:
    """Stage features and the refined conditional features derived from them."""

    features: list
    sfd: list
    cond: list


class GuidanceStack(Module):
    """Per-stage ``SFC(SFD(F_n))``; either module can be switched off."""

    def __init__(self, rng, channels, sfd_enabled=True, sfc_enabled=True, strict_eq10=False):
        self.sfd_enabled = sfd_enabled
        self.sfc_enabled = sfc_enabled
        self.sfd = [SFD(rng, c) for c in channels] if sfd_enabled else []
        self.sfc = [SFC(rng, c, strict_eq10) for c in channels] if sfc_enabled else []

    def forward(self, feats: list) -> ConditionBundle:
        sfd_out, cond = [], []
        for i, f in enumerate(feats):
            g = self.sfd[i](f) if self.sfd_enabled else f
            sfd_out.append(g)
            cond.append(self.sfc[i](g) if self.sfc_enabled else g)
        return ConditionBundle(features=list(feats), sfd=sfd_out, cond=cond)
