"""Time-aware four-stage pyramid encoder for image + noisy mask input.

Each stage is an overlapping strided-conv patch embedding, a flatten to
tokens, one spatial-reduction attention block and one MLP block, an unflatten
back to a map, a 3x3 output conv and a channel LayerNorm. The first stage
embeds the RGB image and the noisy mask separately and sums them. The
sinusoidal time embedding enters every stage as a per-channel bias added to
the tokens before attention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import OutOfRange, ShapeMismatch
from .nn import ChannelNorm, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class StageConfig:
    channels: tuple = (16, 32, 64, 128)
    strides: tuple = (4, 2, 2, 2)
    heads: tuple = (1, 2, 2, 4)
    sr_ratios: tuple = (4, 2, 1, 1)
    d_t: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("channels", "strides", "heads", "sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} must have exactly 4 entries")
        if tuple(self.strides) != (4, 2, 2, 2):
            raise ValueError("stage strides are fixed at (4, 2, 2, 2)")
        if self.d_t % 2:
            raise ValueError("d_t must be even")


def time_embed(t, d_t: int) -> np.ndarray:
    """Sinusoidal embedding of flow time ``t`` in [0, 1].

    Slot ``2i`` holds ``sin(1000 t w_i)`` and slot ``2i+1`` holds
    ``cos(1000 t w_i)`` with ``w_i = 10000 ** (-2i / d_t)``. A scalar ``t``
    gives shape ``(d_t,)``; an array of times gives ``(len(t), d_t)``.
    """
    if d_t % 2:
        raise ValueError("d_t must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
        raise OutOfRange(f"t must lie in [0, 1], got {t}")
    omega = 10000.0 ** (-2.0 * np.arange(d_t // 2) / d_t)
    phase = 1000.0 * t_arr[..., None] * omega
    out = np.empty(t_arr.shape + (d_t,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    n, _, c = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (n, c, h, w))


class SpatialReductionAttention(Module):
    def __init__(self, rng, dim, heads, sr):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.sr = sr
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        if sr > 1:
            self.reduce = Conv2d(rng, dim, dim, sr, stride=sr)
            self.norm = LayerNorm(dim)

    def _heads(self, x):
        n, l, c = x.shape
        return ops.transpose(ops.reshape(x, (n, l, self.heads, c // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        n, l, c = x.shape
        kv = x
        if self.sr > 1:
            if h % self.sr or w % self.sr:
                raise ShapeMismatch(f"token grid {h}x{w} not divisible by reduction {self.sr}")
            kv = self.norm(to_tokens(self.reduce(to_map(x, h, w))))
        q = self._heads(self.q(x))
        k = self._heads(self.k(kv))
        v = self._heads(self.v(kv))
        scale = 1.0 / np.sqrt(c // self.heads)
        attn = ops.softmax(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        out = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(ops.reshape(out, (n, l, c)))


class Mlp(Module):
    def __init__(self, rng, dim, ratio):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class Stage(Module):
    def __init__(self, rng, index: int, cin: int, cout: int, cfg: StageConfig):
        stride = cfg.strides[index]
        k, pad = 2 * stride, stride // 2
        self.index = index
        if index == 0:
            self.embed_image = Conv2d(rng, 3, cout, k, stride, pad)
            self.embed_mask = Conv2d(rng, 1, cout, k, stride, pad)
        else:
            self.embed = Conv2d(rng, cin, cout, k, stride, pad)
        self.time_proj = Linear(rng, cfg.d_t, cout)
        self.norm1 = LayerNorm(cout)
        self.attn = SpatialReductionAttention(rng, cout, cfg.heads[index], cfg.sr_ratios[index])
        self.norm2 = LayerNorm(cout)
        self.mlp = Mlp(rng, cout, cfg.mlp_ratio)
        self.out = Conv2d(rng, cout, cout, 3, 1, 1)
        self.out_norm = ChannelNorm(cout)

    def forward(self, image=None, mask=None, prev=None, temb=None) -> Tensor:
        if self.index == 0:
            if image is None or mask is None or prev is not None:
                raise ValueError("stage 1 takes the image and the noisy mask only")
            if image.shape[-2:] != mask.shape[-2:]:
                raise ShapeMismatch(f"image {image.shape} and mask {mask.shape} differ in size")
            e = self.embed_image(image) + self.embed_mask(mask)
        else:
            if prev is None or image is not None or mask is not None:
                raise ValueError("stages 2-4 take the previous stage output only")
            e = self.embed(prev)
        n, c, h, w = e.shape
        tok = to_tokens(e)
        if temb is not None:
            tok = tok + ops.reshape(self.time_proj(temb), (n, 1, c))
        tok = tok + self.attn(self.norm1(tok), h, w)
        tok = tok + self.mlp(self.norm2(tok))
        return self.out_norm(self.out(to_map(tok, h, w)))


def _batched(x):
    if x is None:
        return None, False
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


class PyramidEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: StageConfig | None = None):
        self.cfg = cfg or StageConfig()
        chans = (0,) + tuple(self.cfg.channels)
        self.stages = [Stage(rng, i, chans[i], chans[i + 1], self.cfg) for i in range(4)]

    def stage_embed(self, n: int, image=None, mask=None, prev=None, t=None) -> Tensor:
        """Run stage ``n`` (1-based). ``t`` is optional; without it no time bias is added."""
        image, sq = _batched(image)
        mask, _ = _batched(mask)
        prev, sq_prev = _batched(prev)
        temb = None
        if t is not None:
            batch = (image if image is not None else prev).shape[0]
            temb = Tensor(np.broadcast_to(time_embed(t, self.cfg.d_t), (batch, self.cfg.d_t)).copy())
        out = self.stages[n - 1](image=image, mask=mask, prev=prev, temb=temb)
        if sq or sq_prev:
            return ops.reshape(out, out.shape[1:])
        return out

    def forward(self, image, mask, t) -> list:
        """Return the four stage features at 1/4, 1/8, 1/16 and 1/32 resolution.

        ``t`` is a scalar or one time per batch element.
        """
        image, squeeze = _batched(image)
        mask, _ = _batched(mask)
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeMismatch(f"input size {h}x{w} must be divisible by 32")
        batch = image.shape[0]
        temb = time_embed(t, self.cfg.d_t)
        temb = Tensor(np.broadcast_to(temb, (batch, self.cfg.d_t)).copy())
        feats = []
        x = self.stages[0](image=image, mask=mask, temb=temb)
        feats.append(x)
        for stage in self.stages[1:]:
            x = stage(prev=x, temb=temb)
            feats.append(x)
        if squeeze:
            feats = [ops.reshape(f, f.shape[1:]) for f in feats]
        return feats
