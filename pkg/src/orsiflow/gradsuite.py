"""Finite-difference checks over every registered op and every composed module.

Shapes stay at most 8 channels and 8x8 spatial. Each case reduces its output to
a scalar through a fixed random projection so every output element contributes.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .encoder import PyramidEncoder, StageConfig
from .flow import VelocityNet
from .gradcheck import GradReport, gradcheck
from .guidance import SFC, SFD
from .tensor import Tensor
from .vae import MaskVAE, VaeConfig, kl_divergence

Case = Callable[[np.random.Generator], tuple]


def _leaf(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data, requires_grad=True)


def _project(out, rng_seed=7):
    """Scalar ``sum(out * R)`` with a fixed random ``R``."""
    outs = out if isinstance(out, list) else [out]
    r = np.random.default_rng(rng_seed)
    total = None
    for o in outs:
        term = ops.sum(o * Tensor(r.standard_normal(o.shape)))
        total = term if total is None else total + term
    return total


def _unary(fn, low=None):
    def case(rng):
        x = _leaf(rng, 2, 3, 4, low=low)
        return (lambda: _project(fn(x))), [x]
    return case


def _binary(fn, b_low=None):
    def case(rng):
        a = _leaf(rng, 2, 3, 4)
        b = _leaf(rng, 3, 1, low=b_low)  # broadcast on purpose
        return (lambda: _project(fn(a, b))), [a, b]
    return case


def _relu_case(rng):
    x = Tensor(rng.choice([-1.0, 1.0], (2, 3, 4)) * (0.1 + rng.random((2, 3, 4))), requires_grad=True)
    return (lambda: _project(ops.relu(x))), [x]


def _reduce(fn):
    def case(rng):
        x = _leaf(rng, 2, 3, 4)
        return (lambda: _project(fn(x))), [x]
    return case


def _concat(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
    return (lambda: _project(ops.concat([a, b], axis=1))), [a, b]


def _split(rng):
    x = _leaf(rng, 2, 6, 4)
    return (lambda: _project(ops.split(x, 3, axis=1))), [x]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return (lambda: _project(ops.matmul(a, b))), [a, b]


def _linear(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    return (lambda: _project(ops.linear(x, w, b))), [x, w, b]


def _layer_norm(rng):
    x, w, b = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    return (lambda: _project(ops.layer_norm(x, w, b))), [x, w, b]


def _conv(rng):
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    return (lambda: _project(ops.conv2d(x, w, b, stride=2, pad=1))), [x, w, b]


def _pool(mode):
    def case(rng):
        x = _leaf(rng, 2, 3, 4, 4)
        return (lambda: _project(ops.pool_global(x, mode))), [x]
    return case


def _resize(rng):
    x = _leaf(rng, 2, 3, 3, 5)
    return (lambda: _project([ops.resize_bilinear(x, 7, 8), ops.resize_bilinear(x, 2, 2)])), [x]


def _mse(rng):
    p = _leaf(rng, 2, 3, 4)
    target = rng.standard_normal((2, 3, 4))
    return (lambda: ops.mse(p, target)), [p]


def _bce(rng):
    p = _leaf(rng, 2, 3, 4)
    target = (rng.random((2, 3, 4)) > 0.5).astype(np.float64)
    return (lambda: ops.bce_with_logits(p, target)), [p]


OP_CASES: dict[str, Case] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, b_low=0.5),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, low=0.5),
    "square": _unary(ops.square),
    "sigmoid": _unary(ops.sigmoid),
    "tanh": _unary(ops.tanh),
    "relu": _relu_case,
    "gelu": _unary(ops.gelu),
    "sum": _reduce(lambda x: ops.sum(x, axis=1, keepdims=True)),
    "mean": _reduce(lambda x: ops.mean(x, axis=(0, 2))),
    "reshape": _reduce(lambda x: ops.reshape(x, (4, 6))),
    "transpose": _reduce(lambda x: ops.transpose(x, (2, 0, 1))),
    "concat": _concat,
    "split": _split,
    "matmul": _matmul,
    "linear": _linear,
    "softmax": _reduce(lambda x: ops.softmax(x, axis=-1)),
    "layer_norm": _layer_norm,
    "conv2d": _conv,
    "pool_avg": _pool("avg"),
    "pool_max": _pool("max"),
    "resize_bilinear": _resize,
    "mse": _mse,
    "bce_with_logits": _bce,
}


def _encoder_stage1(rng):
    cfg = StageConfig(channels=(8, 8, 8, 8), heads=(2, 2, 2, 2), sr_ratios=(2, 2, 1, 1), d_t=8)
    enc = PyramidEncoder(rng, cfg)
    img = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    mask = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    stage = enc.stages[0]
    params = _named(stage) + [img, mask]
    return (lambda: _project(enc.stage_embed(1, image=img, mask=mask, t=np.array([0.3, 0.8])))), params


def _encoder_stage2(rng):
    cfg = StageConfig(channels=(8, 8, 8, 8), heads=(2, 2, 2, 2), sr_ratios=(2, 2, 1, 1), d_t=8)
    enc = PyramidEncoder(rng, cfg)
    prev = Tensor(rng.standard_normal((2, 8, 8, 8)), requires_grad=True)
    params = _named(enc.stages[1]) + [prev]
    return (lambda: _project(enc.stage_embed(2, prev=prev, t=0.6))), params


def _named(module):
    out = []
    for name, p in module.named_parameters():
        p.name = name
        out.append(p)
    return out


def _randomize(params, rng):
    for p in params:
        if not np.any(p.data):
            p.data = 0.1 * rng.standard_normal(p.data.shape)
    return params


def _sfd(rng):
    m = SFD(rng, 6)
    m.affine_scale.data = np.array(0.8)  # the zero init would hide the descriptor path
    x = Tensor(rng.standard_normal((2, 6, 4, 4)), requires_grad=True)
    return (lambda: _project(m(x))), _named(m) + [x]


def _sfc(strict):
    def case(rng):
        m = SFC(rng, 6, strict_eq10=strict)
        x = Tensor(rng.standard_normal((2, 6, 4, 4)), requires_grad=True)
        return (lambda: _project(m(x))), _named(m) + [x]
    return case


def _velocity(rng):
    net = VelocityNet(rng, latent_channels=4, width=8, cond_channels=(4, 8), d_t=8, blocks=1)
    z = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    cond = [Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True),
            Tensor(rng.standard_normal((2, 8, 2, 2)), requires_grad=True)]
    t = np.array([0.2, 0.9])
    return (lambda: _project(net(z, t, cond))), _named(net) + [z] + cond


def _vae(rng):
    vae = MaskVAE(rng, VaeConfig(factor=4, latent_channels=2, hidden=(4, 8), beta_kl=0.5))
    masks = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    noise = rng.standard_normal((2, 2, 2, 2))
    return (lambda: vae.loss(masks, noise)["loss"]), _named(vae)


def _kl(rng):
    mu, logvar = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    return (lambda: kl_divergence(mu, logvar)), [mu, logvar]


MODULE_CASES: dict[str, Case] = {
    "encoder_stage1": _encoder_stage1,
    "encoder_stage2": _encoder_stage2,
    "sfd": _sfd,
    "sfc": _sfc(False),
    "sfc_strict": _sfc(True),
    "velocity_net": _velocity,
    "vae_kl": _kl,
    "vae": _vae,
}


def run_case(name: str, case: Case, seed: int = 0, tol: float = 1e-4, max_entries: int | None = 24) -> GradReport:
    rng = np.random.default_rng(seed)
    f, params = case(rng)
    _randomize(params, rng)
    return gradcheck(f, params, tol=tol, name=name, max_entries=max_entries, rng=np.random.default_rng(seed + 1))


def run_suite(seed: int = 0, tol: float = 1e-4, include_modules: bool = True) -> list[GradReport]:
    """Check every registered op (a missing case is reported as a failure) and every module."""
    reports = []
    for name in ops.DIFFERENTIABLE_OPS:
        case = OP_CASES.get(name)
        if case is None:
            reports.append(GradReport(name=f"op:{name} (no case)", max_rel_err=float("inf"), tol=tol))
            continue
        reports.append(run_case(f"op:{name}", case, seed, tol))
    if include_modules:
        for name, case in MODULE_CASES.items():
            reports.append(run_case(f"module:{name}", case, seed, tol))
    return reports
