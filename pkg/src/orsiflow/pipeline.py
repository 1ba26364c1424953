"""Training and evaluation loops shared by the CLI and the acceptance tests."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import SceneSpec
from .encoder import StageConfig
from .errors import MissingVae, NonFiniteLoss
from .metrics import MetricReport, evaluate_arrays
from .model import ORSIFlow
from .optim import AdamW
from .tensor import Tensor, backward, no_grad
from .vae import MaskVAE, VaeConfig

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("baseline", False, False),
    ("+SFD", True, False),
    ("+SFC", False, True),
    ("+SFD+SFC", True, True),
)


def scene_template(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(size=cfg.model.size, objects=(d.objects_min, d.objects_max),
                     contrast=(d.contrast_min, d.contrast_max), clutter=d.clutter)


def build_vae(cfg: RunConfig) -> MaskVAE:
    v = cfg.vae
    vcfg = VaeConfig(factor=v.factor, latent_channels=v.latent_channels, hidden=tuple(v.hidden), beta_kl=v.beta_kl)
    return MaskVAE(np.random.default_rng([cfg.train.seed, 1]), vcfg)


def build_model(cfg: RunConfig, vae: MaskVAE, sfd: bool | None = None, sfc: bool | None = None) -> ORSIFlow:
    m = cfg.model
    stage = StageConfig(channels=tuple(m.stage_channels), heads=tuple(m.heads), sr_ratios=tuple(m.sr_ratios), d_t=m.d_t)
    return ORSIFlow(np.random.default_rng([cfg.train.seed, 2]), vae, stage,
                    velocity_width=m.velocity_width, velocity_blocks=m.velocity_blocks,
                    sfd_enabled=cfg.sfd.enabled if sfd is None else sfd,
                    sfc_enabled=cfg.sfc.enabled if sfc is None else sfc,
                    strict_eq10=cfg.sfc.strict_eq10, condition_mode=cfg.flow.condition_mode)


def lr_at(cfg: RunConfig, base: float, step: int, total: int) -> float:
    if cfg.optim.schedule == "constant" or total <= 1:
        return base
    floor = base * cfg.optim.min_lr_ratio
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * step / (total - 1)))


def _check_finite(loss: Tensor, what: str, epoch: int, step: int, params: dict):
    value = float(loss.data)
    if math.isfinite(value):
        return
    bad = [n for n, p in params.items() if not np.all(np.isfinite(p.data))]
    raise NonFiniteLoss(f"{what} loss is {value} at epoch {epoch + 1}, step {step}; "
                        f"non-finite parameters: {bad[:5] or 'none'}")


# -- VAE -----------------------------------------------------------------------

def vae_reconstruct(vae: MaskVAE, masks: np.ndarray, batch: int = 32) -> np.ndarray:
    """Decode the posterior mean of each mask."""
    out = np.empty_like(masks, dtype=np.float64)
    with no_grad():
        for s in range(0, len(masks), batch):
            mu, _ = vae.encode(Tensor(masks[s:s + batch]))
            out[s:s + batch] = vae.decode(mu).data
    return out


def posterior_means(vae: MaskVAE, masks: np.ndarray, batch: int = 32) -> np.ndarray:
    chunks = []
    with no_grad():
        for s in range(0, len(masks), batch):
            chunks.append(vae.encode(Tensor(masks[s:s + batch]))[0].data)
    return np.concatenate(chunks)


def encode_latents(vae: MaskVAE, masks: np.ndarray, batch: int = 32) -> np.ndarray:
    """Flow-space data latents ``z0``: normalized posterior means."""
    return vae.normalize(posterior_means(vae, masks, batch))


@dataclass
class VaeResult:
    vae: MaskVAE
    losses: list
    val_mae: float
    seconds: float
    gate: float = 0.05

    @property
    def gate_passed(self) -> bool:
        return self.val_mae < self.gate


def train_vae(cfg: RunConfig, masks: np.ndarray, val_masks: np.ndarray,
              on_epoch: Callable | None = None) -> VaeResult:
    vae = build_vae(cfg)
    opt = AdamW(vae.trainable(), lr=cfg.vae.lr, betas=(cfg.optim.beta1, cfg.optim.beta2),
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    rng = np.random.default_rng([cfg.train.seed, 3])
    bs = cfg.vae.batch_size
    n = len(masks)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.vae.epochs * steps_per_epoch
    losses = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.vae.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            batch = masks[idx]
            noise = rng.standard_normal((len(idx),) + vae.latent_shape(*batch.shape[-2:]))
            opt.lr = lr_at(cfg, cfg.vae.lr, step, total)
            opt.zero_grad()
            parts = vae.loss(batch, noise)
            _check_finite(parts["loss"], "VAE", epoch, step, opt.params)
            backward(parts["loss"])
            opt.step()
            epoch_loss += float(parts["loss"].data) * len(idx)
            step += 1
        losses.append(epoch_loss / n)
        if on_epoch:
            on_epoch(epoch, losses[-1])
    vae.freeze()
    vae.calibrate(posterior_means(vae, masks))
    recon = vae_reconstruct(vae, val_masks)
    val_mae = float(np.mean(np.abs(recon - val_masks)))
    return VaeResult(vae, losses, val_mae, time.perf_counter() - start, cfg.vae.gate_mae)


def save_vae(path, vae: MaskVAE, meta: dict | None = None) -> None:
    meta = dict(meta or {}, latent_shift=vae.latent_shift, latent_scale=vae.latent_scale)
    checkpoint.save_module(path, vae, meta=meta)


def load_vae(cfg: RunConfig, path) -> MaskVAE:
    path = Path(path)
    if not path.is_file():
        raise MissingVae(f"frozen VAE checkpoint not found: {path} (run pretrain-vae first)")
    vae = build_vae(cfg)
    meta = checkpoint.load_module(path, vae)
    vae.latent_shift = float(meta.get("latent_shift", 0.0))
    vae.latent_scale = float(meta.get("latent_scale", 1.0))
    vae.freeze()
    return vae


# -- flow ----------------------------------------------------------------------

@dataclass
class FlowResult:
    model: ORSIFlow
    losses: list
    val_history: list = field(default_factory=list)
    best_mae: float = float("inf")
    best_epoch: int = -1
    seconds: float = 0.0


def train_flow(cfg: RunConfig, model: ORSIFlow, images: np.ndarray, z0: np.ndarray,
               val_images: np.ndarray | None = None, val_masks: np.ndarray | None = None,
               checkpoint_path=None, on_epoch: Callable | None = None) -> FlowResult:
    """Optimize the rectified-flow loss with AdamW.

    Every ``val_every`` epochs (and after the last one) the model is sampled
    with ``flow.steps`` Euler steps on the validation images; the weights with
    the lowest validation MAE are kept (and written to ``checkpoint_path``).
    """
    params = model.trainable()
    o = cfg.optim
    opt = AdamW(params, lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps, weight_decay=o.weight_decay)
    rng = np.random.default_rng([cfg.train.seed, 4])
    bs = cfg.train.batch_size
    n = len(images)
    total = cfg.train.epochs * math.ceil(n / bs)
    result = FlowResult(model, [])
    best_state = None
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.train.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            eps = rng.standard_normal(z0[idx].shape)
            t = rng.uniform(0.0, 1.0, len(idx))
            opt.lr = lr_at(cfg, o.lr, step, total)
            opt.zero_grad()
            loss = model.flow_loss(images[idx], z0[idx], eps, t)
            _check_finite(loss, "flow", epoch, step, params)
            backward(loss)
            opt.step()
            epoch_loss += float(loss.data) * len(idx)
            step += 1
        result.losses.append(epoch_loss / n)
        val_mae = None
        last = epoch == cfg.train.epochs - 1
        if val_images is not None and ((epoch + 1) % cfg.train.val_every == 0 or last):
            pred = model.predict(val_images, steps=cfg.flow.steps, seed=cfg.flow.seed)
            val_mae = float(np.mean(np.abs(pred - val_masks)))
            result.val_history.append((epoch, val_mae))
            if val_mae < result.best_mae:
                result.best_mae, result.best_epoch = val_mae, epoch
                best_state = model.state_dict()
                if checkpoint_path is not None:
                    checkpoint.save_module(checkpoint_path, model, meta={"epoch": epoch, "val_mae": val_mae})
        if on_epoch:
            on_epoch(epoch, result.losses[-1], val_mae)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_path is not None:
        checkpoint.save_module(checkpoint_path, model, meta={"epoch": cfg.train.epochs - 1})
    result.seconds = time.perf_counter() - start
    return result


def evaluate_model(model: ORSIFlow, images: np.ndarray, masks: np.ndarray, steps: int = 3, seed: int = 0,
                   names=None) -> tuple[MetricReport, np.ndarray]:
    pred = model.predict(images, steps=steps, seed=seed)
    return evaluate_arrays(pred[:, 0], masks[:, 0] > 0.5, names), pred


def split_validation(images: np.ndarray, masks: np.ndarray, count: int):
    """Hold out the last ``count`` training scenes for model selection."""
    count = min(count, len(images) // 5)
    if count <= 0:
        return images, masks, None, None
    return images[:-count], masks[:-count], images[-count:], masks[-count:]


def run_ablation(cfg: RunConfig, vae: MaskVAE, train_images, train_masks, test_images, test_masks,
                 rows=ABLATION_ROWS, on_row: Callable | None = None) -> list[dict]:
    """Train each guidance topology from the same seed and score it on the test split."""
    tr_img, tr_msk, val_img, val_msk = split_validation(train_images, train_masks, cfg.train.val_count)
    z0 = encode_latents(vae, tr_msk)
    table = []
    for name, sfd, sfc in rows:
        model = build_model(cfg, vae, sfd=sfd, sfc=sfc)
        fit = train_flow(cfg, model, tr_img, z0, val_img, val_msk)
        report, _ = evaluate_model(model, test_images, test_masks, cfg.flow.steps, cfg.flow.seed)
        row = {"setting": name, "sfd": sfd, "sfc": sfc, **report.means, "seconds": fit.seconds}
        table.append(row)
        if on_row:
            on_row(row)
    return table


def format_ablation(table: list[dict]) -> str:
    lines = [f"{'setting':<10s}  {'SFD':>3s}  {'SFC':>3s}  {'S_alpha':>8s}  {'F_max':>8s}  {'E_max':>8s}  {'MAE':>8s}"]
    for r in table:
        lines.append(f"{r['setting']:<10s}  {'x' if r['sfd'] else '-':>3s}  {'x' if r['sfc'] else '-':>3s}  "
                     f"{r['s_alpha']:8.4f}  {r['f_max']:8.4f}  {r['e_max']:8.4f}  {r['mae']:8.4f}")
    return "\n".join(lines)
