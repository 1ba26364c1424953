"""``orsiflow`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, gradsuite, pipeline
from .config import RunConfig
from .errors import (CheckpointError, EmptyGroundTruth, InvalidSpec, MissingPair, NonFiniteState,
                     ShapeMismatch, UnreadableImage)
from .metrics import evaluate_dataset

log = logging.getLogger("orsiflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class GateFailed(Exception):
    pass


def _config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = RunConfig.load(path)
    else:
        cfg = RunConfig.paper() if args.profile == "paper" else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            cfg.set(key.strip(), value)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path} (run gen-data first)")
    return path


def _emit(line: str = ""):
    print(line, flush=True)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out(args)
    n_train = args.n_train if args.n_train is not None else cfg.data.n_train
    n_test = args.n_test if args.n_test is not None else cfg.data.n_test
    cfg.data.n_train, cfg.data.n_test = n_train, n_test
    cfg.data.root = str(out)
    rows = data.build_dataset(out, pipeline.scene_template(cfg), n_train, n_test, cfg.data.seed)
    cfg.save(out / "config.ini")
    _emit(f"wrote {len(rows)} scenes to {out} (manifest {out / 'manifest.csv'})")
    return EXIT_OK


def cmd_pretrain_vae(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.data or cfg.data.root)
    out = _out(args)
    cfg.save(out / "config.ini")
    _, masks, _ = data.load_split(manifest, "train")
    _, test_masks, _ = data.load_split(manifest, "test")
    result = pipeline.train_vae(cfg, masks, test_masks,
                                on_epoch=lambda e, l: _emit(f"epoch {e + 1:3d}  loss {l:.5f}"))
    path = out / "vae.ckpt"
    pipeline.save_vae(path, result.vae, meta={"val_mae": result.val_mae, "config": cfg.to_text()})
    (out / "vae_losses.json").write_text(json.dumps(result.losses))
    status = "passed" if result.gate_passed else "FAILED"
    _emit(f"held-out reconstruction MAE {result.val_mae:.4f} (gate < {cfg.vae.gate_mae}): {status}")
    _emit(f"checkpoint: {path}")
    if not result.gate_passed:
        raise GateFailed(f"VAE reconstruction MAE {result.val_mae:.4f} >= {cfg.vae.gate_mae}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(args)
    vae = pipeline.load_vae(cfg, args.vae or out / "vae.ckpt")
    manifest = _manifest(args.data or cfg.data.root)
    cfg.save(out / "config.ini")
    images, masks, _ = data.load_split(manifest, "train")
    if args.limit:
        images, masks = images[:args.limit], masks[:args.limit]
    tr_img, tr_msk, val_img, val_msk = pipeline.split_validation(images, masks, cfg.train.val_count)
    z0 = pipeline.encode_latents(vae, tr_msk)
    model = pipeline.build_model(cfg, vae)
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_rf", "val_mae"])

        def on_epoch(epoch, loss, val_mae):
            writer.writerow([epoch + 1, f"{loss:.8f}", "" if val_mae is None else f"{val_mae:.6f}"])
            fh.flush()
            extra = "" if val_mae is None else f"  val MAE {val_mae:.4f}"
            _emit(f"epoch {epoch + 1:3d}  L_RF {loss:.5f}{extra}")

        result = pipeline.train_flow(cfg, model, tr_img, z0, val_img, val_msk,
                                     checkpoint_path=out / "model.ckpt", on_epoch=on_epoch)
    _rewrite_meta(out / "model.ckpt", cfg)
    _emit(f"best validation MAE {result.best_mae:.4f} at epoch {result.best_epoch + 1}; "
          f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _rewrite_meta(path: Path, cfg: RunConfig):
    arrays, meta = checkpoint.load(path)
    meta["config"] = cfg.to_text()
    checkpoint.save(path, arrays, meta)


def load_trained(checkpoint_path, vae_path=None):
    """Rebuild a trained model from its checkpoint (topology comes from the stored config)."""
    arrays, meta = checkpoint.load(checkpoint_path)
    cfg = RunConfig.from_text(meta["config"]) if "config" in meta else RunConfig()
    vae_path = Path(vae_path) if vae_path else Path(checkpoint_path).with_name("vae.ckpt")
    vae = pipeline.load_vae(cfg, vae_path)
    model = pipeline.build_model(cfg, vae)
    own = {n for n, _ in model.named_parameters()}
    model.load_state_dict({n: a for n, a in arrays.items() if n in own})
    return model, cfg


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out(args)
    model, trained_cfg = load_trained(args.checkpoint, args.vae)
    seed = args.seed if args.seed is not None else trained_cfg.flow.seed
    trained_cfg.flow.seed = seed
    trained_cfg.flow.steps = args.steps
    trained_cfg.save(out / "config.ini")
    inputs = sorted(p for p in Path(args.input).iterdir() if p.suffix.lower() == ".png")
    if not inputs:
        raise FileNotFoundError(f"no PNG images in {args.input}")
    images = np.stack([data.load_image(p) for p in inputs])
    preds = model.predict(images, steps=args.steps, seed=seed)
    for p, pred in zip(inputs, preds):
        data.save_mask(out / p.name, pred[0])
    _emit(f"wrote {len(inputs)} masks to {out} ({args.steps} Euler steps, seed {seed})")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out(args)
    report = evaluate_dataset(args.pred, args.gt)
    path = out / "metrics.jsonl"
    report.write(path)
    cfg.save(out / "config.ini")
    _emit(report.table())
    _emit(f"records: {path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    out = _out(args)
    cfg.save(out / "config.ini")
    reports = gradsuite.run_suite(seed=cfg.train.seed, tol=args.tol)
    lines = [str(r) for r in reports]
    for line in lines:
        _emit(line)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r for r in reports if not r.ok]
    _emit(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out(args)
    vae = pipeline.load_vae(cfg, args.vae or out / "vae.ckpt")
    manifest = _manifest(args.data or cfg.data.root)
    cfg.save(out / "config.ini")
    tr_img, tr_msk, _ = data.load_split(manifest, "train")
    te_img, te_msk, _ = data.load_split(manifest, "test")
    if args.limit:
        tr_img, tr_msk = tr_img[:args.limit], tr_msk[:args.limit]
    table = pipeline.run_ablation(cfg, vae, tr_img, tr_msk, te_img, te_msk,
                                  on_row=lambda r: _emit(f"{r['setting']}: MAE {r['mae']:.4f}"))
    text = pipeline.format_ablation(table)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(json.dumps(table, indent=1))
    _emit(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (sectioned key = value)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk",
                        help="built-in defaults when no --config is given")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="orsiflow", description="Latent rectified-flow saliency detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-vae", parents=[common], help="train and freeze the mask VAE")
    p.add_argument("--data", help="dataset directory or manifest (default: data.root)")
    p.set_defaults(func=cmd_pretrain_vae)

    p = sub.add_parser("train", parents=[common], help="train encoder, guidance and velocity field")
    p.add_argument("--data")
    p.add_argument("--vae", help="frozen VAE checkpoint (default: OUT/vae.ckpt)")
    p.add_argument("--limit", type=int, help="use only the first N training scenes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write one saliency PNG per input image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vae", help="default: vae.ckpt next to the checkpoint")
    p.add_argument("--input", required=True, help="directory of RGB PNG images")
    p.add_argument("--steps", type=int, default=3, help="Euler steps (default 3)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all ops and modules")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="train the four guidance topologies and compare")
    p.add_argument("--data")
    p.add_argument("--vae")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if getattr(args, "steps", 1) < 1:
            raise UsageError("--steps must be >= 1")
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GateFailed, NonFiniteState, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, MissingPair, UnreadableImage, CheckpointError, InvalidSpec,
            ShapeMismatch, EmptyGroundTruth, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
