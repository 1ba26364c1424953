"""Acceptance criteria, each checked at its stated tolerance.

The training criteria share one desk-scale run: a 500/100 synthetic dataset,
one pretrained VAE and the four guidance topologies, all cached under
``ORSIFLOW_ACCEPT_DIR`` (default ``acceptance_artifacts/`` in the repo root).
A cold run trains everything, which takes tens of minutes on one core; later
runs reuse the cache as long as the stored config text still matches.
Delete the directory to retrain.

Every test records a one-line verdict that is printed in the terminal summary.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
import oracles
from orsiflow import checkpoint, data, gradsuite, metrics, pipeline
from orsiflow.config import RunConfig
from orsiflow.flow import euler_sample, interpolate_state, straightness
from orsiflow.data import SceneSpec, generate_scene
from test_metrics import PAIRS

ART = Path(os.environ.get("ORSIFLOW_ACCEPT_DIR", Path(__file__).resolve().parents[1] / "acceptance_artifacts"))
FULL, BASELINE = "+SFD+SFC", "baseline"


def verdict(key, ok, text):
    conftest.ACCEPTANCE_LINES[key] = f"{'PASS' if ok else 'FAIL'}  [{key}] {text}"
    print(conftest.ACCEPTANCE_LINES[key])
    return ok


# -- cached desk run ---------------------------------------------------------------

def _cached_json(path, cfg_text, build):
    if path.is_file():
        stored = json.loads(path.read_text())
        if stored.get("config") == cfg_text:
            return stored
    result = dict(build(), config=cfg_text)
    path.write_text(json.dumps(result, indent=1))
    return result


class DeskRun:
    def __init__(self, root: Path):
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        self.cfg = RunConfig()
        text = self.cfg.to_text()
        manifest = root / "data" / "manifest.csv"
        if not manifest.is_file():
            data.build_dataset(root / "data", pipeline.scene_template(self.cfg), 500, 100, self.cfg.data.seed)
        self.train_images, self.train_masks, _ = data.load_split(manifest, "train")
        self.test_images, self.test_masks, _ = data.load_split(manifest, "test")
        self.vae_info = _cached_json(root / "vae.json", text, self._pretrain)
        self.vae = pipeline.load_vae(self.cfg, root / "vae.ckpt")
        self.rows = {}
        for name, sfd, sfc in pipeline.ABLATION_ROWS:
            self.rows[name] = _cached_json(root / f"row_{_slug(name)}.json", text,
                                           lambda n=name, a=sfd, b=sfc: self._train_row(n, a, b))

    def _pretrain(self):
        res = pipeline.train_vae(self.cfg, self.train_masks, self.test_masks)
        pipeline.save_vae(self.root / "vae.ckpt", res.vae)
        return {"val_mae": res.val_mae, "seconds": res.seconds}

    def _train_row(self, name, sfd, sfc):
        cfg = self.cfg
        start = time.perf_counter()
        tr_img, tr_msk, val_img, val_msk = pipeline.split_validation(self.train_images, self.train_masks,
                                                                     cfg.train.val_count)
        z0 = pipeline.encode_latents(self.vae, tr_msk)
        model = pipeline.build_model(cfg, self.vae, sfd=sfd, sfc=sfc)
        fit = pipeline.train_flow(cfg, model, tr_img, z0, val_img, val_msk,
                                  checkpoint_path=self.root / f"row_{_slug(name)}.ckpt")
        checkpoint.save_module(self.root / f"row_{_slug(name)}.ckpt", model)
        report, _ = pipeline.evaluate_model(model, self.test_images, self.test_masks, cfg.flow.steps,
                                            cfg.flow.seed)
        return {"metrics": report.means, "train_seconds": fit.seconds,
                "run_seconds": time.perf_counter() - start}

    def model(self, name):
        _, sfd, sfc = next(r for r in pipeline.ABLATION_ROWS if r[0] == name)
        model = pipeline.build_model(self.cfg, self.vae, sfd=sfd, sfc=sfc)
        checkpoint.load_module(self.root / f"row_{_slug(name)}.ckpt", model)
        return model


def _slug(name):
    return {"baseline": "a_baseline", "+SFD": "c_sfd", "+SFC": "d_sfc", "+SFD+SFC": "h_full"}[name]


@pytest.fixture(scope="module")
def desk():
    return DeskRun(ART)


# -- 1. gradients ----------------------------------------------------------------------

def test_gradient_suite():
    start = time.perf_counter()
    reports = gradsuite.run_suite(tol=1e-4)
    seconds = time.perf_counter() - start
    worst = max(r.max_rel_err for r in reports)
    failed = [r.name for r in reports if not r.ok]
    ok = verdict("1 gradients", not failed and seconds < 120,
                 f"{len(reports)} cases, max rel err {worst:.2e} (< 1e-4), {seconds:.1f}s (< 120s)"
                 + (f", failing: {failed}" if failed else ""))
    assert ok


# -- 2. metrics vs oracle ----------------------------------------------------------------

def test_metric_oracle_equivalence():
    worst = {"s_alpha": 0.0, "e_max": 0.0, "mae": 0.0, "f_max": 0.0}
    refs = {"s_alpha": oracles.s_measure, "e_max": oracles.e_max, "mae": oracles.mae, "f_max": oracles.f_max}
    for pred, gt in PAIRS:
        rec = metrics.score_pair(pred, gt)
        for key, ref in refs.items():
            worst[key] = max(worst[key], abs(rec[key] - ref(pred, gt)))
    _, gt = PAIRS[0]
    perfect = metrics.score_pair(gt.astype(float), gt)
    exact = (perfect["s_alpha"], perfect["f_max"], perfect["e_max"], perfect["mae"]) == (1.0, 1.0, 1.0, 0.0)
    ok = (worst["s_alpha"] < 1e-9 and worst["e_max"] < 1e-9 and worst["mae"] < 1e-12
          and worst["f_max"] < 1e-12 and exact)
    verdict("2 metrics", ok, f"{len(PAIRS)} pairs, max |diff| S {worst['s_alpha']:.1e} E {worst['e_max']:.1e} "
            f"MAE {worst['mae']:.1e} F {worst['f_max']:.1e}; perfect prediction exact: {exact}")
    assert ok


# -- 3. flow exactness -----------------------------------------------------------------------

def test_flow_exactness():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((4, 4, 8, 8)), rng.standard_normal((4, 4, 8, 8))
    errs = {k: float(np.abs(euler_sample(eps, lambda z, t: eps - z0, k) - z0).max()) for k in (1, 3, 10)}
    ends = (np.array_equal(interpolate_state(z0, eps, 0.0).z, z0)
            and np.array_equal(interpolate_state(z0, eps, 1.0).z, eps))
    ok = max(errs.values()) < 1e-12 and ends
    verdict("3 flow", ok, "oracle-field Euler max err " + ", ".join(f"K={k}: {e:.1e}" for k, e in errs.items())
            + f"; interpolation endpoints exact: {ends}")
    assert ok


# -- 4. VAE gate ---------------------------------------------------------------------------

@pytest.mark.slow
def test_vae_gate(desk):
    info = desk.vae_info
    ok = info["val_mae"] < 0.05 and info["seconds"] < 15 * 60
    verdict("4 vae", ok,
            f"held-out recon MAE {info['val_mae']:.4f} (< 0.05), pretraining {info['seconds']:.0f}s (< 900s)")
    assert ok


@pytest.mark.slow
def test_vae_separates_distinct_masks(desk):
    yy, xx = np.mgrid[:64, :64]
    disk = ((yy - 32) ** 2 + (xx - 32) ** 2 < 15 ** 2).astype(float)[None, None]
    mu = pipeline.posterior_means(desk.vae, np.concatenate([disk, np.zeros_like(disk)]))
    gap = float(np.abs(mu[0] - mu[1]).max())
    ok = verdict("4b vae mu", gap > 1e-3, f"disk vs empty mask posterior means differ by {gap:.3f}")
    assert ok


# -- 5. end to end ---------------------------------------------------------------------------

@pytest.mark.slow
def test_end_to_end(desk):
    full, base = desk.rows[FULL], desk.rows[BASELINE]
    untrained = pipeline.build_model(desk.cfg, desk.vae)
    rep, _ = pipeline.evaluate_model(untrained, desk.test_images, desk.test_masks, desk.cfg.flow.steps,
                                     desk.cfg.flow.seed)
    m = full["metrics"]
    seconds = desk.vae_info["seconds"] + full["run_seconds"]
    ok = (m["mae"] < 0.08 and m["s_alpha"] > 0.80 and m["mae"] < rep.means["mae"]
          and m["mae"] < base["metrics"]["mae"] and seconds < 45 * 60)
    verdict("5 end-to-end", ok,
            f"full model test MAE {m['mae']:.4f} (< 0.08), S_alpha {m['s_alpha']:.4f} (> 0.80); "
            f"untrained MAE {rep.means['mae']:.4f}, no-guidance MAE {base['metrics']['mae']:.4f}; "
            f"VAE + training {seconds / 60:.1f} min (< 45)")
    assert ok


# -- 6. few-step consistency ----------------------------------------------------------------

@pytest.mark.slow
def test_three_vs_many_steps(desk):
    model = desk.model(FULL)
    seed = desk.cfg.flow.seed
    few, many = model.predict(desk.test_images, 3, seed), model.predict(desk.test_images, 25, seed)
    gap = float(np.mean(np.abs(few - many)))
    ok = verdict("6 K=3 vs K=25", gap < 0.01, f"mean |difference| {gap:.4f} (< 0.01)")
    assert ok


@pytest.mark.slow
def test_training_straightens_trajectories(desk):
    trained = desk.model(FULL)
    untrained = pipeline.build_model(desk.cfg, desk.vae)
    images = desk.test_images[:16]
    eps = np.random.default_rng(1).standard_normal((16,) + desk.vae.latent_shape(64, 64))

    def score(model):
        _, traj = model.sample_latent(images, eps, 10, return_trajectory=True)
        return float(np.mean([straightness(traj[:, i]) for i in range(len(images))]))
    s_tr, s_un = score(trained), score(untrained)
    ok = verdict("6b straightness", s_tr < s_un, f"trained {s_tr:.4f} < untrained {s_un:.4f}")
    assert ok


@pytest.mark.slow
def test_low_contrast_scenes_are_harder(desk):
    model = desk.model(FULL)
    maes = {}
    for c in (0.05, 0.9):
        scenes = [generate_scene(SceneSpec(contrast=c, seed=10_000 + i)) for i in range(24)]
        images = np.stack([s[0] for s in scenes])
        masks = np.stack([s[1] for s in scenes])
        maes[c] = float(np.mean(np.abs(model.predict(images, 3, 0) - masks)))
    ok = verdict("6c contrast", maes[0.05] > maes[0.9],
                 f"MAE at contrast 0.05 {maes[0.05]:.4f} > contrast 0.9 {maes[0.9]:.4f}")
    assert ok


# -- 7. ablation ordering --------------------------------------------------------------------

@pytest.mark.slow
def test_ablation_ordering(desk):
    mae = {name: desk.rows[name]["metrics"]["mae"] for name, _, _ in pipeline.ABLATION_ROWS}
    mids = (mae["+SFD"], mae["+SFC"])
    ok = mae[BASELINE] > max(mids) and min(mids) > mae[FULL]
    verdict("7 ablation", ok, "test MAE " + ", ".join(f"{k} {v:.4f}" for k, v in mae.items())
            + " (want baseline > +SFD, +SFC > +SFD+SFC)")
    (ART / "ablation.txt").write_text(pipeline.format_ablation(
        [dict(setting=n, sfd=a, sfc=b, **desk.rows[n]["metrics"]) for n, a, b in pipeline.ABLATION_ROWS]) + "\n")
    assert ok


# -- 8. optional real-data row -----------------------------------------------------------------

def test_reference_row():
    """Needs ORSIFLOW_REF_PRED, ORSIFLOW_REF_GT (mask directories) and ORSIFLOW_REF_ROW ("S,F,E,MAE")."""
    env = [os.environ.get(k) for k in ("ORSIFLOW_REF_PRED", "ORSIFLOW_REF_GT", "ORSIFLOW_REF_ROW")]
    if not all(env):
        conftest.ACCEPTANCE_LINES["8 reference row"] = "SKIP  [8 reference row] no external data supplied"
        pytest.skip("no external prediction/GT directories supplied")
    expected = [float(v) for v in env[2].split(",")]
    got = metrics.evaluate_dataset(env[0], env[1]).means
    values = [got["s_alpha"], got["f_max"], got["e_max"], got["mae"]]
    worst = max(abs(a - b) for a, b in zip(values, expected))
    ok = verdict("8 reference row", worst <= 0.002, f"max deviation {worst:.4f} (<= 0.002)")
    assert ok
