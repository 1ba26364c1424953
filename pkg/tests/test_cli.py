import json

import numpy as np
import pytest

from orsiflow import checkpoint, cli, gradsuite, ops
from orsiflow.tensor import Tensor, record

SMALL = ["--set", "model.size=32", "--set", "vae.epochs=2", "--set", "train.epochs=2",
         "--set", "train.val_every=1", "--set", "train.val_count=8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset, VAE and model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir, run = root / "data", root / "run"
    assert cli.main(["gen-data", "--out", str(data_dir), "--n-train", "50", "--n-test", "6",
                     "--seed", "1"] + SMALL) == 0
    # the gate is meaningless after two epochs at this size; a gate failure still writes the checkpoint
    code = cli.main(["pretrain-vae", "--data", str(data_dir), "--out", str(run), "--seed", "1"] + SMALL)
    assert code in (0, 3) and (run / "vae.ckpt").is_file()
    assert cli.main(["train", "--data", str(data_dir), "--out", str(run), "--seed", "1"] + SMALL) == 0
    return root


def test_gen_data_writes_manifest_and_config(workspace):
    rows = (workspace / "data" / "manifest.csv").read_text().strip().splitlines()
    assert len(rows) == 57
    assert "size = 32" in (workspace / "data" / "config.ini").read_text()


def test_train_outputs(workspace):
    run = workspace / "run"
    lines = (run / "train_log.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,loss_rf,val_mae" and len(lines) == 3
    losses = [float(line.split(",")[1]) for line in lines[1:]]
    assert losses[1] < losses[0]
    _, meta = checkpoint.load(run / "model.ckpt")
    assert "[flow]" in meta["config"]
    assert (run / "config.ini").is_file()


def test_vae_loss_trace_is_reproducible(workspace, tmp_path):
    code = cli.main(["pretrain-vae", "--data", str(workspace / "data"), "--out", str(tmp_path), "--seed", "1"]
                    + SMALL)
    assert code in (0, 3)
    assert (tmp_path / "vae_losses.json").read_text() == (workspace / "run" / "vae_losses.json").read_text()


def test_predict_defaults_to_three_steps_and_is_byte_identical(workspace, tmp_path, capsys):
    run, images = workspace / "run", workspace / "data" / "images"
    args = ["predict", "--checkpoint", str(run / "model.ckpt"), "--input", str(images), "--seed", "4"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert "3 Euler steps" in capsys.readouterr().out
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert len(files) == 56
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "steps = 3" in (tmp_path / "a" / "config.ini").read_text()
    assert cli.main(args + ["--steps", "25", "--out", str(tmp_path / "c")]) == 0


def test_eval_perfect_and_mismatched(workspace, tmp_path, capsys):
    masks = workspace / "data" / "masks"
    assert cli.main(["eval", "--pred", str(masks), "--gt", str(masks), "--out", str(tmp_path)]) == 0
    mean = json.loads((tmp_path / "metrics.jsonl").read_text().strip().splitlines()[-1])
    assert (mean["s_alpha"], mean["e_max"], mean["mae"]) == (1.0, 1.0, 0.0)
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "stray.png").write_bytes((masks / "test_00000.png").read_bytes())
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(pred), "--gt", str(masks), "--out", str(tmp_path)]) == 2
    assert "stray" in capsys.readouterr().err


def test_eval_matches_library(workspace, tmp_path):
    from orsiflow.metrics import evaluate_dataset
    masks = workspace / "data" / "masks"
    cli.main(["eval", "--pred", str(masks), "--gt", str(masks), "--out", str(tmp_path)])
    assert (tmp_path / "metrics.jsonl").read_text().strip().splitlines() == \
        evaluate_dataset(masks, masks).to_lines()


def test_train_aborts_on_nan_parameters(workspace, tmp_path, monkeypatch):
    from orsiflow import pipeline
    real = pipeline.build_model

    def poisoned(*a, **k):
        model = real(*a, **k)
        model.velocity.out.bias.data[:] = np.nan
        return model
    monkeypatch.setattr(pipeline, "build_model", poisoned)
    code = cli.main(["train", "--data", str(workspace / "data"), "--vae", str(workspace / "run" / "vae.ckpt"),
                     "--out", str(tmp_path), "--limit", "16"] + SMALL)
    assert code == 3


# -- exit codes ---------------------------------------------------------------------

def test_missing_manifest_is_a_data_error(tmp_path, capsys):
    assert cli.main(["pretrain-vae", "--data", str(tmp_path), "--out", str(tmp_path)]) == 2
    assert "manifest" in capsys.readouterr().err


def test_missing_vae_is_a_data_error(workspace, tmp_path):
    assert cli.main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 2


def test_usage_errors(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--set", "no.such=1"]) == 1
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--set", "novalue"]) == 1
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--config", str(tmp_path / "none.ini")]) == 1
    assert cli.main(["predict", "--checkpoint", "x", "--input", "y", "--steps", "0"]) == 1
    assert cli.main(["--help"]) == 0


def test_gradcheck_command_covers_every_op(tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = (tmp_path / "gradcheck.txt").read_text()
    for name in ops.DIFFERENTIABLE_OPS:
        assert f"op:{name} " in report
    for name in gradsuite.MODULE_CASES:
        assert f"module:{name} " in report
    assert "FAIL" not in report


def test_gradcheck_reports_corrupted_op(tmp_path, monkeypatch, capsys):
    def bad_square_case(rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        wrong = lambda: ops.sum(record("square", x.data ** 2, [x], lambda g: (2.5 * x.data * g,)))  # noqa: E731
        return wrong, [x]
    monkeypatch.setitem(gradsuite.OP_CASES, "square", bad_square_case)
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 3
    assert "FAIL op:square" in capsys.readouterr().out


def test_ablate_table_shape(workspace, tmp_path):
    code = cli.main(["ablate", "--data", str(workspace / "data"), "--vae", str(workspace / "run" / "vae.ckpt"),
                     "--out", str(tmp_path), "--limit", "16", "--set", "train.epochs=1"] + SMALL[:2])
    assert code == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert len(rows) == 4
    assert all({"s_alpha", "f_max", "e_max", "mae"} <= set(r) for r in rows)
    assert len((tmp_path / "ablation.txt").read_text().strip().splitlines()) >= 5
