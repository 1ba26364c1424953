import pytest

from orsiflow.config import RunConfig


def test_desk_defaults():
    cfg = RunConfig()
    assert (cfg.model.size, cfg.train.batch_size, cfg.train.epochs) == (64, 8, 90)
    assert cfg.flow.steps == 3 and cfg.flow.condition_mode == "per_step"
    assert cfg.sfd.enabled and cfg.sfc.enabled and not cfg.sfc.strict_eq10


def test_paper_profile():
    cfg = RunConfig.paper()
    assert (cfg.model.size, cfg.train.batch_size, cfg.train.epochs, cfg.optim.lr) == (352, 32, 150, 1e-4)


def test_text_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.set("model.stage_channels", "8, 16, 32, 64")
    cfg.set("sfc.strict_eq10", "true")
    cfg.set("optim.lr", "3e-4")
    cfg.set_seed(7)
    cfg.save(tmp_path / "c.ini")
    back = RunConfig.load(tmp_path / "c.ini")
    assert back == cfg
    assert back.model.stage_channels == (8, 16, 32, 64)
    assert back.train.seed == back.flow.seed == back.data.seed == 7


def test_profile_section_selects_paper_base(tmp_path):
    (tmp_path / "c.ini").write_text("[profile]\nname = paper\n\n[train]\nepochs = 3\n")
    cfg = RunConfig.load(tmp_path / "c.ini")
    assert cfg.model.size == 352 and cfg.train.epochs == 3


def test_unknown_keys_and_bad_values():
    cfg = RunConfig()
    with pytest.raises(KeyError):
        cfg.set("model.depth", "3")
    with pytest.raises(KeyError):
        cfg.set("nosuch.key", "3")
    with pytest.raises(ValueError):
        cfg.set("sfd.enabled", "maybe")
    with pytest.raises(ValueError):
        cfg.set("train.epochs", "many")
