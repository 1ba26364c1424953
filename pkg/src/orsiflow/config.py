"""Run configuration: sectioned ``key = value`` text files.

Example::

    [flow]
    steps = 3
    condition_mode = per_step

    [sfd]
    enabled = true

Keys are addressed as ``section.key`` (``flow.steps``, ``sfc.strict_eq10``).
Tuples are written comma-separated. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelSection:
    size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    heads: tuple = (1, 2, 2, 4)
    sr_ratios: tuple = (4, 2, 1, 1)
    d_t: int = 32
    velocity_width: int = 64
    velocity_blocks: int = 2


@dataclass
class VaeSection:
    factor: int = 8
    latent_channels: int = 4
    hidden: tuple = (16, 32, 64)
    beta_kl: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    gate_mae: float = 0.05


@dataclass
class SfdSection:
    enabled: bool = True


@dataclass
class SfcSection:
    enabled: bool = True
    strict_eq10: bool = False


@dataclass
class FlowSection:
    steps: int = 3
    condition_mode: str = "per_step"
    seed: int = 0


@dataclass
class OptimSection:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "cosine"
    min_lr_ratio: float = 0.05


@dataclass
class TrainSection:
    batch_size: int = 8
    epochs: int = 90
    seed: int = 0
    val_every: int = 5
    val_count: int = 32


@dataclass
class DataSection:
    root: str = "data"
    n_train: int = 500
    n_test: int = 100
    objects_min: int = 1
    objects_max: int = 3
    contrast_min: float = 0.35
    contrast_max: float = 0.9
    clutter: float = 0.5
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    vae: VaeSection = field(default_factory=VaeSection)
    sfd: SfdSection = field(default_factory=SfdSection)
    sfc: SfcSection = field(default_factory=SfcSection)
    flow: FlowSection = field(default_factory=FlowSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    @classmethod
    def paper(cls) -> "RunConfig":
        """Full-size profile: 352x352 inputs, batch 32, 150 epochs, lr 1e-4.

        Needs far more compute than a desk CPU; provided for completeness.
        """
        cfg = cls()
        cfg.model.size = 352
        cfg.train.batch_size = 32
        cfg.train.epochs = 150
        cfg.optim.lr = 1e-4
        return cfg

    def set_seed(self, seed: int) -> None:
        self.train.seed = seed
        self.flow.seed = seed
        self.data.seed = seed

    def get(self, key: str):
        section, name = key.split(".", 1)
        return getattr(getattr(self, section), name)

    def set(self, key: str, value) -> None:
        section, name = key.split(".", 1)
        sec = getattr(self, section, None)
        if sec is None or name not in {f.name for f in dataclasses.fields(sec)}:
            raise KeyError(f"unknown config key {key!r}")
        default = getattr(sec, name)
        setattr(sec, name, _coerce(value, default) if isinstance(value, str) else value)

    def to_text(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            lines.append(f"[{sec.name}]")
            for f in dataclasses.fields(getattr(self, sec.name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, sec.name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_string(text)
        cfg = base or cls()
        for section in parser.sections():
            if section == "profile":
                continue
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        parser = configparser.ConfigParser()
        parser.read_string(text)
        base = cls.paper() if parser.get("profile", "name", fallback="desk") == "paper" else cls()
        return cls.from_text(text, base)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text
