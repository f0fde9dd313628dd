"""Training configuration and the flat key=value config file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from ..d2n import D2NConfig
from ..losses import LossWeights
from ..net import ModelConfig

SECTIONS = {"model": ModelConfig, "loss": LossWeights, "d2n": D2NConfig}


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr0: float = 1e-4
    lr_halve_every: int = 15
    max_epochs: int = 110
    patience: int = 15
    seed: int = 0
    data: str = ""
    train_split: str = "train"
    val_split: str = "val"
    out_dir: str = "runs/default"
    # "all" supervises every decoder head, "finest" only the last one
    supervised_scales: str = "all"
    # optional hard budget on optimizer steps (desk-scale runs)
    max_steps: int | None = None
    # validate every n epochs; patience still counts epochs
    val_every: int = 1
    # stop as soon as validation mean error falls below this (degrees)
    target_mean_deg: float | None = None
    deterministic: bool = True
    num_threads: int = 1
    log_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    d2n: D2NConfig = field(default_factory=D2NConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr_halve_every < 1:
            raise ValueError("lr_halve_every must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.supervised_scales not in ("all", "finest"):
            raise ValueError(f"supervised_scales must be 'all' or 'finest', got {self.supervised_scales!r}")

    def lr_at(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr0, self.lr_halve_every)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {k: SECTIONS[k](**d.pop(k)) for k in SECTIONS if k in d}
        return cls(**d, **nested)

    def replace(self, **changes) -> "TrainConfig":
        """Copy with top-level or dotted (``model.levels``) overrides."""
        d = self.to_dict()
        for key, value in changes.items():
            _assign(d, key.replace("__", "."), value)
        return TrainConfig.from_dict(d)


def lr_schedule(epoch: int, lr0: float = 1e-4, halve_every: int = 15) -> float:
    """Step decay: halve every ``halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // halve_every)


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _assign(d: dict, key: str, value):
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or "." in name:
            raise KeyError(f"unknown config key {key!r}")
        if name not in _field_names(SECTIONS[section]):
            raise KeyError(f"unknown config key {key!r}")
        d[section][name] = value
    else:
        if key in SECTIONS or key not in _field_names(TrainConfig):
            raise KeyError(f"unknown config key {key!r}")
        d[key] = value


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def parse_config_text(text: str, base_dir: Path | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; sections use dotted keys (``model.levels = 3``).

    Unknown keys raise ``KeyError``. Relative ``data``/``out_dir`` paths are
    resolved against ``base_dir``.
    """
    flat = _flatten(tomli.loads(text))
    d = TrainConfig().to_dict()
    for key, value in flat.items():
        _assign(d, key, value)
    if base_dir is not None:
        for key in ("data", "out_dir"):
            if d[key] and not Path(d[key]).is_absolute():
                d[key] = str((base_dir / d[key]).resolve())
    return TrainConfig.from_dict(d)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), base_dir=path.parent)


def dump_config(cfg: TrainConfig) -> str:
    """Inverse of ``parse_config_text`` (``None`` fields are omitted)."""
    lines = []
    for key, value in sorted(_flatten(cfg.to_dict()).items()):
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
