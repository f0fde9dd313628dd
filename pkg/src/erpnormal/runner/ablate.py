"""Component and loss-term ablations under a shared seed and budget."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from ..metrics import MetricReport, format_comparison
from .config import TrainConfig
from .data import load_split
from .trainer import Trainer

# name -> (embed_layers, supervised_scales)
ARCHITECTURES = {
    "baseline": (1, "finest"),
    "+decoder": (1, "all"),
    "+decoder+embed": (3, "all"),
    "full": (3, "all"),
    "single-scale": (3, "finest"),
}
TERM_LETTERS = {"m": "lambda_m", "q": "lambda_q", "p": "lambda_p", "s": "lambda_s"}


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """``<arch>[/<terms>]``, e.g. ``full``, ``baseline``, ``full/mq`` (only MSE and quaternion terms)."""
    arch, _, terms = variant.partition("/")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown variant {arch!r}; choose from {sorted(ARCHITECTURES)}")
    embed_layers, scales = ARCHITECTURES[arch]
    loss = cfg.loss
    if terms:
        unknown = set(terms) - set(TERM_LETTERS)
        if unknown or len(set(terms)) != len(terms):
            raise ValueError(f"bad loss-term toggle {terms!r}; use letters from 'mqps'")
        loss = dataclasses.replace(loss, **{f: (getattr(loss, f) if k in terms else 0.0)
                                            for k, f in TERM_LETTERS.items()})
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, embed_layers=embed_layers),
        loss=loss,
        supervised_scales=scales,
    )


def ablate(cfg: TrainConfig, variants, out_dir=None, train_data=None, val_data=None) -> dict:
    """Train every variant from the same seed for the same budget; returns ``{variant: MetricReport}``."""
    train_data = train_data if train_data is not None else load_split(cfg.data, cfg.train_split)
    val_data = val_data if val_data is not None else load_split(cfg.data, cfg.val_split)
    out_dir = Path(out_dir or cfg.out_dir)
    rows: dict[str, MetricReport] = {}
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        safe = variant.replace("/", "_").replace("+", "p")
        result = Trainer(vcfg, train_data, val_data).run(out_dir / safe)
        rows[variant] = result.final_report
    return rows


def ablation_table(rows: dict) -> str:
    return format_comparison(rows)
