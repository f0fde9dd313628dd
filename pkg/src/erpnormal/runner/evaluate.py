"""Evaluation to CSV and single-image prediction."""
from __future__ import annotations

import warnings
from pathlib import Path

import cv2
import numpy as np
import torch

from .. import fileio
from ..metrics import MetricReport, aggregate, angular_error_map
from .data import SplitData, load_split
from .trainer import load_model, predict_normals


def evaluate_predictions(pred: np.ndarray | torch.Tensor, data: SplitData) -> MetricReport:
    """Aggregate metrics for ``(N, 3, H, W)`` predictions against ``data``."""
    if tuple(pred.shape) != tuple(data.normal.shape):
        raise ValueError(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(data.normal.shape)}")
    return aggregate([angular_error_map(pred[i], data.normal[i], data.mask[i]) for i in range(len(data))])


def evaluate(ckpt, data, out=None, split: str = "test") -> MetricReport:
    """Finest-scale metrics of a checkpoint on one split; optionally writes a CSV."""
    model = load_model(ckpt)
    cfg = model.config
    split_data = load_split(data, split)
    if split_data.size != (cfg.height, cfg.width):
        raise ValueError(f"dataset resolution {split_data.size} does not match checkpoint "
                         f"resolution {(cfg.height, cfg.width)}")
    report = evaluate_predictions(predict_normals(model, split_data.rgb), split_data)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_csv())
    return report


def predict(ckpt, image, out) -> tuple:
    """Write ``normal.png`` (16-bit) and ``normal_vis.png`` (8-bit colour) into ``out``."""
    model = load_model(ckpt)
    cfg = model.config
    img = fileio.read_rgb(image)
    if img.shape[-2:] != (cfg.height, cfg.width):
        warnings.warn(f"resampling input {img.shape[-2:]} to {(cfg.height, cfg.width)}", stacklevel=2)
        img = cv2.resize(img.transpose(1, 2, 0), (cfg.width, cfg.height), interpolation=cv2.INTER_AREA)
        img = np.ascontiguousarray(img.transpose(2, 0, 1))
    rgb = torch.from_numpy(img)[None]
    normal = predict_normals(model, rgb)[0].numpy().astype(np.float64)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_normal16(out / "normal.png", normal)
    fileio.write_normal_vis(out / "normal_vis.png", normal)
    return out / "normal.png", out / "normal_vis.png"
