"""Training loop with step-decay LR, early stopping and bit-exact checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..losses import PerceptualExtractor, total_loss
from ..metrics import MetricReport, aggregate, angular_error_map
from ..net import ModelConfig, SphericalNormalNet
from .config import TrainConfig
from .data import SplitData, epoch_order, load_split

log = logging.getLogger("erpnormal.train")

CKPT_FORMAT = "erpnormal-ckpt-v1"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def set_deterministic(num_threads: int = 1):
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    batch_in_epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    stop_reason: str = ""


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    epoch_logs: list = field(default_factory=list)
    best_val: float = math.inf
    stop_reason: str = ""
    final_report: MetricReport | None = None
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


@torch.no_grad()
def predict_normals(model: SphericalNormalNet, rgb: torch.Tensor, batch_size: int = 4) -> torch.Tensor:
    """Finest-scale predictions, renormalised, in eval mode."""
    was_training = model.training
    model.eval()
    outs = []
    for i in range(0, rgb.shape[0], batch_size):
        outs.append(model(rgb[i:i + batch_size])[-1])
    model.train(was_training)
    out = torch.cat(outs)
    return out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)


def evaluate_split(model: SphericalNormalNet, data: SplitData) -> MetricReport:
    pred = predict_normals(model, data.rgb)
    maps = [angular_error_map(pred[i], data.normal[i], data.mask[i]) for i in range(len(data))]
    return aggregate(maps)


class Trainer:
    def __init__(self, cfg: TrainConfig, train_data: SplitData | None = None, val_data: SplitData | None = None):
        self.cfg = cfg
        if cfg.deterministic:
            set_deterministic(cfg.num_threads)
        torch.manual_seed(cfg.seed)
        self.model = SphericalNormalNet(cfg.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr0, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.extractor = PerceptualExtractor()
        self.state = TrainState()
        self.train_data = train_data if train_data is not None else load_split(cfg.data, cfg.train_split)
        if val_data is None:
            val_data = load_split(cfg.data, cfg.val_split)
        self.val_data = val_data
        for name, d in (("train", self.train_data), ("val", self.val_data)):
            if d.size != (cfg.model.height, cfg.model.width):
                raise ValueError(f"{name} data is {d.size}, model expects {(cfg.model.height, cfg.model.width)}")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.train_data) / self.cfg.batch_size)

    def _batch_indices(self):
        order = epoch_order(self.cfg.seed, self.state.epoch, len(self.train_data))
        bs = self.cfg.batch_size
        start = self.state.batch_in_epoch * bs
        return order[start:start + bs]

    def step(self) -> dict:
        """One optimizer step on the next batch; returns the logged terms."""
        cfg, st = self.cfg, self.state
        if st.batch_in_epoch >= self.batches_per_epoch:
            raise RuntimeError("epoch exhausted; call end_epoch() before the next step")
        lr = cfg.lr_at(st.epoch)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        idx = self._batch_indices()
        rgb, gt, mask = self.train_data.batch(idx)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        preds = self.model(rgb)
        loss, terms = total_loss(preds, gt, mask, cfg.loss, self.extractor, scales=cfg.supervised_scales)
        if not torch.isfinite(loss):
            names = [self.train_data.names[i] for i in idx]
            raise FloatingPointError(
                f"non-finite loss at step {st.step} (epoch {st.epoch}, samples {names}): {terms}")
        loss.backward()
        self.optimizer.step()
        terms = {"step": st.step, "epoch": st.epoch, "lr": lr, **terms}
        st.step += 1
        st.batch_in_epoch += 1
        return terms

    def end_epoch(self) -> dict:
        """Close the current epoch: validate if due, update early-stop bookkeeping."""
        cfg, st = self.cfg, self.state
        record = {"epoch": st.epoch}
        if (st.epoch + 1) % cfg.val_every == 0:
            report = evaluate_split(self.model, self.val_data)
            record["val"] = report
            if report.mean_deg < st.best_val:
                st.best_val = report.mean_deg
                st.best_epoch = st.epoch
                record["improved"] = True
            if cfg.target_mean_deg is not None and report.mean_deg < cfg.target_mean_deg:
                st.stop_reason = "target"
            elif st.epoch - st.best_epoch >= cfg.patience:
                st.stop_reason = "early_stop"
        st.epoch += 1
        st.batch_in_epoch = 0
        if not st.stop_reason and st.epoch >= cfg.max_epochs:
            st.stop_reason = "max_epochs"
        return record

    def run(self, out_dir=None) -> TrainResult:
        cfg, st = self.cfg, self.state
        out_dir = Path(out_dir or cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out_dir / "train.log")
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        if log.level == logging.NOTSET or log.level > logging.INFO:
            log.setLevel(logging.INFO)
        result = TrainResult()
        if st.stop_reason == "max_steps":
            st.stop_reason = ""
        try:
            while not st.stop_reason:
                if cfg.max_steps is not None and st.step >= cfg.max_steps:
                    st.stop_reason = "max_steps"
                    break
                terms = self.step()
                result.losses.append(terms["total"])
                if (terms["step"] % cfg.log_every) == 0:
                    log.info(format_step(terms))
                if st.batch_in_epoch >= self.batches_per_epoch:
                    record = self.end_epoch()
                    result.epoch_logs.append(record)
                    if "val" in record:
                        log.info(format_epoch(record))
                    if record.get("improved"):
                        result.best_checkpoint = self.save(out_dir / "best.pt")
            result.final_report = evaluate_split(self.model, self.val_data)
            result.best_val = min(st.best_val, result.final_report.mean_deg)
            result.stop_reason = st.stop_reason
            result.last_checkpoint = self.save(out_dir / "last.pt")
            log.info(f"stop reason={st.stop_reason} step={st.step} epoch={st.epoch} "
                     f"final_val_mean={result.final_report.mean_deg:.4f}")
        finally:
            log.removeHandler(handler)
            handler.close()
        return result

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CKPT_FORMAT,
            "train_config": self.cfg.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "state": dataclasses.asdict(self.state),
        }, path)
        return path

    @classmethod
    def from_checkpoint(cls, path, train_data=None, val_data=None) -> "Trainer":
        ckpt = _read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["train_config"]), train_data, val_data)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.state = TrainState(**ckpt["state"])
        return trainer


def _read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    return ckpt


def load_model(path) -> SphericalNormalNet:
    """Model only, in eval mode, from a training checkpoint."""
    ckpt = _read_checkpoint(path)
    model = SphericalNormalNet(ModelConfig(**ckpt["train_config"]["model"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


def format_step(t: dict) -> str:
    return (f"step={t['step']} epoch={t['epoch']} lr={t['lr']:.6e} L_m={t['L_m']:.6f} L_q={t['L_q']:.6f} "
            f"L_p={t['L_p']:.6f} L_s={t['L_s']:.6f} total={t['total']:.6f}")


def format_epoch(record: dict) -> str:
    r = record["val"]
    deltas = " ".join(f"d{t}={100 * d:.2f}" for t, d in zip(("5", "7.5", "11.5", "22.5", "30"), r.delta))
    return (f"epoch={record['epoch']} val_mean={r.mean_deg:.4f} val_median={r.median_deg:.4f} "
            f"val_mse={r.mse_deg2:.4f} {deltas} valid_pixels={r.valid_pixel_count}")


def train(cfg: TrainConfig, out_dir=None) -> TrainResult:
    return Trainer(cfg).run(out_dir)

