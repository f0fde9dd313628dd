"""Training losses: MSE, quaternion (angular), perceptual and smoothness terms."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .net import pano_pad, resize_to

EPS = 1e-8


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_q: float = 10.0
    lambda_p: float = 0.05
    lambda_s: float = 0.5

    def __post_init__(self):
        for name in ("lambda_m", "lambda_q", "lambda_p", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class PerceptualExtractor(nn.Module):
    """Frozen, seeded feature pyramid standing in for a pretrained backbone.

    Three stride-2 3x3 conv + ReLU stages. Weights are buffers, so they never
    reach an optimizer and survive ``.double()``/``.float()`` casts.
    """

    def __init__(self, channels=(16, 32, 64), in_channels=3, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.channels = tuple(channels)
        c_in = in_channels
        for i, c in enumerate(self.channels):
            bound = (6.0 / (9 * c_in)) ** 0.5
            w = (torch.rand(c, c_in, 3, 3, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.register_buffer(f"w{i}", w)
            c_in = c

    def forward(self, x):
        feats = []
        for i in range(len(self.channels)):
            w = getattr(self, f"w{i}").to(x.dtype)
            x = F.relu(F.conv2d(pano_pad(x, 1), w, stride=2))
            feats.append(x)
        return feats


def _as_list(x, n):
    if isinstance(x, (list, tuple)):
        if len(x) != n:
            raise ValueError(f"expected {n} ground-truth maps, got {len(x)}")
        return list(x)
    return [x] * n


def _prepare(preds, gts, mask):
    """Upsample predictions to ground-truth size; returns per-scale pairs and a (B,1,H,W) bool mask."""
    if torch.is_tensor(preds):
        preds = [preds]
    gts = _as_list(gts, len(preds))
    size = gts[0].shape[-2:]
    if mask is None:
        mask = torch.ones(gts[0].shape[0], *size, dtype=torch.bool, device=gts[0].device)
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).expand(gts[0].shape[0], -1, -1)
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        raise ValueError("mask has no valid pixels")
    pairs = [(resize_to(p, g.shape[-2:]), g) for p, g in zip(preds, gts)]
    return pairs, mask.unsqueeze(1)


def mse_loss(preds, gts, mask=None):
    """Sum over scales of the mean squared error over valid pixels and channels."""
    pairs, m = _prepare(preds, gts, mask)
    mf = m.to(pairs[0][1].dtype)
    denom = mf.sum() * 3
    return sum(((p - g) ** 2 * mf).sum() / denom for p, g in pairs)


def _safe_norm(x, dim=1):
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def angle_between(a, b, dim=1):
    """Angle in radians, ``atan2(|a x b|, a . b)``, after normalising with an epsilon guard."""
    a = a / (_safe_norm(a, dim).unsqueeze(dim) + EPS)
    b = b / (_safe_norm(b, dim).unsqueeze(dim) + EPS)
    cross = torch.cross(a, b, dim=dim)
    return torch.atan2(_safe_norm(cross, dim), (a * b).sum(dim))


def quaternion_loss(preds, gts, mask=None, return_excluded=False):
    """Sum over scales of the mean per-pixel angle (radians) over valid pixels.

    Ground-truth pixels with (near) zero norm are dropped from the mask; their
    count is returned alongside the loss when ``return_excluded`` is set.
    """
    pairs, m = _prepare(preds, gts, mask)
    m = m[:, 0]
    total = 0.0
    excluded = 0
    for p, g in pairs:
        ok = m & (_safe_norm(g) > EPS)
        excluded = int((m & ~ok).sum())
        if not bool(ok.any()):
            raise ValueError("no valid ground-truth normals")
        ang = angle_between(p, g)
        total = total + (ang * ok).sum() / ok.sum()
    if return_excluded:
        return total, excluded
    return total


def perceptual_loss(pred_finest, gt_finest, extractor: PerceptualExtractor, mask=None):
    """Sum over pyramid layers of the mean squared feature difference.

    Invalid pixels are filled with ground truth before feature extraction, so
    they contribute no difference at the input.
    """
    if mask is not None:
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        m = mask.unsqueeze(1).to(torch.bool)
        pred_finest = torch.where(m, pred_finest, gt_finest)
    fp = extractor(pred_finest)
    fg = extractor(gt_finest)
    return sum(((a - b) ** 2).mean() for a, b in zip(fp, fg))


def smooth_loss(preds, gts, mask=None):
    """Sum over scales of mean |G^x| + |G^y| of the residual gradient.

    Forward differences; x wraps across the longitude seam, the last row has
    no y term. A difference counts only when both of its pixels are valid.
    ``|.|`` is the L1 norm over the three channels.
    """
    pairs, m = _prepare(preds, gts, mask)
    mf = m.to(pairs[0][1].dtype)
    mx = mf * torch.roll(mf, -1, dims=-1)
    my = mf[..., :-1, :] * mf[..., 1:, :]
    denom = mf.sum()
    total = 0.0
    for p, g in pairs:
        r = p - g
        gx = torch.roll(r, -1, dims=-1) - r
        gy = r[..., 1:, :] - r[..., :-1, :]
        total = total + ((gx.abs() * mx).sum() + (gy.abs() * my).sum()) / denom
    return total


def total_loss(preds, gts, mask, weights: LossWeights, extractor: PerceptualExtractor, scales="all"):
    """Weighted sum of the four terms; returns ``(total, terms)``.

    ``preds`` are ordered coarse to fine. ``scales="finest"`` supervises only
    the last map (single-scale ablation). Every term is computed for logging
    even when its weight is zero.
    """
    if torch.is_tensor(preds):
        preds = [preds]
    preds = list(preds)
    if scales == "finest":
        preds = preds[-1:]
    elif scales != "all":
        raise ValueError(f"unknown scales mode {scales!r}")
    gt = gts[-1] if isinstance(gts, (list, tuple)) else gts
    lm = mse_loss(preds, gt, mask)
    lq, excluded = quaternion_loss(preds, gt, mask, return_excluded=True)
    lp = perceptual_loss(resize_to(preds[-1], gt.shape[-2:]), gt, extractor, mask)
    ls = smooth_loss(preds, gt, mask)
    total = weights.lambda_m * lm + weights.lambda_q * lq + weights.lambda_p * lp + weights.lambda_s * ls
    terms = {
        "L_m": lm.item(), "L_q": lq.item(), "L_p": lp.item(), "L_s": ls.item(),
        "total": total.item(), "excluded_gt": excluded,
    }
    return total, terms
