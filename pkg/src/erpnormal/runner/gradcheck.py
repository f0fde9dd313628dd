"""Finite-difference verification of analytic gradients of the total loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..losses import LossWeights, PerceptualExtractor, total_loss
from ..net import ModelConfig, SphericalNormalNet

MAX_SIDE = 8


@dataclass(frozen=True)
class GroupResult:
    name: str
    numel: int
    probed: int
    rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    groups: list
    threshold: float
    h: float

    @property
    def pass_fraction(self) -> float:
        return sum(g.passed for g in self.groups) / len(self.groups)

    def passed(self, min_fraction: float = 0.99) -> bool:
        return self.pass_fraction >= min_fraction

    def failures(self) -> list:
        return [g for g in self.groups if not g.passed]

    def format(self) -> str:
        width = max(len(g.name) for g in self.groups)
        lines = [f"{'group':<{width}}  {'numel':>7}  {'probed':>6}  {'rel_error':>10}  status"]
        for g in self.groups:
            lines.append(f"{g.name:<{width}}  {g.numel:>7}  {g.probed:>6}  {g.rel_error:>10.3e}  "
                         f"{'PASS' if g.passed else 'FAIL'}")
        lines.append(f"passed {sum(g.passed for g in self.groups)}/{len(self.groups)} groups "
                     f"({100 * self.pass_fraction:.1f}%) at threshold {self.threshold:g}, h={self.h:g}")
        return "\n".join(lines)


def _rel(a: np.ndarray, b: np.ndarray, atol: float) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), atol))


def gradcheck(model_cfg: ModelConfig, weights: LossWeights | None = None, h: float = 1e-5,
              threshold: float = 1e-3, max_coords: int = 12, seed: int = 0, scales: str = "all",
              corrupt: str | None = None, corrupt_factor: float = 1.1, atol: float = 1e-6) -> GradcheckReport:
    """Central differences vs autograd, one result per named parameter.

    Each group is probed on up to ``max_coords`` random coordinates (all of
    them for small tensors) plus one random direction; its error is the worse
    of the two relative errors, with the denominator floored at ``atol``.
    The floor sits well above finite-difference round-off (about
    eps * |L| / h per coordinate) so groups whose exact gradient vanishes,
    such as conv biases ahead of batch norm, are not scored on noise.
    ``corrupt`` scales that group's analytic gradient by ``corrupt_factor``
    to exercise the harness itself.
    """
    if max(model_cfg.height, model_cfg.width // 2) > MAX_SIDE:
        raise ValueError(f"gradcheck expects a tiny config (height <= {MAX_SIDE})")
    weights = weights or LossWeights()
    torch.manual_seed(seed)
    model = SphericalNormalNet(model_cfg).double()
    model.train()
    extractor = PerceptualExtractor().double()
    gen = torch.Generator().manual_seed(seed + 1)
    H, W = model_cfg.height, model_cfg.width
    rgb = torch.rand(1, 3, H, W, generator=gen, dtype=torch.float64)
    gt = torch.randn(1, 3, H, W, generator=gen, dtype=torch.float64)
    gt = gt / gt.norm(dim=1, keepdim=True)
    mask = torch.rand(1, H, W, generator=gen) > 0.1

    def loss_fn():
        return total_loss(model(rgb), gt, mask, weights, extractor, scales=scales)[0]

    params = dict(model.named_parameters())
    if corrupt is not None and corrupt not in params:
        raise KeyError(f"no parameter group named {corrupt!r}")
    model.zero_grad()
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in params.items()}
    if corrupt is not None:
        grads[corrupt] *= corrupt_factor

    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            g = grads[name].view(-1).numpy()
            n = flat.numel()
            coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
            fd = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = loss_fn().item()
                flat[i] = orig - h
                lm = loss_fn().item()
                flat[i] = orig
                fd[j] = (lp - lm) / (2 * h)
            err = _rel(g[coords], fd, atol)
            direction = torch.from_numpy(rng.standard_normal(n)).to(p.dtype)
            direction /= direction.norm()
            orig = flat.clone()
            flat.add_(h * direction)
            lp = loss_fn().item()
            flat.copy_(orig - h * direction)
            lm = loss_fn().item()
            flat.copy_(orig)
            fd_dir = (lp - lm) / (2 * h)
            an_dir = float(np.dot(g, direction.numpy()))
            err = max(err, _rel(np.array([an_dir]), np.array([fd_dir]), atol))
            results.append(GroupResult(name, n, len(coords) + 1, err, err <= threshold))
    return GradcheckReport(results, threshold, h)
