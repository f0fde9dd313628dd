"""In-memory dataset views over a synthetic dataset manifest."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..synthdata import load_sample, read_manifest


@dataclass
class SplitData:
    names: list
    rgb: torch.Tensor      # (N, 3, H, W) float32
    normal: torch.Tensor   # (N, 3, H, W) float32
    mask: torch.Tensor     # (N, H, W) bool

    def __len__(self):
        return len(self.names)

    @property
    def size(self):
        return tuple(self.rgb.shape[-2:])

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return self.rgb[idx], self.normal[idx], self.mask[idx]


def load_split(data, split: str) -> SplitData:
    """Load every sample tagged ``split`` from a manifest (file or directory)."""
    manifest = read_manifest(data)
    root = Path(manifest["root"])
    entries = [s for s in manifest["samples"] if s["split"] == split]
    if not entries:
        raise ValueError(f"{data}: split {split!r} is empty")
    samples = [load_sample(root / s["dir"]) for s in entries]
    return SplitData(
        names=[s["dir"] for s in entries],
        rgb=torch.from_numpy(np.stack([s["rgb"] for s in samples]).astype(np.float32)),
        normal=torch.from_numpy(np.stack([s["normal"] for s in samples]).astype(np.float32)),
        mask=torch.from_numpy(np.stack([s["mask"] for s in samples])),
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Data order is a pure function of (seed, epoch), so resuming needs no RNG state."""
    return np.random.default_rng([seed, epoch]).permutation(n)
