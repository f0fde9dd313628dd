"""Depth-to-normal baseline: average the normals of random local triangles of back-projected points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere_geom import ErpGridSpec, erp_pixel_to_dir

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorised SplitMix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class D2NConfig:
    num_triangles: int = 8
    neighborhood_radius: int = 2
    seed: int = 0
    # triangles with any interior angle whose sine is below this are rejected
    min_sine: float = 0.3
    # rejected draws are replaced, up to this many draws per accepted triangle
    attempts_per_triangle: int = 4

    def __post_init__(self):
        if self.num_triangles < 1:
            raise ValueError("num_triangles must be >= 1")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")
        if self.attempts_per_triangle < 1:
            raise ValueError("attempts_per_triangle must be >= 1")
        if not 0.0 <= self.min_sine < 1.0:
            raise ValueError("min_sine must be in [0, 1)")


def backproject(depth, grid: ErpGridSpec) -> np.ndarray:
    """(H, W) depth -> (H, W, 3) points, ``depth * direction``."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (grid.height, grid.width):
        raise ValueError(f"depth shape {depth.shape} does not match grid {grid.height}x{grid.width}")
    v, u = np.meshgrid(np.arange(grid.height, dtype=np.float64), np.arange(grid.width, dtype=np.float64), indexing="ij")
    return depth[..., None] * erp_pixel_to_dir(u, v, grid)


def neighbor_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dv, du = np.meshgrid(r, r, indexing="ij")
    offs = np.stack([du.ravel(), dv.ravel()], axis=-1)
    return offs[np.any(offs != 0, axis=1)]


def depth_to_normal(depth, grid: ErpGridSpec, cfg: D2NConfig = D2NConfig(), mask=None):
    """Returns ``(normals (3, H, W), valid (H, W))``.

    Each pixel draws pairs of distinct neighbours from its longitude-wrapped
    square neighbourhood using a hash of (seed, pixel, draw, slot), so the
    result does not depend on evaluation order. Draws touching invalid pixels
    or forming thin triangles are rejected and redrawn until ``num_triangles``
    are accepted or the attempt budget runs out.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = grid.height, grid.width
    valid_in = depth > 0
    if mask is not None:
        valid_in &= np.asarray(mask, dtype=bool)
    pts = backproject(np.where(valid_in, depth, 0.0), grid)

    offs = neighbor_offsets(cfg.neighborhood_radius)
    M = len(offs)
    pix = np.arange(H * W, dtype=np.uint64).reshape(H, W)
    vv, uu = np.divmod(np.arange(H * W).reshape(H, W), W)
    base = splitmix64(np.uint64(cfg.seed)) ^ (pix * np.uint64(0x100000001B3))

    acc = np.zeros((H, W, 3))
    count = np.zeros((H, W), dtype=np.int64)
    p0 = pts
    for t in range(cfg.num_triangles * cfg.attempts_per_triangle):
        need = count < cfg.num_triangles
        if not need.any():
            break
        h1 = splitmix64(base + np.uint64(2 * t + 1))
        h2 = splitmix64(base + np.uint64(2 * t + 2))
        i1 = (h1 % np.uint64(M)).astype(np.int64)
        i2 = (i1 + 1 + (h2 % np.uint64(M - 1)).astype(np.int64)) % M
        legs = []
        ok = valid_in & need
        for idx in (i1, i2):
            nu = (uu + offs[idx, 0]) % W
            nv = vv + offs[idx, 1]
            inside = (nv >= 0) & (nv < H)
            nv = np.clip(nv, 0, H - 1)
            ok &= inside & valid_in[nv, nu]
            legs.append(pts[nv, nu] - p0)
        n = np.cross(legs[0], legs[1])
        nn = np.linalg.norm(n, axis=-1)
        # |a x b| = |a||b| sin(angle); check the angle at every vertex
        a = np.linalg.norm(legs[0], axis=-1)
        b = np.linalg.norm(legs[1], axis=-1)
        c = np.linalg.norm(legs[1] - legs[0], axis=-1)
        longest_pair = np.maximum(np.maximum(a * b, a * c), b * c)
        ok &= (nn > cfg.min_sine * longest_pair) & (nn > 0)
        n = n / np.where(nn > 0, nn, 1.0)[..., None]
        flip = np.sum(n * p0, axis=-1) > 0
        n = np.where(flip[..., None], -n, n)
        acc += np.where(ok[..., None], n, 0.0)
        count += ok

    norm = np.linalg.norm(acc, axis=-1)
    valid = (count > 0) & (norm > 1e-12)
    out = np.where(valid[..., None], acc / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    # the average of camera-facing unit vectors is camera-facing; guard anyway
    facing = np.sum(out * p0, axis=-1) < 0
    valid &= facing
    out = np.where(valid[..., None], out, 0.0)
    return out.transpose(2, 0, 1).copy(), valid
