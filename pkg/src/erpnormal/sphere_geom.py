"""Spherical and equirectangular (ERP) geometry.

Conventions shared by every module in the package:

* right-handed camera frame, ``y`` up, ``z`` forward;
* a direction at latitude ``lat`` and longitude ``lon`` is
  ``(cos(lat) sin(lon), sin(lat), cos(lat) cos(lon))``;
* pixel centres: ``lon(u) = 2*pi*(u + 0.5)/W - pi`` and
  ``lat(v) = pi/2 - pi*(v + 0.5)/H``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels

__all__ = [
    "SphericalDir",
    "ErpGridSpec",
    "TangentPatchGrid",
    "erp_pixel_to_dir",
    "dir_to_erp_pixel",
    "latlon_to_dir",
    "tangent_basis",
    "gnomonic_forward",
    "gnomonic_inverse",
    "lattice_offsets",
    "build_tangent_sampling_grid",
    "bilinear_sample",
]


@dataclass(frozen=True)
class SphericalDir:
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("direction must be finite and non-zero")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def from_latlon(cls, lat: float, lon: float) -> "SphericalDir":
        c = math.cos(lat)
        return cls(c * math.sin(lon), math.sin(lat), c * math.cos(lon))

    @classmethod
    def from_array(cls, a) -> "SphericalDir":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @property
    def lat(self) -> float:
        return math.atan2(self.y, math.hypot(self.x, self.z))

    @property
    def lon(self) -> float:
        if self.x == 0.0 and self.z == 0.0:
            return 0.0
        lon = math.atan2(self.x, self.z)
        return -math.pi if lon == math.pi else lon

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class ErpGridSpec:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width != 2 * self.height:
            raise ValueError(f"ERP grid must satisfy W = 2H, got {self.height}x{self.width}")

    @classmethod
    def from_height(cls, height: int) -> "ErpGridSpec":
        return cls(int(height), 2 * int(height))

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @property
    def angular_step(self) -> float:
        return math.pi / self.height


def _as_dir_array(d) -> np.ndarray:
    if isinstance(d, SphericalDir):
        return d.as_array()
    return np.asarray(d, dtype=np.float64)


def latlon_to_dir(lat, lon) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    c = np.cos(lat)
    return np.stack([c * np.sin(lon), np.sin(lat), c * np.cos(lon)], axis=-1)


def erp_pixel_to_dir(u, v, spec: ErpGridSpec) -> np.ndarray:
    """Unit direction(s) for continuous ERP pixel coordinates.

    ``u`` wraps modulo ``W``; ``v`` is clamped to ``[-0.5, H - 0.5]``, the
    range that covers latitudes from the north to the south pole.
    Returns an array of shape ``broadcast(u, v).shape + (3,)``.
    """
    H, W = spec.height, spec.width
    u = np.mod(np.asarray(u, dtype=np.float64), W)
    v = np.clip(np.asarray(v, dtype=np.float64), -0.5, H - 0.5)
    lon = 2.0 * math.pi * (u + 0.5) / W - math.pi
    lat = math.pi / 2 - math.pi * (v + 0.5) / H
    return latlon_to_dir(lat, lon)


def dir_to_erp_pixel(d, spec: ErpGridSpec):
    """Continuous ``(u, v)`` for direction(s) ``d`` of shape ``(..., 3)``.

    ``u`` is returned in ``[0, W)``. At the poles longitude is undefined and
    ``u`` is 0 by convention.
    """
    d = _as_dir_array(d)
    H, W = spec.height, spec.width
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rho = np.hypot(x, z)
    lat = np.arctan2(y, rho)
    lon = np.where(rho > 0.0, np.arctan2(x, z), -math.pi)
    u = (lon + math.pi) * W / (2.0 * math.pi) - 0.5
    u = np.where(rho > 0.0, np.mod(u, W), 0.0)
    # np.mod can round up to exactly W for tiny negative inputs
    u = np.where(u >= W, u - W, u)
    v = (math.pi / 2 - lat) * H / math.pi - 0.5
    return u, v


def tangent_basis(center):
    """East and north unit vectors of the plane tangent at ``center``."""
    c = _as_dir_array(center)
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    rho = np.hypot(x, z)
    lat = np.arctan2(y, rho)
    lon = np.where(rho > 0.0, np.arctan2(x, z), 0.0)
    east = np.stack([np.cos(lon), np.zeros_like(lon), -np.sin(lon)], axis=-1)
    north = np.stack(
        [-np.sin(lat) * np.sin(lon), np.cos(lat), -np.sin(lat) * np.cos(lon)], axis=-1
    )
    return east, north


def gnomonic_forward(center, d):
    """Project direction(s) ``d`` onto the plane tangent at ``center``.

    Plane axes point east (``x``) and north (``y``). Raises ``ValueError`` for
    directions at or beyond 90 degrees from the tangent point.
    """
    c = _as_dir_array(center)
    d = _as_dir_array(d)
    east, north = tangent_basis(c)
    cos_c = np.sum(d * c, axis=-1)
    if np.any(cos_c <= 0.0):
        raise ValueError("gnomonic projection undefined for directions >= 90 deg from the tangent point")
    x = np.sum(d * east, axis=-1) / cos_c
    y = np.sum(d * north, axis=-1) / cos_c
    return x, y


def gnomonic_inverse(center, x, y) -> np.ndarray:
    """Direction(s) whose gnomonic image about ``center`` is ``(x, y)``."""
    c = _as_dir_array(center)
    east, north = tangent_basis(c)
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    p = c + x * east + y * north
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def lattice_offsets(k_samples: int) -> np.ndarray:
    """Integer lattice offsets ``(dx, dy)`` in row-major image order.

    ``dx`` grows eastwards (towards larger ``u``) and ``dy`` grows downwards
    (towards larger ``v``). The centre node sits at index ``k_samples // 2``.
    """
    side = math.isqrt(k_samples)
    if k_samples < 1 or side * side != k_samples or side % 2 == 0:
        raise ValueError(f"k_samples must be an odd perfect square (1, 9, 25, ...), got {k_samples}")
    r = np.arange(side, dtype=np.float64) - (side - 1) / 2.0
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1)


@dataclass(frozen=True)
class TangentPatchGrid:
    """Continuous ERP sampling positions for every query pixel.

    ``positions`` has shape ``(H, W, K, 2)`` holding ``(u, v)``. ``u`` is
    unwrapped around the query column, so it can leave ``[0, W)``; samplers
    wrap it.
    """

    spec: ErpGridSpec
    k_samples: int
    lattice_spacing: float
    positions: np.ndarray

    @property
    def center_index(self) -> int:
        return self.k_samples // 2

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        H, W = self.spec.height, self.spec.width
        t = torch.tensor(self.positions.reshape(H * W, self.k_samples, 2))
        return t.to(dtype=dtype, device=device)


SNAP_TOL = 1e-9


def _snap(x):
    """Round values within ``SNAP_TOL`` of an integer onto it.

    Lattice nodes that land on pixel centres up to round-off would otherwise
    sit a hair off a bilinear kink, where one-sided and central slopes differ.
    """
    r = np.rint(x)
    return np.where(np.abs(x - r) < SNAP_TOL, r, x)


def build_tangent_sampling_grid(spec: ErpGridSpec, k_samples: int = 9, lattice_spacing: float | None = None) -> TangentPatchGrid:
    """Distortion-aware sampling pattern for one ERP resolution.

    A ``sqrt(k) x sqrt(k)`` lattice is laid on the plane tangent at each pixel
    direction and every node is mapped back to continuous ERP coordinates.
    The default spacing ``tan(pi / H)`` puts the equatorial neighbours of a
    query exactly one pixel step away.
    """
    offsets = lattice_offsets(k_samples)
    if lattice_spacing is None:
        lattice_spacing = math.tan(spec.angular_step)
    if not lattice_spacing > 0.0:
        raise ValueError("lattice_spacing must be positive")
    H, W = spec.height, spec.width
    vq, uq = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    centers = erp_pixel_to_dir(uq, vq, spec)[:, :, None, :]

    # plane y points north, image dy points south
    px = offsets[:, 0] * lattice_spacing
    py = -offsets[:, 1] * lattice_spacing
    dirs = gnomonic_inverse(centers, px, py)
    u, v = dir_to_erp_pixel(dirs, spec)
    du = _snap(np.mod(u - uq[..., None] + W / 2.0, W) - W / 2.0)
    positions = np.stack([uq[..., None] + du, _snap(v)], axis=-1)

    ci = k_samples // 2
    positions[:, :, ci, 0] = uq
    positions[:, :, ci, 1] = vq
    positions.setflags(write=False)
    return TangentPatchGrid(spec, k_samples, float(lattice_spacing), positions)


def _corner_taps(u, v, H, W, wrap):
    """Corner row indices, fractions and liveness masks for bilinear taps."""
    if wrap:
        uu = torch.remainder(u, W)
        uu = torch.where(uu >= W, uu - W, uu)
        u_live = None
    else:
        uu = u.clamp(0, W - 1)
        u_live = (u >= 0) & (u <= W - 1)
    vv = v.clamp(0, H - 1)
    v_live = (v >= 0) & (v <= H - 1)
    u0f = torch.floor(uu)
    v0f = torch.floor(vv)
    fu = uu - u0f
    fv = vv - v0f
    u0 = u0f.long().clamp(0, W - 1)
    v0 = v0f.long().clamp(0, H - 1)
    u1 = (u0 + 1) % W if wrap else (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)
    return u0, v0, u1, v1, fu, fv, u_live, v_live


class _TapSample(torch.autograd.Function):
    """Weighted sum of bilinear samples, ``out[b, n] = sum_k A[b, n, k] * f(pos[b, n, k])``.

    ``rows`` is the feature map in channels-last form ``(B, H*W, C)``.
    At exact integer coordinates the derivative with respect to a position
    is the central slope (mean of the two one-sided slopes), so analytic
    gradients agree with central finite differences on lattice nodes.
    """

    @staticmethod
    def forward(ctx, rows, u, v, A, H, W, wrap):
        B, HW, C = rows.shape
        N, K = u.shape[1], u.shape[2]
        u0, v0, u1, v1, fu, fv, u_live, v_live = _corner_taps(u, v, H, W, wrap)
        base = (torch.arange(B, device=rows.device) * HW).view(B, 1, 1)
        idx = torch.stack([v0 * W + u0, v0 * W + u1, v1 * W + u0, v1 * W + u1], dim=-1) + base.unsqueeze(-1)
        gu, gv = 1 - fu, 1 - fv
        wts = torch.stack([gv * gu, gv * fu, fv * gu, fv * fu], dim=-1)
        table = rows.reshape(B * HW, C)
        taps = table.index_select(0, idx.reshape(-1)).view(B, N, K * 4, C)
        coef = (A.unsqueeze(-1) * wts).view(B, N, 1, K * 4)
        out = torch.matmul(coef, taps).squeeze(2)

        ctx.save_for_backward(rows, idx, wts, taps, A, u0, v0, u1, v1, fu, fv, v_live)
        ctx.u_live = u_live
        ctx.shape = (H, W, wrap)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        rows, idx, wts, taps, A, u0, v0, u1, v1, fu, fv, v_live = ctx.saved_tensors
        u_live = ctx.u_live
        H, W, wrap = ctx.shape
        B, HW, C = rows.shape
        N, K = A.shape[1], A.shape[2]
        grad_rows = grad_u = grad_v = grad_A = None

        if ctx.needs_input_grad[0]:
            coef = (A.unsqueeze(-1) * wts).view(B, N, K * 4, 1)
            contrib = (coef * grad_out.unsqueeze(2)).reshape(-1, C)
            g = torch.zeros(B * HW, C, dtype=rows.dtype, device=rows.device)
            g.index_add_(0, idx.reshape(-1), contrib)
            grad_rows = g.view(B, HW, C)

        if not any(ctx.needs_input_grad[1:4]):
            return grad_rows, None, None, None, None, None, None

        # projections of every tap onto the incoming gradient
        dots = torch.matmul(taps, grad_out.unsqueeze(-1)).view(B, N, K, 4)
        d00, d01, d10, d11 = dots.unbind(-1)
        if ctx.needs_input_grad[3]:
            grad_A = (dots * wts).sum(-1)

        table = rows.reshape(B * HW, C)

        def side_dots(mask, row_a, row_b):
            # dot products for the extra taps needed by the central slope
            sel = mask.nonzero(as_tuple=True)
            b = sel[0]
            go = grad_out[b, sel[1]]
            ta = table.index_select(0, b * HW + row_a[sel])
            tb = table.index_select(0, b * HW + row_b[sel])
            return sel, (ta * go).sum(-1), (tb * go).sum(-1)

        if ctx.needs_input_grad[1]:
            s0 = d01 - d00
            s1 = d11 - d10
            node = fu == 0
            if bool(node.any()):
                um = (u0 - 1) % W if wrap else (u0 - 1).clamp(min=0)
                sel, dm0, dm1 = side_dots(node, v0 * W + um, v1 * W + um)
                s0 = s0.clone()
                s1 = s1.clone()
                s0[sel] = 0.5 * (d01[sel] - dm0)
                s1[sel] = 0.5 * (d11[sel] - dm1)
            grad_u = A * ((1 - fv) * s0 + fv * s1)
            if u_live is not None:
                grad_u = grad_u * u_live
        if ctx.needs_input_grad[2]:
            s0 = d10 - d00
            s1 = d11 - d01
            node = fv == 0
            if bool(node.any()):
                vm = (v0 - 1).clamp(min=0)
                sel, dm0, dm1 = side_dots(node, vm * W + u0, vm * W + u1)
                s0 = s0.clone()
                s1 = s1.clone()
                s0[sel] = 0.5 * (d10[sel] - dm0)
                s1[sel] = 0.5 * (d11[sel] - dm1)
            grad_v = A * ((1 - fu) * s0 + fu * s1) * v_live
        return grad_rows, grad_u, grad_v, grad_A, None, None, None


class _TapSampleFused(torch.autograd.Function):
    """Same contract as ``_TapSample`` backed by the compiled CPU kernels."""

    @staticmethod
    def forward(ctx, rows, u, v, A, H, W, wrap):
        B, HW, C = rows.shape
        table = rows.detach().reshape(B * HW, C).contiguous().numpy()
        un = u.detach().contiguous().numpy()
        vn = v.detach().contiguous().numpy()
        An = A.detach().contiguous().numpy()
        out = _kernels.tap_forward(table, un, vn, An, H, W, wrap)
        ctx.saved = (table, un, vn, An)
        ctx.shape = (B, HW, C, H, W, wrap)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        table, un, vn, An = ctx.saved
        B, HW, C, H, W, wrap = ctx.shape
        go = grad_out.detach().contiguous().numpy()
        g_table, g_u, g_v, g_A = _kernels.tap_backward(go, table, un, vn, An, H, W, wrap)
        return (torch.from_numpy(g_table).view(B, HW, C), torch.from_numpy(g_u),
                torch.from_numpy(g_v), torch.from_numpy(g_A), None, None, None)


_BACKEND = os.environ.get("ERPNORMAL_SAMPLER", "auto")


def set_sampler_backend(name: str):
    """Select ``"torch"`` (reference), ``"fused"`` (compiled) or ``"auto"``."""
    global _BACKEND
    if name not in ("auto", "torch", "fused"):
        raise ValueError(f"unknown sampler backend {name!r}")
    if name == "fused" and not _kernels.AVAILABLE:
        raise RuntimeError("fused sampler needs numba")
    _BACKEND = name


def get_sampler_backend() -> str:
    return _BACKEND


def sample_rows(rows: torch.Tensor, H: int, W: int, positions: torch.Tensor, weights: torch.Tensor | None = None, wrap_longitude: bool = True) -> torch.Tensor:
    """Channels-last sampler used by the attention layers.

    ``rows`` is ``(B, H*W, C)``, ``positions`` is ``(B, N, K, 2)`` and the
    optional ``weights`` ``(B, N, K)`` mix the ``K`` samples of each query.
    Returns ``(B, N, C)``.
    """
    B, N, K, _ = positions.shape
    positions = positions.to(rows.dtype)
    if weights is None:
        weights = torch.ones(B, N, K, dtype=rows.dtype, device=rows.device)
    fused = _BACKEND == "fused" or (_BACKEND == "auto" and _kernels.AVAILABLE and rows.device.type == "cpu")
    fn = _TapSampleFused if fused else _TapSample
    return fn.apply(rows, positions[..., 0], positions[..., 1], weights, H, W, wrap_longitude)


def bilinear_sample(f: torch.Tensor, positions: torch.Tensor, wrap_longitude: bool = True) -> torch.Tensor:
    """Sample ``f`` of shape ``(B, C, H, W)`` at continuous ``(u, v)`` positions.

    ``positions`` is ``(B, N, 2)`` or ``(N, 2)`` (shared across the batch).
    Returns ``(B, N, C)``, one C-vector per position. Differentiable with
    respect to ``f`` and ``positions``; ``v`` is clamped to ``[0, H - 1]`` and
    ``u`` wraps across the longitude seam when ``wrap_longitude`` is set.
    """
    B, C, H, W = f.shape
    if positions.dim() == 2:
        positions = positions.unsqueeze(0).expand(B, -1, -1)
    rows = f.permute(0, 2, 3, 1).reshape(B, H * W, C)
    return sample_rows(rows, H, W, positions.unsqueeze(2), None, wrap_longitude)
