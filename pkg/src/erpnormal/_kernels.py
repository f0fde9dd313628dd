"""Fused CPU kernels for the weighted bilinear tap sampler.

Same semantics as the torch reference path in ``sphere_geom``: longitude
wrap (or clamp), vertical clamp, central slope at exact integer positions.
Loops run serially so reductions are deterministic.
"""
import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None


def _taps(u, v, H, W, wrap):
    if wrap:
        uu = u % W
        if uu >= W:
            uu -= W
        u_live = 1.0
    else:
        uu = min(max(u, 0.0), W - 1.0)
        u_live = 1.0 if (u >= 0.0 and u <= W - 1.0) else 0.0
    vv = min(max(v, 0.0), H - 1.0)
    v_live = 1.0 if (v >= 0.0 and v <= H - 1.0) else 0.0
    u0f = math.floor(uu)
    v0f = math.floor(vv)
    fu = uu - u0f
    fv = vv - v0f
    u0 = min(max(int(u0f), 0), W - 1)
    v0 = min(max(int(v0f), 0), H - 1)
    if wrap:
        u1 = (u0 + 1) % W
        um = (u0 - 1) % W
    else:
        u1 = min(u0 + 1, W - 1)
        um = max(u0 - 1, 0)
    v1 = min(v0 + 1, H - 1)
    vm = max(v0 - 1, 0)
    return u0, u1, um, v0, v1, vm, fu, fv, u_live, v_live


def _forward(table, u, v, A, H, W, wrap, out):
    B, N, K = A.shape
    C = table.shape[1]
    HW = H * W
    for b in range(B):
        base = b * HW
        for n in range(N):
            for k in range(K):
                u0, u1, um, v0, v1, vm, fu, fv, ul, vl = _taps(u[b, n, k], v[b, n, k], H, W, wrap)
                a = A[b, n, k]
                w00 = a * (1.0 - fv) * (1.0 - fu)
                w01 = a * (1.0 - fv) * fu
                w10 = a * fv * (1.0 - fu)
                w11 = a * fv * fu
                r00 = base + v0 * W + u0
                r01 = base + v0 * W + u1
                r10 = base + v1 * W + u0
                r11 = base + v1 * W + u1
                for c in range(C):
                    out[b, n, c] += (w00 * table[r00, c] + w01 * table[r01, c]
                                     + w10 * table[r10, c] + w11 * table[r11, c])


def _backward(grad_out, table, u, v, A, H, W, wrap, g_table, g_u, g_v, g_A):
    B, N, K = A.shape
    C = table.shape[1]
    HW = H * W
    for b in range(B):
        base = b * HW
        for n in range(N):
            for k in range(K):
                u0, u1, um, v0, v1, vm, fu, fv, ul, vl = _taps(u[b, n, k], v[b, n, k], H, W, wrap)
                a = A[b, n, k]
                gu, gv = 1.0 - fu, 1.0 - fv
                r00 = base + v0 * W + u0
                r01 = base + v0 * W + u1
                r10 = base + v1 * W + u0
                r11 = base + v1 * W + u1
                d00 = 0.0
                d01 = 0.0
                d10 = 0.0
                d11 = 0.0
                for c in range(C):
                    go = grad_out[b, n, c]
                    d00 += table[r00, c] * go
                    d01 += table[r01, c] * go
                    d10 += table[r10, c] * go
                    d11 += table[r11, c] * go
                    g_table[r00, c] += a * gv * gu * go
                    g_table[r01, c] += a * gv * fu * go
                    g_table[r10, c] += a * fv * gu * go
                    g_table[r11, c] += a * fv * fu * go
                g_A[b, n, k] = gv * gu * d00 + gv * fu * d01 + fv * gu * d10 + fv * fu * d11

                if fu == 0.0:
                    rm0 = base + v0 * W + um
                    rm1 = base + v1 * W + um
                    dm0 = 0.0
                    dm1 = 0.0
                    for c in range(C):
                        go = grad_out[b, n, c]
                        dm0 += table[rm0, c] * go
                        dm1 += table[rm1, c] * go
                    s0 = 0.5 * (d01 - dm0)
                    s1 = 0.5 * (d11 - dm1)
                else:
                    s0 = d01 - d00
                    s1 = d11 - d10
                g_u[b, n, k] = a * (gv * s0 + fv * s1) * ul

                if fv == 0.0:
                    rm0 = base + vm * W + u0
                    rm1 = base + vm * W + u1
                    dm0 = 0.0
                    dm1 = 0.0
                    for c in range(C):
                        go = grad_out[b, n, c]
                        dm0 += table[rm0, c] * go
                        dm1 += table[rm1, c] * go
                    s0 = 0.5 * (d10 - dm0)
                    s1 = 0.5 * (d11 - dm1)
                else:
                    s0 = d10 - d00
                    s1 = d11 - d01
                g_v[b, n, k] = a * (gu * s0 + fu * s1) * vl


if AVAILABLE:
    _taps = numba.njit(cache=True, inline="always")(_taps)
    _forward = numba.njit(cache=True)(_forward)
    _backward = numba.njit(cache=True)(_backward)


def tap_forward(table, u, v, A, H, W, wrap):
    B, N, _ = A.shape
    out = np.zeros((B, N, table.shape[1]), dtype=table.dtype)
    _forward(table, u, v, A, H, W, wrap, out)
    return out


def tap_backward(grad_out, table, u, v, A, H, W, wrap):
    g_table = np.zeros_like(table)
    g_u = np.zeros_like(u)
    g_v = np.zeros_like(v)
    g_A = np.zeros_like(A)
    _backward(grad_out, table, u, v, A, H, W, wrap, g_table, g_u, g_v, g_A)
    return g_table, g_u, g_v, g_A
