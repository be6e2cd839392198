"""Numba kernels for the software splatting rasterizer.

Splats are traversed in global ascending-depth order; restricted to any
pixel this is exactly front-to-back compositing. The backward kernel runs
a forward transmittance sweep followed by a reverse sweep that maintains
per-pixel suffix sums, yielding analytic gradients of all inputs.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(
    order, u, v, z, sigma, opac, color, sem, cutoff_sq, stop_t,
    out_color, out_depth, out_sil, out_sem, out_t,
):
    H, W = out_depth.shape
    n_sem = sem.shape[1]
    for oi in range(order.shape[0]):
        i = order[oi]
        if cutoff_sq[i] >= 0.0:
            r = np.sqrt(cutoff_sq[i])
            x0 = max(int(np.floor(u[i] - r)), 0)
            x1 = min(int(np.ceil(u[i] + r)) + 1, W)
            y0 = max(int(np.floor(v[i] - r)), 0)
            y1 = min(int(np.ceil(v[i] + r)) + 1, H)
        else:
            x0, x1, y0, y1 = 0, W, 0, H
        two_sig2 = 2.0 * sigma[i] * sigma[i]
        for py in range(y0, y1):
            dy = py - v[i]
            for px in range(x0, x1):
                t = out_t[py, px]
                if t <= stop_t:
                    continue
                dx = px - u[i]
                d2 = dx * dx + dy * dy
                if cutoff_sq[i] >= 0.0 and d2 > cutoff_sq[i]:
                    continue
                a = opac[i] * np.exp(-d2 / two_sig2)
                if a > 0.999:
                    a = 0.999
                w = a * t
                out_color[py, px, 0] += w * color[i, 0]
                out_color[py, px, 1] += w * color[i, 1]
                out_color[py, px, 2] += w * color[i, 2]
                out_depth[py, px] += w * z[i]
                out_sil[py, px] += w
                for k in range(n_sem):
                    out_sem[py, px, k] += w * sem[i, k]
                out_t[py, px] = t * (1.0 - a)


@njit(cache=True)
def composite_backward(
    order, u, v, z, sigma, opac, color, sem, cutoff_sq,
    g_color_map, g_depth_map, g_sil_map, g_sem_map,
    g_u, g_v, g_sigma, g_opac, g_z, g_color, g_sem,
    t_buf, suff_c, suff_d, suff_s, suff_h,
):
    H, W = t_buf.shape
    n_sem = sem.shape[1]
    # transmittance after the full stack (no early exit: gradients are of
    # the exact compositing function)
    for oi in range(order.shape[0]):
        i = order[oi]
        if cutoff_sq[i] >= 0.0:
            r = np.sqrt(cutoff_sq[i])
            x0 = max(int(np.floor(u[i] - r)), 0)
            x1 = min(int(np.ceil(u[i] + r)) + 1, W)
            y0 = max(int(np.floor(v[i] - r)), 0)
            y1 = min(int(np.ceil(v[i] + r)) + 1, H)
        else:
            x0, x1, y0, y1 = 0, W, 0, H
        two_sig2 = 2.0 * sigma[i] * sigma[i]
        for py in range(y0, y1):
            dy = py - v[i]
            for px in range(x0, x1):
                dx = px - u[i]
                d2 = dx * dx + dy * dy
                if cutoff_sq[i] >= 0.0 and d2 > cutoff_sq[i]:
                    continue
                a = opac[i] * np.exp(-d2 / two_sig2)
                if a > 0.999:
                    a = 0.999
                t_buf[py, px] *= 1.0 - a
    # reverse sweep with per-pixel suffix accumulators
    for oi in range(order.shape[0] - 1, -1, -1):
        i = order[oi]
        if cutoff_sq[i] >= 0.0:
            r = np.sqrt(cutoff_sq[i])
            x0 = max(int(np.floor(u[i] - r)), 0)
            x1 = min(int(np.ceil(u[i] + r)) + 1, W)
            y0 = max(int(np.floor(v[i] - r)), 0)
            y1 = min(int(np.ceil(v[i] + r)) + 1, H)
        else:
            x0, x1, y0, y1 = 0, W, 0, H
        two_sig2 = 2.0 * sigma[i] * sigma[i]
        for py in range(y0, y1):
            dy = py - v[i]
            for px in range(x0, x1):
                dx = px - u[i]
                d2 = dx * dx + dy * dy
                if cutoff_sq[i] >= 0.0 and d2 > cutoff_sq[i]:
                    continue
                e = np.exp(-d2 / two_sig2)
                a = opac[i] * e
                clamped = a > 0.999
                if clamped:
                    a = 0.999
                one_m = 1.0 - a
                t_i = t_buf[py, px] / one_m
                w = a * t_i
                dlda = g_sil_map[py, px] * (t_i - suff_s[py, px] / one_m)
                dlda += g_depth_map[py, px] * (z[i] * t_i - suff_d[py, px] / one_m)
                g_z[i] += g_depth_map[py, px] * w
                for c in range(3):
                    gc = g_color_map[py, px, c]
                    dlda += gc * (color[i, c] * t_i - suff_c[py, px, c] / one_m)
                    g_color[i, c] += gc * w
                for k in range(n_sem):
                    gh = g_sem_map[py, px, k]
                    dlda += gh * (sem[i, k] * t_i - suff_h[py, px, k] / one_m)
                    g_sem[i, k] += gh * w
                if not clamped:
                    g_opac[i] += dlda * e
                    dldd2 = -dlda * a / two_sig2
                    g_u[i] += dldd2 * 2.0 * (u[i] - px)
                    g_v[i] += dldd2 * 2.0 * (v[i] - py)
                    g_sigma[i] += dlda * a * d2 / (sigma[i] * sigma[i] * sigma[i])
                suff_s[py, px] += w
                suff_d[py, px] += w * z[i]
                for c in range(3):
                    suff_c[py, px, c] += w * color[i, c]
                for k in range(n_sem):
                    suff_h[py, px, k] += w * sem[i, k]
                t_buf[py, px] = t_i


@njit(cache=True)
def band_forward(
    order, u, v, z, sigma, opac, color, sem, cutoff_sq, stop_t,
    out_color, out_depth, out_sil, out_sem, out_t, y_lo, y_hi,
):
    """Forward restricted to rows [y_lo, y_hi); used by the band scheduler."""
    H, W = out_depth.shape
    n_sem = sem.shape[1]
    for oi in range(order.shape[0]):
        i = order[oi]
        if cutoff_sq[i] >= 0.0:
            r = np.sqrt(cutoff_sq[i])
            x0 = max(int(np.floor(u[i] - r)), 0)
            x1 = min(int(np.ceil(u[i] + r)) + 1, W)
            y0 = max(int(np.floor(v[i] - r)), y_lo)
            y1 = min(int(np.ceil(v[i] + r)) + 1, y_hi)
        else:
            x0, x1, y0, y1 = 0, W, y_lo, y_hi
        two_sig2 = 2.0 * sigma[i] * sigma[i]
        for py in range(y0, y1):
            dy = py - v[i]
            for px in range(x0, x1):
                t = out_t[py, px]
                if t <= stop_t:
                    continue
                dx = px - u[i]
                d2 = dx * dx + dy * dy
                if cutoff_sq[i] >= 0.0 and d2 > cutoff_sq[i]:
                    continue
                a = opac[i] * np.exp(-d2 / two_sig2)
                if a > 0.999:
                    a = 0.999
                w = a * t
                out_color[py, px, 0] += w * color[i, 0]
                out_color[py, px, 1] += w * color[i, 1]
                out_color[py, px, 2] += w * color[i, 2]
                out_depth[py, px] += w * z[i]
                out_sil[py, px] += w
                for k in range(n_sem):
                    out_sem[py, px, k] += w * sem[i, k]
                out_t[py, px] = t * (1.0 - a)
