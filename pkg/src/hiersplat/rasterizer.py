"""Differentiable multi-channel splatting: forward render and unified backward.

One pass produces color, depth, silhouette and semantic maps by
depth-sorted alpha compositing of isotropic splats; the backward pass
produces analytic gradients for every primitive field and for the camera
pose (as a 6-vector in the tangent convention of RigidPose.retract).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Intrinsics, RigidPose


@dataclass(frozen=True)
class RenderOptions:
    cutoff_sigmas: float | None = 3.0  # None: every splat reaches every pixel
    early_exit_transmittance: float = 1e-4  # 0 disables early termination
    near_clip: float = 0.01
    row_bands: int = 1  # >1 evaluates the forward pass in row bands

    def exact(self) -> "RenderOptions":
        """Variant with cutoff and early exit disabled (oracle comparisons)."""
        return RenderOptions(None, 0.0, self.near_clip, self.row_bands)


@dataclass
class RenderedMaps:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    silhouette: np.ndarray  # (H, W)
    sem: np.ndarray  # (H, W, sem_width)
    transmittance: np.ndarray  # (H, W) leftover T after compositing


@dataclass
class ChannelGradients:
    """Upstream loss gradients per rendered channel; None means zero."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    silhouette: np.ndarray | None = None
    sem: np.ndarray | None = None


@dataclass
class RenderGradients:
    mu: np.ndarray  # (P, 3)
    radius: np.ndarray  # (P,)
    opacity: np.ndarray  # (P,)
    color: np.ndarray  # (P, 3)
    sem: np.ndarray  # (P, sem_width)
    pose: np.ndarray  # (6,) translation xyz, rotation xyz


@dataclass(frozen=True)
class Splat2D:
    center: np.ndarray  # (2,) pixels
    radius_px: float
    depth: float
    index: int


def alpha_at(splat: Splat2D, opacity: float, pixel: np.ndarray) -> float:
    """Gaussian falloff opacity of one splat at a pixel, clamped to 0.999."""
    d2 = float(np.sum((np.asarray(pixel, dtype=np.float64) - splat.center) ** 2))
    a = opacity * math.exp(-d2 / (2.0 * splat.radius_px**2))
    return min(a, 0.999)


@dataclass
class _Projected:
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    sigma: np.ndarray
    cam: np.ndarray  # (P, 3) camera-frame positions
    valid: np.ndarray  # (P,) bool
    order: np.ndarray  # indices of valid splats, ascending depth


def project_splats(gmap, pose: RigidPose, K: Intrinsics, near_clip: float) -> _Projected:
    R_w2c, t_w2c = pose.world_to_camera()
    cam = gmap.mu @ R_w2c.T + t_w2c
    z = cam[:, 2]
    valid = z > near_clip
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, K.fx * cam[:, 0] / z + K.cx, 0.0)
        v = np.where(valid, K.fy * cam[:, 1] / z + K.cy, 0.0)
        sigma = np.where(valid, K.f_mean * gmap.radius / z, 1.0)
    order = np.nonzero(valid)[0][np.argsort(z[valid], kind="stable")]
    return _Projected(u, v, z, sigma, cam, valid, order.astype(np.int64))


def splats_for(gmap, pose: RigidPose, K: Intrinsics, options: RenderOptions = RenderOptions()):
    """Visible splats in compositing order (diagnostics / tests)."""
    p = project_splats(gmap, pose, K, options.near_clip)
    return [
        Splat2D(np.array([p.u[i], p.v[i]]), float(p.sigma[i]), float(p.z[i]), int(i))
        for i in p.order
    ]


def _cutoff_sq(sigma: np.ndarray, options: RenderOptions) -> np.ndarray:
    if options.cutoff_sigmas is None:
        return np.full(sigma.shape, -1.0)
    return (options.cutoff_sigmas * sigma) ** 2


def render(
    gmap, pose: RigidPose, K: Intrinsics, options: RenderOptions = RenderOptions()
) -> RenderedMaps:
    H, W = K.height, K.width
    n_sem = gmap.sem.shape[1]
    out = RenderedMaps(
        color=np.zeros((H, W, 3)),
        depth=np.zeros((H, W)),
        silhouette=np.zeros((H, W)),
        sem=np.zeros((H, W, n_sem)),
        transmittance=np.ones((H, W)),
    )
    if gmap.count == 0:
        return out
    p = project_splats(gmap, pose, K, options.near_clip)
    if p.order.size == 0:
        return out
    args = (
        p.order, p.u, p.v, p.z, p.sigma,
        np.ascontiguousarray(gmap.opacity, dtype=np.float64),
        np.ascontiguousarray(gmap.color, dtype=np.float64),
        np.ascontiguousarray(gmap.sem, dtype=np.float64),
        _cutoff_sq(p.sigma, options),
        float(options.early_exit_transmittance),
        out.color, out.depth, out.silhouette, out.sem, out.transmittance,
    )
    if options.row_bands > 1:
        step = max(1, H // options.row_bands)
        for y0 in range(0, H, step):
            _kernels.band_forward(*args, y0, min(y0 + step, H))
    else:
        _kernels.composite_forward(*args)
    return out


def render_backward(
    gmap,
    pose: RigidPose,
    K: Intrinsics,
    upstream: ChannelGradients,
    options: RenderOptions = RenderOptions(),
) -> RenderGradients:
    """Analytic gradients of a scalar loss with the given per-channel
    pixel gradients, with respect to every primitive field and the pose.
    """
    H, W = K.height, K.width
    P = gmap.count
    n_sem = gmap.sem.shape[1]
    grads = RenderGradients(
        mu=np.zeros((P, 3)),
        radius=np.zeros(P),
        opacity=np.zeros(P),
        color=np.zeros((P, 3)),
        sem=np.zeros((P, n_sem)),
        pose=np.zeros(6),
    )
    if P == 0:
        return grads
    p = project_splats(gmap, pose, K, options.near_clip)
    if p.order.size == 0:
        return grads

    def as_map(g, shape):
        return np.zeros(shape) if g is None else np.ascontiguousarray(g, dtype=np.float64)

    g_u = np.zeros(P)
    g_v = np.zeros(P)
    g_sigma = np.zeros(P)
    g_z = np.zeros(P)
    _kernels.composite_backward(
        p.order, p.u, p.v, p.z, p.sigma,
        np.ascontiguousarray(gmap.opacity, dtype=np.float64),
        np.ascontiguousarray(gmap.color, dtype=np.float64),
        np.ascontiguousarray(gmap.sem, dtype=np.float64),
        _cutoff_sq(p.sigma, options),
        as_map(upstream.color, (H, W, 3)),
        as_map(upstream.depth, (H, W)),
        as_map(upstream.silhouette, (H, W)),
        as_map(upstream.sem, (H, W, n_sem)),
        g_u, g_v, g_sigma, grads.opacity, g_z, grads.color, grads.sem,
        np.ones((H, W)),
        np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)), np.zeros((H, W, n_sem)),
    )

    # chain pixel-space gradients through the projection
    R_w2c, _ = pose.world_to_camera()
    val = p.valid
    x, y, z = p.cam[val, 0], p.cam[val, 1], p.cam[val, 2]
    gu, gv, gs, gz = g_u[val], g_v[val], g_sigma[val], g_z[val]
    r = gmap.radius[val]
    gxc = np.stack(
        [
            gu * K.fx / z,
            gv * K.fy / z,
            -gu * K.fx * x / z**2 - gv * K.fy * y / z**2 - gs * K.f_mean * r / z**2 + gz,
        ],
        axis=-1,
    )
    grads.mu[val] = gxc @ R_w2c
    grads.radius[val] = gs * K.f_mean / z
    grads.pose[:3] = gxc.sum(axis=0)
    grads.pose[3:] = np.cross(p.cam[val], gxc).sum(axis=0)
    return grads
