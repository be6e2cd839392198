"""The global map of semantic Gaussian primitives.

Primitives are stored structure-of-arrays for the rasterizer; the
GaussianPrimitive dataclass is the per-element view. Checkpoints are a
packed little-endian binary format with an `HSPP` magic header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NoValidDepth, ParseError
from .geometry import Intrinsics, RigidPose, unproject_grid

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray  # (3,) world position
    radius: float
    opacity: float
    color: np.ndarray  # (3,)
    sem: np.ndarray  # (sem_width,)


@dataclass
class MapConfig:
    initial_opacity: float = 0.5
    radius_factor: float = 1.0 / _SQRT_2PI  # of the pixel footprint depth/f_mean
    sem_init_scale: float = 1e-4
    densify_silhouette: float = 0.5
    densify_depth_tau: float = 0.05
    prune_opacity: float = 0.005
    init_pixel_stride: int = 1


class GaussianMap:
    """Growable collection of primitives sharing one semantic layout."""

    def __init__(self, sem_width: int, layout_mode: str = "flat"):
        self.sem_width = int(sem_width)
        self.layout_mode = layout_mode
        self.mu = np.zeros((0, 3))
        self.radius = np.zeros(0)
        self.opacity = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.sem = np.zeros((0, self.sem_width))
        self.birth_frame = np.zeros(0, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu[i].copy(), float(self.radius[i]), float(self.opacity[i]),
            self.color[i].copy(), self.sem[i].copy(),
        )

    def append(self, mu, radius, opacity, color, sem, birth_frame: int):
        self.mu = np.concatenate([self.mu, np.atleast_2d(mu)])
        self.radius = np.concatenate([self.radius, np.atleast_1d(radius)])
        self.opacity = np.concatenate([self.opacity, np.atleast_1d(opacity)])
        self.color = np.concatenate([self.color, np.atleast_2d(color)])
        self.sem = np.concatenate([self.sem, np.atleast_2d(sem)])
        n = self.mu.shape[0] - self.birth_frame.shape[0]
        self.birth_frame = np.concatenate(
            [self.birth_frame, np.full(n, birth_frame, dtype=np.int64)]
        )

    def keep(self, mask: np.ndarray):
        self.mu = self.mu[mask]
        self.radius = self.radius[mask]
        self.opacity = self.opacity[mask]
        self.color = self.color[mask]
        self.sem = self.sem[mask]
        self.birth_frame = self.birth_frame[mask]

    def clamp_params(self):
        """Re-establish field invariants after an optimizer step."""
        np.clip(self.opacity, 0.0, 1.0, out=self.opacity)
        np.maximum(self.radius, 1e-6, out=self.radius)


def _spawn(
    gmap: GaussianMap,
    frame,
    pose: RigidPose,
    K: Intrinsics,
    config: MapConfig,
    rng: np.random.Generator,
    pixel_mask: np.ndarray,
    frame_index: int,
) -> int:
    """Add one primitive per masked pixel, initialized from the frame."""
    n = int(pixel_mask.sum())
    if n == 0:
        return 0
    world = unproject_grid(frame.depth, pose, K)[pixel_mask]
    depth = frame.depth[pixel_mask]
    colors = frame.color[pixel_mask]
    radius = depth / K.f_mean * config.radius_factor
    sem = rng.uniform(0.0, config.sem_init_scale, size=(n, gmap.sem_width))
    gmap.append(
        world, radius, np.full(n, config.initial_opacity), colors, sem, frame_index
    )
    return n


def init_from_frame(
    frame,
    pose: RigidPose,
    K: Intrinsics,
    config: MapConfig,
    sem_width: int,
    layout_mode: str,
    rng: np.random.Generator,
    frame_index: int = 0,
) -> GaussianMap:
    """One primitive per sampled valid-depth pixel of the first frame."""
    gmap = GaussianMap(sem_width, layout_mode)
    if frame.depth is None:
        raise NoValidDepth("frame has no depth channel")
    mask = frame.depth > 0
    if config.init_pixel_stride > 1:
        stride_mask = np.zeros_like(mask)
        stride_mask[:: config.init_pixel_stride, :: config.init_pixel_stride] = True
        mask &= stride_mask
    if not mask.any():
        raise NoValidDepth("no valid depth in frame")
    _spawn(gmap, frame, pose, K, config, rng, mask, frame_index)
    return gmap


def densify_mask(frame, rendered, config: MapConfig) -> np.ndarray:
    """Pixels needing new primitives: uncovered or depth-inconsistent."""
    valid = frame.depth > 0
    uncovered = rendered.silhouette < config.densify_silhouette
    # judge depth agreement on covered pixels via the normalized estimate
    depth_est = rendered.depth / np.maximum(rendered.silhouette, 1e-6)
    depth_off = (
        valid
        & ~uncovered
        & (np.abs(depth_est - frame.depth) > config.densify_depth_tau * frame.depth)
    )
    return valid & (uncovered | depth_off)


def densify(
    gmap: GaussianMap,
    frame,
    rendered,
    pose: RigidPose,
    K: Intrinsics,
    config: MapConfig,
    rng: np.random.Generator,
    frame_index: int,
) -> int:
    """Grow the map where the current render misses the frame. Never removes."""
    return _spawn(gmap, frame, pose, K, config, rng, densify_mask(frame, rendered, config), frame_index)


def prune_mask(gmap: GaussianMap, config: MapConfig) -> np.ndarray:
    return gmap.opacity >= config.prune_opacity


def prune(gmap: GaussianMap, config: MapConfig) -> int:
    """Drop primitives whose opacity decayed below the floor."""
    keep = prune_mask(gmap, config)
    removed = int((~keep).sum())
    if removed:
        gmap.keep(keep)
    return removed


@dataclass(frozen=True)
class StorageReport:
    geometry_bytes: int  # mu, radius, opacity
    color_bytes: int
    semantic_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.geometry_bytes + self.color_bytes + self.semantic_bytes


def storage_report(gmap: GaussianMap, bytes_per_scalar: int = 4) -> StorageReport:
    n = gmap.count
    return StorageReport(
        geometry_bytes=n * 5 * bytes_per_scalar,
        color_bytes=n * 3 * bytes_per_scalar,
        semantic_bytes=n * gmap.sem_width * bytes_per_scalar,
    )


# -- checkpoint format ---------------------------------------------------------

_MAGIC = b"HSPP"
_VERSION = 1


def save_map(gmap: GaussianMap, path: str | Path):
    header = _MAGIC + struct.pack("<III", _VERSION, gmap.count, gmap.sem_width)
    packed = np.concatenate(
        [gmap.mu, gmap.radius[:, None], gmap.opacity[:, None], gmap.color, gmap.sem],
        axis=1,
    ).astype("<f4")
    Path(path).write_bytes(header + packed.tobytes())


def load_map(path: str | Path, layout_mode: str = "flat") -> GaussianMap:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}")
    version, count, sem_width = struct.unpack("<III", blob[4:16])
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    per = 8 + sem_width
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(count, per).astype(np.float64)
    gmap = GaussianMap(sem_width, layout_mode)
    gmap.mu = data[:, 0:3].copy()
    gmap.radius = data[:, 3].copy()
    gmap.opacity = data[:, 4].copy()
    gmap.color = data[:, 5:8].copy()
    gmap.sem = data[:, 8:].copy()
    gmap.birth_frame = np.zeros(count, dtype=np.int64)
    return gmap
