"""Monocular depth priors: acquisition, affine correction, online refinement.

Priors are scale-ambiguous depth maps produced offline by any feed-forward
reconstruction model (only the depth is kept; its pose estimates are
discarded). Each image set carries its own unknown affine relation to
metric depth, so every frame is aligned against the current rendered map
by closed-form least squares and the scale/shift pair is then refined
jointly with the map under an absolute-deviation regularizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyMask, MissingFile, OutOfRange


@dataclass(frozen=True)
class ImageSetSpec:
    start: int = 0  # i0
    count: int = 5  # frames per set (S)
    skip: int = 3  # frame gap inside a set

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("image sets need at least 2 frames")
        if self.skip < 1:
            raise ValueError("skip must be >= 1")

    @property
    def stride(self) -> int:
        return self.count * self.skip


def sample_image_sets(total_frames: int, spec: ImageSetSpec, stride: int | None = None) -> list[list[int]]:
    """Index sets {i0 + skip*(s-1)} tiling the sequence with the given stride."""
    if spec.start < 0 or spec.start >= total_frames:
        raise OutOfRange(f"start {spec.start} outside 0..{total_frames - 1}")
    stride = spec.stride if stride is None else stride
    sets = []
    base = spec.start
    while base < total_frames:
        members = [base + spec.skip * s for s in range(spec.count)]
        members = [m for m in members if m < total_frames]
        if len(members) >= 2:
            sets.append(members)
        elif members:
            if sets:
                sets[-1].extend(members)
            else:
                sets.append(members)
        base += stride
    return sets


def set_index_of(frame: int, spec: ImageSetSpec, stride: int | None = None) -> int:
    """Which image set a frame's prior belongs to (stride windows)."""
    stride = spec.stride if stride is None else stride
    return max(0, (frame - spec.start)) // stride


@dataclass
class PriorDepth:
    frame_index: int
    depth: np.ndarray  # (H, W), scale-ambiguous units
    valid: np.ndarray  # (H, W) bool


@dataclass
class AffineAlignment:
    lam: float  # scale
    tau: float  # shift (metric units)
    degenerate: bool = False

    def apply(self, prior: PriorDepth) -> np.ndarray:
        return np.where(prior.valid, self.lam * prior.depth + self.tau, 0.0)


def align_depth(
    prior: PriorDepth,
    rendered_depth: np.ndarray,
    silhouette: np.ndarray,
    threshold: float = 0.99,
) -> AffineAlignment:
    """Closed-form least squares for scale/shift over the visible region.

    Solves min over (lam, tau) of sum_M (lam * prior + tau - depth)^2. A
    constant prior leaves the scale unobservable; that case returns
    lam=1 with tau matching the mean difference, flagged degenerate.
    """
    mask = (silhouette > threshold) & prior.valid
    if not mask.any():
        raise EmptyMask("no visible pixel with a valid prior")
    p = prior.depth[mask]
    d = rendered_depth[mask]
    n = p.size
    sp, sd = p.sum(), d.sum()
    var = (p * p).sum() - sp * sp / n
    if var < 1e-12 * max(n, 1):
        return AffineAlignment(1.0, float((d - p).mean()), degenerate=True)
    cov = (p * d).sum() - sp * sd / n
    lam = cov / var
    tau = (sd - lam * sp) / n
    return AffineAlignment(float(lam), float(tau))


def refinement_grads(
    grad_depth_target: np.ndarray,
    prior: PriorDepth,
    alignment: AffineAlignment,
    init: AffineAlignment,
    reg_weight: float,
) -> tuple[float, float]:
    """Gradients of the mapping depth term + regularizer wrt (lam, tau).

    `grad_depth_target` is the loss gradient wrt the aligned depth map (as
    produced by mapping_loss); the regularizer is the absolute deviation
    from the initial closed-form estimate.
    """
    g_lam = float((grad_depth_target * np.where(prior.valid, prior.depth, 0.0)).sum())
    g_tau = float(grad_depth_target[prior.valid].sum())
    g_lam += reg_weight * float(np.sign(alignment.lam - init.lam))
    g_tau += reg_weight * float(np.sign(alignment.tau - init.tau))
    return g_lam, g_tau


# -- providers -------------------------------------------------------------------


class DirectoryPriorProvider:
    """Loads `prior/NNNNNN.png` 16-bit maps with `{scale_to_units, valid_min}`
    sidecar JSON files, as exported offline from a reconstruction model."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MissingFile(f"no prior directory {directory}")

    def get(self, frame_index: int) -> PriorDepth:
        png = self.directory / f"{frame_index:06d}.png"
        sidecar = self.directory / f"{frame_index:06d}.json"
        if not png.exists() or not sidecar.exists():
            raise MissingFile(f"prior files for frame {frame_index} missing")
        meta = json.loads(sidecar.read_text("utf-8"))
        raw = np.asarray(Image.open(png)).astype(np.float64)
        depth = raw * float(meta["scale_to_units"])
        valid = (raw >= float(meta["valid_min"])) & (depth > 0)
        return PriorDepth(frame_index, depth, valid)


class SyntheticPriorProvider:
    """Affine-distorted oracle depth standing in for a learned prior.

    Each image set gets its own seeded (lam, tau) drawn from the given
    ranges; the stored prior is (depth - tau) / lam so aligning it back to
    metric depth should recover exactly those parameters. Set 0 defaults to
    the identity so the map bootstrap fixes the metric gauge.
    """

    def __init__(
        self,
        depth_source,  # callable frame_index -> (H, W) metric depth
        spec: ImageSetSpec = ImageSetSpec(),
        seed: int = 0,
        lam_range: tuple[float, float] = (0.3, 3.0),
        tau_range: tuple[float, float] = (-0.5, 0.5),
        noise_sigma: float = 0.0,  # relative Gaussian noise on the prior
        identity_first_set: bool = True,
    ):
        self.depth_source = depth_source
        self.spec = spec
        self.seed = seed
        self.lam_range = lam_range
        self.tau_range = tau_range
        self.noise_sigma = noise_sigma
        self.identity_first_set = identity_first_set

    def injected_params(self, set_index: int) -> tuple[float, float]:
        if set_index == 0 and self.identity_first_set:
            return 1.0, 0.0
        rng = np.random.default_rng((self.seed, set_index))
        lam = rng.uniform(*self.lam_range)
        tau = rng.uniform(*self.tau_range)
        return float(lam), float(tau)

    def get(self, frame_index: int) -> PriorDepth:
        depth = np.asarray(self.depth_source(frame_index), dtype=np.float64)
        lam, tau = self.injected_params(set_index_of(frame_index, self.spec))
        prior = (depth - tau) / lam
        if self.noise_sigma > 0.0:
            rng = np.random.default_rng((self.seed, 7919, frame_index))
            prior = prior * (1.0 + self.noise_sigma * rng.standard_normal(prior.shape))
        valid = (depth > 0) & (prior > 0)
        prior = np.where(valid, prior, 0.0)
        return PriorDepth(frame_index, prior, valid)


def write_prior_directory(
    directory: str | Path,
    provider,
    frame_count: int,
    scale_to_units: float = 0.0005,
):
    """Export a provider's priors to the on-disk prior format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(frame_count):
        prior = provider.get(i)
        raw = np.clip(np.round(prior.depth / scale_to_units), 0, 65535).astype(np.uint16)
        raw[~prior.valid] = 0
        Image.fromarray(raw).save(directory / f"{i:06d}.png")
        (directory / f"{i:06d}.json").write_text(
            json.dumps({"scale_to_units": scale_to_units, "valid_min": 1}) + "\n", "utf-8"
        )
