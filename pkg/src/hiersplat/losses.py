"""Optimization objectives and their analytic input gradients.

Every loss returns its scalar value together with gradients with respect
to the rendered maps it consumes (and decoder weights where relevant), so
the rasterizer backward pass can chain them to primitive and pose
parameters. All gradients are finite-difference checked in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import EmptyMask, LayoutMismatch, ShapeMismatch
from .semantic_tree import BinaryLayout, OneHotLayout, SemanticTree, path_of

# -- weights and schedules ------------------------------------------------------


@dataclass(frozen=True)
class SemanticLossWeights:
    """Schedule: (omega1, 0) before iteration eta, (omega1, omega2) after."""

    omega1: float = 1.0
    omega2: float = 5.0
    eta: int = 15

    def at(self, iteration: int) -> tuple[float, float]:
        if iteration < self.eta:
            return (self.omega1, 0.0)
        return (self.omega1, self.omega2)


@dataclass(frozen=True)
class TrackMapWeights:
    w1: float = 1.0  # tracking depth
    w2: float = 0.5  # tracking color
    w3: float = 1.0  # mapping depth
    w4: float = 0.5  # mapping color
    w5: float = 0.2  # mapping semantic
    delta: float = 0.99  # silhouette visibility threshold
    lambda_ssim: float = 0.2
    # compare depth as D/S instead of the raw alpha-weighted sum; the raw sum
    # under-reports depth by (1-S)*z and skews toward nearer splats on
    # slanted surfaces, which biases pose estimation
    normalize_depth: bool = True


# -- SSIM -----------------------------------------------------------------------

_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _gauss_taps() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    x = np.arange(_WINDOW) - half
    g = np.exp(-(x**2) / (2 * _SIGMA**2))
    return g / g.sum()


_TAPS = _gauss_taps()


def _gfilter(img: np.ndarray) -> np.ndarray:
    out = convolve1d(img, _TAPS, axis=0, mode="constant")
    return convolve1d(out, _TAPS, axis=1, mode="constant")


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = _gfilter(x), _gfilter(y)
    sxx, syy, sxy = _gfilter(x * x), _gfilter(y * y), _gfilter(x * y)
    a1 = 2 * mx * my + _C1
    a2 = 2 * (sxy - mx * my) + _C2
    b1 = mx * mx + my * my + _C1
    b2 = sxx - mx * mx + syy - my * my + _C2
    return mx, my, a1, a2, b1, b2


def ssim_index(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over pixels (and channels), 11x11 Gaussian window."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    total = 0.0
    for c in range(x.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_terms(x[..., c], y[..., c])
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return total / x.shape[2]


def ssim_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """(mean SSIM, d meanSSIM / dx). y is treated as constant."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x, y = x[..., None], y[..., None]
    n = x.size
    grad = np.zeros_like(x)
    total = 0.0
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mx, my, a1, a2, b1, b2 = _ssim_terms(xc, yc)
        s = a1 * a2 / (b1 * b2)
        total += float(s.sum())
        # pointwise partials of S wrt the filtered statistics, then one more
        # pass of the (symmetric) window carries them back to pixels
        d_mx = 2 * (my * (a2 - a1) / (b1 * b2) - mx * s * (1 / b1 - 1 / b2))
        d_sxx = -s / b2
        d_sxy = 2 * a1 / (b1 * b2)
        grad[..., c] = (
            _gfilter(d_mx) + 2 * xc * _gfilter(d_sxx) + yc * _gfilter(d_sxy)
        ) / n
    mean = total / n
    if squeeze:
        grad = grad[..., 0]
    return mean, grad


# -- photometric / depth --------------------------------------------------------


def l1_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """(mean |a-b| over mask, gradient wrt a). Channels average in."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    m = mask if a.ndim == mask.ndim else mask[..., None] & np.ones(a.shape, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise EmptyMask("no pixels pass the mask")
    diff = np.where(m, a - b, 0.0)
    grad = np.sign(diff) / n
    return float(np.abs(diff).sum() / n), grad


def color_loss_prime(
    c_rendered: np.ndarray, c_gt: np.ndarray, lambda_ssim: float = 0.2
) -> tuple[float, np.ndarray]:
    """Weighted SSIM + L1 color objective over the full image."""
    if c_rendered.shape != c_gt.shape:
        raise ShapeMismatch(f"{c_rendered.shape} vs {c_gt.shape}")
    n = c_rendered.size
    diff = c_rendered - c_gt
    l1 = float(np.abs(diff).mean())
    g = (1.0 - lambda_ssim) * np.sign(diff) / n
    if lambda_ssim > 0.0:
        mssim, gs = ssim_with_grad(c_rendered, c_gt)
        return lambda_ssim * (1.0 - mssim) + (1.0 - lambda_ssim) * l1, g - lambda_ssim * gs
    return l1, g


def depth_l1_term(
    rendered, depth_gt: np.ndarray, mask: np.ndarray, normalize: bool
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Masked L1 depth with gradients to the depth and silhouette channels.

    Also returns the gradient wrt the ground-truth depth array (used by the
    monocular scale/shift refinement, where the target itself is learned).
    """
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("no pixels pass the mask")
    g_depth = np.zeros_like(rendered.depth)
    g_sil = np.zeros_like(rendered.silhouette)
    g_target = np.zeros_like(rendered.depth)
    if normalize:
        s = np.maximum(rendered.silhouette[mask], 1e-6)
        dn = rendered.depth[mask] / s
        sign = np.sign(dn - depth_gt[mask])
        value = float(np.abs(dn - depth_gt[mask]).sum() / n)
        g_depth[mask] = sign / (s * n)
        g_sil[mask] = -sign * rendered.depth[mask] / (s * s * n)
        g_target[mask] = -sign / n
    else:
        diff = rendered.depth[mask] - depth_gt[mask]
        value = float(np.abs(diff).sum() / n)
        g_depth[mask] = np.sign(diff) / n
        g_target[mask] = -np.sign(diff) / n
    return value, g_depth, g_sil, g_target


def tracking_loss(rendered, frame, weights: TrackMapWeights):
    """Masked L1 depth + color inside silhouette-visible, valid-depth pixels.

    Returns (value, grad_color, grad_depth, grad_silhouette). Raises
    EmptyMask when nothing is both visible and valid, which the tracker
    treats as divergence.
    """
    mask = (rendered.silhouette > weights.delta) & frame.valid_depth
    if not mask.any():
        raise EmptyMask("no silhouette-visible pixel with valid depth")
    ld, gd, gs, _ = depth_l1_term(rendered, frame.depth, mask, weights.normalize_depth)
    lc, gc = l1_masked(rendered.color, frame.color, mask)
    return (
        weights.w1 * ld + weights.w2 * lc,
        weights.w2 * gc,
        weights.w1 * gd,
        weights.w1 * gs,
    )


# -- semantic ground truth ------------------------------------------------------


@dataclass
class SemanticTargets:
    """Per-pixel hierarchical targets resolved from a label image."""

    labeled: np.ndarray  # (H, W) bool
    level_sibling: np.ndarray  # (L+1, H, W) int32, valid where labeled
    flat_index: np.ndarray  # (H, W) int32 index into tree.class_ids

    @property
    def count(self) -> int:
        return int(self.labeled.sum())


def semantic_targets(labels: np.ndarray, tree: SemanticTree) -> SemanticTargets:
    max_id = max(tree.class_ids) if tree.class_ids else 0
    max_id = max(max_id, int(labels.max()) if labels.size else 0)
    lut_sib = np.full((tree.num_levels, max_id + 1), -1, dtype=np.int32)
    lut_flat = np.full(max_id + 1, -1, dtype=np.int32)
    for cid in tree.class_ids:
        sib = path_of(tree, cid).node_index_per_level
        lut_sib[:, cid] = sib
        lut_flat[cid] = tree.flat_index[cid]
    safe = np.clip(labels, 0, max_id)
    flat = lut_flat[safe]
    labeled = flat >= 0
    return SemanticTargets(labeled, lut_sib[:, safe], flat)


# -- hierarchical losses ---------------------------------------------------------


def _log_softmax(logits: np.ndarray):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def intra_level_loss(
    h_map: np.ndarray,
    targets: SemanticTargets,
    layout: OneHotLayout | BinaryLayout,
    mode: str,
) -> tuple[float, np.ndarray]:
    """Per-level classification loss summed over levels.

    One-hot mode: softmax cross-entropy over each level slice. Binary mode:
    per-bit logistic cross-entropy against the index bit pattern. Pixel
    means include labeled pixels only.
    """
    if h_map.shape[-1] != layout.total_width:
        raise LayoutMismatch(f"map width {h_map.shape[-1]} != layout {layout.total_width}")
    grad = np.zeros_like(h_map)
    lab = targets.labeled
    n = int(lab.sum())
    if n == 0:
        return 0.0, grad
    total = 0.0
    levels = len(layout.offsets)
    for l in range(levels):
        off = layout.offsets[l]
        tgt = targets.level_sibling[l][lab]
        if mode == "binary":
            k = layout.per_level_bits[l]
            if k == 0:
                continue
            x = h_map[lab, off : off + k]
            bits = ((tgt[:, None] >> np.arange(k)[None, :]) & 1).astype(np.float64)
            # bce via softplus keeps large logits finite
            total += float((np.logaddexp(0.0, x) - bits * x).sum()) / n
            sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
            grad[lab, off : off + k] += (sig - bits) / n
        elif mode in ("onehot", "flat"):
            w = layout.per_level_width[l]
            x = h_map[lab, off : off + w]
            logp = _log_softmax(x)
            total += float(-logp[np.arange(x.shape[0]), tgt].sum()) / n
            p = np.exp(logp)
            p[np.arange(x.shape[0]), tgt] -= 1.0
            grad[lab, off : off + w] += p / n
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return total, grad


@dataclass
class InterLevelDecoder:
    """Two stacked per-pixel linear stages with a rectifier between them."""

    w1: np.ndarray  # (n_mid, n_in)
    b1: np.ndarray
    w2: np.ndarray  # (n_classes, n_mid)
    b2: np.ndarray

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def logits(self, h: np.ndarray) -> np.ndarray:
        z1 = np.maximum(h @ self.w1.T + self.b1, 0.0)
        return z1 @ self.w2.T + self.b2

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_decoder(n_in: int, n_classes: int, seed: int = 0, n_mid: int | None = None) -> InterLevelDecoder:
    if n_mid is None:
        n_mid = max(n_in, 64)
    rng = np.random.default_rng(seed)
    return InterLevelDecoder(
        w1=rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_mid, n_in)),
        b1=np.zeros(n_mid),
        w2=rng.normal(0.0, np.sqrt(2.0 / n_mid), size=(n_classes, n_mid)),
        b2=np.zeros(n_classes),
    )


@dataclass
class DecoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros(dec: InterLevelDecoder) -> "DecoderGrads":
        return DecoderGrads(*(np.zeros_like(p) for p in dec.parameters()))

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def inter_level_loss(
    h_map: np.ndarray, decoder: InterLevelDecoder, targets: SemanticTargets
) -> tuple[float, np.ndarray, DecoderGrads]:
    """Cross-entropy of decoded flat class probabilities at labeled pixels."""
    if h_map.shape[-1] != decoder.n_in:
        raise LayoutMismatch(f"map width {h_map.shape[-1]} != decoder {decoder.n_in}")
    grad = np.zeros_like(h_map)
    dgrads = DecoderGrads.zeros(decoder)
    lab = targets.labeled
    n = int(lab.sum())
    if n == 0:
        return 0.0, grad, dgrads
    h = h_map[lab]
    tgt = targets.flat_index[lab]
    a1 = h @ decoder.w1.T + decoder.b1
    z1 = np.maximum(a1, 0.0)
    logits = z1 @ decoder.w2.T + decoder.b2
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), tgt].sum()) / n
    dlogits = np.exp(logp)
    dlogits[np.arange(n), tgt] -= 1.0
    dlogits /= n
    dgrads.w2[:] = dlogits.T @ z1
    dgrads.b2[:] = dlogits.sum(axis=0)
    dz1 = dlogits @ decoder.w2
    da1 = dz1 * (a1 > 0)
    dgrads.w1[:] = da1.T @ h
    dgrads.b1[:] = da1.sum(axis=0)
    grad[lab] = da1 @ decoder.w1
    return value, grad, dgrads


def semantic_loss(
    h_map: np.ndarray,
    decoder: InterLevelDecoder,
    targets: SemanticTargets,
    layout: OneHotLayout | BinaryLayout,
    mode: str,
    weights: SemanticLossWeights,
    iteration: int,
) -> tuple[float, np.ndarray, DecoderGrads]:
    """Scheduled intra + inter combination."""
    om1, om2 = weights.at(iteration)
    value = 0.0
    grad = np.zeros_like(h_map)
    dgrads = DecoderGrads.zeros(decoder)
    if om1 > 0.0:
        v, g = intra_level_loss(h_map, targets, layout, mode)
        value += om1 * v
        grad += om1 * g
    if om2 > 0.0:
        v, g, dg = inter_level_loss(h_map, decoder, targets)
        value += om2 * v
        grad += om2 * g
        for acc, part in zip(dgrads.parameters(), dg.parameters()):
            acc += om2 * part
    return value, grad, dgrads


# -- combined mapping objective ---------------------------------------------------


@dataclass
class MappingLossResult:
    value: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    grad_silhouette: np.ndarray
    grad_sem: np.ndarray | None
    decoder_grads: DecoderGrads | None
    grad_depth_target: np.ndarray  # for affine depth-prior refinement
    depth_mask: np.ndarray


def mapping_loss(
    rendered,
    frame,
    weights: TrackMapWeights,
    depth_target: np.ndarray | None = None,
    decoder: InterLevelDecoder | None = None,
    targets: SemanticTargets | None = None,
    layout=None,
    mode: str = "flat",
    sem_weights: SemanticLossWeights = SemanticLossWeights(),
    iteration: int = 0,
) -> MappingLossResult:
    """Masked depth + (SSIM+L1) color + scheduled semantic objective.

    `depth_target` overrides the frame depth (monocular: the affine-aligned
    prior); its gradient is returned for joint scale/shift refinement.
    """
    depth_gt = frame.depth if depth_target is None else depth_target
    mask = (rendered.silhouette > weights.delta) & (depth_gt > 0)
    grad_depth = np.zeros_like(rendered.depth)
    grad_sil = np.zeros_like(rendered.silhouette)
    grad_dt = np.zeros_like(rendered.depth)
    value = 0.0
    if mask.any():
        ld, gd, gs, gt = depth_l1_term(rendered, depth_gt, mask, weights.normalize_depth)
        value += weights.w3 * ld
        grad_depth = weights.w3 * gd
        grad_sil = weights.w3 * gs
        grad_dt = weights.w3 * gt
    lc, gc = color_loss_prime(rendered.color, frame.color, weights.lambda_ssim)
    value += weights.w4 * lc
    grad_color = weights.w4 * gc
    grad_sem = None
    dgrads = None
    if weights.w5 > 0.0 and decoder is not None and targets is not None and targets.count:
        vs, gsm, dgrads = semantic_loss(
            rendered.sem, decoder, targets, layout, mode, sem_weights, iteration
        )
        value += weights.w5 * vs
        grad_sem = weights.w5 * gsm
        for p in dgrads.parameters():
            p *= weights.w5
    return MappingLossResult(
        value, grad_color, grad_depth, grad_sil, grad_sem, dgrads, grad_dt, mask
    )
